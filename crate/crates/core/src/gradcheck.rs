//! Finite-difference verification of every differentiable component.
//!
//! Each driver builds a small seeded instance of one component, runs one
//! backward sweep, and compares the analytic gradients against central
//! differences. The report lists the worst relative error per component so
//! a regression in any backward rule is attributable at a glance.

use crate::afrp::{afrp_forward, AfrpParams};
use crate::dpnet::{BackboneConfig, DpnetModel};
use crate::fpm::{fpf_forward, FpfBlock};
use crate::losses::{bce, fc_loss, icc_loss, real_center, train_loss, LossWeights};
use crate::rng::Rng;
use crate::tensor::{finite_diff_grad, Tape};
use crate::{Error, Result};
use serde::Serialize;

/// Relative-error ceiling for a component to count as correct.
pub const TOLERANCE: f64 = 1e-4;

/// Gradient magnitude below which coordinates are compared on an absolute
/// scale: central differences bottom out around 1e-11 here, so a true
/// relative comparison of ~1e-9 gradients (saturated routing heads) would
/// report pure noise.
const REL_FLOOR: f64 = 1e-3;

/// Worst error over a gradient pair, relative for coordinates of
/// meaningful magnitude and floored below [`REL_FLOOR`].
fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR))
        .fold(0.0, f64::max)
}

/// One analytic/numeric gradient pair produced by a driver.
type GradPair = (Vec<f64>, Vec<f64>);

#[derive(Debug, Clone, Serialize)]
pub struct ComponentCheck {
    pub component: String,
    pub worst_rel_err: f64,
    /// Number of coordinates compared against central differences.
    pub coords: usize,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub components: Vec<ComponentCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.components.iter().all(|c| c.pass)
    }

    /// One line per component, fit for terminal output.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.components {
            out.push_str(&format!(
                "{:<10} worst rel err {:>10.3e} over {:>4} coords  {}\n",
                c.component,
                c.worst_rel_err,
                c.coords,
                if c.pass { "PASS" } else { "FAIL" }
            ));
        }
        out
    }
}

/// Runs every component check with gradients taken as computed.
pub fn run(seed: u64) -> Result<GradCheckReport> {
    run_with_fault(seed, None)
}

/// Self-test hook: flips the sign of the named component's analytic
/// gradients before comparison, emulating a sign error in a backward rule.
/// The checker must flag exactly that component.
pub fn run_with_fault(seed: u64, fault: Option<&str>) -> Result<GradCheckReport> {
    let drivers: [(&str, fn(&mut Rng) -> Result<Vec<GradPair>>); 6] = [
        ("fpf", fpf_pairs),
        ("afrp", afrp_pairs),
        ("bce", bce_pairs),
        ("icc", icc_pairs),
        ("fc", fc_pairs),
        ("dpnet", dpnet_pairs),
    ];
    if let Some(f) = fault {
        if !drivers.iter().any(|(n, _)| *n == f) {
            return Err(Error::Config(format!("unknown component '{f}'")));
        }
    }
    let master = Rng::new(seed);
    let mut components = Vec::new();
    for (name, driver) in drivers {
        // Tiny seeded instances can draw a dead configuration (a ReLU
        // bottleneck with every pre-activation negative), where all
        // gradients vanish and the comparison would pass vacuously.
        // Redraw until every parameter group reports a live gradient.
        let mut pairs = None;
        for attempt in 0..8 {
            let mut rng = master.derive(&format!("{name}/{attempt}"));
            let candidate = driver(&mut rng)?;
            if candidate.iter().all(|(a, _)| a.iter().any(|&g| g != 0.0)) {
                pairs = Some(candidate);
                break;
            }
        }
        let mut pairs = pairs.ok_or_else(|| {
            Error::CheckFailed(format!("{name}: no live gradients in any redraw"))
        })?;
        if fault == Some(name) {
            for (analytic, _) in &mut pairs {
                for g in analytic {
                    *g = -*g;
                }
            }
        }
        let coords = pairs.iter().map(|(_, n)| n.len()).sum();
        let worst = pairs
            .iter()
            .map(|(a, n)| rel_err(a, n))
            .fold(0.0, f64::max);
        components.push(ComponentCheck {
            component: name.to_string(),
            worst_rel_err: worst,
            coords,
            pass: worst <= TOLERANCE,
        });
    }
    Ok(GradCheckReport { tolerance: TOLERANCE, components })
}

/// Frequency filter block: loss = sum(fpf(x)^2), gradients of every
/// parameter group swept coordinate by coordinate.
fn fpf_pairs(rng: &mut Rng) -> Result<Vec<GradPair>> {
    let (c, h, w, k) = (2, 4, 4, 2);
    let mut block = FpfBlock::init(c, h, w, k, rng)?;
    // The symmetric all-ones mask init makes the output invariant to the
    // routing weights (a mixture of identical masks); perturb the masks so
    // the head's gradients exist at the probed point.
    for m in block.bank.masks.iter_mut() {
        for v in m.data.iter_mut() {
            *v += rng.range(-0.3, 0.3);
        }
    }
    let x0: Vec<f64> = (0..c * h * w).map(|_| rng.range(-1.0, 1.0)).collect();

    let eval = |blk: &FpfBlock, xs: &[f64]| -> f64 {
        let mut tape = Tape::new();
        let ids = blk.bind(&mut tape).expect("bind");
        let x = tape.leaf(xs.to_vec(), vec![1, c, h, w], false).expect("leaf");
        let out = fpf_forward(&mut tape, x, &ids).expect("forward");
        let sq = tape.mul(out, out).expect("mul");
        let l = tape.sum_all(sq).expect("sum");
        tape.data(l)[0]
    };

    let mut tape = Tape::new();
    let ids = block.bind(&mut tape)?;
    let x = tape.leaf(x0.clone(), vec![1, c, h, w], false)?;
    let out = fpf_forward(&mut tape, x, &ids)?;
    let sq = tape.mul(out, out)?;
    let l = tape.sum_all(sq)?;
    tape.backward(l)?;

    let groups = [
        "scale", "bias", "mask0", "mask1", "w1", "b1", "w2", "b2", "phi",
    ];
    let mut pairs = Vec::new();
    for name in groups {
        let (id, data) = match name {
            "scale" => (ids.star.scale, &block.star.scale.data),
            "bias" => (ids.star.bias, &block.star.bias.data),
            "mask0" => (ids.bank.masks[0], &block.bank.masks[0].data),
            "mask1" => (ids.bank.masks[1], &block.bank.masks[1].data),
            "w1" => (ids.head.w1, &block.head.w1.data),
            "b1" => (ids.head.b1, &block.head.b1.data),
            "w2" => (ids.head.w2, &block.head.w2.data),
            "b2" => (ids.head.b2, &block.head.b2.data),
            _ => (ids.head.phi, &block.head.phi.data),
        };
        let analytic = tape
            .grad(id)
            .ok_or_else(|| Error::CheckFailed(format!("fpf {name}: no gradient")))?
            .to_vec();
        let numeric = finite_diff_grad(
            |p| {
                let mut blk = block.clone();
                let target = match name {
                    "scale" => &mut blk.star.scale,
                    "bias" => &mut blk.star.bias,
                    "mask0" => &mut blk.bank.masks[0],
                    "mask1" => &mut blk.bank.masks[1],
                    "w1" => &mut blk.head.w1,
                    "b1" => &mut blk.head.b1,
                    "w2" => &mut blk.head.w2,
                    "b2" => &mut blk.head.b2,
                    _ => &mut blk.head.phi,
                };
                target.data = p.to_vec();
                eval(&blk, &x0)
            },
            data,
            1e-5,
        );
        pairs.push((analytic, numeric));
    }
    Ok(pairs)
}

/// Channel-gating block: loss = sum(afrp(x)^2) over all four parameter
/// tensors.
fn afrp_pairs(rng: &mut Rng) -> Result<Vec<GradPair>> {
    let (c, r) = (4, 2);
    let p = AfrpParams::init(c, r, rng)?;
    let x0: Vec<f64> = (0..2 * c * 4).map(|_| rng.range(-1.0, 1.0)).collect();

    let eval = |params: &AfrpParams, xs: &[f64]| -> f64 {
        let mut tape = Tape::new();
        let ids = params.bind(&mut tape).expect("bind");
        let x = tape.leaf(xs.to_vec(), vec![2, c, 2, 2], false).expect("leaf");
        let y = afrp_forward(&mut tape, x, &ids).expect("forward");
        let sq = tape.mul(y, y).expect("mul");
        let l = tape.sum_all(sq).expect("sum");
        tape.data(l)[0]
    };

    let mut tape = Tape::new();
    let ids = p.bind(&mut tape)?;
    let x = tape.leaf(x0.clone(), vec![2, c, 2, 2], false)?;
    let y = afrp_forward(&mut tape, x, &ids)?;
    let sq = tape.mul(y, y)?;
    let l = tape.sum_all(sq)?;
    tape.backward(l)?;

    let mut pairs = Vec::new();
    for field in ["reduce", "vertex", "m_l", "restore"] {
        let (id, data) = match field {
            "reduce" => (ids.reduce, &p.reduce.data),
            "vertex" => (ids.vertex, &p.vertex.data),
            "m_l" => (ids.m_l, &p.m_l.data),
            _ => (ids.restore, &p.restore.data),
        };
        let analytic = tape
            .grad(id)
            .ok_or_else(|| Error::CheckFailed(format!("afrp {field}: no gradient")))?
            .to_vec();
        let numeric = finite_diff_grad(
            |probe| {
                let mut q = p.clone();
                match field {
                    "reduce" => q.reduce.data = probe.to_vec(),
                    "vertex" => q.vertex.data = probe.to_vec(),
                    "m_l" => q.m_l.data = probe.to_vec(),
                    _ => q.restore.data = probe.to_vec(),
                }
                eval(&q, &x0)
            },
            data,
            1e-5,
        );
        pairs.push((analytic, numeric));
    }
    Ok(pairs)
}

const LOSS_LABELS: [f64; 6] = [0.0, 1.0, 0.0, 1.0, 1.0, 0.0];

/// Binary cross-entropy: gradient with respect to the logits.
fn bce_pairs(rng: &mut Rng) -> Result<Vec<GradPair>> {
    let z0: Vec<f64> = (0..LOSS_LABELS.len()).map(|_| rng.range(-3.0, 3.0)).collect();
    let mut tape = Tape::new();
    let z = tape.leaf(z0.clone(), vec![z0.len()], true)?;
    let l = bce(&mut tape, z, &LOSS_LABELS)?;
    tape.backward(l)?;
    let analytic = tape
        .grad(z)
        .ok_or_else(|| Error::CheckFailed("bce: no gradient".into()))?
        .to_vec();
    let numeric = finite_diff_grad(
        |p| {
            let mut t = Tape::new();
            let z = t.leaf(p.to_vec(), vec![p.len()], false).expect("leaf");
            let l = bce(&mut t, z, &LOSS_LABELS).expect("loss");
            t.data(l)[0]
        },
        &z0,
        1e-5,
    );
    Ok(vec![(analytic, numeric)])
}

/// Intra-class compactness: gradient with respect to the embeddings,
/// including the path through the real-center mean.
fn icc_pairs(rng: &mut Rng) -> Result<Vec<GradPair>> {
    let d = 5;
    let e0: Vec<f64> = (0..LOSS_LABELS.len() * d).map(|_| rng.range(-1.0, 1.0)).collect();
    let mut tape = Tape::new();
    let e = tape.leaf(e0.clone(), vec![LOSS_LABELS.len(), d], true)?;
    let center = real_center(&mut tape, e, &LOSS_LABELS)?
        .ok_or_else(|| Error::CheckFailed("icc: batch has no reals".into()))?;
    let l = icc_loss(&mut tape, e, &LOSS_LABELS, center)?;
    tape.backward(l)?;
    let analytic = tape
        .grad(e)
        .ok_or_else(|| Error::CheckFailed("icc: no gradient".into()))?
        .to_vec();
    let numeric = finite_diff_grad(
        |p| {
            let mut t = Tape::new();
            let e = t.leaf(p.to_vec(), vec![LOSS_LABELS.len(), d], false).expect("leaf");
            let center = real_center(&mut t, e, &LOSS_LABELS).expect("center").expect("reals");
            let l = icc_loss(&mut t, e, &LOSS_LABELS, center).expect("loss");
            t.data(l)[0]
        },
        &e0,
        1e-5,
    );
    Ok(vec![(analytic, numeric)])
}

/// Feature-consistency InfoNCE: gradient with respect to the feature rows,
/// through row normalization and the similarity matrix.
fn fc_pairs(rng: &mut Rng) -> Result<Vec<GradPair>> {
    let d = 5;
    let tau = 0.1;
    let f0: Vec<f64> = (0..LOSS_LABELS.len() * d).map(|_| rng.range(-1.0, 1.0)).collect();
    let mut tape = Tape::new();
    let f = tape.leaf(f0.clone(), vec![LOSS_LABELS.len(), d], true)?;
    let (l, _) = fc_loss(&mut tape, f, &LOSS_LABELS, tau)?;
    tape.backward(l)?;
    let analytic = tape
        .grad(f)
        .ok_or_else(|| Error::CheckFailed("fc: no gradient".into()))?
        .to_vec();
    let numeric = finite_diff_grad(
        |p| {
            let mut t = Tape::new();
            let f = t.leaf(p.to_vec(), vec![p.len() / d, d], false).expect("leaf");
            let (l, _) = fc_loss(&mut t, f, &LOSS_LABELS, tau).expect("loss");
            t.data(l)[0]
        },
        &f0,
        1e-5,
    );
    Ok(vec![(analytic, numeric)])
}

/// Assembled network under the composite training loss. Sweeping every
/// coordinate of every tensor is too slow, so each parameter tensor is
/// probed at its largest-gradient coordinate, where the relative
/// comparison is best conditioned.
fn dpnet_pairs(rng: &mut Rng) -> Result<Vec<GradPair>> {
    let cfg = BackboneConfig {
        in_channels: 1,
        image_size: 8,
        widths: [4, 4, 4],
        bank_size: 2,
        reduction: 2,
    };
    let mut model = DpnetModel::init(cfg, rng)?;
    // Break the symmetric initializations (all-ones masks, zero biases) so
    // no gradient vanishes by coincidence of the starting point.
    for (_, params) in model.enumerate_layers_mut() {
        for p in params {
            for v in &mut p.data {
                *v += rng.range(-0.05, 0.05);
            }
        }
    }
    let b = 4;
    let labels = [1.0, 0.0, 0.0, 1.0];
    let x0: Vec<f64> = (0..b * 64).map(|_| rng.range(-1.0, 1.0)).collect();
    let weights = LossWeights::default();

    let mut tape = Tape::new();
    let x = tape.leaf(x0.clone(), vec![b, 1, 8, 8], false)?;
    let (logits, emb, bound) = model.forward(&mut tape, x)?;
    let (loss, _) = train_loss(&mut tape, logits, emb, &labels, &weights)?;
    tape.backward(loss)?;

    let ids = bound.layer_ids();
    let mut pairs = Vec::new();
    for (li, (name, pids)) in ids.iter().enumerate() {
        for (pi, &pid) in pids.iter().enumerate() {
            let analytic = tape
                .grad(pid)
                .ok_or_else(|| Error::CheckFailed(format!("dpnet {name}[{pi}]: no gradient")))?;
            let probe = analytic
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                .map(|(i, _)| i)
                .ok_or_else(|| Error::CheckFailed(format!("dpnet {name}[{pi}]: empty tensor")))?;
            let center = model.enumerate_layers()[li].1[pi].data[probe];
            let eval = |v: f64| {
                let mut m = model.clone();
                m.enumerate_layers_mut()[li].1[pi].data[probe] = v;
                let mut t = Tape::new();
                let x = t.leaf(x0.clone(), vec![b, 1, 8, 8], false).expect("leaf");
                let (lg, em, _) = m.forward(&mut t, x).expect("forward");
                let (l, _) = train_loss(&mut t, lg, em, &labels, &weights).expect("loss");
                t.data(l)[0]
            };
            // Deep routing-head gradients can be tiny; a wider step keeps
            // the central difference above the f64 noise floor.
            let h = 1e-3;
            let numeric = (eval(center + h) - eval(center - h)) / (2.0 * h);
            pairs.push((vec![analytic[probe]], vec![numeric]));
        }
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_model_passes_at_tolerance() {
        let report = run(3).unwrap();
        assert!(report.passed(), "{}", report.render());
        assert_eq!(report.components.len(), 6);
    }

    #[test]
    fn passes_across_arbitrary_seeds() {
        // Seed 7 once drew a dead channel-gate bottleneck (vacuous pass)
        // and a saturated routing head (noise-dominated comparison); the
        // redraw loop and floored metric must absorb both.
        for seed in [7, 8, 9, 10] {
            let report = run(seed).unwrap();
            assert!(report.passed(), "seed {seed}:\n{}", report.render());
        }
    }

    #[test]
    fn report_lists_every_component() {
        let report = run(4).unwrap();
        let names: Vec<&str> = report.components.iter().map(|c| c.component.as_str()).collect();
        assert_eq!(names, ["fpf", "afrp", "bce", "icc", "fc", "dpnet"]);
        let rendered = report.render();
        for n in names {
            assert!(rendered.contains(n), "render missing {n}");
        }
    }

    #[test]
    fn sign_fault_in_any_component_is_caught() {
        for victim in ["fpf", "afrp", "bce", "icc", "fc", "dpnet"] {
            let report = run_with_fault(5, Some(victim)).unwrap();
            assert!(!report.passed(), "{victim}: fault not caught");
            for c in &report.components {
                assert_eq!(
                    c.pass,
                    c.component != victim,
                    "{victim}: wrong component flagged ({})",
                    c.component
                );
            }
        }
    }

    #[test]
    fn unknown_fault_component_is_rejected() {
        assert!(run_with_fault(1, Some("nonsense")).is_err());
    }

    #[test]
    fn reports_serialize_to_json() {
        let report = run(6).unwrap();
        let text = serde_json::to_string(&report).unwrap();
        assert!(text.contains("\"component\":\"fpf\""));
        assert!(text.contains("\"tolerance\":0.0001"));
    }
}
