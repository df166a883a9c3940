//! Detector assembly: a small three-stage convolutional backbone whose
//! spatial stream is fused additively with the frequency-filtering blocks
//! and gated by the relation-perception blocks, ending in a global average
//! pool, a 64-d embedding, and a single real/fake logit.

use crate::afrp::{afrp_forward, AfrpIds, AfrpParams};
use crate::error::{Error, Result};
use crate::fpm::{fpf_forward, FpfBlock, FpfIds};
use crate::param::Param;
use crate::rng::Rng;
use crate::tensor::{Tape, TensorId};

/// Geometry of the toy backbone. Stage convolutions are 3x3, stride 2,
/// padding 1, bias-free, so each stage halves the spatial size.
#[derive(Debug, Clone, Copy)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub image_size: usize,
    pub widths: [usize; 3],
    /// Number of masks per frequency filter bank.
    pub bank_size: usize,
    /// Channel reduction ratio of the relation-perception blocks.
    pub reduction: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: 1,
            image_size: 32,
            widths: [16, 32, 64],
            bank_size: 4,
            reduction: 4,
        }
    }
}

impl BackboneConfig {
    pub fn embedding_dim(&self) -> usize {
        self.widths[2]
    }

    fn validate(&self) -> Result<()> {
        if !self.image_size.is_power_of_two() || self.image_size < 4 {
            return Err(Error::Config(format!(
                "image size must be a power of two >= 4, got {}",
                self.image_size
            )));
        }
        for (i, &w) in self.widths.iter().enumerate() {
            if i < 2 && (w < 2 || w % 2 != 0) {
                return Err(Error::Config(format!(
                    "stage {} width {w} must be even for the routing head",
                    i + 1
                )));
            }
            if i >= 1 && w % self.reduction != 0 {
                return Err(Error::Config(format!(
                    "stage {} width {w} not divisible by reduction {}",
                    i + 1,
                    self.reduction
                )));
            }
        }
        Ok(())
    }
}

/// The full detector: named parameter layers in a fixed order.
#[derive(Debug, Clone)]
pub struct DpnetModel {
    pub cfg: BackboneConfig,
    pub stage1: Param,
    pub fpf1: FpfBlock,
    pub stage2: Param,
    pub fpf2: FpfBlock,
    pub afrp2: AfrpParams,
    pub stage3: Param,
    pub afrp3: AfrpParams,
    pub cls_w: Param,
    pub cls_b: Param,
}

impl DpnetModel {
    pub fn init(cfg: BackboneConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let [w1, w2, w3] = cfg.widths;
        let s1 = cfg.image_size / 2;
        let s2 = cfg.image_size / 4;
        Ok(DpnetModel {
            cfg,
            stage1: Param::fan_in("weight", vec![w1, cfg.in_channels, 3, 3], cfg.in_channels * 9, rng),
            fpf1: FpfBlock::init(w1, s1, s1, cfg.bank_size, rng)?,
            stage2: Param::fan_in("weight", vec![w2, w1, 3, 3], w1 * 9, rng),
            fpf2: FpfBlock::init(w2, s2, s2, cfg.bank_size, rng)?,
            afrp2: AfrpParams::init(w2, cfg.reduction, rng)?,
            stage3: Param::fan_in("weight", vec![w3, w2, 3, 3], w2 * 9, rng),
            afrp3: AfrpParams::init(w3, cfg.reduction, rng)?,
            cls_w: Param::fan_in("weight", vec![w3, 1], w3, rng),
            cls_b: Param::zeros("bias", vec![1]),
        })
    }

    /// Named layers in their fixed order. Every learnable tensor appears in
    /// exactly one layer; the length of this list is the layer count n used
    /// by the guided-learning state.
    pub fn enumerate_layers(&self) -> Vec<(&'static str, Vec<&Param>)> {
        vec![
            ("stage1.conv", vec![&self.stage1]),
            ("fpf1.star", vec![&self.fpf1.star.scale, &self.fpf1.star.bias]),
            ("fpf1.bank", self.fpf1.bank.masks.iter().collect()),
            ("fpf1.head", vec![
                &self.fpf1.head.w1,
                &self.fpf1.head.b1,
                &self.fpf1.head.w2,
                &self.fpf1.head.b2,
                &self.fpf1.head.phi,
            ]),
            ("stage2.conv", vec![&self.stage2]),
            ("fpf2.star", vec![&self.fpf2.star.scale, &self.fpf2.star.bias]),
            ("fpf2.bank", self.fpf2.bank.masks.iter().collect()),
            ("fpf2.head", vec![
                &self.fpf2.head.w1,
                &self.fpf2.head.b1,
                &self.fpf2.head.w2,
                &self.fpf2.head.b2,
                &self.fpf2.head.phi,
            ]),
            ("afrp2.reduce", vec![&self.afrp2.reduce]),
            ("afrp2.vertex", vec![&self.afrp2.vertex]),
            ("afrp2.adj", vec![&self.afrp2.m_l]),
            ("afrp2.restore", vec![&self.afrp2.restore]),
            ("stage3.conv", vec![&self.stage3]),
            ("afrp3.reduce", vec![&self.afrp3.reduce]),
            ("afrp3.vertex", vec![&self.afrp3.vertex]),
            ("afrp3.adj", vec![&self.afrp3.m_l]),
            ("afrp3.restore", vec![&self.afrp3.restore]),
            ("classifier", vec![&self.cls_w, &self.cls_b]),
        ]
    }

    /// Mutable twin of enumerate_layers, same names and order.
    pub fn enumerate_layers_mut(&mut self) -> Vec<(&'static str, Vec<&mut Param>)> {
        vec![
            ("stage1.conv", vec![&mut self.stage1]),
            ("fpf1.star", vec![&mut self.fpf1.star.scale, &mut self.fpf1.star.bias]),
            ("fpf1.bank", self.fpf1.bank.masks.iter_mut().collect()),
            ("fpf1.head", vec![
                &mut self.fpf1.head.w1,
                &mut self.fpf1.head.b1,
                &mut self.fpf1.head.w2,
                &mut self.fpf1.head.b2,
                &mut self.fpf1.head.phi,
            ]),
            ("stage2.conv", vec![&mut self.stage2]),
            ("fpf2.star", vec![&mut self.fpf2.star.scale, &mut self.fpf2.star.bias]),
            ("fpf2.bank", self.fpf2.bank.masks.iter_mut().collect()),
            ("fpf2.head", vec![
                &mut self.fpf2.head.w1,
                &mut self.fpf2.head.b1,
                &mut self.fpf2.head.w2,
                &mut self.fpf2.head.b2,
                &mut self.fpf2.head.phi,
            ]),
            ("afrp2.reduce", vec![&mut self.afrp2.reduce]),
            ("afrp2.vertex", vec![&mut self.afrp2.vertex]),
            ("afrp2.adj", vec![&mut self.afrp2.m_l]),
            ("afrp2.restore", vec![&mut self.afrp2.restore]),
            ("stage3.conv", vec![&mut self.stage3]),
            ("afrp3.reduce", vec![&mut self.afrp3.reduce]),
            ("afrp3.vertex", vec![&mut self.afrp3.vertex]),
            ("afrp3.adj", vec![&mut self.afrp3.m_l]),
            ("afrp3.restore", vec![&mut self.afrp3.restore]),
            ("classifier", vec![&mut self.cls_w, &mut self.cls_b]),
        ]
    }

    pub fn layer_count(&self) -> usize {
        self.enumerate_layers().len()
    }

    pub fn param_count(&self) -> usize {
        self.enumerate_layers()
            .iter()
            .flat_map(|(_, ps)| ps.iter())
            .map(|p| p.numel())
            .sum()
    }

    /// Flat "layer.param" name -> tensor view, in layer order.
    pub fn named_tensors(&self) -> Vec<(String, &Param)> {
        self.enumerate_layers()
            .into_iter()
            .flat_map(|(layer, ps)| {
                ps.into_iter().map(move |p| (format!("{layer}.{}", p.name), p))
            })
            .collect()
    }

    /// Replaces every parameter from a complete snapshot of named tensors.
    /// The snapshot must cover exactly this model's names and shapes.
    pub fn load_named(&mut self, entries: &[(String, Vec<usize>, Vec<f64>)]) -> Result<()> {
        use std::collections::BTreeMap;
        let mut by_name: BTreeMap<&str, (&Vec<usize>, &Vec<f64>)> =
            entries.iter().map(|(n, s, d)| (n.as_str(), (s, d))).collect();
        if by_name.len() != entries.len() {
            return Err(Error::Checkpoint("duplicate tensor name in snapshot".into()));
        }
        for (layer, params) in self.enumerate_layers_mut() {
            for p in params {
                let full = format!("{layer}.{}", p.name);
                let Some((shape, data)) = by_name.remove(full.as_str()) else {
                    return Err(Error::Checkpoint(format!("snapshot missing tensor {full}")));
                };
                if *shape != p.shape {
                    return Err(Error::Checkpoint(format!(
                        "tensor {full}: shape {shape:?} does not match model shape {:?}",
                        p.shape
                    )));
                }
                p.data = data.clone();
            }
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Checkpoint(format!("snapshot has unknown tensor {extra}")));
        }
        Ok(())
    }

    /// Registers all parameters on the tape as gradient-tracked leaves.
    pub fn bind(&self, tape: &mut Tape) -> Result<BoundModel> {
        Ok(BoundModel {
            stage1: self.stage1.bind(tape)?,
            fpf1: self.fpf1.bind(tape)?,
            stage2: self.stage2.bind(tape)?,
            fpf2: self.fpf2.bind(tape)?,
            afrp2: self.afrp2.bind(tape)?,
            stage3: self.stage3.bind(tape)?,
            afrp3: self.afrp3.bind(tape)?,
            cls_w: self.cls_w.bind(tape)?,
            cls_b: self.cls_b.bind(tape)?,
        })
    }

    /// Binds and runs in one go; use bind + forward_bound to share one set
    /// of bound parameters across several batches on the same tape.
    pub fn forward(&self, tape: &mut Tape, batch: TensorId) -> Result<(TensorId, TensorId, BoundModel)> {
        let bound = self.bind(tape)?;
        let (logits, emb) = forward_bound(tape, &bound, batch)?;
        Ok((logits, emb, bound))
    }
}

/// Tape handles of one bound parameter set.
pub struct BoundModel {
    pub stage1: TensorId,
    pub fpf1: FpfIds,
    pub stage2: TensorId,
    pub fpf2: FpfIds,
    pub afrp2: AfrpIds,
    pub stage3: TensorId,
    pub afrp3: AfrpIds,
    pub cls_w: TensorId,
    pub cls_b: TensorId,
}

impl BoundModel {
    /// Per-layer tape ids, parallel to DpnetModel::enumerate_layers.
    pub fn layer_ids(&self) -> Vec<(&'static str, Vec<TensorId>)> {
        vec![
            ("stage1.conv", vec![self.stage1]),
            ("fpf1.star", vec![self.fpf1.star.scale, self.fpf1.star.bias]),
            ("fpf1.bank", self.fpf1.bank.masks.clone()),
            ("fpf1.head", vec![
                self.fpf1.head.w1,
                self.fpf1.head.b1,
                self.fpf1.head.w2,
                self.fpf1.head.b2,
                self.fpf1.head.phi,
            ]),
            ("stage2.conv", vec![self.stage2]),
            ("fpf2.star", vec![self.fpf2.star.scale, self.fpf2.star.bias]),
            ("fpf2.bank", self.fpf2.bank.masks.clone()),
            ("fpf2.head", vec![
                self.fpf2.head.w1,
                self.fpf2.head.b1,
                self.fpf2.head.w2,
                self.fpf2.head.b2,
                self.fpf2.head.phi,
            ]),
            ("afrp2.reduce", vec![self.afrp2.reduce]),
            ("afrp2.vertex", vec![self.afrp2.vertex]),
            ("afrp2.adj", vec![self.afrp2.m_l]),
            ("afrp2.restore", vec![self.afrp2.restore]),
            ("stage3.conv", vec![self.stage3]),
            ("afrp3.reduce", vec![self.afrp3.reduce]),
            ("afrp3.vertex", vec![self.afrp3.vertex]),
            ("afrp3.adj", vec![self.afrp3.m_l]),
            ("afrp3.restore", vec![self.afrp3.restore]),
            ("classifier", vec![self.cls_w, self.cls_b]),
        ]
    }
}

/// Runs the detector on a [B, C, H, W] batch with already-bound parameters.
/// Returns the [B] logits and the [B, Demb] embeddings.
pub fn forward_bound(tape: &mut Tape, m: &BoundModel, batch: TensorId) -> Result<(TensorId, TensorId)> {
    let x = tape.conv2d(batch, m.stage1, 2, 1)?;
    let f = fpf_forward(tape, x, &m.fpf1)?;
    let x = tape.add(x, f)?;

    let x = tape.conv2d(x, m.stage2, 2, 1)?;
    let f = fpf_forward(tape, x, &m.fpf2)?;
    let x = tape.add(x, f)?;
    let x = afrp_forward(tape, x, &m.afrp2)?;

    let x = tape.conv2d(x, m.stage3, 2, 1)?;
    let x = afrp_forward(tape, x, &m.afrp3)?;

    let pooled = tape.global_avg_pool(x)?;
    let (b, c) = {
        let s = tape.shape(pooled);
        (s[0], s[1])
    };
    let emb = tape.reshape(pooled, vec![b, c])?;
    let z = tape.matmul(emb, m.cls_w)?;
    let z = tape.add(z, m.cls_b)?;
    let logits = tape.reshape(z, vec![b])?;
    Ok((logits, emb))
}
