//! Frequency perception filtering: a learnable filter bank applied in the
//! 2-D spectrum of a squared-ReLU response, mixed by an input-conditioned
//! routing head, and brought back to the spatial domain.
//!
//! The block starts as an exact identity over `star_relu`: masks and
//! routing temperatures initialize to ones, so the mixed filter is all-pass
//! until training moves it.

use crate::error::{Error, Result};
use crate::param::Param;
use crate::rng::Rng;
use crate::tensor::{Tape, TensorId};

/// Scale and shift of the squared-ReLU activation s*ReLU(x)^2 + b.
#[derive(Debug, Clone)]
pub struct StarReluParams {
    pub scale: Param,
    pub bias: Param,
}

impl StarReluParams {
    pub fn init() -> Self {
        StarReluParams {
            scale: Param::ones("scale", vec![1]),
            bias: Param::zeros("bias", vec![1]),
        }
    }
}

/// K real spatial masks over an HxW spectrum, shared across channels and
/// applied identically to the real and imaginary parts.
#[derive(Debug, Clone)]
pub struct FilterBank {
    pub masks: Vec<Param>,
    pub h: usize,
    pub w: usize,
}

impl FilterBank {
    /// All-ones (all-pass) masks.
    pub fn init(k: usize, h: usize, w: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("filter bank needs at least one mask".into()));
        }
        crate::fft::check_pow2(h, w)?;
        let masks = (0..k)
            .map(|i| Param::ones(&format!("mask{i}"), vec![h, w]))
            .collect();
        Ok(FilterBank { masks, h, w })
    }

    pub fn k(&self) -> usize {
        self.masks.len()
    }
}

/// Routing head: per-filter logits phi_k * MLP_k(G(X)) with a two-layer
/// MLP C -> C/2 -> K over the channel-pooled input, softmaxed into mixing
/// weights.
#[derive(Debug, Clone)]
pub struct RoutingHead {
    pub w1: Param,
    pub b1: Param,
    pub w2: Param,
    pub b2: Param,
    pub phi: Param,
    pub c: usize,
}

impl RoutingHead {
    pub fn init(c: usize, k: usize, rng: &mut Rng) -> Result<Self> {
        if c < 2 || c % 2 != 0 {
            return Err(Error::Config(format!("routing head needs even channels >= 2, got {c}")));
        }
        if k == 0 {
            return Err(Error::Config("routing head needs at least one filter".into()));
        }
        let hidden = c / 2;
        Ok(RoutingHead {
            w1: Param::fan_in("w1", vec![c, hidden], c, rng),
            b1: Param::zeros("b1", vec![hidden]),
            w2: Param::fan_in("w2", vec![hidden, k], hidden, rng),
            b2: Param::zeros("b2", vec![k]),
            phi: Param::ones("phi", vec![k]),
            c,
        })
    }

    pub fn k(&self) -> usize {
        self.phi.numel()
    }
}

/// One frequency-filtering block: activation, bank, and routing head.
#[derive(Debug, Clone)]
pub struct FpfBlock {
    pub star: StarReluParams,
    pub bank: FilterBank,
    pub head: RoutingHead,
}

impl FpfBlock {
    pub fn init(c: usize, h: usize, w: usize, k: usize, rng: &mut Rng) -> Result<Self> {
        Ok(FpfBlock {
            star: StarReluParams::init(),
            bank: FilterBank::init(k, h, w)?,
            head: RoutingHead::init(c, k, rng)?,
        })
    }
}

/// Bound tape handles for one block's parameters.
pub struct StarReluIds {
    pub scale: TensorId,
    pub bias: TensorId,
}

pub struct FilterBankIds {
    pub masks: Vec<TensorId>,
}

pub struct RoutingHeadIds {
    pub w1: TensorId,
    pub b1: TensorId,
    pub w2: TensorId,
    pub b2: TensorId,
    pub phi: TensorId,
}

pub struct FpfIds {
    pub star: StarReluIds,
    pub bank: FilterBankIds,
    pub head: RoutingHeadIds,
}

impl FpfBlock {
    pub fn bind(&self, tape: &mut Tape) -> Result<FpfIds> {
        Ok(FpfIds {
            star: StarReluIds {
                scale: self.star.scale.bind(tape)?,
                bias: self.star.bias.bind(tape)?,
            },
            bank: FilterBankIds {
                masks: self
                    .bank
                    .masks
                    .iter()
                    .map(|m| m.bind(tape))
                    .collect::<Result<_>>()?,
            },
            head: RoutingHeadIds {
                w1: self.head.w1.bind(tape)?,
                b1: self.head.b1.bind(tape)?,
                w2: self.head.w2.bind(tape)?,
                b2: self.head.b2.bind(tape)?,
                phi: self.head.phi.bind(tape)?,
            },
        })
    }
}

/// s * ReLU(x)^2 + b, elementwise, with learnable scalars s and b.
pub fn star_relu(tape: &mut Tape, x: TensorId, p: &StarReluIds) -> Result<TensorId> {
    let r = tape.relu(x)?;
    let sq = tape.mul(r, r)?;
    let scaled = tape.mul(sq, p.scale)?;
    tape.add(scaled, p.bias)
}

/// Mixing weights over the K filters for each sample: softmax of
/// phi_k * MLP_k(G(X)). Rows are a probability simplex by construction.
pub fn routing_weights(tape: &mut Tape, x: TensorId, p: &RoutingHeadIds) -> Result<TensorId> {
    let sx = tape.shape(x).to_vec();
    if sx.len() != 4 {
        return Err(Error::ShapeMismatch(format!("routing input must be [B,C,H,W], got {sx:?}")));
    }
    let (b, c) = (sx[0], sx[1]);
    let pooled = tape.global_avg_pool(x)?;
    let flat = tape.reshape(pooled, vec![b, c])?;
    let h1 = tape.matmul(flat, p.w1)?;
    let h1 = tape.add_row_bias(h1, p.b1)?;
    let h1 = tape.relu(h1)?;
    let h2 = tape.matmul(h1, p.w2)?;
    let h2 = tape.add_row_bias(h2, p.b2)?;
    let logits = tape.scale_columns(h2, p.phi)?;
    tape.softmax(logits)
}

/// X_w = sum_k w_k * (mask_k . X_F), applied identically to the real and
/// imaginary parts. `weights` is [B,K]; masks broadcast over channels.
pub fn apply_filter_bank(
    tape: &mut Tape,
    spec_re: TensorId,
    spec_im: TensorId,
    weights: TensorId,
    bank: &FilterBankIds,
) -> Result<(TensorId, TensorId)> {
    let k = bank.masks.len();
    let sw = tape.shape(weights).to_vec();
    if sw.len() != 2 || sw[1] != k {
        return Err(Error::ShapeMismatch(format!("weights {sw:?} vs {k} masks")));
    }
    let mut acc: Option<(TensorId, TensorId)> = None;
    for (ki, &mask) in bank.masks.iter().enumerate() {
        let wk = tape.select_column(weights, ki)?;
        let mre = tape.mul_spatial_mask(spec_re, mask)?;
        let mim = tape.mul_spatial_mask(spec_im, mask)?;
        let tre = tape.scale_per_sample(mre, wk)?;
        let tim = tape.scale_per_sample(mim, wk)?;
        acc = Some(match acc {
            None => (tre, tim),
            Some((are, aim)) => (tape.add(are, tre)?, tape.add(aim, tim)?),
        });
    }
    Ok(acc.expect("bank has at least one mask"))
}

/// Full frequency-perception filter: the real part of the inverse
/// transform of the routed, masked spectrum of star_relu(x).
pub fn fpf_forward(tape: &mut Tape, x: TensorId, p: &FpfIds) -> Result<TensorId> {
    let r = star_relu(tape, x, &p.star)?;
    let (re, im) = tape.fft2(r)?;
    let w = routing_weights(tape, x, &p.head)?;
    let (fre, fim) = apply_filter_bank(tape, re, im, w, &p.bank)?;
    tape.ifft2_real(fre, fim)
}
