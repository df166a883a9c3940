//! Training objectives. Labels are f64 in {0,1}; 1 marks a fake sample,
//! and detection scores are sigmoids of the single logit.

use crate::error::{Error, Result};
use crate::tensor::{Tape, TensorId};

/// Mixing weights of the composite objectives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Intra-class compactness weight in the stage-1 loss.
    pub icc_lambda: f64,
    /// Support-batch BCE weight in the adaptation loss.
    pub mu: f64,
    /// Feature-consistency weight in the adaptation loss.
    pub nu: f64,
    /// Similarity temperature.
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { icc_lambda: 0.5, mu: 1.0, nu: 0.1, tau: 0.1 }
    }
}

/// Mean stabilized binary cross-entropy of logits [B] against labels.
pub fn bce(tape: &mut Tape, logits: TensorId, labels: &[f64]) -> Result<TensorId> {
    tape.bce_with_logits(logits, labels)
}

fn split_indices(labels: &[f64]) -> (Vec<usize>, Vec<usize>) {
    let mut reals = Vec::new();
    let mut fakes = Vec::new();
    for (i, &y) in labels.iter().enumerate() {
        if y == 0.0 {
            reals.push(i);
        } else {
            fakes.push(i);
        }
    }
    (reals, fakes)
}

/// Mean embedding of the real samples in the batch, or None when the
/// batch has no reals.
pub fn real_center(tape: &mut Tape, emb: TensorId, labels: &[f64]) -> Result<Option<TensorId>> {
    let se = tape.shape(emb);
    if se.len() != 2 || se[0] != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "embeddings {se:?} vs {} labels",
            labels.len()
        )));
    }
    let (reals, _) = split_indices(labels);
    if reals.is_empty() {
        return Ok(None);
    }
    let rows = tape.select_rows(emb, reals)?;
    Ok(Some(tape.mean_rows(rows)?))
}

/// Mean squared distance of a set of embedding rows to the center.
fn mean_sq_dist(tape: &mut Tape, emb: TensorId, rows: Vec<usize>, center: TensorId) -> Result<TensorId> {
    let n = rows.len();
    let sel = tape.select_rows(emb, rows)?;
    let neg_c = tape.mul_const(center, -1.0)?;
    let diff = tape.add_row_bias(sel, neg_c)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum_all(sq)?;
    tape.mul_const(total, 1.0 / n as f64)
}

/// Intra-class compactness: mean squared distance of reals to the real
/// center minus the same for fakes. Negative when fakes sit further from
/// the center than reals. Needs at least one sample of each class.
pub fn icc_loss(tape: &mut Tape, emb: TensorId, labels: &[f64], center: TensorId) -> Result<TensorId> {
    let (reals, fakes) = split_indices(labels);
    if reals.is_empty() || fakes.is_empty() {
        return Err(Error::EmptyInput(format!(
            "icc needs both classes, got {} reals / {} fakes",
            reals.len(),
            fakes.len()
        )));
    }
    let pos = mean_sq_dist(tape, emb, reals, center)?;
    let neg = mean_sq_dist(tape, emb, fakes, center)?;
    tape.sub(pos, neg)
}

/// Stage-1 objective: BCE + lambda * ICC. The compactness term is skipped
/// (flag false) when lambda is zero or the batch lacks one of the classes,
/// so no gradient reaches the embeddings through it in those cases.
pub fn train_loss(
    tape: &mut Tape,
    logits: TensorId,
    emb: TensorId,
    labels: &[f64],
    w: &LossWeights,
) -> Result<(TensorId, bool)> {
    let b = bce(tape, logits, labels)?;
    if w.icc_lambda == 0.0 {
        return Ok((b, false));
    }
    let Some(center) = real_center(tape, emb, labels)? else {
        return Ok((b, false));
    };
    let (_, fakes) = split_indices(labels);
    if fakes.is_empty() {
        return Ok((b, false));
    }
    let icc = icc_loss(tape, emb, labels, center)?;
    let scaled = tape.mul_const(icc, w.icc_lambda)?;
    Ok((tape.add(b, scaled)?, true))
}

/// Temperature-scaled cosine similarity matrix S[i,j] of feature rows.
/// Rejects zero-norm rows and non-positive temperatures.
pub fn similarity_matrix(tape: &mut Tape, feats: TensorId, tau: f64) -> Result<TensorId> {
    if tau <= 0.0 {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let n = tape.row_normalize(feats)?;
    let nt = tape.transpose(n)?;
    let s = tape.matmul(n, nt)?;
    tape.mul_const(s, 1.0 / tau)
}

/// Deterministic positive assignment: each sample's positive is the next
/// same-label sample in cyclic index order; samples whose label appears
/// only once get None.
pub fn cyclic_positives(labels: &[f64]) -> Vec<Option<usize>> {
    let b = labels.len();
    (0..b)
        .map(|i| {
            (1..b)
                .map(|step| (i + step) % b)
                .find(|&j| labels[j] == labels[i])
        })
        .collect()
}

/// Feature-consistency loss over a batch of features: InfoNCE with the
/// cyclic positive assignment, self excluded from every denominator, and
/// the mean taken over rows that have a positive. Returns the loss and the
/// number of included rows (0 means constant zero: fewer than two samples
/// of every label).
pub fn fc_loss(tape: &mut Tape, feats: TensorId, labels: &[f64], tau: f64) -> Result<(TensorId, usize)> {
    let sf = tape.shape(feats);
    if sf.len() != 2 || sf[0] != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "features {sf:?} vs {} labels",
            labels.len()
        )));
    }
    let pos = cyclic_positives(labels);
    let included = pos.iter().flatten().count();
    let sim = similarity_matrix(tape, feats, tau)?;
    let loss = tape.contrastive_rows(sim, pos)?;
    Ok((loss, included))
}

/// Adaptation objective: source BCE + mu * support BCE + nu * FC over the
/// given feature rows (normally the concatenated source and support
/// embeddings with their labels).
#[allow(clippy::too_many_arguments)]
pub fn adaptation_loss(
    tape: &mut Tape,
    source_logits: TensorId,
    source_labels: &[f64],
    support_logits: TensorId,
    support_labels: &[f64],
    feats: TensorId,
    feat_labels: &[f64],
    w: &LossWeights,
) -> Result<TensorId> {
    let l_src = bce(tape, source_logits, source_labels)?;
    let l_sup = bce(tape, support_logits, support_labels)?;
    let (l_fc, _) = fc_loss(tape, feats, feat_labels, w.tau)?;
    let sup_scaled = tape.mul_const(l_sup, w.mu)?;
    let fc_scaled = tape.mul_const(l_fc, w.nu)?;
    let partial = tape.add(l_src, sup_scaled)?;
    tape.add(partial, fc_scaled)
}
