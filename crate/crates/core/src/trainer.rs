//! Stage-1 detector training: Adam on the combined detection loss with
//! stepped learning-rate decay, balanced batches, and best-AUC model
//! selection on a held-out validation slice.

use crate::config::RunConfig;
use crate::dataset::{BalancedSampler, Corpus};
use crate::dpnet::DpnetModel;
use crate::error::{Error, Result};
use crate::fgl::{collect_layer_grads, Batch};
use crate::losses::train_loss;
use crate::metrics::{auc, sigmoid};
use crate::rng::Rng;
use crate::synthdata::REAL_TECHNIQUE;
use crate::tensor::Tape;

/// Adam with one moment pair per tensor, sized lazily on the first step.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update; `tensors` and `grads` must stay parallel and
    /// identically shaped across calls.
    pub fn step(&mut self, tensors: &mut [&mut Vec<f64>], grads: &[Vec<f64>]) -> Result<()> {
        if tensors.len() != grads.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} tensors vs {} gradients",
                tensors.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = tensors.iter().map(|t| vec![0.0; t.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != tensors.len() {
            return Err(Error::ShapeMismatch(format!(
                "optimizer tracks {} tensors, got {}",
                self.m.len(),
                tensors.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((tensor, grad), (m, v)) in tensors.iter_mut().zip(grads).zip(self.m.iter_mut().zip(&mut self.v)) {
            if tensor.len() != grad.len() || tensor.len() != m.len() {
                return Err(Error::ShapeMismatch(format!(
                    "tensor of {} values vs {} gradient and {} moment entries",
                    tensor.len(),
                    grad.len(),
                    m.len()
                )));
            }
            for i in 0..grad.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                tensor[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone)]
pub struct TrainLog {
    /// Mean combined loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Validation AUC per epoch (the model-selection signal).
    pub val_auc: Vec<f64>,
    /// Epoch whose weights the returned model carries.
    pub best_epoch: usize,
}

/// Sigmoid scores of the model on one batch, without touching gradients.
pub fn score_batch(model: &DpnetModel, batch: &Batch) -> Result<Vec<f64>> {
    batch.validate()?;
    let mut tape = Tape::new();
    let images = tape.constant(batch.images.clone(), batch.shape.clone())?;
    let (logits, _, _) = model.forward(&mut tape, images)?;
    Ok(tape.data(logits).iter().map(|&z| sigmoid(z)).collect())
}

/// Scores corpus samples in chunks to bound tape memory.
pub fn score_indices(model: &DpnetModel, corpus: &Corpus, indices: &[usize]) -> Result<Vec<f64>> {
    let mut scores = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(32) {
        scores.extend(score_batch(model, &corpus.batch(chunk)?)?);
    }
    Ok(scores)
}

fn labels_of(corpus: &Corpus, indices: &[usize]) -> Vec<f64> {
    indices.iter().map(|&i| corpus.samples[i].label).collect()
}

/// Carves a per-class validation slice off the known-technique train
/// pools. Returns (train_reals, train_fakes, val_indices).
fn split_pools(corpus: &Corpus, cfg: &RunConfig, rng: &mut Rng) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    if cfg.known.is_empty() {
        return Err(Error::Config("no known techniques to train on".into()));
    }
    let mut reals = corpus.indices(REAL_TECHNIQUE, "train");
    let mut fakes = Vec::new();
    for t in &cfg.known {
        let idx = corpus.indices(t, "train");
        if idx.is_empty() {
            return Err(Error::Data(format!("no train samples for technique {t}")));
        }
        fakes.extend(idx);
    }
    if reals.is_empty() {
        return Err(Error::Data("no real train samples".into()));
    }
    rng.shuffle(&mut reals);
    rng.shuffle(&mut fakes);
    // At least one sample per class stays on each side of the split.
    let val_reals = ((reals.len() as f64 * cfg.val_fraction) as usize).clamp(1, reals.len() - 1);
    let val_fakes = ((fakes.len() as f64 * cfg.val_fraction) as usize).clamp(1, fakes.len() - 1);
    let mut val = reals.split_off(reals.len() - val_reals);
    val.extend(fakes.split_off(fakes.len() - val_fakes));
    Ok((reals, fakes, val))
}

/// One optimization step on one batch; returns the loss value.
pub fn train_step(model: &mut DpnetModel, batch: &Batch, cfg: &RunConfig, adam: &mut Adam) -> Result<f64> {
    let mut tape = Tape::new();
    let images = tape.constant(batch.images.clone(), batch.shape.clone())?;
    let (logits, emb, bound) = model.forward(&mut tape, images)?;
    let (loss, _used_icc) = train_loss(&mut tape, logits, emb, &batch.labels, &cfg.weights)?;
    let loss_value = tape.data(loss)[0];
    if !loss_value.is_finite() {
        return Err(Error::CheckFailed(format!("non-finite training loss {loss_value}")));
    }
    tape.backward(loss)?;
    let grads = collect_layer_grads(&tape, &bound)?;
    let flat_grads: Vec<Vec<f64>> = grads.into_iter().flatten().collect();
    let mut layers = model.enumerate_layers_mut();
    let mut tensors: Vec<&mut Vec<f64>> = layers
        .iter_mut()
        .flat_map(|(_, ps)| ps.iter_mut().map(|p| &mut p.data))
        .collect();
    adam.step(&mut tensors, &flat_grads)?;
    Ok(loss_value)
}

/// Trains a fresh detector on the known techniques and returns the
/// weights of the epoch with the best validation AUC (later epochs win
/// ties).
pub fn train(cfg: &RunConfig, corpus: &Corpus, rng: &mut Rng) -> Result<(DpnetModel, TrainLog)> {
    cfg.validate()?;
    let mut model = {
        let mut init_rng = rng.derive("model-init");
        let mut backbone = crate::dpnet::BackboneConfig::default();
        backbone.image_size = corpus.image_size;
        DpnetModel::init(backbone, &mut init_rng)?
    };
    train_from(&mut model, cfg, corpus, rng)
}

/// Trains a caller-initialized model in place; also returns the
/// best-validation clone and the log.
pub fn train_from(
    model: &mut DpnetModel,
    cfg: &RunConfig,
    corpus: &Corpus,
    rng: &mut Rng,
) -> Result<(DpnetModel, TrainLog)> {
    let (train_reals, train_fakes, val) = split_pools(corpus, cfg, &mut rng.derive("val-split"))?;
    let val_labels = labels_of(corpus, &val);
    let mut sampler = BalancedSampler::from_pools(
        corpus,
        train_reals,
        train_fakes,
        cfg.batch_size,
        rng.derive("batches"),
    )?;

    let mut adam = Adam::new(cfg.lr);
    let mut log = TrainLog {
        epoch_losses: Vec::new(),
        val_auc: Vec::new(),
        best_epoch: 0,
    };
    let mut best: Option<(f64, DpnetModel)> = None;
    for epoch in 0..cfg.epochs {
        adam.lr = cfg.lr * cfg.lr_decay.powi((epoch / cfg.lr_decay_every) as i32);
        let mut loss_sum = 0.0;
        let batches = sampler.batches_per_epoch();
        for _ in 0..batches {
            let batch = sampler.next_batch()?;
            loss_sum += train_step(model, &batch, cfg, &mut adam)?;
        }
        log.epoch_losses.push(loss_sum / batches as f64);

        let scores = score_indices(model, corpus, &val)?;
        let epoch_auc = auc(&scores, &val_labels)?
            .ok_or_else(|| Error::Data("validation slice lost a class".into()))?;
        log.val_auc.push(epoch_auc);
        // Ties go to the later epoch: once validation AUC saturates, the
        // extra steps keep improving calibration, so prefer them.
        if best.as_ref().map_or(true, |(b, _)| epoch_auc >= *b) {
            best = Some((epoch_auc, model.clone()));
            log.best_epoch = epoch;
        }
    }
    let (_, best_model) = best.expect("epochs >= 1 guarantees one candidate");
    Ok((best_model, log))
}
