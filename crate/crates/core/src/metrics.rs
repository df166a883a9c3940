//! Detection metrics: accuracy at a fixed threshold and ROC AUC via the
//! Mann-Whitney rank statistic (ties counted one half), plus the
//! serializable evaluation report. The positive class is "fake" and
//! scores are probabilities in [0,1].

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn check_pair(scores: &[f64], labels: &[f64]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("no scores to evaluate".into()));
    }
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(l) = labels.iter().find(|&&l| l != 0.0 && l != 1.0) {
        return Err(Error::Data(format!("label {l} is neither 0 nor 1")));
    }
    Ok(())
}

/// Fraction of samples classified correctly when scores at or above the
/// threshold are called fake.
pub fn accuracy(scores: &[f64], labels: &[f64], threshold: f64) -> Result<f64> {
    check_pair(scores, labels)?;
    let correct = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| (s >= threshold) == (l == 1.0))
        .count();
    Ok(correct as f64 / scores.len() as f64)
}

/// Probability that a random fake outscores a random real, computed from
/// average ranks so tied pairs count one half. Returns None when either
/// class is absent.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<Option<f64>> {
    check_pair(scores, labels)?;
    let positives = labels.iter().filter(|&&l| l == 1.0).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Average rank over each run of equal scores (1-based ranks).
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let mean_rank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            ranks[idx] = mean_rank;
        }
        i = j;
    }
    let positive_rank_sum: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 1.0)
        .map(|(&r, _)| r)
        .sum();
    let p = positives as f64;
    let u = positive_rank_sum - p * (p + 1.0) / 2.0;
    Ok(Some(u / (p * negatives as f64)))
}

/// 64-bit FNV-1a of arbitrary bytes, as 16 hex digits. Used to stamp
/// reports with a digest of the run configuration.
pub fn fnv1a_hex(bytes: &[u8]) -> String {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    format!("{hash:016x}")
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ScopeMetrics {
    pub acc: f64,
    pub auc: Option<f64>,
    pub reals: usize,
    pub fakes: usize,
}

/// Evaluation summary: overall metrics plus a per-technique breakdown
/// (each technique's fakes against the same real pool).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub overall: ScopeMetrics,
    pub per_technique: BTreeMap<String, ScopeMetrics>,
    pub seed: u64,
    pub config_digest: String,
}

fn scope_metrics(scores: &[f64], labels: &[f64]) -> Result<ScopeMetrics> {
    let fakes = labels.iter().filter(|&&l| l == 1.0).count();
    Ok(ScopeMetrics {
        acc: accuracy(scores, labels, 0.5)?,
        auc: auc(scores, labels)?,
        reals: labels.len() - fakes,
        fakes,
    })
}

impl MetricsReport {
    /// Builds the report from per-sample scores, labels, and technique
    /// ids (reals keep their reserved id and join every breakdown).
    pub fn from_scores(
        scores: &[f64],
        labels: &[f64],
        techniques: &[String],
        seed: u64,
        config_digest: &str,
    ) -> Result<MetricsReport> {
        check_pair(scores, labels)?;
        if techniques.len() != scores.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} techniques vs {} scores",
                techniques.len(),
                scores.len()
            )));
        }
        let overall = scope_metrics(scores, labels)?;
        let mut per_technique = BTreeMap::new();
        let fake_ids: std::collections::BTreeSet<&String> = techniques
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == 1.0)
            .map(|(t, _)| t)
            .collect();
        for id in fake_ids {
            let mut s = Vec::new();
            let mut l = Vec::new();
            for i in 0..scores.len() {
                if labels[i] == 0.0 || &techniques[i] == id {
                    s.push(scores[i]);
                    l.push(labels[i]);
                }
            }
            per_technique.insert(id.clone(), scope_metrics(&s, &l)?);
        }
        Ok(MetricsReport {
            overall,
            per_technique,
            seed,
            config_digest: config_digest.to_string(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Data(format!("report encoding: {e}")))
    }

    pub fn from_json(text: &str) -> Result<MetricsReport> {
        serde_json::from_str(text).map_err(|e| Error::Data(format!("report decoding: {e}")))
    }

    /// Flat CSV: one row per scope so runs can be stacked in a sheet.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("seed,config_digest,scope,reals,fakes,acc,auc\n");
        let mut row = |scope: &str, m: &ScopeMetrics| {
            let auc = m.auc.map_or(String::new(), |v| v.to_string());
            let _ = writeln!(
                out,
                "{},{},{scope},{},{},{},{auc}",
                self.seed, self.config_digest, m.reals, m.fakes, m.acc
            );
        };
        row("overall", &self.overall);
        for (id, m) in &self.per_technique {
            row(id, m);
        }
        out
    }
}
