//! In-memory view of a generated corpus plus the seeded batch samplers
//! used by training, adaptation, and meta-episodes. Labels are 0.0 for
//! real and 1.0 for fake throughout.

use crate::error::{Error, Result};
use crate::fgl::{Batch, Episode};
use crate::rng::Rng;
use crate::synthdata::{parse_pgm, Manifest, REAL_TECHNIQUE};
use std::path::Path;

pub const REAL_LABEL: f64 = 0.0;
pub const FAKE_LABEL: f64 = 1.0;

#[derive(Debug, Clone)]
pub struct Sample {
    /// Row-major grayscale pixels in [0,1], `size*size` long.
    pub pixels: Vec<f64>,
    pub label: f64,
    pub technique: String,
    pub split: String,
    /// Manifest path, used to report which samples a run consumed.
    pub path: String,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub samples: Vec<Sample>,
    pub image_size: usize,
    /// Fake technique ids in first-appearance order.
    pub techniques: Vec<String>,
}

impl Corpus {
    /// Reads manifest.csv and every referenced PGM under `dir`.
    pub fn load(dir: &Path) -> Result<Corpus> {
        let manifest = Manifest::load(&dir.join("manifest.csv"))?;
        if manifest.rows.is_empty() {
            return Err(Error::EmptyInput(format!("manifest in {} has no rows", dir.display())));
        }
        let mut samples = Vec::with_capacity(manifest.rows.len());
        let mut techniques: Vec<String> = Vec::new();
        let mut image_size = 0usize;
        for row in &manifest.rows {
            let is_real = row.technique == REAL_TECHNIQUE;
            if is_real != (row.label == "real") {
                return Err(Error::Data(format!("{}: label {} vs technique {}", row.path, row.label, row.technique)));
            }
            let img = parse_pgm(&std::fs::read(dir.join(&row.path))?)?;
            if image_size == 0 {
                image_size = img.size;
            } else if img.size != image_size {
                return Err(Error::ShapeMismatch(format!(
                    "{}: image size {} vs corpus size {image_size}",
                    row.path, img.size
                )));
            }
            if !is_real && !techniques.contains(&row.technique) {
                techniques.push(row.technique.clone());
            }
            samples.push(Sample {
                pixels: img.pixels,
                label: if is_real { REAL_LABEL } else { FAKE_LABEL },
                technique: row.technique.clone(),
                split: row.split.clone(),
                path: row.path.clone(),
            });
        }
        Ok(Corpus { samples, image_size, techniques })
    }

    /// Sample indices of one technique within one split, manifest order.
    pub fn indices(&self, technique: &str, split: &str) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.technique == technique && s.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Assembles the listed samples into a [B,1,H,W] batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        if indices.is_empty() {
            return Err(Error::EmptyInput("batch of zero samples".into()));
        }
        let hw = self.image_size * self.image_size;
        let mut images = Vec::with_capacity(indices.len() * hw);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = self
                .samples
                .get(i)
                .ok_or_else(|| Error::Data(format!("sample index {i} out of range")))?;
            images.extend_from_slice(&s.pixels);
            labels.push(s.label);
        }
        let batch = Batch {
            images,
            shape: vec![indices.len(), 1, self.image_size, self.image_size],
            labels,
        };
        batch.validate()?;
        Ok(batch)
    }
}

/// Draws k distinct fakes of `technique` plus k distinct reals from the
/// support split; returns the batch and the consumed sample paths.
pub fn support_batch(corpus: &Corpus, technique: &str, k: usize, rng: &mut Rng) -> Result<(Batch, Vec<String>)> {
    if k == 0 {
        return Err(Error::Config("support size k must be at least 1".into()));
    }
    let mut fakes = corpus.indices(technique, "support");
    let mut reals = corpus.indices(REAL_TECHNIQUE, "support");
    if fakes.len() < k || reals.len() < k {
        return Err(Error::Data(format!(
            "support split has {} fakes of {technique} and {} reals; need {k} of each",
            fakes.len(),
            reals.len()
        )));
    }
    rng.shuffle(&mut fakes);
    rng.shuffle(&mut reals);
    let mut picked: Vec<usize> = fakes[..k].to_vec();
    picked.extend_from_slice(&reals[..k]);
    let batch = corpus.batch(&picked)?;
    let paths = picked.iter().map(|&i| corpus.samples[i].path.clone()).collect();
    Ok((batch, paths))
}

/// All reals plus all fakes of one technique in a split, manifest order.
pub fn eval_indices(corpus: &Corpus, technique: &str, split: &str) -> Vec<usize> {
    let mut picked = corpus.indices(REAL_TECHNIQUE, split);
    picked.extend(corpus.indices(technique, split));
    picked
}

/// Endless balanced batches: half reals, half fakes pooled across the
/// given techniques, reshuffling each pool as it runs out.
pub struct BalancedSampler<'a> {
    corpus: &'a Corpus,
    reals: Vec<usize>,
    fakes: Vec<usize>,
    half: usize,
    rng: Rng,
    real_cursor: usize,
    fake_cursor: usize,
}

impl<'a> BalancedSampler<'a> {
    pub fn new(
        corpus: &'a Corpus,
        techniques: &[String],
        split: &str,
        batch_size: usize,
        rng: Rng,
    ) -> Result<BalancedSampler<'a>> {
        let reals = corpus.indices(REAL_TECHNIQUE, split);
        let mut fakes = Vec::new();
        for t in techniques {
            if t == REAL_TECHNIQUE {
                return Err(Error::Config("real pool cannot appear in the fake technique list".into()));
            }
            let idx = corpus.indices(t, split);
            if idx.is_empty() {
                return Err(Error::Data(format!("no {split} samples for technique {t}")));
            }
            fakes.extend(idx);
        }
        BalancedSampler::from_pools(corpus, reals, fakes, batch_size, rng)
    }

    /// Builds the sampler over explicit index pools, e.g. after carving
    /// out a validation slice.
    pub fn from_pools(
        corpus: &'a Corpus,
        reals: Vec<usize>,
        fakes: Vec<usize>,
        batch_size: usize,
        rng: Rng,
    ) -> Result<BalancedSampler<'a>> {
        if batch_size < 2 || batch_size % 2 != 0 {
            return Err(Error::Config(format!("batch size must be even and >= 2, got {batch_size}")));
        }
        if reals.is_empty() || fakes.is_empty() {
            return Err(Error::Data(format!(
                "balanced sampler needs both classes, got {} reals and {} fakes",
                reals.len(),
                fakes.len()
            )));
        }
        let mut sampler = BalancedSampler {
            corpus,
            reals,
            fakes,
            half: batch_size / 2,
            rng,
            real_cursor: 0,
            fake_cursor: 0,
        };
        sampler.reshuffle_reals();
        sampler.reshuffle_fakes();
        Ok(sampler)
    }

    fn reshuffle_reals(&mut self) {
        self.rng.shuffle(&mut self.reals);
        self.real_cursor = 0;
    }

    fn reshuffle_fakes(&mut self) {
        self.rng.shuffle(&mut self.fakes);
        self.fake_cursor = 0;
    }

    /// Batches per pass over the larger class pool.
    pub fn batches_per_epoch(&self) -> usize {
        (self.reals.len().max(self.fakes.len()) / self.half).max(1)
    }

    pub fn next_batch(&mut self) -> Result<Batch> {
        let mut picked = Vec::with_capacity(self.half * 2);
        for _ in 0..self.half {
            if self.fake_cursor >= self.fakes.len() {
                self.reshuffle_fakes();
            }
            picked.push(self.fakes[self.fake_cursor]);
            self.fake_cursor += 1;
        }
        for _ in 0..self.half {
            if self.real_cursor >= self.reals.len() {
                self.reshuffle_reals();
            }
            picked.push(self.reals[self.real_cursor]);
            self.real_cursor += 1;
        }
        self.corpus.batch(&picked)
    }
}

/// Draws leave-one-technique-out meta-episodes from the known families.
pub struct EpisodeSampler<'a> {
    corpus: &'a Corpus,
    known: Vec<String>,
    shots: usize,
    /// Query fakes (and reals) per episode.
    query_half: usize,
    source_batch: usize,
    /// Source batches drawn per episode, one per guided step.
    source_batches: usize,
}

impl<'a> EpisodeSampler<'a> {
    pub fn new(
        corpus: &'a Corpus,
        known: &[String],
        shots: usize,
        query_half: usize,
        source_batch: usize,
        source_batches: usize,
    ) -> Result<EpisodeSampler<'a>> {
        if known.len() < 2 {
            return Err(Error::Config(format!(
                "meta-episodes need at least 2 known techniques, got {}",
                known.len()
            )));
        }
        if shots == 0 || query_half == 0 || source_batch < 2 || source_batch % 2 != 0 {
            return Err(Error::Config("bad episode sizes".into()));
        }
        for t in known {
            if !corpus.techniques.contains(t) {
                return Err(Error::Data(format!("technique {t} not in corpus")));
            }
        }
        Ok(EpisodeSampler {
            corpus,
            known: known.to_vec(),
            shots,
            query_half,
            source_batch,
            source_batches,
        })
    }

    /// One episode: a known technique plays unknown; its support/query
    /// samples form the adaptation target while source batches come from
    /// the remaining known techniques only.
    pub fn draw(&self, rng: &mut Rng) -> Result<Episode> {
        let pseudo = &self.known[rng.below(self.known.len())];
        let mut support_rng = rng.derive("support");
        let (support, _) = support_batch(self.corpus, pseudo, self.shots, &mut support_rng)?;

        let mut query_rng = rng.derive("query");
        let mut fakes = self.corpus.indices(pseudo, "query");
        let mut reals = self.corpus.indices(REAL_TECHNIQUE, "query");
        if fakes.len() < self.query_half || reals.len() < self.query_half {
            return Err(Error::Data(format!(
                "query split too small for {} fakes + reals",
                self.query_half
            )));
        }
        query_rng.shuffle(&mut fakes);
        query_rng.shuffle(&mut reals);
        let mut picked: Vec<usize> = fakes[..self.query_half].to_vec();
        picked.extend_from_slice(&reals[..self.query_half]);
        let query = self.corpus.batch(&picked)?;

        let rest: Vec<String> = self.known.iter().filter(|t| *t != pseudo).cloned().collect();
        let mut source_sampler =
            BalancedSampler::new(self.corpus, &rest, "train", self.source_batch, rng.derive("source"))?;
        let source = (0..self.source_batches)
            .map(|_| source_sampler.next_batch())
            .collect::<Result<Vec<Batch>>>()?;
        Ok(Episode { support, query, source })
    }
}
