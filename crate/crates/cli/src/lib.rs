//! Command implementations behind the `fgl` binary.
//!
//! Each command is an ordinary function over parsed arguments so the
//! behavior is testable without spawning processes; `main` only maps
//! results to exit codes. Everything a command writes goes through
//! atomic whole-file writes, and every run is a pure function of
//! (config, seed), so re-runs produce byte-identical artifacts.

use std::collections::BTreeMap;
use std::path::Path;

use fgl_core::checkpoint::Checkpoint;
use fgl_core::config::RunConfig;
use fgl_core::dataset::{eval_indices, support_batch, BalancedSampler, Corpus, EpisodeSampler};
use fgl_core::dpnet::{BackboneConfig, DpnetModel};
use fgl_core::fgl::{adapt, meta_train_generator, ControlGenerator, ControlPolicy};
use fgl_core::gradcheck;
use fgl_core::ioutil::atomic_write;
use fgl_core::metrics::MetricsReport;
use fgl_core::rng::Rng;
use fgl_core::synthdata::{average_spectrum, generate_corpus, Image};
use fgl_core::trainer::{score_indices, train};
use fgl_core::{Error, Result};
use serde::Serialize;

/// Loads the run configuration, applying the optional seed override.
pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn backbone_for(cfg: &RunConfig) -> BackboneConfig {
    BackboneConfig {
        image_size: cfg.image_size,
        ..BackboneConfig::default()
    }
}

/// Allocates a model of the configured geometry and fills it from the
/// checkpoint's model section.
pub fn load_model(cfg: &RunConfig, path: &Path) -> Result<DpnetModel> {
    let mut model = DpnetModel::init(backbone_for(cfg), &mut Rng::new(0))?;
    Checkpoint::load(path)?.load_model(&mut model)?;
    Ok(model)
}

fn load_generator(model: &DpnetModel, path: &Path) -> Result<ControlGenerator> {
    let mut gen = ControlGenerator::init(model.layer_count(), &mut Rng::new(0))?;
    Checkpoint::load(path)?.load_generator(&mut gen)?;
    Ok(gen)
}

fn save_model(model: &DpnetModel, path: &Path) -> Result<()> {
    let mut ckpt = Checkpoint::default();
    ckpt.put_model(model);
    ckpt.save(path)
}

/// Generates the synthetic corpus described by the config.
pub fn cmd_gen_data(cfg: &RunConfig) -> Result<()> {
    let manifest = generate_corpus(&cfg.corpus_config())?;
    println!(
        "wrote {} samples under {} (config digest {})",
        manifest.rows.len(),
        cfg.corpus_dir.display(),
        cfg.digest()
    );
    Ok(())
}

/// Writes per-technique average spectra (PGM grid + radial CSV) for every
/// technique found in the corpus, reals included.
pub fn cmd_spectrum(dir: &Path, out: Option<&Path>) -> Result<()> {
    let corpus = Corpus::load(dir)?;
    let out_dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| dir.join("spectra"));
    std::fs::create_dir_all(&out_dir)?;

    let mut groups: BTreeMap<&str, Vec<Image>> = BTreeMap::new();
    for s in &corpus.samples {
        groups.entry(&s.technique).or_default().push(Image {
            pixels: s.pixels.clone(),
            size: corpus.image_size,
        });
    }
    for (technique, images) in groups {
        let spectrum = average_spectrum(&images)?;
        let grid_path = out_dir.join(format!("spectrum-{technique}.pgm"));
        let csv_path = out_dir.join(format!("spectrum-{technique}.csv"));
        atomic_write(&grid_path, &spectrum.grid_pgm())?;
        atomic_write(&csv_path, spectrum.radial_csv().as_bytes())?;
        println!(
            "{technique}: {} images -> {} + {}",
            images.len(),
            grid_path.display(),
            csv_path.display()
        );
    }
    Ok(())
}

/// Stage-1 training: logs per-epoch loss, saves the best-validation-AUC
/// checkpoint.
pub fn cmd_train(cfg: &RunConfig, out: Option<&Path>) -> Result<()> {
    let corpus = Corpus::load(&cfg.corpus_dir)?;
    let mut rng = Rng::new(cfg.seed);
    let (best, log) = train(cfg, &corpus, &mut rng)?;
    for (i, (loss, auc)) in log.epoch_losses.iter().zip(&log.val_auc).enumerate() {
        println!("epoch {}: loss {:.6} val_auc {:.4}", i + 1, loss, auc);
    }
    let path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.out_dir.join("model.ckpt"));
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    save_model(&best, &path)?;
    println!(
        "saved best epoch {} (val_auc {:.4}) to {}",
        log.best_epoch + 1,
        log.val_auc[log.best_epoch],
        path.display()
    );
    Ok(())
}

/// Meta-trains the control generator on leave-one-out episodes over the
/// known techniques and writes its checkpoint.
pub fn cmd_meta_train(cfg: &RunConfig, model_path: &Path, out: Option<&Path>) -> Result<()> {
    let corpus = Corpus::load(&cfg.corpus_dir)?;
    let model = load_model(cfg, model_path)?;
    let master = Rng::new(cfg.seed);
    let mut gen = ControlGenerator::init(model.layer_count(), &mut master.derive("generator-init"))?;

    let sampler = EpisodeSampler::new(
        &corpus,
        &cfg.known,
        cfg.fgl.shots,
        cfg.query_per_class,
        cfg.batch_size,
        cfg.fgl.inner_steps,
    )?;
    let mut draw = |rng: &mut Rng| sampler.draw(rng);
    let losses = meta_train_generator(
        &mut gen,
        &model,
        &mut draw,
        cfg.meta_episodes,
        &cfg.fgl,
        &cfg.weights,
        &mut master.derive("episodes"),
    )?;
    for (i, l) in losses.iter().enumerate() {
        println!("episode {}: query loss {:.6}", i + 1, l);
    }

    let path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.out_dir.join("generator.ckpt"));
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut ckpt = Checkpoint::default();
    ckpt.put_generator(&gen);
    ckpt.save(&path)?;
    println!("saved generator after {} episodes to {}", losses.len(), path.display());
    Ok(())
}

/// Everything the adapt command decided, written next to the checkpoint.
#[derive(Debug, Serialize)]
pub struct AdaptReport {
    pub technique: String,
    pub k: usize,
    pub force_null: bool,
    pub inner_steps: usize,
    /// Manifest paths of the consumed support samples, fakes first.
    pub support_samples: Vec<String>,
    /// Adaptation loss at each inner step.
    pub step_losses: Vec<f64>,
    pub seed: u64,
    pub config_digest: String,
}

/// K-shot adaptation of a trained model toward one unknown technique.
pub fn cmd_adapt(
    cfg: &RunConfig,
    model_path: &Path,
    gen_path: &Path,
    technique: &str,
    k: usize,
    force_null: bool,
    out: Option<&Path>,
) -> Result<()> {
    if !cfg.unknown.iter().any(|t| t == technique) {
        return Err(Error::Config(format!(
            "technique '{technique}' is not in the unknown list {:?}",
            cfg.unknown
        )));
    }
    let corpus = Corpus::load(&cfg.corpus_dir)?;
    let model = load_model(cfg, model_path)?;
    let generator = load_generator(&model, gen_path)?;

    let master = Rng::new(cfg.seed);
    let (support, support_samples) =
        support_batch(&corpus, technique, k, &mut master.derive("support"))?;
    let mut sampler = BalancedSampler::new(
        &corpus,
        &cfg.known,
        "train",
        cfg.batch_size,
        master.derive("source"),
    )?;
    let mut source = || sampler.next_batch();

    let policy = if force_null || cfg.fgl.force_null {
        ControlPolicy::ForceNull
    } else {
        ControlPolicy::FromGenerator(&generator)
    };
    let outcome = adapt(&model, &policy, &support, &mut source, &cfg.fgl, &cfg.weights)?;

    let path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.out_dir.join(format!("adapted-{technique}-{k}shot.ckpt")));
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    save_model(&outcome.model, &path)?;

    let report = AdaptReport {
        technique: technique.to_string(),
        k,
        force_null: matches!(policy, ControlPolicy::ForceNull),
        inner_steps: cfg.fgl.inner_steps,
        support_samples,
        step_losses: outcome.trace.iter().map(|s| s.loss).collect(),
        seed: cfg.seed,
        config_digest: cfg.digest(),
    };
    let report_path = path.with_extension("json");
    let mut text = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Data(format!("report encoding failed: {e}")))?;
    text.push('\n');
    atomic_write(&report_path, text.as_bytes())?;
    println!(
        "adapted to {technique} ({k}-shot, {} steps) -> {} + {}",
        report.step_losses.len(),
        path.display(),
        report_path.display()
    );
    Ok(())
}

/// Scores the test split (reals + one technique's fakes) and writes the
/// metrics report as JSON and CSV.
pub fn cmd_eval(cfg: &RunConfig, model_path: &Path, technique: &str, out: Option<&Path>) -> Result<()> {
    let corpus = Corpus::load(&cfg.corpus_dir)?;
    let model = load_model(cfg, model_path)?;
    let indices = eval_indices(&corpus, technique, "test");
    if indices.is_empty() {
        return Err(Error::Data(format!(
            "no test samples for technique '{technique}'"
        )));
    }
    let scores = score_indices(&model, &corpus, &indices)?;
    let labels: Vec<f64> = indices.iter().map(|&i| corpus.samples[i].label).collect();
    let techniques: Vec<String> = indices
        .iter()
        .map(|&i| corpus.samples[i].technique.clone())
        .collect();
    let report = MetricsReport::from_scores(&scores, &labels, &techniques, cfg.seed, &cfg.digest())?;

    let json_path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.out_dir.join(format!("eval-{technique}.json")));
    if let Some(parent) = json_path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let csv_path = json_path.with_extension("csv");
    atomic_write(&json_path, report.to_json()?.as_bytes())?;
    atomic_write(&csv_path, report.to_csv().as_bytes())?;
    let auc = report
        .overall
        .auc
        .map_or("n/a".to_string(), |a| format!("{a:.4}"));
    println!(
        "{technique}: acc {:.4} auc {auc} ({} reals, {} fakes) -> {}",
        report.overall.acc,
        report.overall.reals,
        report.overall.fakes,
        json_path.display()
    );
    Ok(())
}

/// Finite-difference verification; returns whether every component passed.
pub fn cmd_grad_check(seed: u64, fault: Option<&str>) -> Result<bool> {
    let report = gradcheck::run_with_fault(seed, fault)?;
    print!("{}", report.render());
    println!(
        "gradient check {} (tolerance {:.0e})",
        if report.passed() { "PASSED" } else { "FAILED" },
        report.tolerance
    );
    Ok(report.passed())
}
