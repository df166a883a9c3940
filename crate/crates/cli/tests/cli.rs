//! Drives the compiled `fgl` binary the way a user would: corpus
//! generation, spectrum summaries, training, meta-training, adaptation,
//! evaluation, and the gradient self-check, plus the exit-code contract
//! (0 success, 1 failed check, 2 usage or configuration error).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use fgl_core::checkpoint::Checkpoint;
use fgl_core::dataset::Corpus;
use fgl_core::fgl::ControlGenerator;
use fgl_core::metrics::accuracy;
use fgl_core::rng::Rng;
use fgl_core::trainer::score_indices;
use tempfile::TempDir;

fn fgl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fgl"))
        .args(args)
        .output()
        .expect("spawn fgl")
}

fn fgl_ok(args: &[&str]) -> String {
    let out = fgl(args);
    assert!(
        out.status.success(),
        "fgl {args:?} exited {:?}\nstdout:\n{}stderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr),
    );
    String::from_utf8(out.stdout).expect("stdout is utf-8")
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("process was signalled")
}

/// Writes a run config with small-corpus defaults, applying overrides
/// last-wins (the parser itself rejects duplicate keys).
fn write_config(path: &Path, corpus: &Path, out_dir: &Path, overrides: &[(&str, &str)]) {
    let mut pairs: Vec<(&str, String)> = vec![
        ("corpus_dir", corpus.display().to_string()),
        ("out_dir", out_dir.display().to_string()),
        ("known", "grid, bandcut, seam".into()),
        ("unknown", "ring".into()),
        ("batch_size", "8".into()),
        ("epochs", "1".into()),
        ("lr", "0.003".into()),
        ("icc_lambda", "0.0".into()),
        ("nu", "0.0".into()),
        ("train_count", "24".into()),
        ("support_count", "6".into()),
        ("query_count", "6".into()),
        ("test_count", "8".into()),
        ("seed", "1".into()),
    ];
    for &(key, value) in overrides {
        match pairs.iter_mut().find(|(k, _)| *k == key) {
            Some(pair) => pair.1 = value.to_string(),
            None => pairs.push((key, value.to_string())),
        }
    }
    let text: String = pairs
        .iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect();
    fs::write(path, text).expect("write config");
}

/// Every file under `root`, as (relative path, bytes), sorted by path.
fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        for entry in fs::read_dir(dir).expect("read_dir") {
            let path = entry.expect("dir entry").path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, fs::read(&path).expect("read file")));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

fn read(path: &Path) -> Vec<u8> {
    fs::read(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

/// Pulls the loss column out of `epoch N: loss L val_auc A` lines.
fn epoch_losses(stdout: &str) -> Vec<f64> {
    stdout
        .lines()
        .filter(|l| l.starts_with("epoch "))
        .map(|l| {
            let mut it = l.split_whitespace();
            it.nth(3).expect("loss field").parse().expect("loss value")
        })
        .collect()
}

/// Pulls the query-loss column out of `episode N: query loss L` lines.
fn episode_losses(stdout: &str) -> Vec<f64> {
    stdout
        .lines()
        .filter(|l| l.starts_with("episode "))
        .map(|l| {
            let mut it = l.split_whitespace();
            it.nth(4).expect("loss field").parse().expect("loss value")
        })
        .collect()
}

/// Shared small corpus (24 train per class) with a one-epoch model and a
/// briefly meta-trained generator; built once, read by many tests. Every
/// test that writes output passes its own --out, so the fixture stays
/// immutable after construction.
struct SmallFixture {
    _dir: TempDir,
    corpus: PathBuf,
    config: PathBuf,
    model: PathBuf,
    generator: PathBuf,
}

fn small() -> &'static SmallFixture {
    static FIXTURE: OnceLock<SmallFixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dir = TempDir::new().expect("tempdir");
        let corpus = dir.path().join("corpus");
        let out = dir.path().join("out");
        let config = dir.path().join("run.cfg");
        write_config(&config, &corpus, &out, &[]);
        let cfg = config.to_str().unwrap();
        fgl_ok(&["gen-data", "--config", cfg]);
        let model = out.join("model.ckpt");
        fgl_ok(&["train", "--config", cfg, "--out", model.to_str().unwrap()]);
        let generator = out.join("generator.ckpt");
        let gen_cfg = dir.path().join("gen.cfg");
        write_config(&gen_cfg, &corpus, &out, &[("meta_episodes", "2"), ("query_per_class", "4")]);
        fgl_ok(&[
            "meta-train",
            "--config",
            gen_cfg.to_str().unwrap(),
            "--model",
            model.to_str().unwrap(),
            "--out",
            generator.to_str().unwrap(),
        ]);
        SmallFixture { _dir: dir, corpus, config, model, generator }
    })
}

/// Shared desk-scale corpus (96 train per class) with a model trained to
/// separate the known families; used by the accuracy and meta-training
/// trend tests.
struct DeskFixture {
    _dir: TempDir,
    corpus: PathBuf,
    config: PathBuf,
    model: PathBuf,
}

fn desk() -> &'static DeskFixture {
    static FIXTURE: OnceLock<DeskFixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dir = TempDir::new().expect("tempdir");
        let corpus = dir.path().join("corpus");
        let out = dir.path().join("out");
        let config = dir.path().join("run.cfg");
        write_config(
            &config,
            &corpus,
            &out,
            &[("epochs", "16"), ("train_count", "96"), ("test_count", "20")],
        );
        let cfg = config.to_str().unwrap();
        fgl_ok(&["gen-data", "--config", cfg]);
        let model = out.join("model.ckpt");
        fgl_ok(&["train", "--config", cfg, "--out", model.to_str().unwrap()]);
        DeskFixture { _dir: dir, corpus, config, model }
    })
}

#[test]
fn generated_corpus_trees_are_byte_identical_for_a_seed() {
    let dir = TempDir::new().unwrap();
    let small_counts = [
        ("train_count", "6"),
        ("support_count", "2"),
        ("query_count", "2"),
        ("test_count", "2"),
    ];
    let mut trees = Vec::new();
    for run in ["a", "b"] {
        let corpus = dir.path().join(run);
        let config = dir.path().join(format!("{run}.cfg"));
        write_config(&config, &corpus, &dir.path().join("out"), &small_counts);
        let stdout = fgl_ok(&["gen-data", "--config", config.to_str().unwrap()]);
        assert!(stdout.starts_with("wrote "), "unexpected stdout: {stdout}");
        trees.push(tree(&corpus));
    }
    assert!(!trees[0].is_empty(), "gen-data produced no files");
    assert_eq!(trees[0], trees[1], "same seed produced different corpus trees");
}

#[test]
fn gen_data_reports_the_manifest_sample_count() {
    let dir = TempDir::new().unwrap();
    let corpus = dir.path().join("corpus");
    let config = dir.path().join("run.cfg");
    write_config(
        &config,
        &corpus,
        &dir.path().join("out"),
        &[
            ("train_count", "4"),
            ("support_count", "2"),
            ("query_count", "2"),
            ("test_count", "2"),
        ],
    );
    let stdout = fgl_ok(&["gen-data", "--config", config.to_str().unwrap()]);
    let manifest = fs::read_to_string(corpus.join("manifest.csv")).unwrap();
    let rows = manifest.lines().count() - 1;
    assert!(
        stdout.starts_with(&format!("wrote {rows} samples")),
        "stdout {stdout:?} does not match {rows} manifest rows"
    );
}

#[test]
fn spectrum_of_a_dir_without_a_corpus_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let out = fgl(&["spectrum", dir.path().to_str().unwrap()]);
    assert_eq!(exit_code(&out), 2);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("error"), "no diagnostic on stderr: {stderr}");
}

#[test]
fn spectrum_writes_a_grid_and_radial_profile_per_technique() {
    let fx = small();
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("spectra");
    let stdout = fgl_ok(&[
        "spectrum",
        fx.corpus.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    for technique in ["real", "grid", "bandcut", "seam", "ring"] {
        assert!(stdout.contains(technique), "stdout misses {technique}: {stdout}");
        let pgm = read(&out.join(format!("spectrum-{technique}.pgm")));
        assert!(pgm.starts_with(b"P5"), "{technique} grid is not a P5 PGM");
        let csv = fs::read_to_string(out.join(format!("spectrum-{technique}.csv"))).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("radius,energy"));
        // One radial bin per integer frequency up to Nyquist: 32/2 = 16.
        assert_eq!(lines.count(), 16, "{technique} radial profile row count");
    }
}

#[test]
fn one_epoch_training_writes_a_loadable_checkpoint() {
    let fx = small();
    let dir = TempDir::new().unwrap();
    let model = dir.path().join("model.ckpt");
    let stdout = fgl_ok(&[
        "train",
        "--config",
        fx.config.to_str().unwrap(),
        "--out",
        model.to_str().unwrap(),
    ]);
    assert!(stdout.contains("epoch 1: loss"), "missing epoch line: {stdout}");
    assert!(stdout.contains("saved best epoch"), "missing save line: {stdout}");
    let cfg = fgl_cli::load_config(Some(&fx.config), None).unwrap();
    let loaded = fgl_cli::load_model(&cfg, &model).expect("checkpoint loads back");
    assert_eq!(loaded.param_count(), 28_509);
}

#[test]
fn training_loss_decreases_over_five_epochs_for_most_seeds() {
    let fx = small();
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("run.cfg");
    write_config(&config, &fx.corpus, dir.path(), &[("epochs", "5")]);
    let mut down = 0;
    for seed in ["1", "2", "3", "4", "5"] {
        let model = dir.path().join(format!("model-{seed}.ckpt"));
        let stdout = fgl_ok(&[
            "train",
            "--config",
            config.to_str().unwrap(),
            "--seed",
            seed,
            "--out",
            model.to_str().unwrap(),
        ]);
        let losses = epoch_losses(&stdout);
        assert_eq!(losses.len(), 5, "expected five epoch lines: {stdout}");
        if losses[4] < losses[0] {
            down += 1;
        }
    }
    assert!(down >= 4, "loss decreased in only {down}/5 seeds");
}

#[test]
fn trained_model_reaches_desk_accuracy_on_known_families() {
    let fx = desk();
    let cfg = fgl_cli::load_config(Some(&fx.config), None).unwrap();
    let model = fgl_cli::load_model(&cfg, &fx.model).unwrap();
    let corpus = Corpus::load(&fx.corpus).unwrap();
    let mut indices = corpus.indices("real", "train");
    for technique in ["grid", "bandcut", "seam"] {
        indices.extend(corpus.indices(technique, "train"));
    }
    let scores = score_indices(&model, &corpus, &indices).unwrap();
    let labels: Vec<f64> = indices.iter().map(|&i| corpus.samples[i].label).collect();
    let acc = accuracy(&scores, &labels, 0.5).unwrap();
    assert!(acc >= 0.90, "train accuracy {acc:.4} on known families");
}

#[test]
fn zero_meta_episodes_leave_the_generator_at_initialization() {
    let fx = small();
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("run.cfg");
    write_config(&config, &fx.corpus, dir.path(), &[("meta_episodes", "0")]);
    let produced = dir.path().join("generator.ckpt");
    let stdout = fgl_ok(&[
        "meta-train",
        "--config",
        config.to_str().unwrap(),
        "--model",
        fx.model.to_str().unwrap(),
        "--out",
        produced.to_str().unwrap(),
    ]);
    assert!(stdout.contains("after 0 episodes"), "unexpected stdout: {stdout}");

    // Reconstruct the documented initialization path: generator seeded
    // from the run seed's "generator-init" stream, sized to the model.
    let cfg = fgl_cli::load_config(Some(&config), None).unwrap();
    let model = fgl_cli::load_model(&cfg, &fx.model).unwrap();
    let gen =
        ControlGenerator::init(model.layer_count(), &mut Rng::new(cfg.seed).derive("generator-init"))
            .unwrap();
    let expected = dir.path().join("expected.ckpt");
    let mut ckpt = Checkpoint::default();
    ckpt.put_generator(&gen);
    ckpt.save(&expected).unwrap();
    assert_eq!(read(&produced), read(&expected), "generator drifted from initialization");
}

#[test]
fn meta_training_is_deterministic_for_a_fixed_seed() {
    let fx = small();
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("run.cfg");
    write_config(
        &config,
        &fx.corpus,
        dir.path(),
        &[("meta_episodes", "3"), ("query_per_class", "4")],
    );
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let gen = dir.path().join(format!("{run}.ckpt"));
        let stdout = fgl_ok(&[
            "meta-train",
            "--config",
            config.to_str().unwrap(),
            "--model",
            fx.model.to_str().unwrap(),
            "--out",
            gen.to_str().unwrap(),
        ]);
        outputs.push((episode_losses(&stdout), read(&gen)));
    }
    assert_eq!(outputs[0].0, outputs[1].0, "episode losses differ between runs");
    assert_eq!(outputs[0].1, outputs[1].1, "generator checkpoints differ between runs");
}

#[test]
fn meta_training_query_loss_improves_across_episodes() {
    let fx = desk();
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("run.cfg");
    // Guided updates strong enough to matter on a trained model, and a
    // generator learning rate that moves within 40 episodes.
    write_config(
        &config,
        &fx.corpus,
        dir.path(),
        &[
            ("train_count", "96"),
            ("test_count", "20"),
            ("meta_episodes", "40"),
            ("inner_steps", "2"),
            ("l_base", "0.003"),
            ("meta_lr", "0.02"),
            ("query_per_class", "6"),
        ],
    );
    let mut improved = 0;
    for seed in ["1", "2", "3", "4", "5"] {
        let gen = dir.path().join(format!("gen-{seed}.ckpt"));
        let stdout = fgl_ok(&[
            "meta-train",
            "--config",
            config.to_str().unwrap(),
            "--seed",
            seed,
            "--model",
            fx.model.to_str().unwrap(),
            "--out",
            gen.to_str().unwrap(),
        ]);
        let losses = episode_losses(&stdout);
        assert_eq!(losses.len(), 40, "expected forty episode lines");
        let first: f64 = losses[..10].iter().sum::<f64>() / 10.0;
        let last: f64 = losses[30..].iter().sum::<f64>() / 10.0;
        if last < first {
            improved += 1;
        }
    }
    assert!(improved >= 4, "query loss improved in only {improved}/5 seeds");
}

#[test]
fn adaptation_consumes_exactly_k_shots_per_class() {
    let fx = small();
    let dir = TempDir::new().unwrap();
    let adapted = dir.path().join("adapted.ckpt");
    fgl_ok(&[
        "adapt",
        "--config",
        fx.config.to_str().unwrap(),
        "--model",
        fx.model.to_str().unwrap(),
        "--generator",
        fx.generator.to_str().unwrap(),
        "--technique",
        "ring",
        "--k",
        "5",
        "--out",
        adapted.to_str().unwrap(),
    ]);
    let report: serde_json::Value =
        serde_json::from_slice(&read(&dir.path().join("adapted.json"))).unwrap();
    assert_eq!(report["technique"], "ring");
    assert_eq!(report["k"], 5);
    let support: Vec<String> = report["support_samples"]
        .as_array()
        .expect("support_samples array")
        .iter()
        .map(|v| v.as_str().unwrap().to_string())
        .collect();
    assert_eq!(support.len(), 10, "k=5 must consume 5 fakes + 5 reals");
    assert!(support[..5].iter().all(|p| p.contains("ring")), "fakes first: {support:?}");
    assert!(support[5..].iter().all(|p| p.contains("real")), "reals last: {support:?}");
    let steps = report["step_losses"].as_array().unwrap().len();
    assert_eq!(steps, report["inner_steps"].as_u64().unwrap() as usize);
}

#[test]
fn forced_null_adaptation_returns_the_base_model_unchanged() {
    let fx = small();
    let dir = TempDir::new().unwrap();
    let adapted = dir.path().join("null.ckpt");
    fgl_ok(&[
        "adapt",
        "--config",
        fx.config.to_str().unwrap(),
        "--model",
        fx.model.to_str().unwrap(),
        "--generator",
        fx.generator.to_str().unwrap(),
        "--technique",
        "ring",
        "--force-null",
        "--out",
        adapted.to_str().unwrap(),
    ]);
    assert_eq!(
        read(&adapted),
        read(&fx.model),
        "null controls (w=1, l=0) must reproduce the base checkpoint"
    );
    let report: serde_json::Value =
        serde_json::from_slice(&read(&dir.path().join("null.json"))).unwrap();
    assert_eq!(report["force_null"], true);
}

#[test]
fn guided_adaptation_moves_at_least_one_layer() {
    let fx = small();
    let dir = TempDir::new().unwrap();
    let adapted = dir.path().join("guided.ckpt");
    fgl_ok(&[
        "adapt",
        "--config",
        fx.config.to_str().unwrap(),
        "--model",
        fx.model.to_str().unwrap(),
        "--generator",
        fx.generator.to_str().unwrap(),
        "--technique",
        "ring",
        "--out",
        adapted.to_str().unwrap(),
    ]);
    let cfg = fgl_cli::load_config(Some(&fx.config), None).unwrap();
    let base = fgl_cli::load_model(&cfg, &fx.model).unwrap();
    let tuned = fgl_cli::load_model(&cfg, &adapted).unwrap();
    let moved = base
        .named_tensors()
        .iter()
        .zip(tuned.named_tensors())
        .filter(|((_, a), (_, b))| a.data != b.data)
        .count();
    assert!(moved >= 1, "guided adaptation left every tensor untouched");
}

#[test]
fn adapting_toward_a_known_technique_is_a_config_error() {
    let fx = small();
    let out = fgl(&[
        "adapt",
        "--config",
        fx.config.to_str().unwrap(),
        "--model",
        fx.model.to_str().unwrap(),
        "--generator",
        fx.generator.to_str().unwrap(),
        "--technique",
        "grid",
    ]);
    assert_eq!(exit_code(&out), 2);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("grid"), "stderr should name the technique: {stderr}");
}

#[test]
fn evaluation_writes_matching_json_and_csv_reports() {
    let fx = small();
    let dir = TempDir::new().unwrap();
    let json_path = dir.path().join("eval-ring.json");
    let stdout = fgl_ok(&[
        "eval",
        "--config",
        fx.config.to_str().unwrap(),
        "--model",
        fx.model.to_str().unwrap(),
        "--technique",
        "ring",
        "--out",
        json_path.to_str().unwrap(),
    ]);
    assert!(stdout.starts_with("ring: acc "), "unexpected stdout: {stdout}");
    let report: serde_json::Value = serde_json::from_slice(&read(&json_path)).unwrap();
    let acc = report["overall"]["acc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    // Test split: 8 reals + 8 ring fakes per the fixture config.
    assert_eq!(report["overall"]["reals"], 8);
    assert_eq!(report["overall"]["fakes"], 8);
    let csv = fs::read_to_string(json_path.with_extension("csv")).unwrap();
    assert!(csv.lines().count() >= 2, "csv should have a header and rows: {csv}");
}

#[test]
fn evaluation_reports_are_byte_identical_across_reruns() {
    let fx = small();
    let dir = TempDir::new().unwrap();
    let mut reports = Vec::new();
    for run in ["a", "b"] {
        let json_path = dir.path().join(format!("{run}.json"));
        fgl_ok(&[
            "eval",
            "--config",
            fx.config.to_str().unwrap(),
            "--model",
            fx.model.to_str().unwrap(),
            "--technique",
            "ring",
            "--out",
            json_path.to_str().unwrap(),
        ]);
        reports.push((read(&json_path), read(&json_path.with_extension("csv"))));
    }
    assert_eq!(reports[0], reports[1], "eval reports differ between identical runs");
}

#[test]
fn retraining_with_the_same_seed_reproduces_the_checkpoint() {
    let fx = small();
    let dir = TempDir::new().unwrap();
    let mut checkpoints = Vec::new();
    for run in ["a", "b"] {
        let model = dir.path().join(format!("{run}.ckpt"));
        fgl_ok(&[
            "train",
            "--config",
            fx.config.to_str().unwrap(),
            "--out",
            model.to_str().unwrap(),
        ]);
        checkpoints.push(read(&model));
    }
    assert_eq!(checkpoints[0], checkpoints[1], "repeat training produced different weights");
}

#[test]
fn gradient_check_passes_and_reports_every_component() {
    let stdout = fgl_ok(&["grad-check", "--seed", "3"]);
    for component in ["fpf", "afrp", "bce", "icc", "fc", "dpnet"] {
        let line = stdout
            .lines()
            .find(|l| l.starts_with(component))
            .unwrap_or_else(|| panic!("no report line for {component}:\n{stdout}"));
        assert!(line.contains("PASS"), "{component} failed:\n{stdout}");
    }
    assert!(stdout.contains("gradient check PASSED"), "missing verdict: {stdout}");
}

#[test]
fn an_injected_derivative_sign_error_fails_the_gradient_check() {
    let out = fgl(&["grad-check", "--seed", "3", "--fault", "icc"]);
    assert_eq!(exit_code(&out), 1, "sign fault must exit 1");
    let stdout = String::from_utf8_lossy(&out.stdout);
    let icc = stdout.lines().find(|l| l.starts_with("icc")).expect("icc line");
    assert!(icc.contains("FAIL"), "faulted component not flagged:\n{stdout}");
    let bce = stdout.lines().find(|l| l.starts_with("bce")).expect("bce line");
    assert!(bce.contains("PASS"), "healthy component dragged down:\n{stdout}");
    assert!(stdout.contains("gradient check FAILED"), "missing verdict: {stdout}");
}

#[test]
fn usage_errors_exit_with_code_two() {
    let unknown = fgl(&["frobnicate"]);
    assert_eq!(exit_code(&unknown), 2);

    let dir = TempDir::new().unwrap();
    let config = dir.path().join("bad.cfg");
    fs::write(&config, "no_such_key = 1\n").unwrap();
    let bad_key = fgl(&["gen-data", "--config", config.to_str().unwrap()]);
    assert_eq!(exit_code(&bad_key), 2);
    let stderr = String::from_utf8_lossy(&bad_key.stderr);
    assert!(stderr.contains("no_such_key"), "stderr should name the bad key: {stderr}");
}

#[test]
fn help_and_version_exit_cleanly() {
    let help = fgl(&["--help"]);
    assert_eq!(exit_code(&help), 0);
    let text = String::from_utf8_lossy(&help.stdout);
    for verb in ["gen-data", "spectrum", "train", "meta-train", "adapt", "eval", "grad-check"] {
        assert!(text.contains(verb), "help misses {verb}");
    }
    assert_eq!(exit_code(&fgl(&["--version"])), 0);
}
