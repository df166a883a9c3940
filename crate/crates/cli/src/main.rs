//! The `fgl` binary: synthetic-corpus generation, spectral analysis,
//! training, meta-training, k-shot adaptation, evaluation, and gradient
//! verification. Exit codes: 0 success, 1 failed check, 2 usage or
//! configuration error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "fgl", version, about = "Frequency-guided fake-image detection workbench")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration file (`key = value` lines); defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> fgl_core::Result<fgl_core::config::RunConfig> {
        fgl_cli::load_config(self.config.as_deref(), self.seed)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic corpus described by the config.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Write per-technique average spectra of a generated corpus.
    Spectrum {
        /// Corpus directory (contains manifest.csv).
        dir: PathBuf,
        /// Output directory; defaults to DIR/spectra.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the detector on the known techniques.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint path; defaults to OUT_DIR/model.ckpt.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Meta-train the update-control generator on leave-one-out episodes.
    MetaTrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Trained model checkpoint.
        #[arg(long)]
        model: PathBuf,
        /// Generator checkpoint path; defaults to OUT_DIR/generator.ckpt.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Adapt a trained model to an unknown technique with k-shot support.
    Adapt {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Trained model checkpoint.
        #[arg(long)]
        model: PathBuf,
        /// Meta-trained generator checkpoint.
        #[arg(long)]
        generator: PathBuf,
        /// Unknown technique to adapt toward.
        #[arg(long)]
        technique: String,
        /// Support samples per class.
        #[arg(long, default_value_t = 1)]
        k: usize,
        /// Use the identity update (l=0, w=1) instead of the generator.
        #[arg(long)]
        force_null: bool,
        /// Adapted checkpoint path; report goes next to it as .json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split of one technique.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Model checkpoint to score.
        #[arg(long)]
        model: PathBuf,
        /// Technique whose fakes join the reals in the test set.
        #[arg(long)]
        technique: String,
        /// Report path (JSON); the CSV lands next to it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Verify analytic gradients against central finite differences.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Self-test: flip the named component's gradients; must fail.
        #[arg(long, hide = true)]
        fault: Option<String>,
    },
}

fn run(cli: Cli) -> fgl_core::Result<bool> {
    match cli.cmd {
        Cmd::GenData { cfg } => fgl_cli::cmd_gen_data(&cfg.load()?).map(|()| true),
        Cmd::Spectrum { dir, out } => fgl_cli::cmd_spectrum(&dir, out.as_deref()).map(|()| true),
        Cmd::Train { cfg, out } => fgl_cli::cmd_train(&cfg.load()?, out.as_deref()).map(|()| true),
        Cmd::MetaTrain { cfg, model, out } => {
            fgl_cli::cmd_meta_train(&cfg.load()?, &model, out.as_deref()).map(|()| true)
        }
        Cmd::Adapt {
            cfg,
            model,
            generator,
            technique,
            k,
            force_null,
            out,
        } => fgl_cli::cmd_adapt(
            &cfg.load()?,
            &model,
            &generator,
            &technique,
            k,
            force_null,
            out.as_deref(),
        )
        .map(|()| true),
        Cmd::Eval {
            cfg,
            model,
            technique,
            out,
        } => fgl_cli::cmd_eval(&cfg.load()?, &model, &technique, out.as_deref()).map(|()| true),
        Cmd::GradCheck { seed, fault } => fgl_cli::cmd_grad_check(seed, fault.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests land here too; let clap pick the
            // conventional code (0 for those, 2 for usage errors).
            e.exit();
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
