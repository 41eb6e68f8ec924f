use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use glat::commands::{dispatch, exit_code, HeatmapSource, Invocation, EXIT_USAGE};
use glat::config::Config;
use glat::irm::ScoreMode;
use glat::Result;

/// Slide classification with iterative patch selection and graph Laplacian
/// attention.
#[derive(Parser)]
#[command(name = "glat", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// `key = value` config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory (`labels.csv` plus `<slide>.emb` files).
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    output_dir: PathBuf,
    /// Overrides the seed governing the command: `synth_seed` for synth,
    /// `irm_seed` for select, `seed` otherwise.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth(Common),
    /// Run patch selection and write the selected ids.
    Select {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        t: Option<usize>,
        /// `received` or `row-mean`.
        #[arg(long)]
        score_mode: Option<String>,
        /// Also write one per-iteration trace per slide.
        #[arg(long)]
        trace: bool,
    },
    /// Train on a seeded train/validation split.
    Train(Common),
    /// Predict class probabilities with a saved checkpoint.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Export per-slide score maps.
    Heatmap {
        #[command(flatten)]
        common: Common,
        /// `irm` or `gla`.
        #[arg(long, default_value = "irm")]
        source: String,
        /// Required for `--source gla`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// K-fold cross-validation.
    Crossval(Common),
}

fn load_config(common: &Common) -> Result<Config> {
    match &common.config {
        Some(path) => Config::load(path),
        None => Ok(Config::default()),
    }
}

fn run(cli: Cli) -> Result<String> {
    let (name, common, checkpoint, source, traces) = match &cli.command {
        Command::Synth(c) => ("synth", c, None, "irm", false),
        Command::Select { common, trace, .. } => ("select", common, None, "irm", *trace),
        Command::Train(c) => ("train", c, None, "irm", false),
        Command::Infer { common, checkpoint } => ("infer", common, Some(checkpoint), "irm", false),
        Command::Heatmap { common, source, checkpoint } => ("heatmap", common, checkpoint.as_ref(), source.as_str(), false),
        Command::Crossval(c) => ("crossval", c, None, "irm", false),
    };
    let mut cfg = load_config(common)?;
    if let Some(seed) = common.seed {
        match name {
            "synth" => cfg.synth.seed = seed,
            "select" => cfg.irm_seed = seed,
            _ => cfg.seed = seed,
        }
    }
    if let Command::Select { m, t, score_mode, .. } = &cli.command {
        if let Some(m) = m {
            cfg.m = *m;
        }
        if let Some(t) = t {
            cfg.t = *t;
        }
        if let Some(mode) = score_mode {
            cfg.score_mode = mode.parse::<ScoreMode>()?;
        }
        cfg.validate()?;
    }
    let source: HeatmapSource = source.parse()?;
    dispatch(
        name,
        &Invocation {
            config: &cfg,
            input: common.input.as_deref(),
            output_dir: &common.output_dir,
            checkpoint: checkpoint.map(PathBuf::as_path),
            source,
            traces,
        },
    )
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE as u8 } else { 0 });
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
