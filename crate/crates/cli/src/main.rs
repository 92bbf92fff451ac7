use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};
use medctx_cli::ablate::{self, DEFAULT_BETAS, DEFAULT_RATIOS};
use medctx_cli::config::EvalSplit;
use medctx_cli::dataset::{self, Dataset};
use medctx_cli::eval::{self, EvalOptions, Weights};
use medctx_cli::rundir::guarded;
use medctx_cli::train::{self, TrainOptions, CONFIG};
use medctx_cli::{gradcheck, RunConfig};

/// Masked-context training for volumetric segmentation on synthetic phantoms.
///
/// Settings are resolved from built-in defaults, then the --config file, then
/// --set overrides, then the dedicated flags of each command.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file of `section.key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set train.lr=0.001`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(self.config.as_deref())?;
        for s in &self.set {
            cfg.apply_override(s)?;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainKnobs {
    /// Supervised loss only (no masked branch, no consistency term).
    #[arg(long)]
    baseline: bool,
    /// Train without a teacher; the consistency term is switched off.
    #[arg(long)]
    no_teacher: bool,
    #[arg(long)]
    mask_ratio: Option<f64>,
    /// Weight of the consistency term.
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of training cases used (the first ones of the split).
    #[arg(long)]
    shots: Option<usize>,
}

impl TrainKnobs {
    fn apply(&self, cfg: &mut RunConfig) {
        if self.baseline {
            cfg.train.loss.include_msl = false;
            cfg.train.loss.include_cl = false;
        }
        if self.no_teacher {
            cfg.train.use_teacher = false;
            cfg.train.loss.include_cl = false;
        }
        if let Some(v) = self.mask_ratio {
            cfg.train.mask_ratio = v;
        }
        if let Some(v) = self.beta {
            cfg.train.loss.beta = v;
        }
        if let Some(v) = self.steps {
            cfg.train.steps = v;
        }
        if let Some(v) = self.seed {
            cfg.train.seed = v;
        }
        if let Some(v) = self.shots {
            cfg.data.n_train = v;
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom dataset with a manifest.
    GenerateData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model into a run directory.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        knobs: TrainKnobs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue the run in --out from its checkpoint, with its stored config.
        #[arg(long)]
        resume: bool,
        /// Stop and checkpoint once this many steps are complete.
        #[arg(long)]
        stop_after: Option<u64>,
        /// Print losses every this many steps (0 for silence).
        #[arg(long, default_value_t = 50)]
        log_every: u64,
    },
    /// Score a checkpoint with per-class DSC and HD95.
    Eval {
        #[arg(long, required_unless_present = "ground_truth")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Score the EMA teacher instead of the student.
        #[arg(long, conflicts_with = "ground_truth")]
        use_teacher: bool,
        /// Score the labels against themselves.
        #[arg(long)]
        ground_truth: bool,
        #[arg(long, default_value = "test")]
        split: EvalSplit,
        /// Output directory; defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one model per sweep cell and seed and tabulate the results.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        knobs: TrainKnobs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma list of ratio, loss, beta, or all.
        #[arg(long, default_value = "all")]
        sweep: String,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_RATIOS)]
        ratios: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_BETAS)]
        betas: Vec<f64>,
        /// Training seeds shared by every cell.
        #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3])]
        seeds: Vec<u64>,
    },
    /// Finite-difference check of every differentiable op and a tiny network.
    GradCheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        /// Corrupt each case's backward pass; the suite must then fail.
        #[arg(long)]
        inject_bug: bool,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData { config, out } => {
            let cfg = config.resolve()?;
            cfg.validate()?;
            let m = guarded(&out, || dataset::generate(&cfg, &out))?;
            println!("wrote {} cases ({} train, {} test) to {}", m.ids.len(), m.train.len(), m.test.len(), out.display());
        }
        Command::Train { config, knobs, data, out, resume, stop_after, log_every } => {
            let cfg = if resume {
                if config.config.is_some() || !config.set.is_empty() {
                    bail!("--resume uses the config stored in the run directory; drop --config and --set");
                }
                let mut cfg = RunConfig::from_file(&out.join(CONFIG))?;
                knobs.apply(&mut cfg);
                cfg
            } else {
                let mut cfg = config.resolve()?;
                knobs.apply(&mut cfg);
                cfg
            };
            let opts = TrainOptions { resume, stop_after, log_every };
            let s = guarded(&out, || {
                let data = Dataset::load(&data)?;
                train::run(&cfg, &data, &out, &opts)
            })?;
            match &s.test {
                Some(t) => println!(
                    "{} steps, test DSC {} HD95 {}",
                    s.completed,
                    fmt(t.mean_dsc),
                    fmt(t.mean_hd95)
                ),
                None => println!("stopped after {} of {} steps", s.completed, s.steps),
            }
        }
        Command::Eval { checkpoint, data, use_teacher, ground_truth, split, out } => {
            let weights = match (ground_truth, use_teacher) {
                (true, _) => Weights::GroundTruth,
                (false, true) => Weights::Teacher,
                (false, false) => Weights::Student,
            };
            let out = match (&out, &checkpoint) {
                (Some(o), _) => o.clone(),
                (None, Some(c)) => c.parent().map(Path::to_path_buf).unwrap_or_default(),
                (None, None) => bail!("--out is required with --ground-truth"),
            };
            let opts = EvalOptions { weights, split };
            let s = guarded(&out, || {
                let data = Dataset::load(&data)?;
                eval::run(checkpoint.as_deref(), &data, &opts, &out)
            })?;
            println!("{} on {} cases: DSC {} HD95 {}", weights.name(), s.cases, fmt(s.mean_dsc), fmt(s.mean_hd95));
        }
        Command::Ablate { config, knobs, data, out, sweep, ratios, betas, seeds } => {
            let mut cfg = config.resolve()?;
            knobs.apply(&mut cfg);
            let sweeps = ablate::parse_sweeps(&sweep)?;
            let cells = ablate::cells(&cfg, &sweeps, &ratios, &betas)?;
            let rows = guarded(&out, || {
                let data = Dataset::load(&data)?;
                ablate::run(&cells, &seeds, &data, &out, true)
            })?;
            print!("{}", ablate::table(&rows));
        }
        Command::GradCheck { seeds, inject_bug } => {
            let report = gradcheck::run(seeds, inject_bug, &mut std::io::stdout())?;
            if !report.all_passed() {
                bail!("gradient check failed");
            }
        }
    }
    Ok(())
}

fn fmt(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |v| format!("{v:.4}"))
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
