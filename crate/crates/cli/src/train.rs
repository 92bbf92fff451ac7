//! The `train` command: fit loop, metrics log, checkpoint and summary.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use medctx_core::trainer::{decode_checkpoint, encode_checkpoint, evaluate, fit};
use medctx_core::{CheckpointBundle32, StepMetrics};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::eval::{summarize, EvalSummary, Weights};
use crate::rundir::write_atomic;
use crate::{config_echo, VERSION};

pub const CHECKPOINT: &str = "checkpoint.mctx";
pub const METRICS: &str = "metrics.csv";
pub const EVALS: &str = "evals.csv";
pub const SUMMARY: &str = "summary.json";
pub const CONFIG: &str = "config.txt";

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Continue from the checkpoint already in the run directory.
    pub resume: bool,
    /// Stop (and checkpoint) once this many steps are complete.
    pub stop_after: Option<u64>,
    /// Print a progress line every this many steps (0 for silence).
    pub log_every: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FinalLoss {
    pub total: f64,
    pub sup: f64,
    pub msl: f64,
    pub cl: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub version: String,
    pub variant: String,
    pub seed: u64,
    pub steps: u64,
    pub completed: u64,
    pub finished: bool,
    pub seconds: f64,
    pub first_loss: Option<FinalLoss>,
    pub last_loss: Option<FinalLoss>,
    /// Student weights on the test split, once the run is finished.
    pub test: Option<EvalSummary>,
}

/// Short name for the loss setup of a run.
pub fn variant(cfg: &RunConfig) -> String {
    let l = &cfg.train.loss;
    let name = match (l.include_msl, l.include_cl) {
        (true, true) => "msl+cl",
        (true, false) => "msl",
        (false, true) => "cl",
        (false, false) => "baseline",
    };
    if cfg.train.use_teacher {
        name.to_string()
    } else {
        format!("{name} (no teacher)")
    }
}

/// Keeps the header and the first `rows` data rows of an existing log.
fn truncate_log(path: &Path, rows: u64) -> Result<()> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    if lines.next() != Some(StepMetrics::CSV_HEADER) {
        bail!("{} does not start with the metrics header", path.display());
    }
    let kept: Vec<&str> = lines.take(rows as usize).collect();
    if kept.len() as u64 != rows {
        bail!("{} has {} rows but the checkpoint is at step {rows}", path.display(), kept.len());
    }
    let mut out = String::from(StepMetrics::CSV_HEADER);
    out.push('\n');
    for l in kept {
        out.push_str(l);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn parse_row(line: &str) -> Option<FinalLoss> {
    let f: Vec<f64> = line.split(',').map(|v| v.parse().ok()).collect::<Option<_>>()?;
    (f.len() >= 5).then(|| FinalLoss { total: f[1], sup: f[2], msl: f[3], cl: f[4] })
}

/// Trains into `out`. The data and config are fully checked before the first
/// step; with `resume` the stored checkpoint must match `cfg`.
pub fn run(cfg: &RunConfig, data: &Dataset, out: &Path, opts: &TrainOptions) -> Result<TrainSummary> {
    cfg.validate()?;
    if data.manifest.num_classes != cfg.num_classes() {
        bail!(
            "the dataset has {} classes but the config describes {}",
            data.manifest.num_classes,
            cfg.num_classes()
        );
    }
    let train = data.train_cases(cfg.data.n_train)?;
    let net = cfg.net_config();
    net.check_extents(data.manifest.dims)?;
    fs::create_dir_all(out)?;

    let ckpt_path = out.join(CHECKPOINT);
    let metrics_path = out.join(METRICS);
    let mut bundle: CheckpointBundle32 = if opts.resume {
        let bytes = fs::read(&ckpt_path).with_context(|| format!("reading {}", ckpt_path.display()))?;
        let b: CheckpointBundle32 = decode_checkpoint(&bytes)?;
        if b.net != net || b.seed != cfg.train.seed {
            bail!("{} was not written by this configuration", ckpt_path.display());
        }
        truncate_log(&metrics_path, b.step)?;
        b
    } else {
        fs::write(&metrics_path, format!("{}\n", StepMetrics::CSV_HEADER))?;
        if out.join(EVALS).exists() {
            fs::remove_file(out.join(EVALS))?;
        }
        CheckpointBundle32::new(net, cfg.train.seed)?
    };
    fs::write(out.join(CONFIG), config_echo(cfg, "train"))?;

    let mut log = BufWriter::new(OpenOptions::new().append(true).open(&metrics_path)?);
    let mut evals: Option<BufWriter<File>> = None;
    let until = opts.stop_after.unwrap_or(cfg.train.steps);
    let started = Instant::now();
    let every = cfg.train.eval_every;
    fit(&mut bundle, train, &cfg.train, until, |m, b| {
        writeln!(log, "{}", m.csv_row())?;
        if opts.log_every > 0 && m.step % opts.log_every == 0 {
            eprintln!("step {:>5}  total {:.4}  sup {:.4}  msl {:.4}  cl {:.4}", m.step, m.loss.total, m.loss.sup, m.loss.msl, m.loss.cl);
        }
        if every > 0 && m.step % every == 0 {
            let reports = evaluate(b, &data.test, false)?;
            let s = summarize(&data.test.iter().collect::<Vec<_>>(), &reports, Weights::Student);
            if evals.is_none() {
                let path = out.join(EVALS);
                let fresh = !path.exists();
                let mut w = BufWriter::new(OpenOptions::new().create(true).append(true).open(path)?);
                if fresh {
                    writeln!(w, "step,test_dsc,test_hd95")?;
                }
                evals = Some(w);
            }
            let w = evals.as_mut().expect("opened above");
            writeln!(w, "{},{},{}", m.step, opt(s.mean_dsc), opt(s.mean_hd95))?;
        }
        Ok(())
    })?;
    log.flush()?;
    if let Some(mut w) = evals {
        w.flush()?;
    }
    write_atomic(&ckpt_path, &encode_checkpoint(&bundle)?)?;

    let finished = bundle.step == cfg.train.steps;
    let test = if finished {
        let reports = evaluate(&bundle, &data.test, false)?;
        Some(summarize(&data.test.iter().collect::<Vec<_>>(), &reports, Weights::Student))
    } else {
        None
    };
    let logged = fs::read_to_string(&metrics_path)?;
    let rows: Vec<&str> = logged.lines().skip(1).collect();
    let summary = TrainSummary {
        version: VERSION.into(),
        variant: variant(cfg),
        seed: cfg.train.seed,
        steps: cfg.train.steps,
        completed: bundle.step,
        finished,
        seconds: started.elapsed().as_secs_f64(),
        first_loss: rows.first().and_then(|l| parse_row(l)),
        last_loss: rows.last().and_then(|l| parse_row(l)),
        test,
    };
    write_atomic(&out.join(SUMMARY), (serde_json::to_string_pretty(&summary)? + "\n").as_bytes())?;
    Ok(summary)
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}
