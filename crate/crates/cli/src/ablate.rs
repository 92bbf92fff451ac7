//! The `ablate` command: one training run per cell and seed, then a table.
//!
//! Cells differ from the base configuration in exactly one knob, and every
//! cell is trained with the same list of seeds.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;

use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::rundir::{guarded, write_atomic};
use crate::train::{self, TrainOptions, TrainSummary, CONFIG, SUMMARY};
use crate::config_echo;

pub const DEFAULT_RATIOS: [f64; 5] = [0.3, 0.4, 0.5, 0.6, 0.8];
pub const DEFAULT_BETAS: [f64; 3] = [0.1, 0.5, 1.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Sweep {
    Ratio,
    Loss,
    Beta,
}

impl Sweep {
    pub fn name(self) -> &'static str {
        match self {
            Sweep::Ratio => "ratio",
            Sweep::Loss => "loss",
            Sweep::Beta => "beta",
        }
    }
}

/// Parses a comma list such as `ratio,loss`; `all` selects every sweep.
pub fn parse_sweeps(spec: &str) -> Result<Vec<Sweep>> {
    let mut out = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part {
            "all" => out.extend([Sweep::Ratio, Sweep::Loss, Sweep::Beta]),
            other => out.push(other.parse()?),
        }
    }
    out.sort();
    out.dedup();
    Ok(out)
}

impl FromStr for Sweep {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ratio" => Ok(Sweep::Ratio),
            "loss" => Ok(Sweep::Loss),
            "beta" => Ok(Sweep::Beta),
            _ => Err(anyhow!("unknown sweep {s:?}; expected ratio, loss, beta or all")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Cell {
    pub sweep: Sweep,
    /// Value of the swept knob, e.g. `0.4` or `msl+cl`.
    pub label: String,
    pub cfg: RunConfig,
}

/// The grid of cells for `sweeps`; the seed is filled in per run.
pub fn cells(base: &RunConfig, sweeps: &[Sweep], ratios: &[f64], betas: &[f64]) -> Result<Vec<Cell>> {
    let mut out = Vec::new();
    for &sweep in sweeps {
        match sweep {
            Sweep::Ratio => {
                for &r in ratios {
                    let mut cfg = base.clone();
                    cfg.train.mask_ratio = r;
                    out.push(Cell { sweep, label: r.to_string(), cfg });
                }
            }
            Sweep::Loss => {
                for (msl, cl) in [(true, false), (false, true), (true, true)] {
                    let mut cfg = base.clone();
                    cfg.train.loss.include_msl = msl;
                    cfg.train.loss.include_cl = cl;
                    out.push(Cell { sweep, label: train::variant(&cfg), cfg });
                }
            }
            Sweep::Beta => {
                for &b in betas {
                    let mut cfg = base.clone();
                    cfg.train.loss.beta = b;
                    out.push(Cell { sweep, label: b.to_string(), cfg });
                }
            }
        }
    }
    if out.is_empty() {
        bail!("the sweep is empty; name at least one of ratio, loss, beta with a non-empty value list");
    }
    for c in &out {
        c.cfg.validate().with_context(|| format!("{} cell {}", c.sweep.name(), c.label))?;
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub sweep: &'static str,
    pub cell: String,
    pub mask_ratio: f64,
    pub msl: bool,
    pub cl: bool,
    pub beta: f64,
    pub seed: u64,
    pub steps: u64,
    pub loss_sup_first: Option<f64>,
    pub loss_sup_last: Option<f64>,
    pub test_dsc: Option<f64>,
    pub test_hd95: Option<f64>,
}

fn row(cell: &Cell, seed: u64, s: &TrainSummary) -> AblationRow {
    let l = &cell.cfg.train.loss;
    AblationRow {
        sweep: cell.sweep.name(),
        cell: cell.label.clone(),
        mask_ratio: cell.cfg.train.mask_ratio,
        msl: l.include_msl,
        cl: l.include_cl,
        beta: l.beta,
        seed,
        steps: s.completed,
        loss_sup_first: s.first_loss.as_ref().map(|l| l.sup),
        loss_sup_last: s.last_loss.as_ref().map(|l| l.sup),
        test_dsc: s.test.as_ref().and_then(|t| t.mean_dsc),
        test_hd95: s.test.as_ref().and_then(|t| t.mean_hd95),
    }
}

/// A finished run whose stored config matches `cfg` is reused.
fn finished_run(dir: &Path, cfg: &RunConfig) -> Option<TrainSummary> {
    let echo = fs::read_to_string(dir.join(CONFIG)).ok()?;
    if echo != config_echo(cfg, "train") || dir.join(crate::rundir::FAILED).exists() {
        return None;
    }
    let text = fs::read_to_string(dir.join(SUMMARY)).ok()?;
    let json: serde_json::Value = serde_json::from_str(&text).ok()?;
    if json["finished"] != serde_json::Value::Bool(true) {
        return None;
    }
    serde_json::from_value(json).ok()
}

pub const CSV: &str = "ablation.csv";
pub const TABLE: &str = "ablation.md";

/// Trains every cell with every seed under `out/cells/` and writes
/// `ablation.csv` (one row per run) and `ablation.md` (means over seeds).
pub fn run(cells: &[Cell], seeds: &[u64], data: &Dataset, out: &Path, log: bool) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        bail!("no seeds given");
    }
    let mut rows = Vec::new();
    for cell in cells {
        for &seed in seeds {
            let mut cfg = cell.cfg.clone();
            cfg.train.seed = seed;
            let dir = out.join("cells").join(format!("{}-{}", cell.sweep.name(), cell.label.replace(['+', ' ', '(', ')'], "_"))).join(format!("seed-{seed}"));
            let summary = match finished_run(&dir, &cfg) {
                Some(s) => s,
                None => {
                    if log {
                        eprintln!("{} = {}, seed {seed}", cell.sweep.name(), cell.label);
                    }
                    guarded(&dir, || train::run(&cfg, data, &dir, &TrainOptions::default()))?
                }
            };
            rows.push(row(cell, seed, &summary));
            write_rows(&out.join(CSV), &rows)?;
        }
    }
    write_atomic(&out.join(TABLE), table(&rows).as_bytes())?;
    Ok(rows)
}

fn write_rows(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    write_atomic(path, &w.into_inner().map_err(|e| e.into_error())?)
}

fn mean(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = v.collect::<Option<_>>()?;
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn pct(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |v| format!("{:.2}", 100.0 * v))
}

fn mm(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |v| format!("{v:.2}"))
}

fn mark(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

/// Markdown tables, one per sweep, with test DSC (%) and HD95 averaged over
/// seeds.
pub fn table(rows: &[AblationRow]) -> String {
    let mut s = String::new();
    let mut sweeps: Vec<&str> = rows.iter().map(|r| r.sweep).collect();
    sweeps.dedup();
    for sweep in sweeps {
        let of: Vec<&AblationRow> = rows.iter().filter(|r| r.sweep == sweep).collect();
        let mut labels: Vec<&str> = of.iter().map(|r| r.cell.as_str()).collect();
        labels.dedup();
        let seeds: Vec<String> = {
            let mut v: Vec<u64> = of.iter().map(|r| r.seed).collect();
            v.sort_unstable();
            v.dedup();
            v.iter().map(u64::to_string).collect()
        };
        let (title, head) = match sweep {
            "ratio" => ("Masking ratio", "| Mask ratio |"),
            "loss" => ("Loss components", "| MSL | CL |"),
            _ => ("Consistency weight", "| beta |"),
        };
        writeln!(s, "### {title} (seeds {})\n", seeds.join(", ")).unwrap();
        let cols = head.matches('|').count() - 1;
        writeln!(s, "{head} Test DSC (%) | Test HD95 |").unwrap();
        writeln!(s, "|{}", "---|".repeat(cols + 2)).unwrap();
        for label in labels {
            let runs: Vec<&&AblationRow> = of.iter().filter(|r| r.cell == label).collect();
            let first = runs[0];
            let key = match sweep {
                "loss" => format!("| {} | {} |", mark(first.msl), mark(first.cl)),
                _ => format!("| {label} |"),
            };
            let dsc = mean(runs.iter().map(|r| r.test_dsc));
            let hd = mean(runs.iter().map(|r| r.test_hd95));
            writeln!(s, "{key} {} | {} |", pct(dsc), mm(hd)).unwrap();
        }
        s.push('\n');
    }
    s
}
