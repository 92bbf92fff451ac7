//! The `eval` command: per-case, per-class DSC and HD95 plus their means.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use medctx_core::metrics::evaluate_volume;
use medctx_core::trainer::{evaluate, load_checkpoint};
use medctx_core::{CheckpointBundle32, VolumeReport, VolumeSample};
use serde::{Deserialize, Serialize};

use crate::config::EvalSplit;
use crate::dataset::Dataset;
use crate::rundir::write_atomic;
use crate::VERSION;

/// Whose predictions are scored.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weights {
    Student,
    Teacher,
    /// The labels themselves; a self-check of the metric pipeline.
    GroundTruth,
}

impl Weights {
    pub fn name(self) -> &'static str {
        match self {
            Weights::Student => "student",
            Weights::Teacher => "teacher",
            Weights::GroundTruth => "ground-truth",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub class: usize,
    pub present: bool,
    pub dsc: f64,
    pub hd95: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub class: usize,
    /// Cases in which the class occurs.
    pub cases: usize,
    pub mean_dsc: Option<f64>,
    pub mean_hd95: Option<f64>,
}

/// Means over the CSV rows whose class is present in the ground truth; HD95
/// means skip undefined values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub version: String,
    pub weights: Weights,
    pub cases: usize,
    pub rows: usize,
    pub mean_dsc: Option<f64>,
    pub mean_hd95: Option<f64>,
    pub per_class: Vec<ClassSummary>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (n, s) = values.fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    (n > 0).then(|| s / n as f64)
}

pub fn rows(cases: &[&VolumeSample], reports: &[VolumeReport]) -> Vec<EvalRow> {
    cases
        .iter()
        .zip(reports)
        .flat_map(|(s, r)| {
            r.classes.iter().map(|c| EvalRow { id: s.id.clone(), class: c.class, present: c.present, dsc: c.dsc, hd95: c.hd95 })
        })
        .collect()
}

pub fn summarize(cases: &[&VolumeSample], reports: &[VolumeReport], weights: Weights) -> EvalSummary {
    let all = rows(cases, reports);
    let present: Vec<&EvalRow> = all.iter().filter(|r| r.present).collect();
    let mut classes: Vec<usize> = all.iter().map(|r| r.class).collect();
    classes.sort_unstable();
    classes.dedup();
    let per_class = classes
        .into_iter()
        .map(|c| {
            let of = || present.iter().filter(move |r| r.class == c);
            ClassSummary {
                class: c,
                cases: of().count(),
                mean_dsc: mean(of().map(|r| r.dsc)),
                mean_hd95: mean(of().filter_map(|r| r.hd95)),
            }
        })
        .collect();
    EvalSummary {
        version: VERSION.into(),
        weights,
        cases: cases.len(),
        rows: present.len(),
        mean_dsc: mean(present.iter().map(|r| r.dsc)),
        mean_hd95: mean(present.iter().filter_map(|r| r.hd95)),
        per_class,
    }
}

pub fn write_csv(path: &Path, rows: &[EvalRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    write_atomic(path, &bytes)
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub weights: Weights,
    pub split: EvalSplit,
}

/// Output stem, e.g. `eval-teacher-test`.
pub fn stem(opts: &EvalOptions) -> String {
    format!("eval-{}-{}", opts.weights.name(), opts.split.name())
}

/// Scores `checkpoint` (or the labels, for [`Weights::GroundTruth`]) on one
/// split and writes `<stem>.csv` and `<stem>.json` into `out`.
pub fn run(checkpoint: Option<&Path>, data: &Dataset, opts: &EvalOptions, out: &Path) -> Result<EvalSummary> {
    let cases = data.cases(opts.split);
    if cases.is_empty() {
        bail!("the {} split is empty", opts.split.name());
    }
    let reports = match (opts.weights, checkpoint) {
        (Weights::GroundTruth, _) => cases
            .iter()
            .map(|s| evaluate_volume(&s.labels, &s.labels, s.dims, s.spacing.map(f64::from), data.manifest.num_classes))
            .collect::<medctx_core::Result<Vec<_>>>()?,
        (w, Some(path)) => {
            let bundle: CheckpointBundle32 =
                load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
            if bundle.net.num_classes != data.manifest.num_classes {
                bail!(
                    "the checkpoint predicts {} classes but the dataset has {}",
                    bundle.net.num_classes,
                    data.manifest.num_classes
                );
            }
            bundle.net.check_extents(data.manifest.dims).context("the checkpoint cannot read these volumes")?;
            let owned: Vec<VolumeSample> = cases.iter().map(|&s| s.clone()).collect();
            evaluate(&bundle, &owned, w == Weights::Teacher)?
        }
        (_, None) => bail!("a checkpoint is needed unless scoring the ground truth"),
    };
    let summary = summarize(&cases, &reports, opts.weights);
    fs::create_dir_all(out)?;
    let stem = stem(opts);
    write_csv(&out.join(format!("{stem}.csv")), &rows(&cases, &reports))?;
    write_atomic(&out.join(format!("{stem}.json")), (serde_json::to_string_pretty(&summary)? + "\n").as_bytes())?;
    Ok(summary)
}
