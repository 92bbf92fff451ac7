//! Phantom datasets on disk: one MCVX image and label volume per case plus a
//! JSON manifest with the ids and the train/test split.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use medctx_core::data::{generate_dataset, load_sample, make_split, save_sample};
use medctx_core::VolumeSample;
use serde::{Deserialize, Serialize};

use crate::config::{EvalSplit, RunConfig};
use crate::VERSION;

pub const MANIFEST: &str = "manifest.json";
const FORMAT: &str = "medctx-phantoms";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub generator: String,
    pub seed: u64,
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub num_classes: usize,
    pub ids: Vec<String>,
    /// Training ids in split order; a k-shot run uses the first k.
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// Writes `n_train + n_test` phantoms, the manifest and the config echo to `out`.
pub fn generate(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    cfg.data.phantom.validate()?;
    let (n_train, n_test) = (cfg.data.n_train, cfg.data.n_test);
    let total = n_train + n_test;
    let samples = generate_dataset(&cfg.data.phantom, total, cfg.data.seed)?;
    let split = make_split(total, n_train, n_test, cfg.data.seed)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for s in &samples {
        save_sample(out, s).with_context(|| format!("writing case {}", s.id))?;
    }
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let manifest = Manifest {
        format: FORMAT.into(),
        generator: VERSION.into(),
        seed: cfg.data.seed,
        dims: cfg.data.phantom.dims,
        spacing: cfg.data.phantom.spacing,
        num_classes: cfg.num_classes(),
        train: split.train.iter().map(|&i| ids[i].clone()).collect(),
        test: split.test.iter().map(|&i| ids[i].clone()).collect(),
        ids,
    };
    let json = serde_json::to_string_pretty(&manifest)? + "\n";
    fs::write(out.join(MANIFEST), json)?;
    fs::write(out.join("config.txt"), crate::config_echo(cfg, "generate-data"))?;
    Ok(manifest)
}

pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub train: Vec<VolumeSample>,
    pub test: Vec<VolumeSample>,
}

impl Dataset {
    /// Loads the manifest and every volume it lists, checking that the
    /// volumes agree with it.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let manifest: Manifest = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if manifest.format != FORMAT {
            bail!("{} is not a phantom manifest (format {:?})", path.display(), manifest.format);
        }
        let read = |ids: &[String]| -> Result<Vec<VolumeSample>> {
            ids.iter()
                .map(|id| {
                    if !manifest.ids.contains(id) {
                        bail!("split lists unknown case {id}");
                    }
                    let s = load_sample(dir, id).with_context(|| format!("loading case {id}"))?;
                    if s.dims != manifest.dims {
                        bail!("case {id} has extents {:?}, manifest says {:?}", s.dims, manifest.dims);
                    }
                    if let Some(&l) = s.labels.iter().find(|&&l| l as usize >= manifest.num_classes) {
                        bail!("case {id} has label {l} but the manifest lists {} classes", manifest.num_classes);
                    }
                    Ok(s)
                })
                .collect()
        };
        let train = read(&manifest.train)?;
        let test = read(&manifest.test)?;
        Ok(Self { dir: dir.to_path_buf(), manifest, train, test })
    }

    /// The first `n` training cases.
    pub fn train_cases(&self, n: usize) -> Result<&[VolumeSample]> {
        if n == 0 || n > self.train.len() {
            bail!("asked for {n} training cases; the dataset has {}", self.train.len());
        }
        Ok(&self.train[..n])
    }

    pub fn cases(&self, split: EvalSplit) -> Vec<&VolumeSample> {
        match split {
            EvalSplit::Train => self.train.iter().collect(),
            EvalSplit::Test => self.test.iter().collect(),
            EvalSplit::All => self.train.iter().chain(&self.test).collect(),
        }
    }
}
