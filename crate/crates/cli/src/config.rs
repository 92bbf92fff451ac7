//! Run configuration: `section.key = value` lines, one setting per line.
//!
//! Values are resolved in three layers, later ones winning: built-in
//! defaults, the config file, then command-line overrides (`--set` and the
//! dedicated flags of each subcommand). The fully resolved configuration is
//! rendered back in the same syntax and stored with every run, and parsing
//! that echo reproduces the configuration exactly.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use medctx_core::data::PhantomConfig;
use medctx_core::{ConsistencySpace, NetConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct DataSection {
    pub phantom: PhantomConfig,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetSection {
    pub patch: usize,
    pub base_width: usize,
    pub depth: usize,
}

/// Which part of the dataset an evaluation covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalSplit {
    Train,
    Test,
    All,
}

impl EvalSplit {
    pub fn name(self) -> &'static str {
        match self {
            EvalSplit::Train => "train",
            EvalSplit::Test => "test",
            EvalSplit::All => "all",
        }
    }
}

impl FromStr for EvalSplit {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(EvalSplit::Train),
            "test" => Ok(EvalSplit::Test),
            "all" => Ok(EvalSplit::All),
            _ => bail!("expected train, test or all, got {s:?}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricSection {
    pub use_teacher: bool,
    pub split: EvalSplit,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: DataSection,
    pub net: NetSection,
    /// Training and loss settings; the `loss.*` keys live in `train.loss`.
    pub train: TrainConfig,
    pub metric: MetricSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataSection { phantom: PhantomConfig::default(), seed: 0, n_train: 25, n_test: 5 },
            net: NetSection { patch: 4, base_width: 8, depth: 2 },
            train: TrainConfig::default(),
            metric: MetricSection { use_teacher: false, split: EvalSplit::Test },
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| anyhow!("{key}: cannot parse {v:?}: {e}"))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => bail!("{key}: expected true or false, got {v:?}"),
    }
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

fn parse_array<T: FromStr + Copy, const N: usize>(key: &str, v: &str) -> Result<[T; N]>
where
    T::Err: std::fmt::Display,
{
    let items: Vec<T> = parse_list(key, v)?;
    items.try_into().map_err(|items: Vec<T>| anyhow!("{key}: expected {N} comma-separated values, got {}", items.len()))
}

/// `lo:hi` pairs separated by commas.
fn parse_ranges(key: &str, v: &str) -> Result<Vec<[f64; 2]>> {
    v.split(',')
        .map(|pair| {
            let (lo, hi) = pair.split_once(':').ok_or_else(|| anyhow!("{key}: expected lo:hi, got {pair:?}"))?;
            Ok([parse(key, lo.trim())?, parse(key, hi.trim())?])
        })
        .collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn ranges(items: &[[f64; 2]]) -> String {
    items.iter().map(|[lo, hi]| format!("{lo}:{hi}")).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Defaults overlaid with the settings in `path`.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text).with_context(|| format!("in config {}", path.display()))?;
        Ok(cfg)
    }

    /// Defaults, or the file's settings when a path is given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::from_file)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| anyhow!("line {}: expected key = value", n + 1))?;
            self.set(key.trim(), value.trim()).with_context(|| format!("line {}", n + 1))?;
        }
        Ok(())
    }

    /// Applies one `key=value` override as given on the command line.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) =
            assignment.split_once('=').ok_or_else(|| anyhow!("override {assignment:?} is not key=value"))?;
        self.set(key.trim(), value.trim())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let d = &mut self.data;
        let t = &mut self.train;
        match key {
            "data.seed" => d.seed = parse(key, v)?,
            "data.dims" => d.phantom.dims = parse_array(key, v)?,
            "data.num_organs" => d.phantom.num_organs = parse(key, v)?,
            "data.organ_hu" => d.phantom.organ_hu = parse_ranges(key, v)?,
            "data.background_hu" => match parse_ranges(key, v)?.as_slice() {
                [r] => d.phantom.background_hu = *r,
                _ => bail!("{key}: expected a single lo:hi"),
            },
            "data.noise_sigma" => d.phantom.noise_sigma = parse(key, v)?,
            "data.semi_axes" => d.phantom.semi_axes = parse_array(key, v)?,
            "data.min_separation" => d.phantom.min_separation = parse(key, v)?,
            "data.spacing" => d.phantom.spacing = parse_array(key, v)?,
            "data.n_train" => d.n_train = parse(key, v)?,
            "data.n_test" => d.n_test = parse(key, v)?,

            "net.patch" => self.net.patch = parse(key, v)?,
            "net.base_width" => self.net.base_width = parse(key, v)?,
            "net.depth" => self.net.depth = parse(key, v)?,

            "loss.beta" => t.loss.beta = parse(key, v)?,
            "loss.eps_dice" => t.loss.eps_dice = parse(key, v)?,
            "loss.eps_cl" => t.loss.eps_cl = parse(key, v)?,
            "loss.include_msl" => t.loss.include_msl = parse_bool(key, v)?,
            "loss.include_cl" => t.loss.include_cl = parse_bool(key, v)?,
            "loss.include_background" => t.loss.include_background = parse_bool(key, v)?,
            "loss.class_weights" => t.loss.class_weights = if v == "none" { None } else { Some(parse_list(key, v)?) },
            "loss.consistency_space" => {
                t.loss.consistency_space = match v {
                    "logits" => ConsistencySpace::Logits,
                    "probabilities" => ConsistencySpace::Probabilities,
                    _ => bail!("{key}: expected logits or probabilities, got {v:?}"),
                }
            }

            "train.steps" => t.steps = parse(key, v)?,
            "train.batch" => t.batch = parse(key, v)?,
            "train.lr" => t.lr = parse(key, v)?,
            "train.weight_decay" => t.weight_decay = parse(key, v)?,
            "train.decay_mask_params" => t.decay_mask_params = parse_bool(key, v)?,
            "train.lambda0" => t.lambda0 = parse(key, v)?,
            "train.beta1" => t.beta1 = parse(key, v)?,
            "train.beta2" => t.beta2 = parse(key, v)?,
            "train.adam_eps" => t.adam_eps = parse(key, v)?,
            "train.mask_ratio" => t.mask_ratio = parse(key, v)?,
            "train.seed" => t.seed = parse(key, v)?,
            "train.eval_every" => t.eval_every = parse(key, v)?,
            "train.use_teacher" => t.use_teacher = parse_bool(key, v)?,
            "train.flip_axes" => {
                let mut axes = [false; 3];
                if v != "none" {
                    for a in parse_list::<usize>(key, v)? {
                        *axes.get_mut(a).ok_or_else(|| anyhow!("{key}: axis {a} is not 0, 1 or 2"))? = true;
                    }
                }
                t.augment.flip_axes = axes;
            }
            "train.intensity_shift_sigma" => t.augment.intensity_shift_sigma = parse(key, v)?,

            "metric.use_teacher" => self.metric.use_teacher = parse_bool(key, v)?,
            "metric.split" => self.metric.split = v.parse().with_context(|| key.to_string())?,
            _ => bail!("unknown setting {key:?}"),
        }
        Ok(())
    }

    /// Every setting, in the file syntax.
    pub fn render(&self) -> String {
        let d = &self.data;
        let p = &d.phantom;
        let t = &self.train;
        let l = &t.loss;
        let flips: Vec<usize> = (0..3).filter(|&a| t.augment.flip_axes[a]).collect();
        let entries: Vec<(&str, String)> = vec![
            ("data.seed", d.seed.to_string()),
            ("data.dims", join(&p.dims)),
            ("data.num_organs", p.num_organs.to_string()),
            ("data.organ_hu", ranges(&p.organ_hu)),
            ("data.background_hu", ranges(&[p.background_hu])),
            ("data.noise_sigma", p.noise_sigma.to_string()),
            ("data.semi_axes", join(&p.semi_axes)),
            ("data.min_separation", p.min_separation.to_string()),
            ("data.spacing", join(&p.spacing)),
            ("data.n_train", d.n_train.to_string()),
            ("data.n_test", d.n_test.to_string()),
            ("net.patch", self.net.patch.to_string()),
            ("net.base_width", self.net.base_width.to_string()),
            ("net.depth", self.net.depth.to_string()),
            ("loss.beta", l.beta.to_string()),
            ("loss.eps_dice", l.eps_dice.to_string()),
            ("loss.eps_cl", l.eps_cl.to_string()),
            ("loss.include_msl", l.include_msl.to_string()),
            ("loss.include_cl", l.include_cl.to_string()),
            ("loss.include_background", l.include_background.to_string()),
            ("loss.class_weights", l.class_weights.as_deref().map_or_else(|| "none".into(), join)),
            (
                "loss.consistency_space",
                match l.consistency_space {
                    ConsistencySpace::Logits => "logits".into(),
                    ConsistencySpace::Probabilities => "probabilities".into(),
                },
            ),
            ("train.steps", t.steps.to_string()),
            ("train.batch", t.batch.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.decay_mask_params", t.decay_mask_params.to_string()),
            ("train.lambda0", t.lambda0.to_string()),
            ("train.beta1", t.beta1.to_string()),
            ("train.beta2", t.beta2.to_string()),
            ("train.adam_eps", t.adam_eps.to_string()),
            ("train.mask_ratio", t.mask_ratio.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.eval_every", t.eval_every.to_string()),
            ("train.use_teacher", t.use_teacher.to_string()),
            ("train.flip_axes", if flips.is_empty() { "none".into() } else { join(&flips) }),
            ("train.intensity_shift_sigma", t.augment.intensity_shift_sigma.to_string()),
            ("metric.use_teacher", self.metric.use_teacher.to_string()),
            ("metric.split", self.metric.split.name().into()),
        ];
        let mut out = String::new();
        for (k, v) in entries {
            writeln!(out, "{k} = {v}").expect("writing to a string");
        }
        out
    }

    pub fn num_classes(&self) -> usize {
        self.data.phantom.num_classes()
    }

    /// Network layout for this run; the init seed is the training seed.
    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            in_channels: 1,
            num_classes: self.num_classes(),
            patch: [self.net.patch; 3],
            base_width: self.net.base_width,
            depth: self.net.depth,
            seed: self.train.seed,
        }
    }

    /// Checks every section without touching the disk.
    pub fn validate(&self) -> Result<()> {
        self.data.phantom.validate()?;
        if self.data.n_train == 0 || self.data.n_test == 0 {
            bail!("data.n_train and data.n_test must be positive");
        }
        self.net_config().validate()?;
        self.net_config().check_extents(self.data.phantom.dims)?;
        self.train.validate()?;
        Ok(())
    }
}
