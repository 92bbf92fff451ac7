//! Student/teacher training: AdamW on the student and its mask embeddings, an
//! EMA teacher on a cosine momentum schedule, checkpoints and inference.
//!
//! One step draws a fresh mask grid, runs the student on the clean and the
//! masked batch, runs the teacher on the clean batch without recording a
//! graph, back-propagates the combined loss into the student only, applies
//! AdamW and then pulls the teacher towards the student.
//!
//! Every random draw comes from the root seed through a named stream indexed
//! by the step number, so a run resumed from a checkpoint at step `k`
//! continues exactly as the uninterrupted run would have.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::Rng as _;

use crate::autodiff::{Tape, Tensor};
use crate::bytes::{checked_len, put_extents, put_u32, read_extents, Reader};
use crate::data::{augment, normalize_hu, AugmentConfig, VolumeSample, HU_WINDOW};
use crate::error::{bail, Error, Result};
use crate::losses::{one_hot, total_loss, LossBreakdown, LossConfig};
use crate::masking::{sample_mask, MaskSpec};
use crate::metrics::{evaluate_volume, VolumeReport};
use crate::network::{build, forward, is_mask_param, predict, NetConfig, ParameterSet};
use crate::rng::{derive_seed, stream, STREAM_AUGMENT, STREAM_BATCH, STREAM_MASK};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MCTX";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch: usize,
    /// AdamW step size. The default is a third of the usual 0.01 for large
    /// transformer backbones; at 1e-3 the consistency term holds the small
    /// network near its initialisation for the first few hundred steps.
    pub lr: f64,
    pub weight_decay: f64,
    /// Apply weight decay to the mask embeddings as well.
    pub decay_mask_params: bool,
    /// Teacher momentum at step 0; it rises to 1 on a cosine.
    pub lambda0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Fraction of patch-grid cells masked each step.
    pub mask_ratio: f64,
    pub seed: u64,
    /// Evaluate every this many steps (0 disables periodic evaluation).
    pub eval_every: u64,
    /// Without a teacher the consistency term must be off and no EMA runs.
    pub use_teacher: bool,
    pub augment: AugmentConfig,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch: 2,
            lr: 3e-3,
            weight_decay: 3e-5,
            decay_mask_params: false,
            lambda0: 0.996,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            mask_ratio: 0.4,
            seed: 0,
            eval_every: 0,
            use_teacher: true,
            augment: AugmentConfig { flip_axes: [true; 3], intensity_shift_sigma: 0.0 },
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            bail!(Config, "learning rate must be positive, got {}", self.lr);
        }
        if !(0.0..=1.0).contains(&self.lambda0) {
            bail!(Config, "lambda0 must lie in [0, 1], got {}", self.lambda0);
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            bail!(Config, "mask ratio must lie in [0, 1], got {}", self.mask_ratio);
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            bail!(Config, "invalid Adam constants beta1={} beta2={} eps={}", self.beta1, self.beta2, self.adam_eps);
        }
        if !(self.weight_decay >= 0.0) {
            bail!(Config, "weight decay must be non-negative");
        }
        if self.steps == 0 || self.batch == 0 {
            bail!(Config, "steps and batch must be positive");
        }
        if !self.use_teacher && self.loss.include_cl {
            bail!(Config, "the consistency loss needs a teacher");
        }
        self.loss.validate()
    }
}

/// AdamW moment estimates, one pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub m: ParameterSet<T>,
    pub v: ParameterSet<T>,
    pub t: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ParameterSet<T>) -> Self {
        let zeros = |p: &ParameterSet<T>| {
            let mut z = ParameterSet::new();
            for (name, t) in p.iter() {
                z.insert(name.clone(), Tensor::zeros(t.shape()));
            }
            z
        };
        Self { m: zeros(params), v: zeros(params), t: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointBundle<T> {
    pub net: NetConfig,
    pub student: ParameterSet<T>,
    pub teacher: ParameterSet<T>,
    pub opt: OptimizerState<T>,
    /// Completed training steps.
    pub step: u64,
    /// Root seed; together with `step` it fixes every later random draw.
    pub seed: u64,
}

impl<T: Scalar> CheckpointBundle<T> {
    /// Student and teacher start from the same initialisation.
    pub fn new(mut net: NetConfig, seed: u64) -> Result<Self> {
        net.seed = seed;
        let student = build::<T>(&net)?;
        Ok(Self {
            teacher: student.clone(),
            opt: OptimizerState::new(&student),
            student,
            net,
            step: 0,
            seed,
        })
    }
}

/// Teacher momentum after `step` of `total_steps`.
pub fn cosine_lambda(step: u64, total_steps: u64, lambda0: f64) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        bail!(Contract, "step {} outside [0, {}]", step, total_steps);
    }
    let phase = std::f64::consts::PI * step as f64 / total_steps as f64;
    Ok(1.0 - (1.0 - lambda0) * (phase.cos() + 1.0) / 2.0)
}

/// `teacher <- lambda * teacher + (1 - lambda) * student`, in place.
pub fn ema_update<T: Scalar>(teacher: &mut ParameterSet<T>, student: &ParameterSet<T>, lambda: f64) -> Result<()> {
    if !teacher.same_layout(student) {
        bail!(Contract, "teacher and student parameter layouts differ");
    }
    let (l, r) = (T::lit(lambda), T::lit(1.0 - lambda));
    for (name, t) in teacher.iter_mut() {
        let s = student.get(name).expect("layouts match");
        for (a, &b) in t.data_mut().iter_mut().zip(s.data()) {
            *a = l * *a + r * b;
        }
    }
    Ok(())
}

fn decays(name: &str, cfg: &TrainConfig) -> bool {
    if is_mask_param(name) {
        cfg.decay_mask_params
    } else {
        name.ends_with(".weight")
    }
}

/// One AdamW update with bias correction and decoupled weight decay.
///
/// Decay applies to conv weights only: biases, norm gains and shifts are left
/// alone, and so are the mask embeddings unless `decay_mask_params` is set.
pub fn adamw_step<T: Scalar>(
    params: &mut ParameterSet<T>,
    grads: &ParameterSet<T>,
    state: &mut OptimizerState<T>,
    cfg: &TrainConfig,
) -> Result<()> {
    if !params.same_layout(grads) {
        let missing: Vec<_> = params.names().filter(|n| grads.get(n).is_none()).collect();
        bail!(Contract, "gradients do not match the parameters (missing: {:?})", missing);
    }
    if !params.same_layout(&state.m) || !params.same_layout(&state.v) {
        bail!(Contract, "optimizer moments do not match the parameters");
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = T::lit(1.0 - cfg.beta1.powi(t));
    let bc2 = T::lit(1.0 - cfg.beta2.powi(t));
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let (lr, eps) = (T::lit(cfg.lr), T::lit(cfg.adam_eps));
    for (name, w) in params.iter_mut() {
        let g = grads.get(name).expect("layout checked").data();
        let m = state.m.get_mut(name).expect("layout checked").data_mut();
        let v = state.v.get_mut(name).expect("layout checked").data_mut();
        let shrink = if decays(name, cfg) { T::one() - lr * T::lit(cfg.weight_decay) } else { T::one() };
        for (i, w) in w.data_mut().iter_mut().enumerate() {
            m[i] = b1 * m[i] + (T::one() - b1) * g[i];
            v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            *w = *w * shrink - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// `[B, 1, D, H, W]` normalised intensities of `samples`.
pub fn input_tensor<T: Scalar>(samples: &[VolumeSample]) -> Result<Tensor<T>> {
    let Some(first) = samples.first() else {
        bail!(Contract, "empty batch");
    };
    let dims = first.dims;
    let mut data = Vec::with_capacity(samples.len() * first.image.len());
    for s in samples {
        if s.dims != dims {
            bail!(Shape, "batch mixes extents {:?} and {:?}", dims, s.dims);
        }
        data.extend(normalize_hu(&s.image, HU_WINDOW[0], HU_WINDOW[1]).into_iter().map(|x| T::lit(x as f64)));
    }
    Tensor::new(vec![samples.len(), 1, dims[0], dims[1], dims[2]], data)
}

/// Losses and schedule values of one completed step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    /// 1-based index of the step.
    pub step: u64,
    pub loss: LossBreakdown,
    pub lambda: f64,
    pub lr: f64,
}

impl StepMetrics {
    pub const CSV_HEADER: &'static str = "step,loss_total,loss_sup,loss_msl,loss_cl,lambda,lr";

    pub fn csv_row(&self) -> String {
        let l = &self.loss;
        format!("{},{},{},{},{},{},{}", self.step, l.total, l.sup, l.msl, l.cl, self.lambda, self.lr)
    }
}

/// Student gradients keyed like the parameters; a parameter the loss does not
/// reach gets a zero gradient.
fn collect_grads<T: Scalar>(
    tape: &Tape<T>,
    student: &ParameterSet<T>,
    bound: &crate::network::BoundParams,
) -> Result<ParameterSet<T>> {
    let mut grads = ParameterSet::new();
    for (name, &var) in bound.iter() {
        let g = match tape.grad(var) {
            Some(g) => g.clone(),
            None if is_mask_param(name) => Tensor::zeros(tape.shape(var)),
            None => bail!(Contract, "parameter audit: {} received no gradient", name),
        };
        grads.insert(name.clone(), g);
    }
    if !grads.same_layout(student) {
        bail!(Contract, "parameter audit: gradient set does not cover exactly the student parameters");
    }
    Ok(grads)
}

/// One training step on `batch`; advances `bundle.step` by one.
pub fn train_step<T: Scalar>(bundle: &mut CheckpointBundle<T>, batch: &[VolumeSample], cfg: &TrainConfig) -> Result<StepMetrics> {
    cfg.validate()?;
    let step = bundle.step;
    if step >= cfg.steps {
        bail!(Contract, "run already finished {} of {} steps", step, cfg.steps);
    }
    let x = input_tensor::<T>(batch)?;
    let dims = batch[0].dims;
    let labels: Vec<u8> = batch.iter().flat_map(|s| s.labels.iter().copied()).collect();
    let y = one_hot::<T>(&labels, batch.len(), bundle.net.num_classes, dims)?;

    let loss_cfg = &cfg.loss;
    let masked_branch = loss_cfg.include_msl || loss_cfg.include_cl;
    let teacher_logits = if loss_cfg.include_cl { Some(predict(&bundle.net, &bundle.teacher, &x, None)?) } else { None };

    let mut tape = Tape::new();
    let bound = bundle.student.bind(&mut tape, true);
    let xv = tape.constant(x);
    let fs = forward(&mut tape, &bundle.net, &bound, xv, None)?;
    let fs_m = if masked_branch {
        let spec = MaskSpec::new(cfg.mask_ratio, bundle.net.patch, derive_seed(bundle.seed, STREAM_MASK, step));
        let grid = sample_mask(&spec, dims)?;
        Some(forward(&mut tape, &bundle.net, &bound, xv, Some(&grid))?)
    } else {
        None
    };
    let ft = teacher_logits.map(|t| tape.constant(t));
    let (loss, breakdown) = total_loss(&mut tape, &y, fs, fs_m, ft, loss_cfg)?;
    if !breakdown.total.is_finite() {
        return Err(Error::Training {
            step: step + 1,
            detail: format!("non-finite loss (sup {}, msl {}, cl {})", breakdown.sup, breakdown.msl, breakdown.cl),
        });
    }
    tape.backward(loss)?;
    let grads = collect_grads(&tape, &bundle.student, &bound)?;
    if let Some((name, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
        return Err(Error::Training { step: step + 1, detail: format!("non-finite gradient for {name}") });
    }
    drop(tape);

    adamw_step(&mut bundle.student, &grads, &mut bundle.opt, cfg)?;
    let lambda = cosine_lambda(step, cfg.steps, cfg.lambda0)?;
    if cfg.use_teacher {
        ema_update(&mut bundle.teacher, &bundle.student, lambda)?;
    }
    bundle.step += 1;
    Ok(StepMetrics { step: bundle.step, loss: breakdown, lambda, lr: cfg.lr })
}

/// Samples drawn (and augmented) for step `step`.
pub fn batch_for_step(train: &[VolumeSample], cfg: &TrainConfig, root_seed: u64, step: u64) -> Result<Vec<VolumeSample>> {
    if train.is_empty() {
        bail!(Contract, "no training samples");
    }
    let mut rng = stream(root_seed, STREAM_BATCH, step);
    let picks: Vec<usize> = if cfg.batch <= train.len() {
        index::sample(&mut rng, train.len(), cfg.batch).into_vec()
    } else {
        (0..cfg.batch).map(|_| rng.random_range(0..train.len())).collect()
    };
    Ok(picks
        .into_iter()
        .enumerate()
        .map(|(j, i)| augment(&train[i], &cfg.augment, derive_seed(root_seed, STREAM_AUGMENT, step * cfg.batch as u64 + j as u64)))
        .collect())
}

/// Train until `min(until, cfg.steps)` steps are complete, calling `on_step`
/// after each one.
pub fn fit<T: Scalar>(
    bundle: &mut CheckpointBundle<T>,
    train: &[VolumeSample],
    cfg: &TrainConfig,
    until: u64,
    mut on_step: impl FnMut(&StepMetrics, &CheckpointBundle<T>) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    if let Some(s) = train.first() {
        bundle.net.check_extents(s.dims)?;
    }
    while bundle.step < until.min(cfg.steps) {
        let batch = batch_for_step(train, cfg, bundle.seed, bundle.step)?;
        let m = train_step(bundle, &batch, cfg)?;
        on_step(&m, bundle)?;
    }
    Ok(())
}

/// Per-voxel labels for `volume: [B, Cin, D, H, W]` from the student (or the
/// teacher) weights, without masking.
pub fn infer<T: Scalar>(bundle: &CheckpointBundle<T>, volume: &Tensor<T>, use_teacher: bool) -> Result<Vec<u8>> {
    let params = if use_teacher { &bundle.teacher } else { &bundle.student };
    let logits = predict(&bundle.net, params, volume, None)?;
    Ok(logits.argmax_channel()?.into_iter().map(|c| c as u8).collect())
}

pub fn evaluate<T: Scalar>(bundle: &CheckpointBundle<T>, samples: &[VolumeSample], use_teacher: bool) -> Result<Vec<VolumeReport>> {
    samples
        .iter()
        .map(|s| {
            let x = input_tensor::<T>(std::slice::from_ref(s))?;
            let pred = infer(bundle, &x, use_teacher)?;
            let spacing = s.spacing.map(f64::from);
            evaluate_volume(&s.labels, &pred, s.dims, spacing, bundle.net.num_classes)
        })
        .collect()
}

// ------------------------------------------------------------------ checkpoints

fn config_block(b: &CheckpointBundle<impl Scalar>) -> String {
    let n = &b.net;
    let mut s = String::new();
    let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("string write");
    kv("net.in_channels", n.in_channels.to_string());
    kv("net.num_classes", n.num_classes.to_string());
    kv("net.patch", format!("{},{},{}", n.patch[0], n.patch[1], n.patch[2]));
    kv("net.base_width", n.base_width.to_string());
    kv("net.depth", n.depth.to_string());
    kv("net.seed", n.seed.to_string());
    kv("run.seed", b.seed.to_string());
    kv("run.step", b.step.to_string());
    kv("adam.t", b.opt.t.to_string());
    s
}

fn parse_config_block(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let Some((k, v)) = line.split_once('=') else {
            bail!(Format, "checkpoint config line without '=': {:?}", line);
        };
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn field<V: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<V> {
    map.get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Format(format!("checkpoint config is missing or has a bad {key}")))
}

const GROUPS: [&str; 4] = ["student", "teacher", "adam.m", "adam.v"];

pub fn encode_checkpoint<T: Scalar>(b: &CheckpointBundle<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    let cfg = config_block(b);
    put_u32(&mut out, cfg.len() as u32);
    out.extend_from_slice(cfg.as_bytes());
    let sets = [&b.student, &b.teacher, &b.opt.m, &b.opt.v];
    put_u32(&mut out, sets.iter().map(|s| s.len() as u32).sum());
    for (group, set) in GROUPS.iter().zip(sets) {
        for (name, t) in set.iter() {
            let full = format!("{group}/{name}");
            put_u32(&mut out, full.len() as u32);
            out.extend_from_slice(full.as_bytes());
            out.push(T::DTYPE_CODE);
            put_extents(&mut out, t.shape())?;
            t.data().iter().for_each(|&x| x.write_le(&mut out));
        }
    }
    Ok(out)
}

/// Parses a whole checkpoint; nothing is returned unless every field is valid.
pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<CheckpointBundle<T>> {
    let mut r = Reader::new(bytes, "checkpoint");
    let magic = r.take(4).map_err(|_| Error::Version("file too short to be a checkpoint".into()))?;
    if magic != CHECKPOINT_MAGIC {
        bail!(Version, "not a checkpoint (magic {:?})", String::from_utf8_lossy(magic));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        bail!(Version, "checkpoint version {} (expected {})", version, CHECKPOINT_VERSION);
    }
    let cfg_len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(cfg_len)?).map_err(|_| Error::Format("checkpoint config is not UTF-8".into()))?;
    let map = parse_config_block(text)?;
    let patch: Vec<usize> = map
        .get("net.patch")
        .map(|p| p.split(',').filter_map(|x| x.trim().parse().ok()).collect())
        .unwrap_or_default();
    if patch.len() != 3 {
        bail!(Format, "checkpoint config has a bad net.patch");
    }
    let net = NetConfig {
        in_channels: field(&map, "net.in_channels")?,
        num_classes: field(&map, "net.num_classes")?,
        patch: [patch[0], patch[1], patch[2]],
        base_width: field(&map, "net.base_width")?,
        depth: field(&map, "net.depth")?,
        seed: field(&map, "net.seed")?,
    };
    net.validate().map_err(|e| Error::Format(format!("checkpoint network config: {e}")))?;

    let count = r.u32()? as usize;
    let mut sets: [ParameterSet<T>; 4] = Default::default();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Format("array name is not UTF-8".into()))?;
        let dtype = r.u8()?;
        if dtype != T::DTYPE_CODE {
            bail!(Format, "array {} has dtype code {}, expected {}", name, dtype, T::DTYPE_CODE);
        }
        let shape = read_extents(&mut r)?;
        let n = checked_len(&shape)?;
        let payload = r.take(n.checked_mul(T::BYTES).ok_or_else(|| Error::Format("array too large".into()))?)?;
        let data = payload.chunks_exact(T::BYTES).map(T::read_le).collect();
        let Some((group, pname)) = name.split_once('/') else {
            bail!(Format, "array name {:?} has no group prefix", name);
        };
        let Some(g) = GROUPS.iter().position(|&x| x == group) else {
            bail!(Format, "unknown array group {:?}", group);
        };
        sets[g].insert(pname, Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))?);
    }
    r.finish()?;

    let expected = build::<T>(&net)?;
    if let Some(g) = sets.iter().position(|s| !s.same_layout(&expected)) {
        bail!(Format, "checkpoint {} arrays do not match the network layout", GROUPS[g]);
    }
    let [student, teacher, m, v] = sets;
    Ok(CheckpointBundle {
        net,
        student,
        teacher,
        opt: OptimizerState { m, v, t: field(&map, "adam.t")? },
        step: field(&map, "run.step")?,
        seed: field(&map, "run.seed")?,
    })
}

pub fn save_checkpoint<T: Scalar>(bundle: &CheckpointBundle<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(bundle)?)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<CheckpointBundle<T>> {
    decode_checkpoint(&fs::read(path)?)
}
