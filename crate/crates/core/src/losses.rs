//! Training objectives: Dice-CE, the normalised consistency loss between
//! masked-student and teacher logits, and their weighted sum.
//!
//! Dice-CE is `mean_c(1 - softdice_c) + mean_v(-sum_c Y log softmax(F))`, with
//! `softdice_c = (2 sum_v Y F + eps) / (sum_v Y² + sum_v F² + eps)` computed per
//! sample and averaged over samples and classes.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{bail, Result};
use crate::scalar::Scalar;

/// Which representation the consistency loss compares.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConsistencySpace {
    Logits,
    Probabilities,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the consistency term.
    pub beta: f64,
    pub eps_dice: f64,
    pub eps_cl: f64,
    /// Optional per-class weights for both Dice and cross-entropy terms.
    pub class_weights: Option<Vec<f64>>,
    /// Masked-student Dice-CE term.
    pub include_msl: bool,
    /// Student/teacher consistency term.
    pub include_cl: bool,
    /// Whether class 0 takes part in the Dice average.
    pub include_background: bool,
    pub consistency_space: ConsistencySpace,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            eps_dice: 1e-5,
            eps_cl: 1e-8,
            class_weights: None,
            include_msl: true,
            include_cl: true,
            include_background: true,
            consistency_space: ConsistencySpace::Logits,
        }
    }
}

impl LossConfig {
    /// Plain supervised training: only the unmasked Dice-CE term.
    pub fn baseline() -> Self {
        Self { include_msl: false, include_cl: false, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps_dice > 0.0 && self.eps_cl > 0.0) {
            bail!(Config, "loss eps values must be positive");
        }
        if !(self.beta >= 0.0) {
            bail!(Config, "beta must be >= 0, got {}", self.beta);
        }
        if let Some(w) = &self.class_weights {
            if w.iter().any(|&v| !(v >= 0.0)) || w.iter().all(|&v| v == 0.0) {
                bail!(Config, "class weights must be non-negative and not all zero");
            }
        }
        Ok(())
    }
}

/// Per-term loss values of one evaluation of [`total_loss`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub sup: f64,
    pub msl: f64,
    pub cl: f64,
}

/// One-hot encodes `labels` (row-major over `[B, D, H, W]`) into `[B, C, D, H, W]`.
pub fn one_hot<T: Scalar>(labels: &[u8], batch: usize, num_classes: usize, dims: [usize; 3]) -> Result<Tensor<T>> {
    let vol: usize = dims.iter().product();
    if labels.len() != batch * vol {
        bail!(Shape, "{} labels for batch {} of {:?}", labels.len(), batch, dims);
    }
    let mut out = Tensor::zeros(&[batch, num_classes, dims[0], dims[1], dims[2]]);
    let d = out.data_mut();
    for (i, &l) in labels.iter().enumerate() {
        let l = l as usize;
        if l >= num_classes {
            bail!(Contract, "label {} outside [0, {})", l, num_classes);
        }
        let (b, v) = (i / vol, i % vol);
        d[(b * num_classes + l) * vol + v] = T::one();
    }
    Ok(out)
}

fn check_one_hot<T: Scalar>(y: &Tensor<T>) -> Result<()> {
    let s = y.shape();
    if s.len() < 3 {
        bail!(Contract, "one-hot target must be [B, C, spatial..], got {:?}", s);
    }
    let (b, c) = (s[0], s[1]);
    let inner: usize = s[2..].iter().product();
    let d = y.data();
    for bi in 0..b {
        for v in 0..inner {
            let mut ones = 0;
            for ci in 0..c {
                let x = d[(bi * c + ci) * inner + v];
                if x == T::one() {
                    ones += 1;
                } else if x != T::zero() {
                    bail!(Contract, "target is not one-hot: value {} at sample {}, voxel {}", x, bi, v);
                }
            }
            if ones != 1 {
                bail!(Contract, "target is not one-hot at sample {}, voxel {}", bi, v);
            }
        }
    }
    Ok(())
}

fn class_weights(cfg: &LossConfig, c: usize) -> Result<Vec<f64>> {
    let w = match &cfg.class_weights {
        Some(w) if w.len() != c => bail!(Config, "{} class weights for {} classes", w.len(), c),
        Some(w) => w.clone(),
        None => vec![1.0; c],
    };
    Ok(w)
}

/// Dice-CE between a one-hot target `y` and `logits`, both `[B, C, D, H, W]`.
pub fn dice_ce<T: Scalar>(tape: &mut Tape<T>, y: &Tensor<T>, logits: Var, cfg: &LossConfig) -> Result<Var> {
    if y.shape() != tape.shape(logits) {
        bail!(Dimension, "target {:?} and logits {:?} differ", y.shape(), tape.shape(logits));
    }
    check_one_hot(y)?;
    let s = y.shape().to_vec();
    let (b, c) = (s[0], s[1]);
    let inner: usize = s[2..].iter().product();
    let spatial: Vec<usize> = (2..s.len()).collect();
    let weights = class_weights(cfg, c)?;

    let probs = tape.softmax_channel(logits)?;
    let logp = tape.log_softmax_channel(logits)?;
    let yv = tape.constant(y.clone());

    // soft dice per (sample, class)
    let yp = tape.mul(yv, probs)?;
    let inter = tape.sum(yp, &spatial, false)?;
    let pp = tape.square(probs);
    let psq = tape.sum(pp, &spatial, false)?;
    let ysq = Tensor::from_fn(&[b, c], |k| {
        let (bi, ci) = (k / c, k % c);
        y.data()[(bi * c + ci) * inner..(bi * c + ci + 1) * inner].iter().map(|&v| v * v).sum()
    });
    let eps = T::lit(cfg.eps_dice);
    let num = tape.mul_scalar(inter, T::lit(2.0));
    let num = tape.add_scalar(num, eps);
    let ysq = tape.constant(ysq.map(|v| v + eps));
    let den = tape.add(psq, ysq)?;
    let dice = tape.div(num, den)?;
    let one_minus = tape.neg(dice);
    let one_minus = tape.add_scalar(one_minus, T::one());

    let included: Vec<f64> = (0..c)
        .map(|ci| if ci == 0 && !cfg.include_background { 0.0 } else { weights[ci] })
        .collect();
    let total_w: f64 = included.iter().sum();
    if total_w <= 0.0 {
        bail!(Config, "no class contributes to the dice term");
    }
    let wd = tape.constant(Tensor::from_fn(&[b, c], |k| T::lit(included[k % c] / (total_w * b as f64))));
    let dice_terms = tape.mul(one_minus, wd)?;
    let dice_loss = tape.sum_all(dice_terms);

    // cross-entropy, weighted by the class of each voxel
    let yw = if cfg.class_weights.is_some() {
        let w = Tensor::from_fn(&s, |k| y.data()[k] * T::lit(weights[(k / inner) % c]));
        tape.constant(w)
    } else {
        yv
    };
    let ce = tape.mul(yw, logp)?;
    let ce = tape.sum_all(ce);
    let ce = tape.mul_scalar(ce, -T::one() / T::lit((b * inner) as f64));
    tape.add(dice_loss, ce)
}

/// Squared-error consistency `||Fs_m - Ft||² / (||Ft||² + eps)`, per sample and
/// averaged over the batch.
///
/// `teacher` is detached: no gradient flows into it even if it requires one.
pub fn consistency<T: Scalar>(tape: &mut Tape<T>, student_masked: Var, teacher: Var, cfg: &LossConfig) -> Result<Var> {
    let s = tape.shape(student_masked).to_vec();
    if s != tape.shape(teacher) {
        bail!(Dimension, "student {:?} and teacher {:?} differ", s, tape.shape(teacher));
    }
    let mut ft = tape.detach(teacher);
    let mut fs = student_masked;
    if cfg.consistency_space == ConsistencySpace::Probabilities {
        fs = tape.softmax_channel(fs)?;
        ft = tape.softmax_channel(ft)?;
    }
    let axes: Vec<usize> = (1..s.len()).collect();
    let diff = tape.sub(fs, ft)?;
    let sq = tape.square(diff);
    let num = tape.sum(sq, &axes, false)?;
    let den = {
        let v = tape.value(ft);
        let per = v.len() / s[0];
        Tensor::from_fn(&[s[0]], |b| v.data()[b * per..(b + 1) * per].iter().map(|&x| x * x).sum::<T>() + T::lit(cfg.eps_cl))
    };
    let den = tape.constant(den);
    let ratio = tape.div(num, den)?;
    Ok(tape.mean_all(ratio))
}

/// `DiceCE(Y, Fs) + DiceCE(Y, Fs_m) + beta * CL(Fs_m, Ft)`, with each optional
/// term gated by `cfg`.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    y: &Tensor<T>,
    student: Var,
    student_masked: Option<Var>,
    teacher: Option<Var>,
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    cfg.validate()?;
    let sup = dice_ce(tape, y, student, cfg)?;
    let mut breakdown = LossBreakdown { sup: tape.value(sup).item().as_f64(), ..Default::default() };
    let mut total = sup;
    if cfg.include_msl {
        let Some(fs_m) = student_masked else {
            bail!(Contract, "masked-student loss enabled without a masked prediction");
        };
        let msl = dice_ce(tape, y, fs_m, cfg)?;
        breakdown.msl = tape.value(msl).item().as_f64();
        total = tape.add(total, msl)?;
    }
    if cfg.include_cl {
        let (Some(fs_m), Some(ft)) = (student_masked, teacher) else {
            bail!(Contract, "consistency loss enabled without masked and teacher predictions");
        };
        let cl = consistency(tape, fs_m, ft, cfg)?;
        breakdown.cl = tape.value(cl).item().as_f64();
        let weighted = tape.mul_scalar(cl, T::lit(cfg.beta));
        total = tape.add(total, weighted)?;
    }
    breakdown.total = tape.value(total).item().as_f64();
    Ok((total, breakdown))
}
