//! Finite-difference verification of every differentiable operation and of a
//! tiny end-to-end network, in double precision.
//!
//! Each case reduces its output to a scalar through a fixed random projection,
//! so every output element contributes to the checked gradient.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{grad_check, Tape, Tensor, Var, KEEP};
use crate::error::Result;
use crate::losses::{consistency, dice_ce, one_hot, total_loss, ConsistencySpace, LossConfig};
use crate::masking::{sample_mask, MaskSpec};
use crate::network::{build, forward, predict, NetConfig};
use crate::rng::{derive_seed, Rng};

/// Largest relative gradient error accepted by the suite.
pub const TOLERANCE: f64 = 1e-4;
const EPS: f64 = 1e-6;
/// Step for the end-to-end network. Its deepest weights have gradients near
/// 1e-6 against a loss near 4, so a 1e-6 step is dominated by rounding.
const NETWORK_EPS: f64 = 3e-5;
const SUITE_SEED: u64 = 0x6d63_7478;

#[derive(Clone, Debug, PartialEq)]
pub struct OpCheck {
    pub name: &'static str,
    pub seeds: u64,
    /// Maximum over seeds of the per-seed maximum relative error.
    pub max_rel_error: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub checks: Vec<OpCheck>,
}

impl SuiteReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(OpCheck::passed)
    }
}

type CaseFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

struct Case {
    inputs: Vec<Tensor<f64>>,
    f: CaseFn,
    eps: f64,
}

fn normal(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

/// Values with magnitude in `[lo, hi]` and a random sign.
fn away_from_zero(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(lo..=hi);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// `sum(y * r)` for a fixed projection `r`.
fn projection(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    away_from_zero(rng, shape, 0.5, 1.5)
}

fn project(tape: &mut Tape<f64>, y: Var, r: &Tensor<f64>) -> Result<Var> {
    let rv = tape.constant(r.clone());
    let prod = tape.mul(y, rv)?;
    Ok(tape.sum_all(prod))
}

/// Output-preserving wrapper whose gradient is scaled by 1.01; used to show
/// that the suite notices a wrong backward pass.
fn corrupt(tape: &mut Tape<f64>, y: Var) -> Result<Var> {
    let d = tape.detach(y);
    let a = tape.mul_scalar(y, 1.01);
    let b = tape.mul_scalar(d, -0.01);
    tape.add(a, b)
}

/// A case whose output of `shape` is projected to a scalar.
fn projected(
    inputs: Vec<Tensor<f64>>,
    r: Tensor<f64>,
    inject: bool,
    op: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static,
) -> Case {
    Case {
        inputs,
        f: Box::new(move |tape, v| {
            let mut y = op(tape, v)?;
            if inject {
                y = corrupt(tape, y)?;
            }
            project(tape, y, &r)
        }),
        eps: EPS,
    }
}

/// A case whose function is already scalar-valued.
fn scalar(inputs: Vec<Tensor<f64>>, inject: bool, op: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static) -> Case {
    Case {
        inputs,
        f: Box::new(move |tape, v| {
            let y = op(tape, v)?;
            if inject {
                corrupt(tape, y)
            } else {
                Ok(y)
            }
        }),
        eps: EPS,
    }
}

fn random_labels(rng: &mut Rng, n: usize, classes: usize) -> Vec<u8> {
    (0..n).map(|_| rng.random_range(0..classes) as u8).collect()
}

fn tiny_net(seed: u64) -> NetConfig {
    NetConfig { in_channels: 1, num_classes: 3, patch: [2, 2, 2], base_width: 2, depth: 1, seed }
}

/// Full objective of the tiny network with respect to all student parameters.
fn network_case(rng: &mut Rng, seed: u64, inject: bool) -> Result<Case> {
    let net = tiny_net(seed);
    let params = build::<f64>(&net)?;
    let dims = [8, 8, 8];
    let volume = Tensor::from_fn(&[1, 1, 8, 8, 8], |_| rng.random_range(0.0..1.0));
    let labels = random_labels(rng, 512, 3);
    let y = one_hot::<f64>(&labels, 1, 3, dims)?;
    let grid = sample_mask(&MaskSpec::new(0.5, net.patch, seed), dims)?;
    let mut teacher = params.clone();
    teacher.iter_mut().for_each(|(_, t)| t.data_mut().iter_mut().for_each(|x| *x *= 0.9));
    let ft = predict(&net, &teacher, &volume, None)?;
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let inputs: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    let case = scalar(inputs, inject, move |tape, vars| {
        let bound = names.iter().cloned().zip(vars.iter().copied()).collect();
        let x = tape.constant(volume.clone());
        let fs = forward(tape, &net, &bound, x, None)?;
        let fs_m = forward(tape, &net, &bound, x, Some(&grid))?;
        let ftv = tape.constant(ft.clone());
        Ok(total_loss(tape, &y, fs, Some(fs_m), Some(ftv), &LossConfig::default())?.0)
    });
    Ok(Case { eps: NETWORK_EPS, ..case })
}

fn build_case(name: &str, rng: &mut Rng, seed: u64, inject: bool) -> Result<Case> {
    let s = [2, 3, 4];
    let vol = [2, 3, 2, 2, 2];
    Ok(match name {
        "add" => projected(vec![normal(rng, &s), normal(rng, &s)], projection(rng, &s), inject, |t, v| t.add(v[0], v[1])),
        "sub" => projected(vec![normal(rng, &s), normal(rng, &s)], projection(rng, &s), inject, |t, v| t.sub(v[0], v[1])),
        "mul" => projected(vec![normal(rng, &s), normal(rng, &s)], projection(rng, &s), inject, |t, v| t.mul(v[0], v[1])),
        "div" => {
            let b = away_from_zero(rng, &s, 0.5, 2.0);
            projected(vec![normal(rng, &s), b], projection(rng, &s), inject, |t, v| t.div(v[0], v[1]))
        }
        "mul_broadcast" => projected(vec![normal(rng, &s), normal(rng, &[1])], projection(rng, &s), inject, |t, v| t.mul(v[0], v[1])),
        "add_scalar" => projected(vec![normal(rng, &s)], projection(rng, &s), inject, |t, v| Ok(t.add_scalar(v[0], 0.7))),
        "mul_scalar" => projected(vec![normal(rng, &s)], projection(rng, &s), inject, |t, v| Ok(t.mul_scalar(v[0], -1.3))),
        "neg" => projected(vec![normal(rng, &s)], projection(rng, &s), inject, |t, v| Ok(t.neg(v[0]))),
        "relu" => projected(vec![away_from_zero(rng, &s, 0.05, 2.0)], projection(rng, &s), inject, |t, v| Ok(t.relu(v[0]))),
        "exp" => projected(vec![normal(rng, &s)], projection(rng, &s), inject, |t, v| Ok(t.exp(v[0]))),
        "ln" => {
            let x = Tensor::from_fn(&s, |_| rng.random_range(0.5..2.0));
            projected(vec![x], projection(rng, &s), inject, |t, v| Ok(t.ln(v[0])))
        }
        "square" => projected(vec![normal(rng, &s)], projection(rng, &s), inject, |t, v| Ok(t.square(v[0]))),
        "sum_axes" => projected(vec![normal(rng, &s)], projection(rng, &[3]), inject, |t, v| t.sum(v[0], &[0, 2], false)),
        "sum_keepdim" => projected(vec![normal(rng, &s)], projection(rng, &[2, 3, 1]), inject, |t, v| t.sum(v[0], &[2], true)),
        "mean" => projected(vec![normal(rng, &s)], projection(rng, &[2, 4]), inject, |t, v| t.mean(v[0], &[1], false)),
        "softmax_channel" => projected(vec![normal(rng, &vol)], projection(rng, &vol), inject, |t, v| t.softmax_channel(v[0])),
        "log_softmax_channel" => projected(vec![normal(rng, &vol)], projection(rng, &vol), inject, |t, v| t.log_softmax_channel(v[0])),
        "conv3d_k3_pad1" => projected(
            vec![normal(rng, &[2, 2, 4, 3, 4]), normal(rng, &[3, 2, 3, 3, 3]), normal(rng, &[3])],
            projection(rng, &[2, 3, 4, 3, 4]),
            inject,
            |t, v| t.conv3d(v[0], v[1], Some(v[2]), 1, 1),
        ),
        "conv3d_k3_stride2" => projected(
            vec![normal(rng, &[1, 2, 5, 5, 3]), normal(rng, &[2, 2, 3, 3, 3])],
            projection(rng, &[1, 2, 3, 3, 2]),
            inject,
            |t, v| t.conv3d(v[0], v[1], None, 2, 1),
        ),
        "conv3d_k2_stride2" => projected(
            vec![normal(rng, &[1, 2, 4, 4, 4]), normal(rng, &[3, 2, 2, 2, 2]), normal(rng, &[3])],
            projection(rng, &[1, 3, 2, 2, 2]),
            inject,
            |t, v| t.conv3d(v[0], v[1], Some(v[2]), 2, 0),
        ),
        "conv3d_pointwise" => projected(
            vec![normal(rng, &[2, 3, 2, 3, 2]), normal(rng, &[2, 3, 1, 1, 1]), normal(rng, &[2])],
            projection(rng, &[2, 2, 2, 3, 2]),
            inject,
            |t, v| t.conv3d(v[0], v[1], Some(v[2]), 1, 0),
        ),
        "upsample_nearest3d" => {
            projected(vec![normal(rng, &[1, 2, 2, 1, 2])], projection(rng, &[1, 2, 4, 2, 4]), inject, |t, v| t.upsample_nearest3d(v[0], 2))
        }
        "instance_norm" => projected(
            vec![normal(rng, &[2, 3, 2, 3, 2]), normal(rng, &[3]), normal(rng, &[3])],
            projection(rng, &[2, 3, 2, 3, 2]),
            inject,
            |t, v| t.instance_norm(v[0], v[1], v[2], 1e-5),
        ),
        "concat_channels" => projected(
            vec![normal(rng, &[2, 1, 2, 2, 2]), normal(rng, &[2, 2, 2, 2, 2])],
            projection(rng, &[2, 3, 2, 2, 2]),
            inject,
            |t, v| t.concat_channels(&[v[0], v[1]]),
        ),
        "fill_where" => {
            let shape = [1, 2, 2, 2, 3];
            let index: Vec<u32> = (0..24).map(|i| if rng.random::<bool>() { KEEP } else { (i / 12) as u32 }).collect();
            projected(vec![normal(rng, &shape), normal(rng, &[2])], normal(rng, &shape), inject, move |t, v| {
                t.fill_where(v[0], v[1], index.clone())
            })
        }
        "dice_ce" => {
            let y = one_hot::<f64>(&random_labels(rng, 16, 3), 2, 3, [2, 2, 2])?;
            let cfg = LossConfig { class_weights: Some(vec![0.5, 1.0, 2.0]), ..Default::default() };
            scalar(vec![normal(rng, &vol)], inject, move |t, v| dice_ce(t, &y, v[0], &cfg))
        }
        "consistency_logits" => {
            let ft = normal(rng, &vol);
            scalar(vec![normal(rng, &vol)], inject, move |t, v| {
                let f = t.constant(ft.clone());
                consistency(t, v[0], f, &LossConfig::default())
            })
        }
        "consistency_probabilities" => {
            let ft = normal(rng, &vol);
            let cfg = LossConfig { consistency_space: ConsistencySpace::Probabilities, ..Default::default() };
            scalar(vec![normal(rng, &vol)], inject, move |t, v| {
                let f = t.constant(ft.clone());
                consistency(t, v[0], f, &cfg)
            })
        }
        "total_loss" => {
            let y = one_hot::<f64>(&random_labels(rng, 16, 3), 2, 3, [2, 2, 2])?;
            let ft = normal(rng, &vol);
            scalar(vec![normal(rng, &vol), normal(rng, &vol)], inject, move |t, v| {
                let f = t.constant(ft.clone());
                Ok(total_loss(t, &y, v[0], Some(v[1]), Some(f), &LossConfig { beta: 0.7, ..Default::default() })?.0)
            })
        }
        "tiny_network" => network_case(rng, seed, inject)?,
        other => unreachable!("unknown grad-check case {other}"),
    })
}

/// Every case the suite runs, in report order.
pub const CASES: &[&str] = &[
    "add",
    "sub",
    "mul",
    "div",
    "mul_broadcast",
    "add_scalar",
    "mul_scalar",
    "neg",
    "relu",
    "exp",
    "ln",
    "square",
    "sum_axes",
    "sum_keepdim",
    "mean",
    "softmax_channel",
    "log_softmax_channel",
    "conv3d_k3_pad1",
    "conv3d_k3_stride2",
    "conv3d_k2_stride2",
    "conv3d_pointwise",
    "upsample_nearest3d",
    "instance_norm",
    "concat_channels",
    "fill_where",
    "dice_ce",
    "consistency_logits",
    "consistency_probabilities",
    "total_loss",
    "tiny_network",
];

/// Checks one case over `seeds` seeds.
pub fn check_case(name: &'static str, seeds: u64, inject_bug: bool) -> Result<OpCheck> {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let mut rng = crate::rng::stream(SUITE_SEED, name, seed);
        let case = build_case(name, &mut rng, derive_seed(SUITE_SEED, name, seed), inject_bug)?;
        let r = grad_check(case.f, &case.inputs, case.eps)?;
        worst = worst.max(r.max_rel_error);
    }
    Ok(OpCheck { name, seeds, max_rel_error: worst })
}

/// Runs every case in [`CASES`]. With `inject_bug`, each case's output gets a
/// wrong backward pass and the suite is expected to fail.
pub fn run(seeds: u64, inject_bug: bool) -> Result<SuiteReport> {
    let checks = CASES.iter().map(|&name| check_case(name, seeds, inject_bug)).collect::<Result<_>>()?;
    Ok(SuiteReport { checks })
}

