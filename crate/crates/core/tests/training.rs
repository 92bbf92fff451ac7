mod common;

use common::{samples, tiny_net};
use medctx_core::losses::{one_hot, total_loss};
use medctx_core::masking::{sample_mask, MaskSpec};
use medctx_core::network::{build, forward};
use medctx_core::trainer::{
    batch_for_step, cosine_lambda, decode_checkpoint, ema_update, encode_checkpoint, fit, input_tensor, train_step,
};
use medctx_core::{CheckpointBundle64, ParameterSet64, Tape, TrainConfig, VolumeSample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_cfg(steps: u64) -> TrainConfig {
    TrainConfig { steps, seed: 5, ..Default::default() }
}

#[test]
fn cosine_schedule_endpoints() {
    assert!((cosine_lambda(0, 1000, 0.996).unwrap() - 0.996).abs() < 1e-12);
    assert!((cosine_lambda(1000, 1000, 0.996).unwrap() - 1.0).abs() < 1e-12);
    let mid = cosine_lambda(500, 1000, 0.996).unwrap();
    assert!((mid - 0.998).abs() < 1e-12);
}

#[test]
fn ema_is_the_convex_combination() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let net = tiny_net();
    let teacher: ParameterSet64 = build(&net).unwrap();
    let mut student = teacher.clone();
    student.iter_mut().for_each(|(_, t)| t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-1.0..1.0)));
    for lambda in [0.0, 0.5, 0.996, 0.9999, 1.0] {
        let mut updated = teacher.clone();
        ema_update(&mut updated, &student, lambda).unwrap();
        for (name, t) in updated.iter() {
            let (a, b) = (teacher.get(name).unwrap(), student.get(name).unwrap());
            for k in 0..t.len() {
                let want = lambda * a.data()[k] + (1.0 - lambda) * b.data()[k];
                assert!((t.data()[k] - want).abs() <= f64::EPSILON * want.abs().max(1.0));
            }
        }
    }
}

#[test]
fn teacher_gets_no_gradient_over_fifty_steps() {
    let train = samples(6, 2);
    let cfg = tiny_cfg(50);
    let mut bundle = CheckpointBundle64::new(tiny_net(), cfg.seed).unwrap();
    for step in 0..50 {
        let batch = batch_for_step(&train, &cfg, bundle.seed, step).unwrap();

        // Put the teacher on the same tape as a differentiable leaf; the
        // objective must still leave it untouched.
        let x = input_tensor::<f64>(&batch).unwrap();
        let labels: Vec<u8> = batch.iter().flat_map(|s| s.labels.iter().copied()).collect();
        let y = one_hot::<f64>(&labels, batch.len(), 3, [8, 8, 8]).unwrap();
        let grid = sample_mask(&MaskSpec::new(cfg.mask_ratio, [2, 2, 2], step), [8, 8, 8]).unwrap();
        let mut tape = Tape::new();
        let s = bundle.student.bind(&mut tape, true);
        let t = bundle.teacher.bind(&mut tape, true);
        let xv = tape.constant(x);
        let fs = forward(&mut tape, &bundle.net, &s, xv, None).unwrap();
        let fm = forward(&mut tape, &bundle.net, &s, xv, Some(&grid)).unwrap();
        let ft = forward(&mut tape, &bundle.net, &t, xv, None).unwrap();
        let (loss, _) = total_loss(&mut tape, &y, fs, Some(fm), Some(ft), &cfg.loss).unwrap();
        tape.backward(loss).unwrap();
        for (name, &v) in t.iter() {
            if let Some(g) = tape.grad(v) {
                assert!(g.data().iter().all(|&x| x == 0.0), "step {step}: teacher {name} has a gradient");
            }
        }
        drop(tape);

        // The real step then moves the teacher by the EMA alone.
        let before = bundle.teacher.clone();
        let m = train_step(&mut bundle, &batch, &cfg).unwrap();
        let mut expected = before;
        ema_update(&mut expected, &bundle.student, m.lambda).unwrap();
        assert_eq!(bundle.teacher, expected, "step {step}");
    }
}

fn rows(bundle: &mut CheckpointBundle64, train: &[VolumeSample], cfg: &TrainConfig, until: u64) -> Vec<String> {
    let mut out = Vec::new();
    fit(bundle, train, cfg, until, |m, _| {
        out.push(m.csv_row());
        Ok(())
    })
    .unwrap();
    out
}

#[test]
fn identical_runs_log_identical_rows() {
    let train = samples(4, 3);
    let cfg = tiny_cfg(12);
    let a = rows(&mut CheckpointBundle64::new(tiny_net(), cfg.seed).unwrap(), &train, &cfg, 12);
    let b = rows(&mut CheckpointBundle64::new(tiny_net(), cfg.seed).unwrap(), &train, &cfg, 12);
    assert_eq!(a, b);
    let other = TrainConfig { seed: 6, ..cfg.clone() };
    let c = rows(&mut CheckpointBundle64::new(tiny_net(), other.seed).unwrap(), &train, &other, 12);
    assert_ne!(a, c);
}

#[test]
fn resume_from_checkpoint_continues_exactly() {
    let train = samples(4, 4);
    let cfg = tiny_cfg(10);
    let full = rows(&mut CheckpointBundle64::new(tiny_net(), cfg.seed).unwrap(), &train, &cfg, 10);

    let mut first = CheckpointBundle64::new(tiny_net(), cfg.seed).unwrap();
    let head = rows(&mut first, &train, &cfg, 6);
    let mut resumed: CheckpointBundle64 = decode_checkpoint(&encode_checkpoint(&first).unwrap()).unwrap();
    assert_eq!(resumed, first);
    let tail = rows(&mut resumed, &train, &cfg, 10);
    assert_eq!([head, tail].concat(), full);
}
