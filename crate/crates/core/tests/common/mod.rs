//! Independent reference implementations shared by the test targets.
#![allow(dead_code)]

use medctx_core::{NetConfig, VolumeSample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Plain loops over `[b][c][v]`, written without the tape.
pub fn oracle_dice_ce(labels: &[usize], logits: &[f64], b: usize, c: usize, v: usize, eps: f64) -> f64 {
    let at = |bi: usize, ci: usize, vi: usize| logits[(bi * c + ci) * v + vi];
    let mut dice_sum = 0.0;
    let mut ce_sum = 0.0;
    for bi in 0..b {
        let mut probs = vec![vec![0.0; v]; c];
        for vi in 0..v {
            let m = (0..c).map(|ci| at(bi, ci, vi)).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..c).map(|ci| (at(bi, ci, vi) - m).exp()).sum();
            for ci in 0..c {
                probs[ci][vi] = (at(bi, ci, vi) - m).exp() / z;
            }
            let label = labels[bi * v + vi];
            ce_sum -= at(bi, label, vi) - m - z.ln();
        }
        for ci in 0..c {
            let mut inter = 0.0;
            let mut ysq = 0.0;
            let mut psq = 0.0;
            for vi in 0..v {
                let y = if labels[bi * v + vi] == ci { 1.0 } else { 0.0 };
                inter += y * probs[ci][vi];
                ysq += y * y;
                psq += probs[ci][vi] * probs[ci][vi];
            }
            dice_sum += 1.0 - (2.0 * inter + eps) / (ysq + psq + eps);
        }
    }
    dice_sum / (b * c) as f64 + ce_sum / (b * v) as f64
}

pub fn oracle_consistency(fs: &[f64], ft: &[f64], b: usize, eps: f64) -> f64 {
    let per = fs.len() / b;
    let mut acc = 0.0;
    for bi in 0..b {
        let mut num = 0.0;
        let mut den = 0.0;
        for k in bi * per..(bi + 1) * per {
            num += (fs[k] - ft[k]) * (fs[k] - ft[k]);
            den += ft[k] * ft[k];
        }
        acc += num / (den + eps);
    }
    acc / b as f64
}

pub const DIMS: [usize; 3] = [8, 8, 8];

pub fn idx(p: [usize; 3]) -> usize {
    (p[0] * DIMS[1] + p[1]) * DIMS[2] + p[2]
}

/// Surface voxels: set voxels on the array edge or with an unset face neighbour.
pub fn oracle_surface(v: &[bool]) -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    for z in 0..DIMS[0] {
        for y in 0..DIMS[1] {
            for x in 0..DIMS[2] {
                if !v[idx([z, y, x])] {
                    continue;
                }
                let p = [z as i64, y as i64, x as i64];
                let mut open = false;
                for axis in 0..3 {
                    for step in [-1i64, 1] {
                        let mut q = p;
                        q[axis] += step;
                        let inside = q.iter().zip(DIMS).all(|(&c, d)| c >= 0 && c < d as i64);
                        if !inside || !v[idx([q[0] as usize, q[1] as usize, q[2] as usize])] {
                            open = true;
                        }
                    }
                }
                if open {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

pub fn dist(a: [usize; 3], b: [usize; 3], s: [f64; 3]) -> f64 {
    let dz = (a[0] as f64 - b[0] as f64) * s[0];
    let dy = (a[1] as f64 - b[1] as f64) * s[1];
    let dx = (a[2] as f64 - b[2] as f64) * s[2];
    (dz * dz + dy * dy + dx * dx).sqrt()
}

pub fn oracle_percentile(mut d: Vec<f64>, q: f64) -> f64 {
    d.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (d.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = if lo + 1 < d.len() { lo + 1 } else { lo };
    d[lo] + (pos - lo as f64) * (d[hi] - d[lo])
}

/// Every surface point against every other surface point.
pub fn oracle_hd(a: &[bool], b: &[bool], s: [f64; 3], q: f64) -> Option<f64> {
    let (sa, sb) = (oracle_surface(a), oracle_surface(b));
    if sa.is_empty() || sb.is_empty() {
        return None;
    }
    let directed = |from: &[[usize; 3]], to: &[[usize; 3]]| {
        let d: Vec<f64> = from
            .iter()
            .map(|&p| to.iter().map(|&t| dist(p, t, s)).fold(f64::INFINITY, f64::min))
            .collect();
        oracle_percentile(d, q)
    };
    Some(directed(&sa, &sb).max(directed(&sb, &sa)))
}

pub fn random_mask(rng: &mut ChaCha8Rng) -> Vec<bool> {
    // a random box plus sparse speckle, so surfaces range from blobs to scattered points
    let density = rng.random_range(0.0..0.15);
    let lo: Vec<usize> = (0..3).map(|_| rng.random_range(0..6)).collect();
    let hi: Vec<usize> = lo.iter().map(|&l| rng.random_range(l..8)).collect();
    (0..512)
        .map(|i| {
            let p = [i / 64, (i / 8) % 8, i % 8];
            let in_box = (0..3).all(|a| p[a] >= lo[a] && p[a] <= hi[a]);
            in_box || rng.random_bool(density)
        })
        .collect()
}

pub fn tiny_net() -> NetConfig {
    NetConfig { in_channels: 1, num_classes: 3, patch: [2, 2, 2], base_width: 2, depth: 1, seed: 0 }
}

/// Labels follow intensity bands, so there is something to learn.
pub fn samples(n: usize, seed: u64) -> Vec<VolumeSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let image: Vec<f32> = (0..512).map(|_| rng.random_range(0.0..1.0)).collect();
            let labels = image.iter().map(|&v| (v * 3.0).min(2.0) as u8).collect();
            VolumeSample::new(format!("s{i}"), [8, 8, 8], image, labels, [1.0; 3]).unwrap()
        })
        .collect()
}
