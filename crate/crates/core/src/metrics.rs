//! Overlap (DSC) and boundary (HD95) metrics on hard label masks.
//!
//! Extents and spacing both follow the `[D, H, W]` axis order.

use serde::Serialize;

use crate::error::{bail, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LabelMask {
    dims: [usize; 3],
    voxels: Vec<bool>,
    spacing: [f64; 3],
}

impl LabelMask {
    pub fn new(dims: [usize; 3], voxels: Vec<bool>, spacing: [f64; 3]) -> Result<Self> {
        if voxels.len() != dims.iter().product::<usize>() {
            bail!(Shape, "{} voxels for extents {:?}", voxels.len(), dims);
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            bail!(Contract, "voxel spacing must be positive, got {:?}", spacing);
        }
        Ok(Self { dims, voxels, spacing })
    }

    /// The mask of voxels labelled `class`.
    pub fn from_labels(labels: &[u8], dims: [usize; 3], class: u8, spacing: [f64; 3]) -> Result<Self> {
        Self::new(dims, labels.iter().map(|&l| l == class).collect(), spacing)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn voxels(&self) -> &[bool] {
        &self.voxels
    }

    pub fn count(&self) -> usize {
        self.voxels.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn with_spacing(&self, spacing: [f64; 3]) -> Result<Self> {
        Self::new(self.dims, self.voxels.clone(), spacing)
    }

    fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    /// Coordinates of every set voxel in row-major order.
    pub fn points(&self) -> Vec<[usize; 3]> {
        let [d, h, w] = self.dims;
        let mut out = Vec::new();
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    if self.voxels[self.index(z, y, x)] {
                        out.push([z, y, x]);
                    }
                }
            }
        }
        out
    }
}

fn check_pair(a: &LabelMask, b: &LabelMask) -> Result<()> {
    if a.dims != b.dims {
        bail!(Shape, "mask extents differ: {:?} vs {:?}", a.dims, b.dims);
    }
    Ok(())
}

/// `2|Y ∩ F| / (|Y| + |F|)`, or 1 when both masks are empty.
pub fn dsc(y: &LabelMask, f: &LabelMask) -> Result<f64> {
    check_pair(y, f)?;
    let inter = y.voxels.iter().zip(&f.voxels).filter(|(&a, &b)| a && b).count();
    let total = y.count() + f.count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Voxels of the mask with a 6-connected neighbour outside it or off the grid.
pub fn boundary(mask: &LabelMask) -> LabelMask {
    let [d, h, w] = mask.dims;
    let mut out = vec![false; mask.voxels.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = mask.index(z, y, x);
                if !mask.voxels[i] {
                    continue;
                }
                let on_edge = z == 0 || y == 0 || x == 0 || z + 1 == d || y + 1 == h || x + 1 == w;
                out[i] = on_edge
                    || !mask.voxels[mask.index(z - 1, y, x)]
                    || !mask.voxels[mask.index(z + 1, y, x)]
                    || !mask.voxels[mask.index(z, y - 1, x)]
                    || !mask.voxels[mask.index(z, y + 1, x)]
                    || !mask.voxels[mask.index(z, y, x - 1)]
                    || !mask.voxels[mask.index(z, y, x + 1)];
            }
        }
    }
    LabelMask { dims: mask.dims, voxels: out, spacing: mask.spacing }
}

/// A boundary distance that is undefined when either surface is empty.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum SurfaceDistance {
    Defined(f64),
    Undefined,
}

impl SurfaceDistance {
    pub fn value(self) -> Option<f64> {
        match self {
            Self::Defined(v) => Some(v),
            Self::Undefined => None,
        }
    }

    pub fn is_defined(self) -> bool {
        matches!(self, Self::Defined(_))
    }
}

/// Percentile `q` in `[0, 100]` of an ascending slice, interpolating linearly
/// between the closest ranks.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of an empty set");
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

#[inline]
fn scaled_distance(a: [usize; 3], b: [usize; 3], s: [f64; 3]) -> f64 {
    let dz = (a[0] as f64 - b[0] as f64) * s[0];
    let dy = (a[1] as f64 - b[1] as f64) * s[1];
    let dx = (a[2] as f64 - b[2] as f64) * s[2];
    (dz * dz + dy * dy + dx * dx).sqrt()
}

/// Distance from `p` to the nearest set voxel of `target`, searching
/// Chebyshev shells of growing radius around `p`. A voxel on shell `r` is at
/// least `r * min(spacing)` away, so the search stops once the best distance
/// found cannot be beaten by any further shell.
fn nearest(p: [usize; 3], target: &LabelMask) -> f64 {
    let [d, h, w] = target.dims;
    let s = target.spacing;
    let min_s = s.iter().copied().fold(f64::INFINITY, f64::min);
    let max_r = d.max(h).max(w);
    let mut best = f64::INFINITY;
    let (pz, py, px) = (p[0] as isize, p[1] as isize, p[2] as isize);
    let visit = |z: isize, y: isize, x: isize, best: &mut f64| {
        if z < 0 || y < 0 || x < 0 || z >= d as isize || y >= h as isize || x >= w as isize {
            return;
        }
        let q = [z as usize, y as usize, x as usize];
        if target.voxels[target.index(q[0], q[1], q[2])] {
            let dist = scaled_distance(p, q, s);
            if dist < *best {
                *best = dist;
            }
        }
    };
    for r in 0..=max_r as isize {
        for dz in -r..=r {
            if dz.abs() == r {
                for dy in -r..=r {
                    for dx in -r..=r {
                        visit(pz + dz, py + dy, px + dx, &mut best);
                    }
                }
            } else {
                for dx in -r..=r {
                    visit(pz + dz, py - r, px + dx, &mut best);
                    if r > 0 {
                        visit(pz + dz, py + r, px + dx, &mut best);
                    }
                }
                for dy in (-r + 1)..r {
                    visit(pz + dz, py + dy, px - r, &mut best);
                    if r > 0 {
                        visit(pz + dz, py + dy, px + r, &mut best);
                    }
                }
            }
        }
        if best <= (r + 1) as f64 * min_s {
            break;
        }
    }
    best
}

/// Sorted nearest-surface distances from each voxel of `from` to `to`.
fn directed_distances(from: &LabelMask, to: &LabelMask) -> Vec<f64> {
    let mut ds: Vec<f64> = from.points().into_iter().map(|p| nearest(p, to)).collect();
    ds.sort_by(f64::total_cmp);
    ds
}

fn surface_percentile(y: &LabelMask, f: &LabelMask, q: f64) -> Result<SurfaceDistance> {
    check_pair(y, f)?;
    if y.spacing != f.spacing {
        bail!(Contract, "mask spacings differ: {:?} vs {:?}", y.spacing, f.spacing);
    }
    let (by, bf) = (boundary(y), boundary(f));
    if by.is_empty() || bf.is_empty() {
        return Ok(SurfaceDistance::Undefined);
    }
    let d_fy = percentile(&directed_distances(&bf, &by), q);
    let d_yf = percentile(&directed_distances(&by, &bf), q);
    Ok(SurfaceDistance::Defined(d_fy.max(d_yf)))
}

/// Symmetric 95th-percentile boundary distance in spacing units.
pub fn hd95(y: &LabelMask, f: &LabelMask) -> Result<SurfaceDistance> {
    surface_percentile(y, f, 95.0)
}

/// Symmetric maximum boundary distance.
pub fn hausdorff(y: &LabelMask, f: &LabelMask) -> Result<SurfaceDistance> {
    surface_percentile(y, f, 100.0)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub class: usize,
    /// Whether the class occurs in the ground truth.
    pub present: bool,
    pub dsc: f64,
    pub hd95: Option<f64>,
}

/// Metrics of one predicted volume against its ground truth.
///
/// Classes absent from the ground truth are reported with `present = false`
/// and left out of both means; undefined HD95 values are left out of the
/// HD95 mean.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VolumeReport {
    pub classes: Vec<ClassMetrics>,
    pub mean_dsc: Option<f64>,
    pub mean_hd95: Option<f64>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (n, s) = values.fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    (n > 0).then(|| s / n as f64)
}

/// Per-foreground-class DSC/HD95 of `pred` against `truth`.
pub fn evaluate_volume(
    truth: &[u8],
    pred: &[u8],
    dims: [usize; 3],
    spacing: [f64; 3],
    num_classes: usize,
) -> Result<VolumeReport> {
    if truth.len() != pred.len() {
        bail!(Shape, "label volumes differ in size: {} vs {}", truth.len(), pred.len());
    }
    if let Some(&bad) = truth.iter().chain(pred).find(|&&l| l as usize >= num_classes) {
        bail!(Contract, "label {} outside [0, {})", bad, num_classes);
    }
    let mut classes = Vec::with_capacity(num_classes.saturating_sub(1));
    for c in 1..num_classes {
        let y = LabelMask::from_labels(truth, dims, c as u8, spacing)?;
        let f = LabelMask::from_labels(pred, dims, c as u8, spacing)?;
        classes.push(ClassMetrics {
            class: c,
            present: !y.is_empty(),
            dsc: dsc(&y, &f)?,
            hd95: hd95(&y, &f)?.value(),
        });
    }
    let mean_dsc = mean(classes.iter().filter(|m| m.present).map(|m| m.dsc));
    let mean_hd95 = mean(classes.iter().filter(|m| m.present).filter_map(|m| m.hd95));
    Ok(VolumeReport { classes, mean_dsc, mean_hd95 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(dims: [usize; 3], on: &[[usize; 3]]) -> LabelMask {
        let mut v = vec![false; dims.iter().product()];
        for p in on {
            v[(p[0] * dims[1] + p[1]) * dims[2] + p[2]] = true;
        }
        LabelMask::new(dims, v, [1.0; 3]).unwrap()
    }

    #[test]
    fn dsc_hand_cases() {
        let a = mask([1, 1, 10], &[[0, 0, 0], [0, 0, 1], [0, 0, 2], [0, 0, 3]]);
        assert_eq!(dsc(&a, &a).unwrap(), 1.0);
        let b = mask([1, 1, 10], &[[0, 0, 5], [0, 0, 6]]);
        assert_eq!(dsc(&a, &b).unwrap(), 0.0);
        let c = mask([1, 1, 10], &[[0, 0, 1], [0, 0, 2], [0, 0, 3], [0, 0, 4], [0, 0, 5], [0, 0, 6]]);
        assert_eq!(dsc(&a, &c).unwrap(), 0.6);
        let e = mask([1, 1, 10], &[]);
        assert_eq!(dsc(&e, &e).unwrap(), 1.0);
        assert!(dsc(&a, &mask([1, 2, 5], &[])).is_err());
    }

    #[test]
    fn boundary_cases() {
        let single = mask([3, 3, 3], &[[1, 1, 1]]);
        assert_eq!(boundary(&single), single);
        let full = LabelMask::new([3, 3, 3], vec![true; 27], [1.0; 3]).unwrap();
        assert_eq!(boundary(&full).count(), 26);
        let mut inner = vec![true; 125];
        for z in 0..5 {
            for y in 0..5 {
                for x in 0..5 {
                    if [z, y, x].iter().any(|&c| c == 0 || c == 4) {
                        inner[(z * 5 + y) * 5 + x] = false;
                    }
                }
            }
        }
        let cube = LabelMask::new([5, 5, 5], inner, [1.0; 3]).unwrap();
        assert_eq!(boundary(&cube).count(), 26);
        assert!(boundary(&mask([2, 2, 2], &[])).is_empty());
    }

    #[test]
    fn hd95_two_voxels() {
        let a = mask([1, 1, 8], &[[0, 0, 1]]);
        let b = mask([1, 1, 8], &[[0, 0, 4]]);
        assert_eq!(hd95(&a, &b).unwrap(), SurfaceDistance::Defined(3.0));
        assert_eq!(hd95(&a, &a).unwrap(), SurfaceDistance::Defined(0.0));
        assert_eq!(hd95(&a, &mask([1, 1, 8], &[])).unwrap(), SurfaceDistance::Undefined);
    }

    #[test]
    fn percentile_interpolates() {
        let v = [0.0, 1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile(&v, 50.0), 2.0);
        assert_eq!(percentile(&v, 100.0), 4.0);
        assert!((percentile(&v, 95.0) - 3.8).abs() < 1e-12);
        assert_eq!(percentile(&[7.0], 95.0), 7.0);
    }

    #[test]
    fn evaluate_perfect_and_missed() {
        let dims = [2, 4, 4];
        let mut truth = vec![0u8; 32];
        truth[5] = 1;
        truth[6] = 1;
        truth[20] = 2;
        let r = evaluate_volume(&truth, &truth, dims, [1.0; 3], 4).unwrap();
        assert_eq!(r.mean_dsc, Some(1.0));
        assert_eq!(r.mean_hd95, Some(0.0));
        assert!(!r.classes[2].present);

        let mut pred = truth.clone();
        pred[20] = 0;
        let r = evaluate_volume(&truth, &pred, dims, [1.0; 3], 4).unwrap();
        assert_eq!(r.classes[1].dsc, 0.0);
        assert_eq!(r.classes[1].hd95, None);
        assert_eq!(r.mean_dsc, Some(0.5));
        assert!(evaluate_volume(&truth, &pred, dims, [1.0; 3], 2).is_err());
    }

    fn arb_mask() -> impl Strategy<Value = Vec<bool>> {
        prop::collection::vec(prop::bool::weighted(0.3), 4 * 5 * 6)
    }

    proptest! {
        #[test]
        fn symmetry_scaling_and_ordering(a in arb_mask(), b in arb_mask()) {
            let dims = [4, 5, 6];
            let y = LabelMask::new(dims, a, [1.0, 0.5, 2.0]).unwrap();
            let f = LabelMask::new(dims, b, [1.0, 0.5, 2.0]).unwrap();
            let d = dsc(&y, &f).unwrap();
            prop_assert_eq!(d, dsc(&f, &y).unwrap());
            prop_assert!((0.0..=1.0).contains(&d));
            let h = hd95(&y, &f).unwrap();
            prop_assert_eq!(h, hd95(&f, &y).unwrap());
            let full = hausdorff(&y, &f).unwrap();
            if let (Some(h), Some(full)) = (h.value(), full.value()) {
                prop_assert!(h <= full);
            }
            let y2 = y.with_spacing([2.0, 1.0, 4.0]).unwrap();
            let f2 = f.with_spacing([2.0, 1.0, 4.0]).unwrap();
            let h2 = hd95(&y2, &f2).unwrap();
            match (h.value(), h2.value()) {
                (Some(a), Some(b)) => prop_assert_eq!(2.0 * a, b),
                (None, None) => {}
                _ => prop_assert!(false),
            }
            prop_assert_eq!(d, dsc(&y2, &f2).unwrap());
        }
    }
}
