//! Synthetic ellipsoid phantoms, intensity normalisation, augmentation and
//! the MCVX volume format.
//!
//! An MCVX file is `"MCVX"`, a `u32` version, a `u8` dtype (0 = f32,
//! 1 = u8), a `u8` rank, `u32` extents, three `f32` spacings in extents order
//! and the little-endian row-major payload.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, Normal};

use crate::bytes::{checked_len, put_extents, put_u32, read_extents, Reader};
use crate::error::{bail, Result};
use crate::rng::{derive_seed, stream, Rng, STREAM_DATA, STREAM_SPLIT};

pub const MCVX_MAGIC: &[u8; 4] = b"MCVX";
pub const MCVX_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const DTYPE_U8: u8 = 1;

/// Hounsfield window mapped onto `[0, 1]` before training.
pub const HU_WINDOW: [f32; 2] = [-1000.0, 1000.0];

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomConfig {
    pub dims: [usize; 3],
    pub num_organs: usize,
    /// Range of the mean intensity of each organ; organ `k` is labelled `k + 1`.
    pub organ_hu: Vec<[f64; 2]>,
    pub background_hu: [f64; 2],
    pub noise_sigma: f64,
    /// Range of each ellipsoid semi-axis, in voxels.
    pub semi_axes: [f64; 2],
    /// Minimum gap between the bounding spheres of two organs, in voxels.
    pub min_separation: f64,
    pub spacing: [f32; 3],
    pub seed: u64,
    pub max_attempts: usize,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            dims: [32; 3],
            num_organs: 3,
            organ_hu: vec![[80.0, 160.0], [250.0, 350.0], [500.0, 650.0]],
            background_hu: [-150.0, -50.0],
            noise_sigma: 25.0,
            semi_axes: [3.5, 6.5],
            min_separation: 2.0,
            spacing: [1.0; 3],
            seed: 0,
            max_attempts: 1000,
        }
    }
}

impl PhantomConfig {
    pub fn num_classes(&self) -> usize {
        self.num_organs + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_organs > 254 {
            bail!(Config, "at most 254 organs fit in u8 labels, got {}", self.num_organs);
        }
        if self.organ_hu.len() < self.num_organs {
            bail!(Config, "{} organ intensity ranges for {} organs", self.organ_hu.len(), self.num_organs);
        }
        let [lo, hi] = self.semi_axes;
        if !(lo > 0.0 && lo <= hi) {
            bail!(Config, "semi-axis range {:?} is empty or non-positive", self.semi_axes);
        }
        if self.dims.iter().any(|&d| (d as f64) < 2.0 * hi + 1.0) {
            bail!(Config, "extents {:?} cannot hold an organ of radius {}", self.dims, hi);
        }
        if !(self.noise_sigma >= 0.0) || !(self.min_separation >= 0.0) {
            bail!(Config, "noise and separation must be non-negative");
        }
        if self.spacing.iter().any(|&s| !(s > 0.0)) {
            bail!(Config, "spacing must be positive, got {:?}", self.spacing);
        }
        Ok(())
    }
}

/// An axis-aligned organ; coordinates are in voxels, `[D, H, W]` order.
#[derive(Clone, Debug, PartialEq)]
pub struct Ellipsoid {
    pub class: u8,
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
}

impl Ellipsoid {
    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3)
            .map(|i| ((p[i] as f64 - self.center[i]) / self.semi_axes[i]).powi(2))
            .sum::<f64>()
            <= 1.0
    }

    fn bounding_radius(&self) -> f64 {
        self.semi_axes.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VolumeSample {
    pub id: String,
    pub dims: [usize; 3],
    pub image: Vec<f32>,
    pub labels: Vec<u8>,
    pub spacing: [f32; 3],
}

impl VolumeSample {
    pub fn new(id: impl Into<String>, dims: [usize; 3], image: Vec<f32>, labels: Vec<u8>, spacing: [f32; 3]) -> Result<Self> {
        let n: usize = dims.iter().product();
        if image.len() != n || labels.len() != n {
            bail!(Shape, "image {} / labels {} voxels for extents {:?}", image.len(), labels.len(), dims);
        }
        Ok(Self { id: id.into(), dims, image, labels, spacing })
    }

    pub fn class_counts(&self, num_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; num_classes];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }
}

pub struct Phantom {
    pub sample: VolumeSample,
    pub organs: Vec<Ellipsoid>,
}

fn place_organs(cfg: &PhantomConfig, rng: &mut Rng) -> Result<Vec<Ellipsoid>> {
    let [lo, hi] = cfg.semi_axes;
    let mut organs: Vec<Ellipsoid> = Vec::with_capacity(cfg.num_organs);
    for k in 0..cfg.num_organs {
        let mut placed = None;
        for _ in 0..cfg.max_attempts {
            let semi_axes = [0; 3].map(|_| rng.random_range(lo..=hi));
            let r = semi_axes.iter().copied().fold(0.0, f64::max);
            let center = [0, 1, 2].map(|i| rng.random_range(r..=cfg.dims[i] as f64 - 1.0 - r));
            let candidate = Ellipsoid { class: k as u8 + 1, center, semi_axes };
            let clear = organs.iter().all(|o| {
                let d2: f64 = (0..3).map(|i| (o.center[i] - center[i]).powi(2)).sum();
                d2.sqrt() >= o.bounding_radius() + r + cfg.min_separation
            });
            if clear {
                placed = Some(candidate);
                break;
            }
        }
        match placed {
            Some(o) => organs.push(o),
            None => bail!(Generation, "could not place organ {} in {:?} after {} attempts", k + 1, cfg.dims, cfg.max_attempts),
        }
    }
    Ok(organs)
}

/// One phantom, fully determined by `cfg` (including `cfg.seed`).
pub fn generate_phantom(cfg: &PhantomConfig, id: impl Into<String>) -> Result<Phantom> {
    cfg.validate()?;
    let mut rng = Rng::seed_from_u64(cfg.seed);
    let organs = place_organs(cfg, &mut rng)?;
    let background = rng.random_range(cfg.background_hu[0]..=cfg.background_hu[1]);
    let means: Vec<f64> = (0..cfg.num_organs).map(|k| rng.random_range(cfg.organ_hu[k][0]..=cfg.organ_hu[k][1])).collect();
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| crate::Error::Config(e.to_string()))?;

    let [d, h, w] = cfg.dims;
    let mut image = Vec::with_capacity(d * h * w);
    let mut labels = Vec::with_capacity(d * h * w);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let organ = organs.iter().find(|o| o.contains([z, y, x]));
                let (label, mean) = match organ {
                    Some(o) => (o.class, means[o.class as usize - 1]),
                    None => (0, background),
                };
                labels.push(label);
                image.push((mean + noise.sample(&mut rng)) as f32);
            }
        }
    }
    let sample = VolumeSample::new(id, cfg.dims, image, labels, cfg.spacing)?;
    Ok(Phantom { sample, organs })
}

/// `count` phantoms whose seeds derive from `root_seed`.
pub fn generate_dataset(cfg: &PhantomConfig, count: usize, root_seed: u64) -> Result<Vec<VolumeSample>> {
    (0..count)
        .map(|i| {
            let cfg = PhantomConfig { seed: derive_seed(root_seed, STREAM_DATA, i as u64), ..cfg.clone() };
            generate_phantom(&cfg, format!("case{i:03}")).map(|p| p.sample)
        })
        .collect()
}

/// Clamp to `[lo, hi]`, then map affinely onto `[0, 1]`.
pub fn normalize_hu(image: &[f32], lo: f32, hi: f32) -> Vec<f32> {
    assert!(lo < hi, "empty intensity window [{lo}, {hi}]");
    image.iter().map(|&x| (x.clamp(lo, hi) - lo) / (hi - lo)).collect()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AugmentConfig {
    /// Axes (`[D, H, W]`) that may be flipped, each with probability 1/2.
    pub flip_axes: [bool; 3],
    /// Standard deviation of a global intensity offset, in HU.
    pub intensity_shift_sigma: f64,
}

/// Mirror image and labels together along `axis`.
pub fn flip(sample: &VolumeSample, axis: usize) -> VolumeSample {
    assert!(axis < 3, "axis {axis} out of range");
    let [d, h, w] = sample.dims;
    let src = |z: usize, y: usize, x: usize| {
        let (z, y, x) = match axis {
            0 => (d - 1 - z, y, x),
            1 => (z, h - 1 - y, x),
            _ => (z, y, w - 1 - x),
        };
        (z * h + y) * w + x
    };
    let mut out = sample.clone();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let (i, j) = ((z * h + y) * w + x, src(z, y, x));
                out.image[i] = sample.image[j];
                out.labels[i] = sample.labels[j];
            }
        }
    }
    out
}

pub fn augment(sample: &VolumeSample, cfg: &AugmentConfig, seed: u64) -> VolumeSample {
    let mut rng = Rng::seed_from_u64(seed);
    let mut out = sample.clone();
    for axis in 0..3 {
        if cfg.flip_axes[axis] && rng.random::<bool>() {
            out = flip(&out, axis);
        }
    }
    if cfg.intensity_shift_sigma > 0.0 {
        let shift = Normal::new(0.0, cfg.intensity_shift_sigma).expect("positive sigma").sample(&mut rng) as f32;
        out.image.iter_mut().for_each(|x| *x += shift);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded disjoint split of `total` sample indices.
///
/// The test set is taken from the end of one seeded permutation, so for a
/// fixed seed and `n_test` it does not depend on `n_train`.
pub fn make_split(total: usize, n_train: usize, n_test: usize, seed: u64) -> Result<DatasetSplit> {
    if n_train + n_test > total {
        bail!(Contract, "cannot take {} train + {} test from {} samples", n_train, n_test, total);
    }
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut stream(seed, STREAM_SPLIT, 0));
    Ok(DatasetSplit { train: order[..n_train].to_vec(), test: order[total - n_test..].to_vec() })
}

#[derive(Clone, Debug, PartialEq)]
pub enum VolumeData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl VolumeData {
    fn len(&self) -> usize {
        match self {
            Self::F32(v) => v.len(),
            Self::U8(v) => v.len(),
        }
    }
}

/// A raw array as stored in an MCVX file.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub shape: Vec<usize>,
    pub spacing: [f32; 3],
    pub data: VolumeData,
}

pub fn encode_volume(v: &Volume) -> Result<Vec<u8>> {
    if checked_len(&v.shape)? != v.data.len() {
        bail!(Shape, "{} values for extents {:?}", v.data.len(), v.shape);
    }
    let mut out = Vec::with_capacity(32 + v.data.len() * 4);
    out.extend_from_slice(MCVX_MAGIC);
    put_u32(&mut out, MCVX_VERSION);
    out.push(match v.data {
        VolumeData::F32(_) => DTYPE_F32,
        VolumeData::U8(_) => DTYPE_U8,
    });
    put_extents(&mut out, &v.shape)?;
    for s in v.spacing {
        out.extend_from_slice(&s.to_le_bytes());
    }
    match &v.data {
        VolumeData::F32(d) => d.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        VolumeData::U8(d) => out.extend_from_slice(d),
    }
    Ok(out)
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    let mut r = Reader::new(bytes, "MCVX volume");
    if r.take(4)? != MCVX_MAGIC {
        bail!(Format, "not an MCVX file (bad magic)");
    }
    let version = r.u32()?;
    if version != MCVX_VERSION {
        bail!(Version, "MCVX version {} (expected {})", version, MCVX_VERSION);
    }
    let dtype = r.u8()?;
    let shape = read_extents(&mut r)?;
    let spacing = [r.f32()?, r.f32()?, r.f32()?];
    let n = checked_len(&shape)?;
    let width = match dtype {
        DTYPE_F32 => 4,
        DTYPE_U8 => 1,
        other => bail!(Format, "unknown MCVX dtype code {}", other),
    };
    if r.remaining() != n * width {
        bail!(Format, "extents {:?} need {} payload bytes, file has {}", shape, n * width, r.remaining());
    }
    let payload = r.take(n * width)?;
    r.finish()?;
    let data = match dtype {
        DTYPE_F32 => VolumeData::F32(payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
        _ => VolumeData::U8(payload.to_vec()),
    };
    Ok(Volume { shape, spacing, data })
}

pub fn save_volume(path: impl AsRef<Path>, v: &Volume) -> Result<()> {
    fs::write(path, encode_volume(v)?)?;
    Ok(())
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    decode_volume(&fs::read(path)?)
}

pub fn image_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.image.mcvx"))
}

pub fn label_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.label.mcvx"))
}

/// Write `sample` as `<id>.image.mcvx` and `<id>.label.mcvx` under `dir`.
pub fn save_sample(dir: impl AsRef<Path>, sample: &VolumeSample) -> Result<()> {
    let dir = dir.as_ref();
    let shape = sample.dims.to_vec();
    save_volume(image_path(dir, &sample.id), &Volume { shape: shape.clone(), spacing: sample.spacing, data: VolumeData::F32(sample.image.clone()) })?;
    save_volume(label_path(dir, &sample.id), &Volume { shape, spacing: sample.spacing, data: VolumeData::U8(sample.labels.clone()) })
}

pub fn load_sample(dir: impl AsRef<Path>, id: &str) -> Result<VolumeSample> {
    let dir = dir.as_ref();
    let image = load_volume(image_path(dir, id))?;
    let labels = load_volume(label_path(dir, id))?;
    let (VolumeData::F32(x), VolumeData::U8(y)) = (image.data, labels.data) else {
        bail!(Format, "sample {} has image/label arrays of the wrong dtype", id);
    };
    if image.shape != labels.shape || image.shape.len() != 3 {
        bail!(Format, "sample {} has image extents {:?} and label extents {:?}", id, image.shape, labels.shape);
    }
    if image.spacing != labels.spacing {
        bail!(Format, "sample {} has mismatched image/label spacing", id);
    }
    VolumeSample::new(id, [image.shape[0], image.shape[1], image.shape[2]], x, y, image.spacing)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PhantomConfig {
        PhantomConfig { dims: [16, 16, 16], num_organs: 2, semi_axes: [2.0, 3.5], seed: 11, ..Default::default() }
    }

    #[test]
    fn normalize_window() {
        let out = normalize_hu(&[-1000.0, 1000.0, 0.0, 5000.0, -3000.0], -1000.0, 1000.0);
        assert_eq!(out, vec![0.0, 1.0, 0.5, 1.0, 0.0]);
    }

    #[test]
    fn no_organs_is_background() {
        let cfg = PhantomConfig { num_organs: 0, ..small() };
        let p = generate_phantom(&cfg, "x").unwrap();
        assert!(p.sample.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn organs_respect_their_ellipsoids() {
        let p = generate_phantom(&PhantomConfig::default(), "x").unwrap();
        let [d, h, w] = p.sample.dims;
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let l = p.sample.labels[(z * h + y) * w + x];
                    if l > 0 {
                        assert!(p.organs[l as usize - 1].contains([z, y, x]));
                    }
                }
            }
        }
        let counts = p.sample.class_counts(4);
        assert!(counts[1..].iter().all(|&c| c > 0), "{counts:?}");
    }

    #[test]
    fn generation_is_seeded() {
        let a = generate_phantom(&small(), "a").unwrap().sample;
        let b = generate_phantom(&small(), "a").unwrap().sample;
        assert_eq!(a, b);
        let c = generate_phantom(&PhantomConfig { seed: 12, ..small() }, "a").unwrap().sample;
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn impossible_placement_fails() {
        let cfg = PhantomConfig { dims: [8, 8, 8], num_organs: 3, semi_axes: [3.0, 3.0], max_attempts: 50, ..small() };
        assert!(matches!(generate_phantom(&cfg, "x"), Err(crate::Error::Generation(_))));
    }

    #[test]
    fn flips_and_augment() {
        let s = generate_phantom(&small(), "a").unwrap().sample;
        for axis in 0..3 {
            let f = flip(&s, axis);
            assert_eq!(f.class_counts(3), s.class_counts(3));
            assert_eq!(flip(&f, axis), s);
        }
        assert_eq!(augment(&s, &AugmentConfig::default(), 3), s);
        let cfg = AugmentConfig { flip_axes: [true; 3], intensity_shift_sigma: 10.0 };
        assert_eq!(augment(&s, &cfg, 3), augment(&s, &cfg, 3));
    }

    #[test]
    fn split_is_disjoint_and_seeded() {
        let s = make_split(30, 25, 5, 1).unwrap();
        let mut all: Vec<_> = s.train.iter().chain(&s.test).copied().collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 30);
        assert_eq!(s, make_split(30, 25, 5, 1).unwrap());
        let few = make_split(30, 5, 5, 1).unwrap();
        assert_eq!(few.test, s.test);
        assert_eq!(few.train.len(), 5);
        assert!(make_split(30, 26, 5, 1).is_err());
    }

    #[test]
    fn mcvx_round_trip_and_errors() {
        let v = Volume { shape: vec![2, 3, 4], spacing: [1.0, 0.5, 2.0], data: VolumeData::F32((0..24).map(|i| i as f32 * 0.1).collect()) };
        let bytes = encode_volume(&v).unwrap();
        assert_eq!(decode_volume(&bytes).unwrap(), v);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_volume(&bad), Err(crate::Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_volume(&bad), Err(crate::Error::Version(_))));
        assert!(matches!(decode_volume(&bytes[..bytes.len() - 1]), Err(crate::Error::Format(_))));
        let mut bad = bytes.clone();
        bad[10] = 4; // first extent 2 -> 4
        assert!(matches!(decode_volume(&bad), Err(crate::Error::Format(_))));
    }
}
