//! Small 3D encoder-decoder segmentation network.
//!
//! Layout for `depth = L`, base width `w`:
//!
//! ```text
//! volume [B,Cin,D,H,W]
//!   embed      conv k=P, stride=P              -> [B, w, D/P, H/P, W/P]   (mask tokens enter here)
//!   enc.0      conv3 + norm + relu              (skip 0; the conv has no bias)
//!   down.i     conv k=2, stride=2, then enc.i   (skip i, i < L), width w*2^i
//!   dec.i      upsample x2, concat skip i, conv3 + norm + relu, for i = L-1..0
//!   upsample xP, concat the (masked) volume standardised per channel
//!   head.fuse  conv1 + relu
//!   head.out   conv1                            -> logits [B, C, D, H, W]
//! ```
//!
//! When a mask is given, masked patch tokens are replaced by the learnable
//! `mask.token` and the matching voxel columns of the full-resolution path by
//! `mask.voxel`, so no information from a masked patch reaches the logits.

use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal, Uniform};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{bail, Result};
use crate::masking::{mask_feature_map, mask_voxels, MaskGrid};
use crate::rng::{stream, STREAM_INIT};
use crate::scalar::Scalar;

pub const MASK_TOKEN: &str = "mask.token";
pub const MASK_VOXEL: &str = "mask.voxel";
pub const NORM_EPS: f64 = 1e-5;
const MASK_INIT_STD: f64 = 0.02;

/// Whether `name` belongs to the learnable mask embeddings rather than the
/// segmentation network proper.
pub fn is_mask_param(name: &str) -> bool {
    name.starts_with("mask.")
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Patch extents `[Pd, Ph, Pw]`; the embedding is a strided conv, so all
    /// three must be equal.
    pub patch: [usize; 3],
    pub base_width: usize,
    /// Number of down/up stages.
    pub depth: usize,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { in_channels: 1, num_classes: 4, patch: [4, 4, 4], base_width: 8, depth: 2, seed: 0 }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_width == 0 {
            bail!(Config, "channel counts must be positive");
        }
        if self.num_classes < 2 {
            bail!(Config, "need at least 2 classes, got {}", self.num_classes);
        }
        if self.patch[0] == 0 || self.patch.iter().any(|&p| p != self.patch[0]) {
            bail!(Config, "patch must be a positive cube, got {:?}", self.patch);
        }
        Ok(())
    }

    fn patch_size(&self) -> usize {
        self.patch[0]
    }

    pub fn width(&self, stage: usize) -> usize {
        self.base_width << stage
    }

    /// Checks that volumes of extents `dims = [D, H, W]` fit this network.
    pub fn check_extents(&self, dims: [usize; 3]) -> Result<()> {
        let unit = self.patch_size() << self.depth;
        if dims.iter().any(|&e| e == 0 || e % unit != 0) {
            bail!(Shape, "extents {:?} must be divisible by patch * 2^depth = {}", dims, unit);
        }
        let bottleneck: usize = dims.iter().map(|e| e / unit).product();
        if bottleneck < 2 {
            bail!(Shape, "extents {:?} leave a single voxel at the bottleneck", dims);
        }
        Ok(())
    }

    fn layers(&self) -> Vec<(String, Layer)> {
        let p = self.patch_size();
        let mut out = vec![(
            "embed".to_string(),
            Layer::Conv { cin: self.in_channels, cout: self.width(0), k: p, bias: true },
        )];
        // The norm that follows cancels any per-channel bias, so these convs have none.
        let block = |name: String, cin: usize, cout: usize, out: &mut Vec<(String, Layer)>| {
            out.push((format!("{name}.conv"), Layer::Conv { cin, cout, k: 3, bias: false }));
            out.push((format!("{name}.norm"), Layer::Norm { c: cout }));
        };
        block("enc.0".into(), self.width(0), self.width(0), &mut out);
        for i in 1..=self.depth {
            out.push((format!("down.{i}"), Layer::Conv { cin: self.width(i - 1), cout: self.width(i), k: 2, bias: true }));
            block(format!("enc.{i}"), self.width(i), self.width(i), &mut out);
        }
        for i in (0..self.depth).rev() {
            block(format!("dec.{i}"), self.width(i + 1) + self.width(i), self.width(i), &mut out);
        }
        out.push((
            "head.fuse".into(),
            Layer::Conv { cin: self.width(0) + self.in_channels, cout: self.width(0), k: 1, bias: true },
        ));
        out.push(("head.out".into(), Layer::Conv { cin: self.width(0), cout: self.num_classes, k: 1, bias: true }));
        out.push((MASK_TOKEN.into(), Layer::Token { c: self.width(0) }));
        out.push((MASK_VOXEL.into(), Layer::Token { c: self.in_channels }));
        out
    }
}

enum Layer {
    Conv { cin: usize, cout: usize, k: usize, bias: bool },
    Norm { c: usize },
    Token { c: usize },
}

/// Named learnable arrays, ordered by name.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for ParameterSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParameterSet<T> {
    pub fn new() -> Self {
        Self { tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// True when both sets have the same names with the same shapes.
    pub fn same_layout<U: Scalar>(&self, other: &ParameterSet<U>) -> bool {
        self.len() == other.len()
            && self
                .iter()
                .zip(other.iter())
                .all(|((na, ta), (nb, tb))| na == nb && ta.shape() == tb.shape())
    }

    pub fn cast<U: Scalar>(&self) -> ParameterSet<U> {
        ParameterSet { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    /// Registers every array as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> BoundParams {
        BoundParams {
            vars: self.tensors.iter().map(|(k, v)| (k.clone(), tape.leaf(v.clone(), requires_grad))).collect(),
        }
    }
}

/// Total number of scalar parameters.
pub fn count_params<T: Scalar>(params: &ParameterSet<T>) -> usize {
    params.iter().map(|(_, t)| t.len()).sum()
}

/// A [`ParameterSet`] registered on a tape.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        match self.vars.get(name) {
            Some(&v) => Ok(v),
            None => bail!(Contract, "parameter {:?} is missing", name),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

impl FromIterator<(String, Var)> for BoundParams {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        Self { vars: iter.into_iter().collect() }
    }
}

/// Deterministic initialisation from `(config, config.seed)`.
///
/// Conv weights and biases are uniform in `±sqrt(1/fan_in)`, norm gains 1 and
/// shifts 0, mask embeddings `N(0, 0.02²)`. Values are drawn in `f64`, so the
/// `f32` and `f64` builds agree up to rounding.
pub fn build<T: Scalar>(cfg: &NetConfig) -> Result<ParameterSet<T>> {
    cfg.validate()?;
    let mut rng = stream(cfg.seed, STREAM_INIT, 0);
    let normal = Normal::new(0.0, MASK_INIT_STD).expect("valid std");
    let mut params = ParameterSet::new();
    for (name, layer) in cfg.layers() {
        match layer {
            Layer::Conv { cin, cout, k, bias } => {
                let fan_in = cin * k * k * k;
                let bound = (1.0 / fan_in as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("valid bounds");
                let w = Tensor::from_fn(&[cout, cin, k, k, k], |_| T::lit(dist.sample(&mut rng)));
                params.insert(format!("{name}.weight"), w);
                if bias {
                    let b = Tensor::from_fn(&[cout], |_| T::lit(dist.sample(&mut rng)));
                    params.insert(format!("{name}.bias"), b);
                }
            }
            Layer::Norm { c } => {
                params.insert(format!("{name}.gain"), Tensor::ones(&[c]));
                params.insert(format!("{name}.shift"), Tensor::zeros(&[c]));
            }
            Layer::Token { c } => {
                params.insert(name, Tensor::from_fn(&[c], |_| T::lit(normal.sample(&mut rng))));
            }
        }
    }
    Ok(params)
}

fn conv<T: Scalar>(tape: &mut Tape<T>, p: &BoundParams, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let w = p.get(&format!("{name}.weight"))?;
    let b = p.get(&format!("{name}.bias"))?;
    tape.conv3d(x, w, Some(b), stride, pad)
}

fn conv_nobias<T: Scalar>(tape: &mut Tape<T>, p: &BoundParams, name: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{name}.weight"))?;
    tape.conv3d(x, w, None, 1, 1)
}

fn block<T: Scalar>(tape: &mut Tape<T>, p: &BoundParams, name: &str, x: Var) -> Result<Var> {
    let h = conv_nobias(tape, p, &format!("{name}.conv"), x)?;
    let g = p.get(&format!("{name}.norm.gain"))?;
    let s = p.get(&format!("{name}.norm.shift"))?;
    let h = tape.instance_norm(h, g, s, T::lit(NORM_EPS))?;
    Ok(tape.relu(h))
}

/// Voxel-wise class logits `[B, C, D, H, W]` for `volume: [B, Cin, D, H, W]`.
///
/// With `mask`, the same grid is applied to every sample of the batch. Without
/// it, the mask embeddings do not take part in the computation.
pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &NetConfig,
    params: &BoundParams,
    volume: Var,
    mask: Option<&MaskGrid>,
) -> Result<Var> {
    let s = tape.shape(volume).to_vec();
    if s.len() != 5 || s[1] != cfg.in_channels {
        bail!(Shape, "expected volume [B, {}, D, H, W], got {:?}", cfg.in_channels, s);
    }
    let dims = [s[2], s[3], s[4]];
    cfg.check_extents(dims)?;
    let p = cfg.patch_size();

    let mut h = conv(tape, params, "embed", volume, p, 0)?;
    let mut vox = volume;
    if let Some(grid) = mask {
        if grid.volume_dims() != dims || grid.patch() != cfg.patch {
            bail!(Shape, "mask grid for {:?} / patch {:?} used on volume {:?}", grid.volume_dims(), grid.patch(), dims);
        }
        h = mask_feature_map(tape, h, grid, params.get(MASK_TOKEN)?)?;
        vox = mask_voxels(tape, volume, grid, params.get(MASK_VOXEL)?)?;
    }

    h = block(tape, params, "enc.0", h)?;
    let mut skips = vec![h];
    for i in 1..=cfg.depth {
        h = conv(tape, params, &format!("down.{i}"), h, 2, 0)?;
        h = block(tape, params, &format!("enc.{i}"), h)?;
        if i < cfg.depth {
            skips.push(h);
        }
    }
    for i in (0..cfg.depth).rev() {
        let up = tape.upsample_nearest3d(h, 2)?;
        let cat = tape.concat_channels(&[up, skips[i]])?;
        h = block(tape, params, &format!("dec.{i}"), cat)?;
    }
    let up = tape.upsample_nearest3d(h, p)?;
    let one = tape.constant(Tensor::ones(&[cfg.in_channels]));
    let zero = tape.constant(Tensor::zeros(&[cfg.in_channels]));
    let vox = tape.instance_norm(vox, one, zero, T::lit(NORM_EPS))?;
    let cat = tape.concat_channels(&[up, vox])?;
    let fused = conv(tape, params, "head.fuse", cat, 1, 0)?;
    let fused = tape.relu(fused);
    conv(tape, params, "head.out", fused, 1, 0)
}

/// Gradient-free forward pass returning the logits tensor.
pub fn predict<T: Scalar>(cfg: &NetConfig, params: &ParameterSet<T>, volume: &Tensor<T>, mask: Option<&MaskGrid>) -> Result<Tensor<T>> {
    let mut tape = Tape::no_grad();
    let bound = params.bind(&mut tape, false);
    let x = tape.constant(volume.clone());
    let out = forward(&mut tape, cfg, &bound, x, mask)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::{sample_mask, MaskSpec};

    fn tiny() -> NetConfig {
        NetConfig { in_channels: 1, num_classes: 3, patch: [2, 2, 2], base_width: 2, depth: 1, seed: 5 }
    }

    fn volume(dims: [usize; 3], seed: u64) -> Tensor<f64> {
        Tensor::from_fn(&[1, 1, dims[0], dims[1], dims[2]], |i| ((i as u64 * 2654435761 + seed) % 1000) as f64 / 1000.0)
    }

    #[test]
    fn build_is_deterministic() {
        let cfg = NetConfig::default();
        let a = build::<f32>(&cfg).unwrap();
        let b = build::<f32>(&cfg).unwrap();
        assert_eq!(a, b);
        let other = build::<f32>(&NetConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a, other);
        assert!(a.same_layout(&other));
    }

    #[test]
    fn count_params_cases() {
        assert_eq!(count_params(&ParameterSet::<f32>::new()), 0);
        let mut one = ParameterSet::<f32>::new();
        one.insert("c.weight", Tensor::zeros(&[8, 1, 3, 3, 3]));
        one.insert("c.bias", Tensor::zeros(&[8]));
        assert_eq!(count_params(&one), 224);
    }

    #[test]
    fn bad_configs() {
        assert!(build::<f32>(&NetConfig { num_classes: 1, ..NetConfig::default() }).is_err());
        assert!(build::<f32>(&NetConfig { patch: [4, 2, 4], ..NetConfig::default() }).is_err());
        let cfg = NetConfig::default();
        assert!(cfg.check_extents([32, 32, 32]).is_ok());
        assert!(cfg.check_extents([32, 24, 32]).is_err());
        assert!(cfg.check_extents([16, 16, 16]).is_err());
    }

    #[test]
    fn output_shape_contract() {
        let cfg = NetConfig { num_classes: 3, ..NetConfig::default() };
        let params = build::<f32>(&cfg).unwrap();
        let x = Tensor::zeros(&[1, 1, 32, 32, 32]);
        let y = predict(&cfg, &params, &x, None).unwrap();
        assert_eq!(y.shape(), &[1, 3, 32, 32, 32]);
    }

    #[test]
    fn empty_mask_matches_no_mask() {
        let cfg = tiny();
        let params = build::<f64>(&cfg).unwrap();
        let x = volume([8, 8, 8], 1);
        let none = predict(&cfg, &params, &x, None).unwrap();
        let grid = MaskGrid::empty([8, 8, 8], cfg.patch).unwrap();
        let empty = predict(&cfg, &params, &x, Some(&grid)).unwrap();
        assert_eq!(none, empty);
    }

    #[test]
    fn fully_masked_input_gets_no_gradient() {
        let cfg = tiny();
        let params = build::<f64>(&cfg).unwrap();
        let grid = sample_mask(&MaskSpec::new(1.0, cfg.patch, 3), [8, 8, 8]).unwrap();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, true);
        let x = tape.param(volume([8, 8, 8], 2));
        let out = forward(&mut tape, &cfg, &bound, x, Some(&grid)).unwrap();
        let sq = tape.square(out);
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).map_or(true, |g| g.data().iter().all(|&v| v == 0.0)));
        let tok = tape.grad(bound.get(MASK_TOKEN).unwrap()).unwrap();
        assert!(tok.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn masked_voxels_do_not_reach_logits() {
        let cfg = tiny();
        let params = build::<f64>(&cfg).unwrap();
        let mut grid = MaskGrid::empty([8, 8, 8], cfg.patch).unwrap();
        grid.set(1, 2, true);
        grid.set(3, 0, true);
        let x = volume([8, 8, 8], 4);
        let mut y = x.clone();
        // voxel (z=5, y=2, x=4) lies in cell (1, 2)
        y.data_mut()[(5 * 8 + 2) * 8 + 4] += 10.0;
        // voxel (z=0, y=7, x=1) lies in cell (3, 0)
        y.data_mut()[7 * 8 + 1] -= 3.0;
        let a = predict(&cfg, &params, &x, Some(&grid)).unwrap();
        let b = predict(&cfg, &params, &y, Some(&grid)).unwrap();
        assert_eq!(a, b);
        let c = predict(&cfg, &params, &y, None).unwrap();
        assert_ne!(a, c);
    }
}
