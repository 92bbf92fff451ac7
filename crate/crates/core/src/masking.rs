//! Depth-consistent patch masking and mask-token substitution.
//!
//! Volumes use the axis order `[D, H, W]` throughout. A mask is drawn on the
//! `(H/Ph) x (W/Pw)` patch grid and repeated along every depth tile, so a
//! region hidden in one slice stays hidden in all of them.
//!
//! Token sequences `[B, N, C]` are ordered depth-major: the token of patch
//! `(k, i, j)` (depth, row, column) sits at `n = (k * rows + i) * cols + j`.
//! That is the row-major flattening of a `[C, D/Pd, H/Ph, W/Pw]` feature map,
//! so the token-space and feature-map masks below agree position by position.

use rand::seq::index;
use rand::{Rng as _, SeedableRng};

use crate::autodiff::{Tape, Var, KEEP};
use crate::error::{bail, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct MaskSpec {
    /// Probability that a patch column is masked.
    pub ratio: f64,
    /// Patch extents `[Pd, Ph, Pw]` in voxels.
    pub patch: [usize; 3],
    pub seed: u64,
    /// Mask exactly `round(ratio * cells)` cells instead of independent draws.
    pub exact_count: bool,
}

impl MaskSpec {
    pub fn new(ratio: f64, patch: [usize; 3], seed: u64) -> Self {
        Self { ratio, patch, seed, exact_count: false }
    }
}

/// Boolean mask over the `(H/Ph, W/Pw)` patch grid, broadcast over depth.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskGrid {
    rows: usize,
    cols: usize,
    depth_tiles: usize,
    patch: [usize; 3],
    cells: Vec<bool>,
}

fn tiles(dims: [usize; 3], patch: [usize; 3]) -> Result<[usize; 3]> {
    let mut out = [0; 3];
    for a in 0..3 {
        if patch[a] == 0 || dims[a] == 0 || dims[a] % patch[a] != 0 {
            bail!(Shape, "patch {:?} does not tile volume {:?}", patch, dims);
        }
        out[a] = dims[a] / patch[a];
    }
    Ok(out)
}

/// Draws a depth-consistent mask for a volume of extents `dims = [D, H, W]`.
pub fn sample_mask(spec: &MaskSpec, dims: [usize; 3]) -> Result<MaskGrid> {
    if !(0.0..=1.0).contains(&spec.ratio) {
        bail!(Contract, "mask ratio {} outside [0, 1]", spec.ratio);
    }
    let [depth_tiles, rows, cols] = tiles(dims, spec.patch)?;
    let n = rows * cols;
    let mut rng = Rng::seed_from_u64(spec.seed);
    let cells = if spec.exact_count {
        let k = (spec.ratio * n as f64).round() as usize;
        let mut cells = vec![false; n];
        for i in index::sample(&mut rng, n, k.min(n)) {
            cells[i] = true;
        }
        cells
    } else {
        (0..n).map(|_| rng.random::<f64>() < spec.ratio).collect()
    };
    Ok(MaskGrid { rows, cols, depth_tiles, patch: spec.patch, cells })
}

impl MaskGrid {
    pub fn from_cells(rows: usize, cols: usize, depth_tiles: usize, patch: [usize; 3], cells: Vec<bool>) -> Result<Self> {
        if cells.len() != rows * cols {
            bail!(Shape, "{} cells for a {}x{} grid", cells.len(), rows, cols);
        }
        Ok(Self { rows, cols, depth_tiles, patch, cells })
    }

    /// A grid with nothing masked for volumes of extents `dims`.
    pub fn empty(dims: [usize; 3], patch: [usize; 3]) -> Result<Self> {
        let [depth_tiles, rows, cols] = tiles(dims, patch)?;
        Ok(Self { rows, cols, depth_tiles, patch, cells: vec![false; rows * cols] })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn depth_tiles(&self) -> usize {
        self.depth_tiles
    }

    pub fn patch(&self) -> [usize; 3] {
        self.patch
    }

    pub fn is_masked(&self, row: usize, col: usize) -> bool {
        self.cells[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, masked: bool) {
        self.cells[row * self.cols + col] = masked;
    }

    pub fn masked_cells(&self) -> usize {
        self.cells.iter().filter(|&&m| m).count()
    }

    pub fn masked_fraction(&self) -> f64 {
        self.masked_cells() as f64 / self.cells.len() as f64
    }

    /// Number of patch tokens `N` for the volume this grid tiles.
    pub fn num_tokens(&self) -> usize {
        self.rows * self.cols * self.depth_tiles
    }

    /// Volume extents `[D, H, W]` the grid was drawn for.
    pub fn volume_dims(&self) -> [usize; 3] {
        [self.depth_tiles * self.patch[0], self.rows * self.patch[1], self.cols * self.patch[2]]
    }

    /// Per-token flags in depth-major token order.
    pub fn token_mask(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.num_tokens());
        for _ in 0..self.depth_tiles {
            out.extend_from_slice(&self.cells);
        }
        out
    }

    /// The realised voxel mask over `[D, H, W]`, row-major.
    pub fn voxel_mask(&self) -> Vec<bool> {
        let [d, h, w] = self.volume_dims();
        let [_, ph, pw] = self.patch;
        let mut out = Vec::with_capacity(d * h * w);
        for _ in 0..d {
            for y in 0..h {
                for x in 0..w {
                    out.push(self.is_masked(y / ph, x / pw));
                }
            }
        }
        out
    }
}

/// Replaces masked tokens of `tokens: [B, N, C]` with `mask_token: [C]`.
pub fn apply_mask<T: Scalar>(tape: &mut Tape<T>, tokens: Var, grid: &MaskGrid, mask_token: Var) -> Result<Var> {
    let s = tape.shape(tokens).to_vec();
    if s.len() != 3 {
        bail!(Shape, "tokens must be [B, N, C], got {:?}", s);
    }
    let (b, n, c) = (s[0], s[1], s[2]);
    if n != grid.num_tokens() {
        bail!(Shape, "{} tokens but the mask grid covers {}", n, grid.num_tokens());
    }
    if tape.shape(mask_token) != [c] {
        bail!(Shape, "mask token shape {:?}, expected [{}]", tape.shape(mask_token), c);
    }
    let tm = grid.token_mask();
    let mut index = Vec::with_capacity(b * n * c);
    for _ in 0..b {
        for &m in &tm {
            index.extend((0..c).map(|ci| if m { ci as u32 } else { KEEP }));
        }
    }
    tape.fill_where(tokens, mask_token, index)
}

/// Channel-first counterpart of [`apply_mask`] for patch-embedded feature
/// maps `[B, C, D/Pd, H/Ph, W/Pw]`.
pub fn mask_feature_map<T: Scalar>(tape: &mut Tape<T>, features: Var, grid: &MaskGrid, mask_token: Var) -> Result<Var> {
    let s = tape.shape(features).to_vec();
    if s.len() != 5 || s[2..] != [grid.depth_tiles, grid.rows, grid.cols] {
        bail!(
            Shape,
            "feature map {:?} does not match a {}x{}x{} token grid",
            s,
            grid.depth_tiles,
            grid.rows,
            grid.cols
        );
    }
    if tape.shape(mask_token) != [s[1]] {
        bail!(Shape, "mask token shape {:?}, expected [{}]", tape.shape(mask_token), s[1]);
    }
    let tm = grid.token_mask();
    let mut index = Vec::with_capacity(s.iter().product());
    for _ in 0..s[0] {
        for ci in 0..s[1] {
            index.extend(tm.iter().map(|&m| if m { ci as u32 } else { KEEP }));
        }
    }
    tape.fill_where(features, mask_token, index)
}

/// Replaces every voxel of each masked patch column, across the full depth,
/// with the learnable per-channel `mask_value` (shape `[Cin]` or `[1]`).
pub fn mask_voxels<T: Scalar>(tape: &mut Tape<T>, volume: Var, grid: &MaskGrid, mask_value: Var) -> Result<Var> {
    let s = tape.shape(volume).to_vec();
    if s.len() != 5 || s[2..] != grid.volume_dims() {
        bail!(Shape, "volume {:?} does not match mask grid dims {:?}", s, grid.volume_dims());
    }
    let mv = tape.shape(mask_value).to_vec();
    let per_channel = match mv.as_slice() {
        [1] => false,
        [c] if *c == s[1] => true,
        _ => bail!(Shape, "mask value shape {:?}, expected [1] or [{}]", mv, s[1]),
    };
    let vm = grid.voxel_mask();
    let mut index = Vec::with_capacity(s.iter().product());
    for _ in 0..s[0] {
        for ci in 0..s[1] {
            let k = if per_channel { ci as u32 } else { 0 };
            index.extend(vm.iter().map(|&m| if m { k } else { KEEP }));
        }
    }
    tape.fill_where(volume, mask_value, index)
}
