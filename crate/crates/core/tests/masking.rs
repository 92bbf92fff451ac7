use medctx_core::masking::{sample_mask, MaskSpec};
use medctx_core::rng::derive_seed;

const DIMS: [usize; 3] = [32, 32, 32];
const PATCH: [usize; 3] = [4, 4, 4];

#[test]
fn every_depth_slice_carries_the_same_mask() {
    for i in 0..1000 {
        let ratio = (i % 11) as f64 / 10.0;
        let grid = sample_mask(&MaskSpec::new(ratio, PATCH, derive_seed(9, "mask", i)), DIMS).unwrap();
        let voxels = grid.voxel_mask();
        let slice = DIMS[1] * DIMS[2];
        let first = &voxels[..slice];
        assert!(voxels.chunks(slice).all(|s| s == first), "grid {i}");
        let tokens = grid.token_mask();
        let per_depth = grid.rows() * grid.cols();
        assert!(tokens.chunks(per_depth).all(|t| t == &tokens[..per_depth]), "grid {i}");
        let cells = first.iter().filter(|&&m| m).count() / (PATCH[1] * PATCH[2]);
        assert_eq!(cells, grid.masked_cells());
    }
}

#[test]
fn degenerate_ratios_are_exact() {
    for seed in 0..200 {
        let none = sample_mask(&MaskSpec::new(0.0, PATCH, seed), DIMS).unwrap();
        let all = sample_mask(&MaskSpec::new(1.0, PATCH, seed), DIMS).unwrap();
        assert_eq!(none.masked_cells(), 0);
        assert_eq!(all.masked_cells(), all.rows() * all.cols());
    }
}

#[test]
fn mean_mask_fraction_matches_ratio() {
    let n = 10_000;
    let total: f64 = (0..n)
        .map(|i| sample_mask(&MaskSpec::new(0.4, PATCH, derive_seed(1, "mask", i)), DIMS).unwrap().masked_fraction())
        .sum();
    let mean = total / n as f64;
    assert!((mean - 0.4).abs() <= 0.01, "{mean}");
}
