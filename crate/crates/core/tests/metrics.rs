mod common;

use common::{idx, oracle_hd, random_mask, DIMS};
use medctx_core::metrics::{dsc, hausdorff, hd95, SurfaceDistance};
use medctx_core::LabelMask;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn hd95_equals_brute_force_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let spacings = [[1.0, 1.0, 1.0], [2.5, 0.7, 0.7], [1.5, 1.0, 0.5]];
    for trial in 0..100 {
        let s = spacings[trial % spacings.len()];
        let a = random_mask(&mut rng);
        let b = random_mask(&mut rng);
        let ma = LabelMask::new(DIMS, a.clone(), s).unwrap();
        let mb = LabelMask::new(DIMS, b.clone(), s).unwrap();
        assert_eq!(hd95(&ma, &mb).unwrap().value(), oracle_hd(&a, &b, s, 95.0), "trial {trial}");
        assert_eq!(hausdorff(&ma, &mb).unwrap().value(), oracle_hd(&a, &b, s, 100.0), "trial {trial}");
    }
}

#[test]
fn empty_side_is_undefined() {
    let a = LabelMask::new(DIMS, vec![false; 512], [1.0; 3]).unwrap();
    let mut v = vec![false; 512];
    v[idx([3, 3, 3])] = true;
    let b = LabelMask::new(DIMS, v, [1.0; 3]).unwrap();
    assert_eq!(hd95(&a, &b).unwrap(), SurfaceDistance::Undefined);
    assert_eq!(hd95(&b, &a).unwrap(), SurfaceDistance::Undefined);
}

#[test]
fn dsc_hand_cases() {
    let mask = |on: &[usize]| {
        let mut v = vec![false; 512];
        on.iter().for_each(|&i| v[i] = true);
        LabelMask::new(DIMS, v, [1.0; 3]).unwrap()
    };
    let a = mask(&[0, 1, 2, 3, 4]);
    assert_eq!(dsc(&a, &a).unwrap(), 1.0);
    assert_eq!(dsc(&a, &mask(&[100, 101])).unwrap(), 0.0);
    // 2 * 3 / (5 + 5)
    assert_eq!(dsc(&a, &mask(&[2, 3, 4, 200, 201])).unwrap(), 0.6);
}

#[test]
fn doubling_spacing_doubles_hd95_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let s = [1.25, 0.8, 0.6];
    for _ in 0..30 {
        let a = LabelMask::new(DIMS, random_mask(&mut rng), s).unwrap();
        let b = LabelMask::new(DIMS, random_mask(&mut rng), s).unwrap();
        let twice = s.map(|v| 2.0 * v);
        let base = hd95(&a, &b).unwrap().value().unwrap();
        let scaled = hd95(&a.with_spacing(twice).unwrap(), &b.with_spacing(twice).unwrap()).unwrap().value().unwrap();
        assert_eq!(scaled, 2.0 * base);
    }
}
