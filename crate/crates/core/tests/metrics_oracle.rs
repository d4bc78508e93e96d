mod common;

use common::*;
use semiseg::metrics::{ahd, ashd, dsc, extract_surface, volume_difference, BinaryMask};

const ANISO: [f64; 3] = [1.5, 0.97, 0.97];

#[test]
fn efficient_metrics_equal_brute_force_on_random_pairs() {
    for seed in 0..200u64 {
        let spacing = if seed % 2 == 0 { ANISO } else { [1.0; 3] };
        let (a, b) = random_pair(seed, 16, spacing);
        assert_eq!(dsc(&a, &b).unwrap(), brute_dsc(&a, &b), "dsc seed {seed}");
        assert_eq!(volume_difference(&a, &b).unwrap(), brute_vd(&a, &b), "vd seed {seed}");
        let (h, hb) = (ahd(&a, &b).unwrap(), brute_ahd(&a, &b));
        assert!((h - hb).abs() <= 1e-9, "ahd seed {seed}: {h} vs {hb}");
        let (s, sb) = (ashd(&a, &b).unwrap(), brute_ashd(&a, &b));
        assert!((s - sb).abs() <= 1e-9, "ashd seed {seed}: {s} vs {sb}");
        assert_eq!(voxels(&extract_surface(&a).unwrap()), brute_surface(&a));
    }
}

#[test]
fn distance_metrics_are_symmetric() {
    for seed in 1000..1100u64 {
        let (a, b) = random_pair(seed, 12, ANISO);
        assert!((ahd(&a, &b).unwrap() - ahd(&b, &a).unwrap()).abs() < 1e-12);
        assert!((ashd(&a, &b).unwrap() - ashd(&b, &a).unwrap()).abs() < 1e-12);
    }
}

#[test]
fn self_comparison_is_perfect() {
    for seed in 2000..2050u64 {
        let (a, _) = random_pair(seed, 12, ANISO);
        assert_eq!(dsc(&a, &a).unwrap(), 1.0);
        assert_eq!(ahd(&a, &a).unwrap(), 0.0);
        assert_eq!(ashd(&a, &a).unwrap(), 0.0);
        assert_eq!(volume_difference(&a, &a).unwrap(), 0.0);
    }
}

#[test]
fn scaling_spacing_scales_distances_only() {
    for seed in 3000..3050u64 {
        let (a, b) = random_pair(seed, 12, ANISO);
        let k = 2.5;
        let scale = |m: &BinaryMask| BinaryMask::new(m.data.clone(), m.spacing_mm.map(|s| s * k)).unwrap();
        let (ak, bk) = (scale(&a), scale(&b));
        assert!((ahd(&ak, &bk).unwrap() - k * ahd(&a, &b).unwrap()).abs() < 1e-9);
        assert!((ashd(&ak, &bk).unwrap() - k * ashd(&a, &b).unwrap()).abs() < 1e-9);
        assert_eq!(dsc(&ak, &bk).unwrap(), dsc(&a, &b).unwrap());
        assert_eq!(volume_difference(&ak, &bk).unwrap(), volume_difference(&a, &b).unwrap());
    }
}
