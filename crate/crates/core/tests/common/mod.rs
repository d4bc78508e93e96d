//! Shared test helpers: a brute-force metric oracle, seeded mask sampling
//! and gradient-check fixtures.
#![allow(dead_code)]

pub mod grad;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semiseg::metrics::BinaryMask;

pub fn voxels(m: &BinaryMask) -> Vec<[usize; 3]> {
    m.data
        .indexed_iter()
        .filter(|(_, &b)| b)
        .map(|((z, h, w), _)| [z, h, w])
        .collect()
}

fn dist(a: [usize; 3], b: [usize; 3], s: [f64; 3]) -> f64 {
    (0..3)
        .map(|i| ((a[i] as f64 - b[i] as f64) * s[i]).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Mean over `from` of the distance to the nearest point of `to`, by
/// exhaustive pairwise search.
pub fn brute_directed(from: &[[usize; 3]], to: &[[usize; 3]], s: [f64; 3]) -> f64 {
    from.iter()
        .map(|&a| to.iter().map(|&b| dist(a, b, s)).fold(f64::INFINITY, f64::min))
        .sum::<f64>()
        / from.len() as f64
}

pub fn brute_dsc(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let (mut i, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(b.data.iter()) {
        na += x as usize;
        nb += y as usize;
        i += (x && y) as usize;
    }
    if na + nb == 0 { 1.0 } else { 2.0 * i as f64 / (na + nb) as f64 }
}

pub fn brute_ahd(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let (va, vb) = (voxels(a), voxels(b));
    brute_directed(&va, &vb, a.spacing_mm).max(brute_directed(&vb, &va, a.spacing_mm))
}

/// Surface by explicit neighbour enumeration.
pub fn brute_surface(m: &BinaryMask) -> Vec<[usize; 3]> {
    let [d, h, w] = m.dims();
    voxels(m)
        .into_iter()
        .filter(|&[z, y, x]| {
            let offs: [[isize; 3]; 6] = [[-1, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0], [0, 0, -1], [0, 0, 1]];
            offs.iter().any(|o| {
                let (nz, ny, nx) = (z as isize + o[0], y as isize + o[1], x as isize + o[2]);
                nz < 0 || ny < 0 || nx < 0 || nz >= d as isize || ny >= h as isize || nx >= w as isize
                    || !m.data[[nz as usize, ny as usize, nx as usize]]
            })
        })
        .collect()
}

pub fn brute_ashd(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let (sa, sb) = (brute_surface(a), brute_surface(b));
    0.5 * (brute_directed(&sa, &sb, a.spacing_mm) + brute_directed(&sb, &sa, a.spacing_mm))
}

pub fn brute_vd(gt: &BinaryMask, pred: &BinaryMask) -> f64 {
    let t = voxels(gt).len() as f64;
    100.0 * (voxels(pred).len() as f64 - t) / t
}

/// Random nonempty mask pair of a shared random shape up to `max_dim`,
/// mixing speckle noise with a few solid boxes.
pub fn random_pair(seed: u64, max_dim: usize, spacing: [f64; 3]) -> (BinaryMask, BinaryMask) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = [0; 3].map(|_| rng.random_range(1..=max_dim));
    let make = |rng: &mut ChaCha8Rng| {
        let density = rng.random_range(0.0..0.3);
        let mut a = Array3::from_shape_fn((dims[0], dims[1], dims[2]), |_| rng.random_bool(density));
        for _ in 0..rng.random_range(0..3) {
            let lo = dims.map(|d| rng.random_range(0..d));
            let hi = [0, 1, 2].map(|i| rng.random_range(lo[i]..dims[i]) + 1);
            a.slice_mut(ndarray::s![lo[0]..hi[0], lo[1]..hi[1], lo[2]..hi[2]]).fill(true);
        }
        if !a.iter().any(|&b| b) {
            let v = dims.map(|d| rng.random_range(0..d));
            a[[v[0], v[1], v[2]]] = true;
        }
        BinaryMask::new(a, spacing).unwrap()
    };
    let a = make(&mut rng);
    let b = make(&mut rng);
    (a, b)
}
