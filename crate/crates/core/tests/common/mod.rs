//! Shared oracles for the integration suites.
#![allow(dead_code)]

pub mod gradcheck;
pub mod oracles;

use erft::raster::RasterImage;
use erft::Tensor;
use rand::{Rng, SeedableRng};
use rand_pcg::Pcg64;

pub fn rng(seed: u64) -> Pcg64 {
    Pcg64::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut Pcg64, shape: [usize; 4], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Uniform magnitudes in `[lo, hi)` with random signs.
pub fn signed_tensor(rng: &mut Pcg64, shape: [usize; 4], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(lo..hi);
            if rng.random::<bool>() {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

pub fn random_raster(rng: &mut Pcg64, c: usize, h: usize, w: usize, lo: f32, hi: f32) -> RasterImage {
    RasterImage::new(c, h, w, (0..c * h * w).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}
