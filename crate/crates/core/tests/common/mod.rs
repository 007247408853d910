#![allow(dead_code)]

use std::sync::Arc;

use latentsteer_core::backend::toy::{ToyBackend, ToyConfig};
use latentsteer_core::backend::Backend;
use latentsteer_core::rng::{DeterministicStream, Domain};
use latentsteer_core::Tensor3;

pub fn toy() -> Arc<dyn Backend> {
    Arc::new(ToyBackend::new(ToyConfig::default()).unwrap())
}

pub fn stream(tag: u64) -> DeterministicStream {
    DeterministicStream::new(tag, Domain::Test, 0)
}

/// Uniform entries on `[lo, hi)`.
pub fn random_tensor(rng: &mut DeterministicStream, dims: (usize, usize, usize), lo: f64, hi: f64) -> Tensor3 {
    let n = dims.0 * dims.1 * dims.2;
    let data = (0..n).map(|_| lo + (hi - lo) * rng.next_f64()).collect();
    Tensor3::from_vec(dims.0, dims.1, dims.2, data).unwrap()
}

pub fn random_vec(rng: &mut DeterministicStream, n: usize) -> Vec<f64> {
    (0..n).map(|_| 2.0 * rng.next_f64() - 1.0).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

pub fn axpy(x: &Tensor3, h: f64, v: &Tensor3) -> Tensor3 {
    let data = x.as_slice().iter().zip(v.as_slice()).map(|(a, b)| a + h * b).collect();
    Tensor3::from_vec(x.rows(), x.cols(), x.channels(), data).unwrap()
}

/// Kolmogorov–Smirnov statistic of `samples` against U(0, 1).
pub fn ks_uniform(samples: &[f64]) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &x)| ((i + 1) as f64 / n - x).max(x - i as f64 / n))
        .fold(0.0, f64::max)
}
