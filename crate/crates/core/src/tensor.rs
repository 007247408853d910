//! Dense rank-3 tensors in row-major `(row, col, channel)` order.
//!
//! Images are `H×W×3` tensors with values in `[0, 1]`; latent grids are
//! `h×w×n_k` tensors of code vectors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor3 {
    rows: usize,
    cols: usize,
    channels: usize,
    data: Vec<f64>,
}

/// An `H×W×3` RGB image.
pub type Image = Tensor3;

/// The continuous `h×w×n_k` grid being optimized.
pub type LatentGrid = Tensor3;

impl Tensor3 {
    pub fn zeros(rows: usize, cols: usize, channels: usize) -> Self {
        Self::filled(rows, cols, channels, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, channels: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            channels,
            data: vec![value; rows * cols * channels],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols * channels {
            return Err(Error::contract(format!(
                "tensor data has {} values, expected {rows}x{cols}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            channels,
            data,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols * channels);
        for r in 0..rows {
            for c in 0..cols {
                for k in 0..channels {
                    data.push(f(r, c, k));
                }
            }
        }
        Self {
            rows,
            cols,
            channels,
            data,
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.rows, self.cols, self.channels)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, r: usize, c: usize, k: usize) -> usize {
        (r * self.cols + c) * self.channels + k
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize, k: usize) -> f64 {
        self.data[self.index(r, c, k)]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, k: usize, v: f64) {
        let i = self.index(r, c, k);
        self.data[i] = v;
    }

    /// The channel vector stored at one grid cell.
    pub fn cell(&self, r: usize, c: usize) -> &[f64] {
        let start = self.index(r, c, 0);
        &self.data[start..start + self.channels]
    }

    pub fn cell_mut(&mut self, r: usize, c: usize) -> &mut [f64] {
        let start = self.index(r, c, 0);
        &mut self.data[start..start + self.channels]
    }

    pub fn same_dims(&self, other: &Tensor3) -> bool {
        self.dims() == other.dims()
    }

    pub fn ensure_dims(&self, dims: (usize, usize, usize), what: &str) -> Result<()> {
        if self.dims() != dims {
            return Err(Error::contract(format!(
                "{what}: got {:?}, expected {:?}",
                self.dims(),
                dims
            )));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor3 {
        Tensor3 {
            rows: self.rows,
            cols: self.cols,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor3) {
        debug_assert!(self.same_dims(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn dot(&self, other: &Tensor3) -> f64 {
        debug_assert!(self.same_dims(other));
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor3) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn mean_sq(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|v| v * v).sum::<f64>() / self.data.len() as f64
    }

    /// Per-channel mean over all cells.
    pub fn channel_means(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.channels];
        for cell in self.data.chunks_exact(self.channels.max(1)) {
            for (s, v) in sums.iter_mut().zip(cell) {
                *s += v;
            }
        }
        let n = (self.rows * self.cols).max(1) as f64;
        sums.into_iter().map(|s| s / n).collect()
    }
}
