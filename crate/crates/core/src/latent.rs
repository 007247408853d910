//! Discrete latent vocabulary: nearest-code quantization and the
//! straight-through gradient rule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{LatentGrid, Tensor3};

/// `K` code vectors of dimension `n_k`, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    dim: usize,
    codes: Vec<f64>,
}

impl Codebook {
    pub fn new(dim: usize, codes: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidCodebook("code dimension must be positive".into()));
        }
        if codes.is_empty() {
            return Err(Error::InvalidCodebook("codebook is empty".into()));
        }
        if !codes.len().is_multiple_of(dim) {
            return Err(Error::InvalidCodebook(format!(
                "{} values do not form rows of length {dim}",
                codes.len()
            )));
        }
        if codes.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidCodebook("non-finite code value".into()));
        }
        Ok(Self { dim, codes })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::InvalidCodebook("rows differ in length".into()));
        }
        Self::new(dim, rows.concat())
    }

    /// Number of codes `K`.
    pub fn len(&self) -> usize {
        self.codes.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    /// Code dimension `n_k`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn code(&self, k: usize) -> &[f64] {
        &self.codes[k * self.dim..(k + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.codes
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.codes.chunks_exact(self.dim)
    }
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest code by squared Euclidean distance; ties go to the smallest index.
pub fn quantize_cell<'a>(z: &[f64], codebook: &'a Codebook) -> Result<(usize, &'a [f64])> {
    if codebook.is_empty() {
        return Err(Error::InvalidCodebook("codebook is empty".into()));
    }
    if z.len() != codebook.dim() {
        return Err(Error::contract(format!(
            "cell has dimension {}, codebook has {}",
            z.len(),
            codebook.dim()
        )));
    }
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, code) in codebook.iter().enumerate() {
        let d = sq_dist(z, code);
        // strict `<` keeps the earliest index on ties
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    Ok((best, codebook.code(best)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedGrid {
    pub indices: Vec<usize>,
    pub values: LatentGrid,
}

impl QuantizedGrid {
    pub fn index_at(&self, r: usize, c: usize) -> usize {
        self.indices[r * self.values.cols() + c]
    }
}

pub fn quantize_grid(z: &LatentGrid, codebook: &Codebook) -> Result<QuantizedGrid> {
    let (rows, cols, dim) = z.dims();
    if dim != codebook.dim() {
        return Err(Error::contract(format!(
            "latent has {dim} channels, codebook has {}",
            codebook.dim()
        )));
    }
    let mut indices = Vec::with_capacity(rows * cols);
    let mut values = Tensor3::zeros(rows, cols, dim);
    for r in 0..rows {
        for c in 0..cols {
            let (k, code) = quantize_cell(z.cell(r, c), codebook)?;
            indices.push(k);
            values.cell_mut(r, c).copy_from_slice(code);
        }
    }
    Ok(QuantizedGrid { indices, values })
}

/// Quantization is treated as the identity when differentiating.
#[inline]
pub fn straight_through_adjoint(cotangent: Tensor3) -> Tensor3 {
    cotangent
}
