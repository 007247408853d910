//! The contract between the optimizer and a pair of differentiable models:
//! an image autoencoder (`encode`/`decode`) and a joint text-image embedder.
//!
//! Backends hand back raw vectors; the engine checks and renormalizes
//! embeddings itself. Gradients cross the boundary only as explicit
//! vector-Jacobian products.

pub mod remote;
pub mod toy;
pub mod wire;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::Codebook;
use crate::loss::{norm, Embedding};
use crate::tensor::{Image, LatentGrid, Tensor3};

/// Embeddings further than this from unit norm are rejected.
pub const BACKEND_UNIT_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendInfo {
    pub name: String,
    pub version: String,
    /// Embedding dimension `D`.
    pub embed_dim: usize,
    /// Side of the square images the embedder accepts.
    pub input_res: usize,
    pub latent_rows: usize,
    pub latent_cols: usize,
    pub image_rows: usize,
    pub image_cols: usize,
    pub codebook: Codebook,
}

impl BackendInfo {
    pub fn code_dim(&self) -> usize {
        self.codebook.dim()
    }

    pub fn latent_dims(&self) -> (usize, usize, usize) {
        (self.latent_rows, self.latent_cols, self.codebook.dim())
    }

    pub fn image_dims(&self) -> (usize, usize, usize) {
        (self.image_rows, self.image_cols, 3)
    }

    pub fn embed_input_dims(&self) -> (usize, usize, usize) {
        (self.input_res, self.input_res, 3)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.embed_dim,
            self.input_res,
            self.latent_rows,
            self.latent_cols,
            self.image_rows,
            self.image_cols,
        ];
        if dims.contains(&0) {
            return Err(Error::backend("backend reported a zero dimension"));
        }
        Ok(())
    }
}

pub trait Backend: Send + Sync {
    fn info(&self) -> &BackendInfo;

    fn embed_text(&self, text: &str) -> Result<Vec<f64>>;

    fn embed_image(&self, image: &Tensor3) -> Result<Vec<f64>>;

    fn embed_image_vjp(&self, image: &Tensor3, cotangent: &[f64]) -> Result<Tensor3>;

    fn decode(&self, z: &LatentGrid) -> Result<Image>;

    fn decode_vjp(&self, z: &LatentGrid, cotangent: &Image) -> Result<LatentGrid>;

    fn encode(&self, image: &Image) -> Result<LatentGrid>;
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn info(&self) -> &BackendInfo {
        (**self).info()
    }
    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        (**self).embed_text(text)
    }
    fn embed_image(&self, image: &Tensor3) -> Result<Vec<f64>> {
        (**self).embed_image(image)
    }
    fn embed_image_vjp(&self, image: &Tensor3, cotangent: &[f64]) -> Result<Tensor3> {
        (**self).embed_image_vjp(image, cotangent)
    }
    fn decode(&self, z: &LatentGrid) -> Result<Image> {
        (**self).decode(z)
    }
    fn decode_vjp(&self, z: &LatentGrid, cotangent: &Image) -> Result<LatentGrid> {
        (**self).decode_vjp(z, cotangent)
    }
    fn encode(&self, image: &Image) -> Result<LatentGrid> {
        (**self).encode(image)
    }
}

/// A unit embedding plus the raw norm it was divided by.
#[derive(Debug, Clone)]
pub struct CheckedEmbedding {
    pub unit: Embedding,
    pub raw_norm: f64,
}

/// Asserts a backend embedding is unit-norm within tolerance, then
/// renormalizes it exactly.
pub fn check_embedding(raw: Vec<f64>, expected_dim: usize) -> Result<CheckedEmbedding> {
    if raw.len() != expected_dim {
        return Err(Error::backend(format!(
            "embedding has dimension {}, metadata says {expected_dim}",
            raw.len()
        )));
    }
    let n = norm(&raw);
    if !n.is_finite() || (n - 1.0).abs() > BACKEND_UNIT_TOLERANCE {
        return Err(Error::backend(format!("embedding norm {n} is not 1")));
    }
    Ok(CheckedEmbedding {
        unit: Embedding::normalize(raw)?,
        raw_norm: n,
    })
}

/// Pulls a cotangent on the renormalized embedding back to the raw one:
/// `(I − u·uᵀ)·g / ‖e‖`.
pub fn renormalize_vjp(unit: &Embedding, raw_norm: f64, g: &[f64]) -> Vec<f64> {
    let u = unit.as_slice();
    let ug: f64 = u.iter().zip(g).map(|(a, b)| a * b).sum();
    u.iter().zip(g).map(|(ui, gi)| (gi - ui * ug) / raw_norm).collect()
}

pub fn embed_text(backend: &dyn Backend, text: &str) -> Result<Embedding> {
    let raw = backend.embed_text(text)?;
    Ok(check_embedding(raw, backend.info().embed_dim)?.unit)
}

/// Rounds every value crossing the boundary to single precision, which is
/// exactly what a backend attached over the wire protocol sees and returns.
pub struct F32Boundary<B> {
    inner: B,
    info: BackendInfo,
}

pub(crate) fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

fn round_tensor(t: &Tensor3) -> Tensor3 {
    t.map(round_f32)
}

fn round_vec(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(round_f32).collect()
}

impl<B: Backend> F32Boundary<B> {
    pub fn new(inner: B) -> Result<Self> {
        let mut info = inner.info().clone();
        info.codebook = Codebook::new(
            info.codebook.dim(),
            info.codebook.as_slice().iter().map(|&v| round_f32(v)).collect(),
        )?;
        Ok(Self { inner, info })
    }
}

impl<B: Backend> Backend for F32Boundary<B> {
    fn info(&self) -> &BackendInfo {
        &self.info
    }
    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        self.inner.embed_text(text).map(round_vec)
    }
    fn embed_image(&self, image: &Tensor3) -> Result<Vec<f64>> {
        self.inner.embed_image(&round_tensor(image)).map(round_vec)
    }
    fn embed_image_vjp(&self, image: &Tensor3, cotangent: &[f64]) -> Result<Tensor3> {
        let cot: Vec<f64> = cotangent.iter().map(|&v| round_f32(v)).collect();
        self.inner
            .embed_image_vjp(&round_tensor(image), &cot)
            .map(|t| round_tensor(&t))
    }
    fn decode(&self, z: &LatentGrid) -> Result<Image> {
        self.inner.decode(&round_tensor(z)).map(|t| round_tensor(&t))
    }
    fn decode_vjp(&self, z: &LatentGrid, cotangent: &Image) -> Result<LatentGrid> {
        self.inner
            .decode_vjp(&round_tensor(z), &round_tensor(cotangent))
            .map(|t| round_tensor(&t))
    }
    fn encode(&self, image: &Image) -> Result<LatentGrid> {
        self.inner.encode(&round_tensor(image)).map(|t| round_tensor(&t))
    }
}

/// Resolves a backend spec: `toy` builds an in-process toy pair rendering
/// `rows`×`cols`, `socket:<path>` connects to an external backend server.
pub fn open_backend(spec: &str, rows: usize, cols: usize) -> Result<Arc<dyn Backend>> {
    if spec == "toy" {
        return Ok(Arc::new(toy::ToyBackend::new(toy::ToyConfig::with_image(rows, cols))?));
    }
    if let Some(path) = spec.strip_prefix("socket:") {
        let conns = std::thread::available_parallelism().map_or(1, |n| n.get());
        return Ok(Arc::new(remote::WireBackend::connect_unix(
            std::path::Path::new(path),
            conns,
        )?));
    }
    Err(Error::Config(format!("backend: unknown backend `{spec}`")))
}
