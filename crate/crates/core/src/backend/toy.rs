//! Analytically differentiable stand-ins for the autoencoder and embedder.
//!
//! The toy decoder paints each latent cell's block with
//! `logistic(z[0..3])`; the toy embedder maps an image to its mean colour
//! minus mid-gray, normalized. Everything is small enough to check by hand,
//! with `D = 3`.

use crate::backend::{Backend, BackendInfo};
use crate::error::{Error, Result};
use crate::latent::Codebook;
use crate::rng::mix64;
use crate::tensor::{Image, LatentGrid, Tensor3};

/// Named colours known to the toy text embedder, in codebook order.
pub const COLOR_TABLE: [(&str, [f64; 3]); 8] = [
    ("red", [1.0, 0.0, 0.0]),
    ("green", [0.0, 1.0, 0.0]),
    ("blue", [0.0, 0.0, 1.0]),
    ("white", [1.0, 1.0, 1.0]),
    ("black", [0.0, 0.0, 0.0]),
    ("yellow", [1.0, 1.0, 0.0]),
    ("cyan", [0.0, 1.0, 1.0]),
    ("magenta", [1.0, 0.0, 1.0]),
];

/// Codebook index of the red corner code in [`ToyConfig::default_codebook`].
pub const RED_CODE: usize = 0;

pub const MAX_TEXT_BYTES: usize = 4096;

const COLOR_CLAMP: (f64, f64) = (0.01, 0.99);
const WORD_HASH_SEED: u64 = 0x5EED_C0DE_2021_0001;
const ZERO_NORM: f64 = 1e-12;
const FALLBACK: [f64; 3] = [1.0, 0.0, 0.0];

#[derive(Debug, Clone, PartialEq)]
pub struct ToyConfig {
    pub latent_rows: usize,
    pub latent_cols: usize,
    pub code_dim: usize,
    pub image_rows: usize,
    pub image_cols: usize,
    pub input_res: usize,
    pub codebook: Codebook,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self::with_image(64, 64)
    }
}

impl ToyConfig {
    /// 8×8 latent with 4 channels decoding to `rows×cols` pixels.
    pub fn with_image(rows: usize, cols: usize) -> Self {
        Self {
            latent_rows: 8,
            latent_cols: 8,
            code_dim: 4,
            image_rows: rows,
            image_cols: cols,
            input_res: 16,
            codebook: Self::default_codebook(4),
        }
    }

    /// One code per colour-table entry: logit of the clamped colour in the
    /// first three channels, zero elsewhere.
    pub fn default_codebook(code_dim: usize) -> Codebook {
        assert!(code_dim >= 3, "toy codes need at least three channels");
        let rows: Vec<Vec<f64>> = COLOR_TABLE
            .iter()
            .map(|(_, rgb)| {
                let mut row = vec![0.0; code_dim];
                for (dst, &c) in row.iter_mut().zip(rgb) {
                    *dst = logit(c.clamp(COLOR_CLAMP.0, COLOR_CLAMP.1));
                }
                row
            })
            .collect();
        Codebook::from_rows(&rows).expect("toy codebook is well formed")
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_rows == 0
            || self.latent_cols == 0
            || !self.image_rows.is_multiple_of(self.latent_rows)
            || !self.image_cols.is_multiple_of(self.latent_cols)
            || self.image_rows < self.latent_rows
            || self.image_cols < self.latent_cols
        {
            return Err(Error::Config(format!(
                "toy backend needs image dims divisible by the {}x{} latent, got {}x{}",
                self.latent_rows, self.latent_cols, self.image_rows, self.image_cols
            )));
        }
        if self.code_dim < 3 || self.codebook.dim() != self.code_dim {
            return Err(Error::Config("toy codes need at least three channels".into()));
        }
        if self.input_res == 0 {
            return Err(Error::Config("embedder resolution must be positive".into()));
        }
        Ok(())
    }
}

#[inline]
pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[derive(Debug, Clone)]
pub struct ToyBackend {
    cfg: ToyConfig,
    info: BackendInfo,
}

impl ToyBackend {
    pub fn new(cfg: ToyConfig) -> Result<Self> {
        cfg.validate()?;
        let info = BackendInfo {
            name: "toy".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            embed_dim: 3,
            input_res: cfg.input_res,
            latent_rows: cfg.latent_rows,
            latent_cols: cfg.latent_cols,
            image_rows: cfg.image_rows,
            image_cols: cfg.image_cols,
            codebook: cfg.codebook.clone(),
        };
        Ok(Self { cfg, info })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.cfg
    }

    fn block(&self) -> (usize, usize) {
        (
            self.cfg.image_rows / self.cfg.latent_rows,
            self.cfg.image_cols / self.cfg.latent_cols,
        )
    }
}

/// Unit 3-vector assigned to a word outside the colour table.
pub fn word_vector(word: &str) -> [f64; 3] {
    // FNV-1a, then the stream mixer
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ WORD_HASH_SEED;
    for b in word.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut v = [0.0; 3];
    for (i, x) in v.iter_mut().enumerate() {
        let bits = mix64(h ^ i as u64);
        *x = (bits >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0;
    }
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if n < ZERO_NORM {
        return FALLBACK;
    }
    v.map(|x| x / n)
}

fn centred_unit(v: [f64; 3]) -> Vec<f64> {
    let c = [v[0] - 0.5, v[1] - 0.5, v[2] - 0.5];
    let n = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
    if n < ZERO_NORM {
        FALLBACK.to_vec()
    } else {
        c.iter().map(|x| x / n).collect()
    }
}

pub fn toy_embed_text(text: &str) -> Result<Vec<f64>> {
    if text.len() > MAX_TEXT_BYTES {
        return Err(Error::protocol(
            0,
            format!("text of {} bytes exceeds {MAX_TEXT_BYTES}", text.len()),
        ));
    }
    let lower = text.to_lowercase();
    let words: Vec<&str> = lower
        .split_whitespace()
        .map(|w| w.trim_matches(|ch: char| !ch.is_alphanumeric()))
        .filter(|w| !w.is_empty())
        .collect();
    if words.is_empty() {
        return Err(Error::backend("cannot embed empty text"));
    }
    let mut sum = [0.0; 3];
    for w in &words {
        let v = COLOR_TABLE
            .iter()
            .find(|(name, _)| name == w)
            .map(|(_, rgb)| *rgb)
            .unwrap_or_else(|| word_vector(w));
        for (s, x) in sum.iter_mut().zip(v) {
            *s += x;
        }
    }
    let n = words.len() as f64;
    Ok(centred_unit(sum.map(|s| s / n)))
}

fn mean_rgb(image: &Tensor3) -> [f64; 3] {
    let m = image.channel_means();
    [m[0], m[1], m[2]]
}

pub fn toy_embed_image(image: &Tensor3) -> Vec<f64> {
    centred_unit(mean_rgb(image))
}

pub fn toy_embed_image_vjp(image: &Tensor3, cotangent: &[f64]) -> Tensor3 {
    let m = mean_rgb(image);
    let v = [m[0] - 0.5, m[1] - 0.5, m[2] - 0.5];
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    let (rows, cols, _) = image.dims();
    if n < ZERO_NORM {
        return Tensor3::zeros(rows, cols, 3);
    }
    let u = v.map(|x| x / n);
    let ug: f64 = (0..3).map(|k| u[k] * cotangent[k]).sum();
    let pixels = (rows * cols) as f64;
    let gv: Vec<f64> = (0..3).map(|k| (cotangent[k] - u[k] * ug) / n / pixels).collect();
    Tensor3::from_fn(rows, cols, 3, |_, _, k| gv[k])
}

impl Backend for ToyBackend {
    fn info(&self) -> &BackendInfo {
        &self.info
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        toy_embed_text(text)
    }

    fn embed_image(&self, image: &Tensor3) -> Result<Vec<f64>> {
        image.ensure_dims(self.info.embed_input_dims(), "toy embed_image")?;
        if !image.is_finite() {
            return Err(Error::backend("non-finite pixel passed to embed_image"));
        }
        Ok(toy_embed_image(image))
    }

    fn embed_image_vjp(&self, image: &Tensor3, cotangent: &[f64]) -> Result<Tensor3> {
        image.ensure_dims(self.info.embed_input_dims(), "toy embed_image_vjp")?;
        if cotangent.len() != 3 {
            return Err(Error::contract("toy embedding cotangent must have length 3"));
        }
        Ok(toy_embed_image_vjp(image, cotangent))
    }

    fn decode(&self, z: &LatentGrid) -> Result<Image> {
        z.ensure_dims(self.info.latent_dims(), "toy decode")?;
        let (br, bc) = self.block();
        Ok(Tensor3::from_fn(
            self.cfg.image_rows,
            self.cfg.image_cols,
            3,
            |r, c, k| logistic(z.get(r / br, c / bc, k)),
        ))
    }

    fn decode_vjp(&self, z: &LatentGrid, cotangent: &Image) -> Result<LatentGrid> {
        z.ensure_dims(self.info.latent_dims(), "toy decode_vjp latent")?;
        cotangent.ensure_dims(self.info.image_dims(), "toy decode_vjp cotangent")?;
        let (br, bc) = self.block();
        let mut out = Tensor3::zeros(self.cfg.latent_rows, self.cfg.latent_cols, self.cfg.code_dim);
        for r in 0..self.cfg.image_rows {
            for c in 0..self.cfg.image_cols {
                for k in 0..3 {
                    let i = out.index(r / br, c / bc, k);
                    out.as_mut_slice()[i] += cotangent.get(r, c, k);
                }
            }
        }
        for i in 0..self.cfg.latent_rows {
            for j in 0..self.cfg.latent_cols {
                for k in 0..3 {
                    let s = logistic(z.get(i, j, k));
                    let idx = out.index(i, j, k);
                    out.as_mut_slice()[idx] *= s * (1.0 - s);
                }
            }
        }
        Ok(out)
    }

    fn encode(&self, image: &Image) -> Result<LatentGrid> {
        image.ensure_dims(self.info.image_dims(), "toy encode")?;
        let (br, bc) = self.block();
        let area = (br * bc) as f64;
        let mut z = Tensor3::zeros(self.cfg.latent_rows, self.cfg.latent_cols, self.cfg.code_dim);
        for i in 0..self.cfg.latent_rows {
            for j in 0..self.cfg.latent_cols {
                for k in 0..3 {
                    let mut sum = 0.0;
                    for r in i * br..(i + 1) * br {
                        for c in j * bc..(j + 1) * bc {
                            sum += image.get(r, c, k);
                        }
                    }
                    let mean = (sum / area).clamp(COLOR_CLAMP.0, COLOR_CLAMP.1);
                    z.set(i, j, k, logit(mean));
                }
            }
        }
        Ok(z)
    }
}
