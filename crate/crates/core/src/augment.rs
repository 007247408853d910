//! Random crop-and-augment chains.
//!
//! A chain is sampled once from a [`DeterministicStream`] and then applied as
//! a fixed sequence of stages: crop-resize to `R×R`, horizontal flip, affine
//! warp, perspective warp, brightness/contrast jitter, additive Gaussian
//! noise. Every geometric stage is bilinear resampling with edge clamping,
//! which is linear in the image, so the chain has an exact adjoint.

use nalgebra::{SMatrix, SVector};
use rand::Rng;
use rand_core::RngCore;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{DeterministicStream, Domain};
use crate::tensor::{Image, Tensor3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationConfig {
    /// Number of crops per step.
    pub cuts: usize,
    pub crop_frac_min: f64,
    pub crop_frac_max: f64,
    pub flip: bool,
    pub flip_prob: f64,
    pub affine: bool,
    pub rotation_deg: f64,
    pub translate: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub perspective: bool,
    pub perspective_distortion: f64,
    pub perspective_prob: f64,
    pub color_jitter: bool,
    pub brightness: f64,
    pub contrast_min: f64,
    pub contrast_max: f64,
    pub noise: bool,
    pub noise_sigma: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            cuts: 32,
            crop_frac_min: 0.25,
            crop_frac_max: 1.0,
            flip: true,
            flip_prob: 0.5,
            affine: true,
            rotation_deg: 15.0,
            translate: 0.1,
            scale_min: 0.9,
            scale_max: 1.1,
            perspective: true,
            perspective_distortion: 0.2,
            perspective_prob: 0.7,
            color_jitter: true,
            brightness: 0.1,
            contrast_min: 0.9,
            contrast_max: 1.1,
            noise: true,
            noise_sigma: 0.1,
        }
    }
}

/// Names accepted by [`AugmentationConfig::disable`].
pub const STAGE_NAMES: [&str; 5] = ["flip", "affine", "perspective", "color_jitter", "noise"];

impl AugmentationConfig {
    /// Crops only: every stage after the crop switched off.
    pub fn crops_only() -> Self {
        Self {
            flip: false,
            affine: false,
            perspective: false,
            color_jitter: false,
            noise: false,
            ..Self::default()
        }
    }

    pub fn disable(&mut self, stage: &str) -> Result<()> {
        match stage {
            "flip" => self.flip = false,
            "affine" => self.affine = false,
            "perspective" => self.perspective = false,
            "color_jitter" | "jitter" => self.color_jitter = false,
            "noise" => self.noise = false,
            other => {
                return Err(Error::Config(format!(
                    "unknown augmentation `{other}` (expected one of {})",
                    STAGE_NAMES.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("augmentation: {m}")));
        if self.cuts == 0 {
            return bad("cuts must be at least 1");
        }
        if !(self.crop_frac_min > 0.0 && self.crop_frac_min <= self.crop_frac_max && self.crop_frac_max <= 1.0) {
            return bad("crop fractions must satisfy 0 < min <= max <= 1");
        }
        if self.noise_sigma.is_nan() || self.noise_sigma < 0.0 {
            return bad("noise sigma must be non-negative");
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max) {
            return bad("scale range must be positive and ordered");
        }
        if self.contrast_min.is_nan() || self.contrast_max.is_nan() || self.contrast_min > self.contrast_max {
            return bad("contrast range must be ordered");
        }
        for p in [self.flip_prob, self.perspective_prob] {
            if !(0.0..=1.0).contains(&p) {
                return bad("probabilities must lie in [0, 1]");
            }
        }
        if !(0.0..1.0).contains(&self.perspective_distortion) {
            return bad("perspective distortion must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRect {
    pub top: usize,
    pub left: usize,
    pub side: usize,
}

/// Fully sampled parameters of one augmented view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugChain {
    pub image_rows: usize,
    pub image_cols: usize,
    pub out_res: usize,
    pub crop: CropRect,
    pub flip: bool,
    /// Output-to-input map in centred pixel coordinates, row-major 2×3.
    pub affine: Option<[f64; 6]>,
    /// Output-to-input homography in pixel coordinates, row-major 3×3.
    pub homography: Option<[f64; 9]>,
    pub brightness: f64,
    pub contrast: f64,
    pub noise_sigma: f64,
    pub noise_seed: u64,
}

impl AugChain {
    /// Full-frame resize with every other stage off.
    pub fn identity(image_rows: usize, image_cols: usize, out_res: usize) -> Self {
        let side = image_rows.min(image_cols);
        Self {
            image_rows,
            image_cols,
            out_res,
            crop: CropRect { top: 0, left: 0, side },
            flip: false,
            affine: None,
            homography: None,
            brightness: 0.0,
            contrast: 1.0,
            noise_sigma: 0.0,
            noise_seed: 0,
        }
    }
}

pub fn sample_crop_batch(
    rng: &mut DeterministicStream,
    image_dims: (usize, usize),
    out_res: usize,
    config: &AugmentationConfig,
) -> Result<Vec<AugChain>> {
    config.validate()?;
    let (rows, cols) = image_dims;
    if rows < 8 || cols < 8 {
        return Err(Error::contract(format!("image {rows}x{cols} is smaller than 8x8")));
    }
    if out_res == 0 {
        return Err(Error::contract("output resolution must be positive"));
    }
    Ok((0..config.cuts)
        .map(|_| sample_chain(rng, rows, cols, out_res, config))
        .collect())
}

fn sample_chain(
    rng: &mut DeterministicStream,
    rows: usize,
    cols: usize,
    out_res: usize,
    cfg: &AugmentationConfig,
) -> AugChain {
    // Every parameter is drawn whether or not its stage is enabled, so
    // toggling one stage leaves the others' randomness unchanged.
    let short = rows.min(cols) as f64;
    let frac = rng.random_range(cfg.crop_frac_min..=cfg.crop_frac_max);
    let side = ((frac * short).round() as usize).clamp(1, rows.min(cols));
    let top = rng.random_range(0..=rows - side);
    let left = rng.random_range(0..=cols - side);

    let flip = rng.random_bool(cfg.flip_prob);

    let angle = rng.random_range(-1.0..=1.0) * cfg.rotation_deg.to_radians();
    let scale = rng.random_range(cfg.scale_min..=cfg.scale_max);
    let tx = rng.random_range(-1.0..=1.0) * cfg.translate * out_res as f64;
    let ty = rng.random_range(-1.0..=1.0) * cfg.translate * out_res as f64;

    let use_persp = rng.random_bool(cfg.perspective_prob);
    let half = cfg.perspective_distortion * (out_res as f64 - 1.0) / 2.0;
    let mut offsets = [0.0; 8];
    for o in &mut offsets {
        *o = rng.random_range(0.0..=1.0) * half;
    }

    let brightness = rng.random_range(-1.0..=1.0) * cfg.brightness;
    let contrast = rng.random_range(cfg.contrast_min..=cfg.contrast_max);
    let noise_seed = rng.next_u64();

    let affine = cfg.affine.then(|| {
        let (s, c) = angle.sin_cos();
        [c / scale, -s / scale, tx, s / scale, c / scale, ty]
    });
    let homography = (cfg.perspective && use_persp)
        .then(|| perspective_homography(out_res, &offsets))
        .flatten();

    AugChain {
        image_rows: rows,
        image_cols: cols,
        out_res,
        crop: CropRect { top, left, side },
        flip: cfg.flip && flip,
        affine,
        homography,
        brightness: if cfg.color_jitter { brightness } else { 0.0 },
        contrast: if cfg.color_jitter { contrast } else { 1.0 },
        noise_sigma: if cfg.noise { cfg.noise_sigma } else { 0.0 },
        noise_seed,
    }
}

/// Homography sending the output square's corners to corners pulled inward
/// by `offsets` (x, y per corner, clockwise from top-left).
fn perspective_homography(out_res: usize, offsets: &[f64; 8]) -> Option<[f64; 9]> {
    let m = out_res as f64 - 1.0;
    let src = [(0.0, 0.0), (m, 0.0), (m, m), (0.0, m)];
    let sign = [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)];
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for i in 0..4 {
        let (x, y) = src[i];
        let u = x + sign[i].0 * offsets[2 * i];
        let v = y + sign[i].1 * offsets[2 * i + 1];
        let r = 2 * i;
        a.row_mut(r)
            .copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]);
        a.row_mut(r + 1)
            .copy_from_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]);
        b[r] = u;
        b[r + 1] = v;
    }
    let h = a.lu().solve(&b)?;
    Some([h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0])
}

/// Precomputed bilinear taps: each output pixel reads four input pixels.
#[derive(Debug, Clone)]
pub struct Resampler {
    in_rows: usize,
    in_cols: usize,
    out_rows: usize,
    out_cols: usize,
    taps: Vec<[(usize, f64); 4]>,
}

impl Resampler {
    /// `map` sends an output pixel `(row, col)` to fractional input
    /// coordinates `(row, col)`; samples outside the input clamp to the edge.
    pub fn new(in_dims: (usize, usize), out_dims: (usize, usize), map: impl Fn(f64, f64) -> (f64, f64)) -> Self {
        let (in_rows, in_cols) = in_dims;
        let (out_rows, out_cols) = out_dims;
        let mut taps = Vec::with_capacity(out_rows * out_cols);
        let max_r = (in_rows - 1) as f64;
        let max_c = (in_cols - 1) as f64;
        for r in 0..out_rows {
            for c in 0..out_cols {
                let (sr, sc) = map(r as f64, c as f64);
                let sr = if sr.is_finite() { sr.clamp(0.0, max_r) } else { 0.0 };
                let sc = if sc.is_finite() { sc.clamp(0.0, max_c) } else { 0.0 };
                let r0 = sr.floor() as usize;
                let c0 = sc.floor() as usize;
                let r1 = (r0 + 1).min(in_rows - 1);
                let c1 = (c0 + 1).min(in_cols - 1);
                let fr = sr - r0 as f64;
                let fc = sc - c0 as f64;
                let at = |rr: usize, cc: usize| rr * in_cols + cc;
                taps.push([
                    (at(r0, c0), (1.0 - fr) * (1.0 - fc)),
                    (at(r0, c1), (1.0 - fr) * fc),
                    (at(r1, c0), fr * (1.0 - fc)),
                    (at(r1, c1), fr * fc),
                ]);
            }
        }
        Self {
            in_rows,
            in_cols,
            out_rows,
            out_cols,
            taps,
        }
    }

    pub fn forward(&self, input: &Tensor3) -> Tensor3 {
        let ch = input.channels();
        debug_assert_eq!((input.rows(), input.cols()), (self.in_rows, self.in_cols));
        let src = input.as_slice();
        let mut out = vec![0.0; self.out_rows * self.out_cols * ch];
        for (p, taps) in self.taps.iter().enumerate() {
            let dst = &mut out[p * ch..(p + 1) * ch];
            for &(i, w) in taps {
                if w == 0.0 {
                    continue;
                }
                for (k, d) in dst.iter_mut().enumerate() {
                    *d += w * src[i * ch + k];
                }
            }
        }
        Tensor3::from_vec(self.out_rows, self.out_cols, ch, out).expect("resampler output shape")
    }

    pub fn adjoint(&self, cotangent: &Tensor3) -> Tensor3 {
        let ch = cotangent.channels();
        debug_assert_eq!((cotangent.rows(), cotangent.cols()), (self.out_rows, self.out_cols));
        let g = cotangent.as_slice();
        let mut out = vec![0.0; self.in_rows * self.in_cols * ch];
        for (p, taps) in self.taps.iter().enumerate() {
            for &(i, w) in taps {
                if w == 0.0 {
                    continue;
                }
                for k in 0..ch {
                    out[i * ch + k] += w * g[p * ch + k];
                }
            }
        }
        Tensor3::from_vec(self.in_rows, self.in_cols, ch, out).expect("resampler input shape")
    }
}

/// One stage of an expanded chain.
#[derive(Debug, Clone)]
pub enum Stage {
    Crop(Resampler),
    Flip(Resampler),
    Affine(Resampler),
    Perspective(Resampler),
    /// `x ↦ contrast·(x − ½) + ½ + brightness`
    Jitter {
        brightness: f64,
        contrast: f64,
    },
    Noise(Tensor3),
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Crop(_) => "crop",
            Stage::Flip(_) => "flip",
            Stage::Affine(_) => "affine",
            Stage::Perspective(_) => "perspective",
            Stage::Jitter { .. } => "color_jitter",
            Stage::Noise(_) => "noise",
        }
    }

    pub fn forward(&self, x: &Tensor3) -> Tensor3 {
        match self {
            Stage::Crop(r) | Stage::Flip(r) | Stage::Affine(r) | Stage::Perspective(r) => r.forward(x),
            Stage::Jitter { brightness, contrast } => x.map(|v| contrast * (v - 0.5) + 0.5 + brightness),
            Stage::Noise(n) => {
                let mut out = x.clone();
                out.add_assign(n);
                out
            }
        }
    }

    /// The stage with constant offsets dropped.
    pub fn forward_linear(&self, x: &Tensor3) -> Tensor3 {
        match self {
            Stage::Jitter { contrast, .. } => x.map(|v| contrast * v),
            Stage::Noise(_) => x.clone(),
            other => other.forward(x),
        }
    }

    pub fn adjoint(&self, g: &Tensor3) -> Tensor3 {
        match self {
            Stage::Crop(r) | Stage::Flip(r) | Stage::Affine(r) | Stage::Perspective(r) => r.adjoint(g),
            Stage::Jitter { contrast, .. } => g.map(|v| contrast * v),
            Stage::Noise(_) => g.clone(),
        }
    }
}

/// A chain expanded into concrete stages, reusable for forward and adjoint.
#[derive(Debug, Clone)]
pub struct ChainPlan {
    image_rows: usize,
    image_cols: usize,
    stages: Vec<Stage>,
}

impl ChainPlan {
    pub fn new(chain: &AugChain) -> Result<Self> {
        let (rows, cols, res) = (chain.image_rows, chain.image_cols, chain.out_res);
        let CropRect { top, left, side } = chain.crop;
        if side == 0 || top + side > rows || left + side > cols || res == 0 {
            return Err(Error::contract(format!(
                "crop {:?} does not fit a {rows}x{cols} image",
                chain.crop
            )));
        }
        let out = (res, res);
        let step = side as f64 / res as f64;
        let mut stages = vec![Stage::Crop(Resampler::new((rows, cols), out, |r, c| {
            (
                top as f64 + (r + 0.5) * step - 0.5,
                left as f64 + (c + 0.5) * step - 0.5,
            )
        }))];
        let last = (res - 1) as f64;
        if chain.flip {
            stages.push(Stage::Flip(Resampler::new(out, out, |r, c| (r, last - c))));
        }
        if let Some(a) = chain.affine {
            let centre = last / 2.0;
            stages.push(Stage::Affine(Resampler::new(out, out, move |r, c| {
                let (x, y) = (c - centre, r - centre);
                let sx = a[0] * x + a[1] * y + a[2] + centre;
                let sy = a[3] * x + a[4] * y + a[5] + centre;
                (sy, sx)
            })));
        }
        if let Some(h) = chain.homography {
            stages.push(Stage::Perspective(Resampler::new(out, out, move |r, c| {
                let w = h[6] * c + h[7] * r + h[8];
                let sx = (h[0] * c + h[1] * r + h[2]) / w;
                let sy = (h[3] * c + h[4] * r + h[5]) / w;
                (sy, sx)
            })));
        }
        if chain.brightness != 0.0 || chain.contrast != 1.0 {
            stages.push(Stage::Jitter {
                brightness: chain.brightness,
                contrast: chain.contrast,
            });
        }
        if chain.noise_sigma > 0.0 {
            let mut rng = DeterministicStream::new(chain.noise_seed, Domain::Noise, 0);
            let sigma = chain.noise_sigma;
            let noise = Tensor3::from_fn(res, res, 3, |_, _, _| sigma * rng.sample::<f64, _>(StandardNormal));
            stages.push(Stage::Noise(noise));
        }
        Ok(Self {
            image_rows: rows,
            image_cols: cols,
            stages,
        })
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    fn check(&self, image: &Image) -> Result<()> {
        if (image.rows(), image.cols()) != (self.image_rows, self.image_cols) {
            return Err(Error::contract(format!(
                "chain sampled for {}x{}, image is {}x{}",
                self.image_rows,
                self.image_cols,
                image.rows(),
                image.cols()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, image: &Image) -> Result<Tensor3> {
        self.check(image)?;
        let mut x = self.stages[0].forward(image);
        for s in &self.stages[1..] {
            x = s.forward(&x);
        }
        Ok(x)
    }

    /// Forward pass of the linear part (no brightness offset, no noise).
    pub fn forward_linear(&self, image: &Image) -> Result<Tensor3> {
        self.check(image)?;
        let mut x = self.stages[0].forward_linear(image);
        for s in &self.stages[1..] {
            x = s.forward_linear(&x);
        }
        Ok(x)
    }

    pub fn vjp(&self, cotangent: &Tensor3) -> Result<Tensor3> {
        let res = match &self.stages[0] {
            Stage::Crop(r) => (r.out_rows, r.out_cols),
            _ => unreachable!("first stage is always the crop"),
        };
        if (cotangent.rows(), cotangent.cols()) != res {
            return Err(Error::contract(format!(
                "cotangent is {}x{}, chain output is {}x{}",
                cotangent.rows(),
                cotangent.cols(),
                res.0,
                res.1
            )));
        }
        let mut g = cotangent.clone();
        for s in self.stages.iter().rev() {
            g = s.adjoint(&g);
        }
        Ok(g)
    }
}

pub fn apply_chain(image: &Image, chain: &AugChain) -> Result<Tensor3> {
    ChainPlan::new(chain)?.forward(image)
}

/// Adjoint of the linear part of [`apply_chain`]; the image argument only
/// fixes the expected shape.
pub fn apply_chain_vjp(image: &Image, chain: &AugChain, cotangent: &Tensor3) -> Result<Image> {
    let plan = ChainPlan::new(chain)?;
    plan.check(image)?;
    plan.vjp(cotangent)
}
