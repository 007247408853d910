//! Zero-shot edit masks: score a grid of overlapping crops against a phrase,
//! splat each score at its crop centre, normalize, and threshold.

use serde::{Deserialize, Serialize};

use crate::augment::Resampler;
use crate::backend::{check_embedding, embed_text, Backend};
use crate::error::{Error, Result};
use crate::imageio::PixelMask;
use crate::loss::{GuidanceTarget, TargetKind};
use crate::optim::LatentMask;
use crate::parallel::Execution;
use crate::tensor::{Image, Tensor3};

/// Threshold offset in standard deviations below the mean score.
pub const DEFAULT_K_SIGMA: f64 = -2.0;
pub const DEFAULT_TARGET_WEIGHT: f64 = 1.0;
pub const DEFAULT_STRUCTURE_WEIGHT: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropGrid {
    pub side: usize,
    pub stride: usize,
}

impl CropGrid {
    /// Quarter of the short side, half-overlapping.
    pub fn default_for(rows: usize, cols: usize) -> Self {
        let side = (rows.min(cols) / 4).max(1);
        Self {
            side,
            stride: (side / 2).max(1),
        }
    }

    pub fn windows(&self, rows: usize, cols: usize) -> Vec<(usize, usize)> {
        let tops = (0..=rows - self.side).step_by(self.stride);
        tops.flat_map(|t| (0..=cols - self.side).step_by(self.stride).map(move |l| (t, l)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropScore {
    pub top: usize,
    pub left: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    pub rows: usize,
    pub cols: usize,
    /// Splat-weighted score sums per pixel.
    pub scores: Vec<f64>,
    /// Splat weights per pixel.
    pub hits: Vec<f64>,
    pub crops: Vec<CropScore>,
}

/// Bilinear resize of the whole image to `res×res`.
pub fn full_frame_view(image: &Image, res: usize) -> Tensor3 {
    let (rows, cols) = (image.rows(), image.cols());
    let sr = rows as f64 / res as f64;
    let sc = cols as f64 / res as f64;
    Resampler::new((rows, cols), (res, res), |r, c| {
        ((r + 0.5) * sr - 0.5, (c + 0.5) * sc - 0.5)
    })
    .forward(image)
}

fn crop_view(image: &Image, top: usize, left: usize, side: usize, res: usize) -> Tensor3 {
    let step = side as f64 / res as f64;
    Resampler::new((image.rows(), image.cols()), (res, res), |r, c| {
        (
            top as f64 + (r + 0.5) * step - 0.5,
            left as f64 + (c + 0.5) * step - 0.5,
        )
    })
    .forward(image)
}

pub fn score_grid(
    image: &Image,
    prompt: &str,
    backend: &dyn Backend,
    grid: CropGrid,
    exec: Execution,
) -> Result<ScoreMap> {
    let (rows, cols) = (image.rows(), image.cols());
    if grid.side == 0 || grid.side > rows.min(cols) {
        return Err(Error::contract(format!(
            "crop side {} does not fit a {rows}x{cols} image",
            grid.side
        )));
    }
    if grid.stride == 0 {
        return Err(Error::contract("crop stride must be at least 1"));
    }
    let info = backend.info();
    let text = embed_text(backend, prompt)?;
    let windows = grid.windows(rows, cols);
    let scored = exec.map(&windows, |&(top, left)| -> Result<CropScore> {
        let view = crop_view(image, top, left, grid.side, info.input_res);
        let emb = backend
            .embed_image(&view)
            .and_then(|raw| check_embedding(raw, info.embed_dim))
            .map_err(|e| Error::backend(format!("crop at ({top}, {left}): {e}")))?;
        Ok(CropScore {
            top,
            left,
            score: emb.unit.dot(&text).clamp(-1.0, 1.0),
        })
    });
    let crops = scored.into_iter().collect::<Result<Vec<_>>>()?;

    // Tent kernel of radius `stride` around each crop centre: inside the
    // lattice of centres the hit-averaged map is the bilinear interpolation
    // of the crop scores.
    let mut scores = vec![0.0; rows * cols];
    let mut hits = vec![0.0; rows * cols];
    let half = (grid.side as f64 - 1.0) / 2.0;
    let radius = grid.stride as f64;
    let tent = |d: f64| (1.0 - d.abs() / radius).max(0.0);
    for cs in &crops {
        let cy = cs.top as f64 + half;
        let cx = cs.left as f64 + half;
        let r_lo = (cy - radius).ceil().max(0.0) as usize;
        let r_hi = ((cy + radius).floor() as usize).min(rows - 1);
        let c_lo = (cx - radius).ceil().max(0.0) as usize;
        let c_hi = ((cx + radius).floor() as usize).min(cols - 1);
        for r in r_lo..=r_hi {
            let wr = tent(r as f64 - cy);
            for c in c_lo..=c_hi {
                let w = wr * tent(c as f64 - cx);
                if w > 0.0 {
                    scores[r * cols + c] += w * cs.score;
                    hits[r * cols + c] += w;
                }
            }
        }
    }
    Ok(ScoreMap {
        rows,
        cols,
        scores,
        hits,
        crops,
    })
}

/// Hit-averaged scores, with uncovered pixels copied from the nearest
/// covered one, min-max scaled to `[0, 1]`. All zeros when every crop
/// scored the same, since averaging equal scores need not be exact.
pub fn normalize_scores(map: &ScoreMap) -> Result<Tensor3> {
    let (rows, cols) = (map.rows, map.cols);
    let covered: Vec<(usize, f64)> = map
        .hits
        .iter()
        .enumerate()
        .filter(|(_, &h)| h > 0.0)
        .map(|(i, &h)| (i, map.scores[i] / h))
        .collect();
    if covered.is_empty() {
        return Err(Error::contract("score map has no recorded scores"));
    }
    let mut filled = vec![0.0; rows * cols];
    for (p, out) in filled.iter_mut().enumerate() {
        if map.hits[p] > 0.0 {
            *out = map.scores[p] / map.hits[p];
            continue;
        }
        let (pr, pc) = ((p / cols) as i64, (p % cols) as i64);
        let mut best = (i64::MAX, 0.0);
        for &(i, v) in &covered {
            let (r, c) = ((i / cols) as i64, (i % cols) as i64);
            let d = (r - pr) * (r - pr) + (c - pc) * (c - pc);
            if d < best.0 {
                best = (d, v);
            }
        }
        *out = best.1;
    }
    let lo = filled.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = filled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let flat = !map.crops.is_empty() && map.crops.iter().all(|c| c.score == map.crops[0].score);
    let values = if span > 0.0 && !flat {
        filled.iter().map(|v| (v - lo) / span).collect()
    } else {
        vec![0.0; rows * cols]
    };
    Tensor3::from_vec(rows, cols, 1, values)
}

/// Keeps pixels with value `≥ μ + k_sigma·σ` (population statistics). A
/// constant map keeps everything.
pub fn threshold_mask(mask01: &Tensor3, k_sigma: f64) -> PixelMask {
    let v = mask01.as_slice();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let sigma = var.sqrt();
    let flat = v.iter().all(|&x| x == v[0]);
    let tau = mean + k_sigma * sigma;
    PixelMask {
        rows: mask01.rows(),
        cols: mask01.cols(),
        values: v.iter().map(|&x| flat || x >= tau).collect(),
    }
}

/// Area-averages the pixel mask over each latent cell and keeps cells with
/// coverage of at least one half.
pub fn pixel_mask_to_latent(mask: &PixelMask, rows: usize, cols: usize) -> Result<LatentMask> {
    if rows == 0 || cols == 0 || mask.rows < rows || mask.cols < cols {
        return Err(Error::contract(format!(
            "cannot reduce a {}x{} mask to {rows}x{cols}",
            mask.rows, mask.cols
        )));
    }
    let row_w = overlap_weights(mask.rows, rows);
    let col_w = overlap_weights(mask.cols, cols);
    let mut values = Vec::with_capacity(rows * cols);
    for rw in &row_w {
        for cw in &col_w {
            let mut area = 0.0;
            let mut on = 0.0;
            for &(r, wr) in rw {
                for &(c, wc) in cw {
                    let w = wr * wc;
                    area += w;
                    if mask.get(r, c) {
                        on += w;
                    }
                }
            }
            values.push(if on / area >= 0.5 { 1.0 } else { 0.0 });
        }
    }
    LatentMask::new(rows, cols, values)
}

/// For each of `cells` equal bins over `pixels`, the pixels it overlaps and
/// by how much.
fn overlap_weights(pixels: usize, cells: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = pixels as f64 / cells as f64;
    (0..cells)
        .map(|i| {
            let (a, b) = (i as f64 * scale, (i + 1) as f64 * scale);
            let first = a.floor() as usize;
            let last = (b.ceil() as usize).min(pixels);
            (first..last)
                .map(|p| {
                    let lo = a.max(p as f64);
                    let hi = b.min(p as f64 + 1.0);
                    (p, (hi - lo).max(0.0))
                })
                .filter(|&(_, w)| w > 0.0)
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct EditSpec {
    pub source_phrase: String,
    pub target_phrase: String,
    pub source_image: Image,
}

/// The target phrase plus the source image's own embedding as a
/// structure-preserving anchor. A zero structure weight drops the anchor.
pub fn build_edit_targets(
    spec: &EditSpec,
    backend: &dyn Backend,
    target_weight: f64,
    structure_weight: f64,
) -> Result<Vec<GuidanceTarget>> {
    let mut targets = vec![GuidanceTarget {
        embedding: embed_text(backend, &spec.target_phrase)?,
        weight: target_weight,
        kind: TargetKind::Text,
    }];
    if structure_weight != 0.0 {
        targets.push(structure_target(&spec.source_image, backend, structure_weight)?);
    }
    Ok(targets)
}

pub fn structure_target(image: &Image, backend: &dyn Backend, weight: f64) -> Result<GuidanceTarget> {
    let info = backend.info();
    let view = full_frame_view(image, info.input_res);
    let raw = backend.embed_image(&view)?;
    Ok(GuidanceTarget {
        embedding: check_embedding(raw, info.embed_dim)?.unit,
        weight,
        kind: TargetKind::ImageStructure,
    })
}

/// Score, normalize and threshold in one go.
pub fn infer_mask(
    image: &Image,
    phrase: &str,
    backend: &dyn Backend,
    grid: CropGrid,
    k_sigma: f64,
    exec: Execution,
) -> Result<PixelMask> {
    let map = score_grid(image, phrase, backend, grid, exec)?;
    Ok(threshold_mask(&normalize_scores(&map)?, k_sigma))
}
