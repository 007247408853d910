//! Embedding-space guidance loss.
//!
//! The distance between two unit embeddings is the squared great-circle
//! angle computed from the half chord, `2·asin(‖u−v‖/2)²`, which ranges over
//! `[0, π²/2]` and decreases monotonically with cosine similarity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::LatentGrid;

/// Tolerance on `‖v‖ = 1` for embeddings handed to the loss.
pub const UNIT_TOLERANCE: f64 = 1e-6;

/// Largest half-chord fed to `asin` when differentiating.
const HALF_CHORD_CLAMP: f64 = 1.0 - 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Wraps a vector that is already unit-norm within [`UNIT_TOLERANCE`].
    pub fn new(v: Vec<f64>) -> Result<Self> {
        let n = norm(&v);
        if !n.is_finite() || (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::contract(format!("embedding norm {n} is not 1")));
        }
        Ok(Self(v))
    }

    /// Divides by the Euclidean norm. Fails on a zero or non-finite vector.
    pub fn normalize(v: Vec<f64>) -> Result<Self> {
        let n = norm(&v);
        if !n.is_finite() || n == 0.0 {
            return Err(Error::contract("cannot normalize a zero or non-finite vector"));
        }
        Ok(Self(v.into_iter().map(|x| x / n).collect()))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        dot(&self.0, &other.0)
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub text: String,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

impl PromptSpec {
    pub fn new(text: impl Into<String>, weight: f64) -> Self {
        Self {
            text: text.into(),
            weight,
        }
    }

    /// Parses `TEXT[:WEIGHT]`. A suffix that does not parse as a number is
    /// kept as part of the text.
    pub fn parse(s: &str) -> Result<Self> {
        let (text, weight) = match s.rsplit_once(':') {
            Some((t, w)) => match w.trim().parse::<f64>() {
                Ok(w) if w.is_finite() => (t, w),
                _ => (s, 1.0),
            },
            None => (s, 1.0),
        };
        if text.trim().is_empty() {
            return Err(Error::Config("prompt text is empty".into()));
        }
        Ok(Self::new(text, weight))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    Text,
    ImageStructure,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceTarget {
    pub embedding: Embedding,
    pub weight: f64,
    pub kind: TargetKind,
}

fn check_pair(u: &Embedding, v: &Embedding) -> Result<()> {
    if u.dim() != v.dim() {
        return Err(Error::contract(format!(
            "embedding dimensions differ: {} vs {}",
            u.dim(),
            v.dim()
        )));
    }
    for e in [u, v] {
        let n = norm(e.as_slice());
        if (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::contract(format!("embedding norm {n} is not 1")));
        }
    }
    Ok(())
}

pub fn spherical_sq_dist(u: &Embedding, v: &Embedding) -> Result<f64> {
    check_pair(u, v)?;
    Ok(spherical_sq_dist_raw(u.as_slice(), v.as_slice()))
}

/// The distance formula on raw vectors, without unit-norm checks.
pub fn spherical_sq_dist_raw(u: &[f64], v: &[f64]) -> f64 {
    let chord = u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let theta = (chord / 2.0).min(1.0).asin();
    2.0 * theta * theta
}

/// Gradient of [`spherical_sq_dist`] with respect to `u`, holding `v` fixed
/// and treating `u` as an unconstrained vector.
pub fn spherical_sq_dist_grad(u: &Embedding, v: &Embedding) -> Result<Vec<f64>> {
    check_pair(u, v)?;
    Ok(spherical_sq_dist_grad_raw(u.as_slice(), v.as_slice()))
}

pub fn spherical_sq_dist_grad_raw(u: &[f64], v: &[f64]) -> Vec<f64> {
    let diff: Vec<f64> = u.iter().zip(v).map(|(a, b)| a - b).collect();
    let chord = norm(&diff);
    if chord == 0.0 {
        return vec![0.0; u.len()];
    }
    let s = (chord / 2.0).min(HALF_CHORD_CLAMP);
    let theta = s.asin();
    // d/du 2·asin(s)² with s = ‖u−v‖/2
    let coef = 4.0 * theta / (1.0 - s * s).sqrt() / (2.0 * chord);
    diff.into_iter().map(|d| coef * d).collect()
}

fn weight_norm(targets: &[GuidanceTarget]) -> Result<f64> {
    if targets.is_empty() {
        return Err(Error::contract("no guidance targets"));
    }
    let total: f64 = targets.iter().map(|t| t.weight.abs()).sum();
    if total == 0.0 {
        return Err(Error::DegenerateWeights);
    }
    Ok(total)
}

/// Weighted mean over targets of the crop-averaged distance, normalized by
/// the total absolute weight.
pub fn aggregate_loss(crops: &[Embedding], targets: &[GuidanceTarget]) -> Result<f64> {
    if crops.is_empty() {
        return Err(Error::contract("no crop embeddings"));
    }
    let wsum = weight_norm(targets)?;
    let c = crops.len() as f64;
    let mut total = 0.0;
    for t in targets {
        let mut per_target = 0.0;
        for u in crops {
            per_target += spherical_sq_dist(u, &t.embedding)?;
        }
        total += t.weight * per_target / c;
    }
    Ok(total / wsum)
}

/// Gradient of [`aggregate_loss`] with respect to each crop embedding.
pub fn aggregate_loss_grad(crops: &[Embedding], targets: &[GuidanceTarget]) -> Result<Vec<Vec<f64>>> {
    if crops.is_empty() {
        return Err(Error::contract("no crop embeddings"));
    }
    let wsum = weight_norm(targets)?;
    let c = crops.len() as f64;
    crops
        .iter()
        .map(|u| {
            let mut g = vec![0.0; u.dim()];
            for t in targets {
                let gt = spherical_sq_dist_grad(u, &t.embedding)?;
                let s = t.weight / (wsum * c);
                for (a, b) in g.iter_mut().zip(gt) {
                    *a += s * b;
                }
            }
            Ok(g)
        })
        .collect()
}

/// `l_clip + alpha·mean(z²)`.
pub fn regularized_loss(l_clip: f64, z: &LatentGrid, alpha: f64) -> f64 {
    l_clip + alpha * z.mean_sq()
}
