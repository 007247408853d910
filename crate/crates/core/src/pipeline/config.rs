use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::AugmentationConfig;
use crate::error::{Error, Result};
use crate::loss::PromptSpec;
use crate::optim::{AdamParams, RegSchedule, DEFAULT_BETAS, DEFAULT_EPS, DEFAULT_LR};
use crate::selfmask::{CropGrid, DEFAULT_K_SIGMA, DEFAULT_STRUCTURE_WEIGHT};

pub const DEFAULT_ITERATIONS: u64 = 400;
pub const DEFAULT_SAVE_EVERY: u64 = 10;
pub const DEFAULT_SIZE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Generate,
    Edit,
    MaskedEdit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfMaskConfig {
    pub phrase: String,
    #[serde(default = "default_k_sigma")]
    pub k_sigma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<CropGrid>,
}

fn default_k_sigma() -> f64 {
    DEFAULT_K_SIGMA
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub prompts: Vec<PromptSpec>,
    pub mode: Mode,
    pub iterations: u64,
    pub lr: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub regularization: RegSchedule,
    pub augmentation: AugmentationConfig,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub quantize: bool,
    pub save_every: u64,
    pub backend: String,
    /// Weight of the source-image structure target in edit modes. Defaults
    /// to 0.5 for masked edits and to none for plain edits.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub struct_weight: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub self_mask: Option<SelfMaskConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            prompts: Vec::new(),
            mode: Mode::Generate,
            iterations: DEFAULT_ITERATIONS,
            lr: DEFAULT_LR,
            betas: [DEFAULT_BETAS.0, DEFAULT_BETAS.1],
            eps: DEFAULT_EPS,
            regularization: RegSchedule::default(),
            augmentation: AugmentationConfig::default(),
            seed: 0,
            width: DEFAULT_SIZE,
            height: DEFAULT_SIZE,
            quantize: true,
            save_every: DEFAULT_SAVE_EVERY,
            backend: "toy".into(),
            struct_weight: None,
            self_mask: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl FieldError {
    fn new(field: &str, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub fn field_errors_to_error(errors: &[FieldError]) -> Error {
    Error::Config(
        errors
            .iter()
            .map(|e| format!("{}: {}", e.field, e.message))
            .collect::<Vec<_>>()
            .join("; "),
    )
}

impl RunConfig {
    pub fn with_prompt(text: &str) -> Self {
        Self {
            prompts: vec![PromptSpec::new(text, 1.0)],
            ..Self::default()
        }
    }

    pub fn adam_params(&self) -> AdamParams {
        AdamParams {
            lr: self.lr,
            beta1: self.betas[0],
            beta2: self.betas[1],
            eps: self.eps,
        }
    }

    pub fn structure_weight(&self) -> Option<f64> {
        match (self.struct_weight, self.mode) {
            (Some(w), Mode::Edit | Mode::MaskedEdit) => Some(w),
            (None, Mode::MaskedEdit) => Some(DEFAULT_STRUCTURE_WEIGHT),
            _ => None,
        }
    }

    /// Field-level validation of the document itself, plus whether the
    /// inputs it needs were supplied.
    pub fn validate(&self, has_init_image: bool, has_mask: bool) -> Vec<FieldError> {
        let mut errs = Vec::new();
        if self.prompts.is_empty() {
            errs.push(FieldError::new("prompts", "at least one prompt is required"));
        }
        for (i, p) in self.prompts.iter().enumerate() {
            if p.text.trim().is_empty() {
                errs.push(FieldError::new(&format!("prompts[{i}].text"), "must not be empty"));
            }
            if !p.weight.is_finite() {
                errs.push(FieldError::new(&format!("prompts[{i}].weight"), "must be finite"));
            }
        }
        if !self.prompts.is_empty() && self.prompts.iter().all(|p| p.weight == 0.0) {
            errs.push(FieldError::new("prompts", "total prompt weight is zero"));
        }
        if self.iterations == 0 {
            errs.push(FieldError::new("iterations", "must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            errs.push(FieldError::new("lr", "must be positive"));
        }
        if !self.betas.iter().all(|b| (0.0..1.0).contains(b)) {
            errs.push(FieldError::new("betas", "each must lie in [0, 1)"));
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            errs.push(FieldError::new("eps", "must be positive"));
        }
        if let Err(e) = self.regularization.validate() {
            errs.push(FieldError::new("regularization", e.to_string()));
        }
        if let Err(e) = self.augmentation.validate() {
            errs.push(FieldError::new("augmentation", e.to_string()));
        }
        if self.width < 8 || self.height < 8 {
            errs.push(FieldError::new("width", "image must be at least 8x8"));
        }
        if self.save_every == 0 {
            errs.push(FieldError::new("save_every", "must be at least 1"));
        }
        if self.backend != "toy" && !self.backend.starts_with("socket:") {
            errs.push(FieldError::new("backend", "expected `toy` or `socket:<path>`"));
        }
        if let Some(w) = self.struct_weight {
            if !w.is_finite() {
                errs.push(FieldError::new("struct_weight", "must be finite"));
            }
        }
        match self.mode {
            Mode::Generate => {}
            Mode::Edit | Mode::MaskedEdit if !has_init_image => {
                errs.push(FieldError::new("init_image", "edit modes need an initial image"));
            }
            _ => {}
        }
        if self.mode == Mode::MaskedEdit && !has_mask && self.self_mask.is_none() {
            errs.push(FieldError::new(
                "mask",
                "masked edits need a mask or a self-mask phrase",
            ));
        }
        if has_mask && self.self_mask.is_some() {
            errs.push(FieldError::new(
                "mask",
                "give either a mask or a self-mask phrase, not both",
            ));
        }
        if let Some(sm) = &self.self_mask {
            if sm.phrase.trim().is_empty() {
                errs.push(FieldError::new("self_mask.phrase", "must not be empty"));
            }
        }
        errs
    }

    pub fn check(&self, has_init_image: bool, has_mask: bool) -> Result<()> {
        let errs = self.validate(has_init_image, has_mask);
        if errs.is_empty() {
            Ok(())
        } else {
            Err(field_errors_to_error(&errs))
        }
    }

    /// Hash of the fields a checkpoint depends on structurally: image
    /// dimensions and backend. Prompts, schedules and augmentation may
    /// change across a restore.
    pub fn structural_hash(&self) -> u64 {
        let mut h = Sha256::new();
        h.update(format!("{}|{}x{}", self.backend, self.height, self.width).as_bytes());
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().unwrap())
    }
}
