use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::augment::{sample_crop_batch, AugmentationConfig, ChainPlan};
use crate::backend::{check_embedding, embed_text, renormalize_vjp, Backend, BackendInfo, CheckedEmbedding};
use crate::error::{Error, Result};
use crate::imageio::{resize, PixelMask};
use crate::latent::{quantize_grid, straight_through_adjoint};
use crate::loss::{aggregate_loss, aggregate_loss_grad, Embedding, GuidanceTarget, TargetKind};
use crate::optim::{adam_step, alpha_at, mask_gradients, reg_gradient, AdamState, LatentMask};
use crate::parallel::Execution;
use crate::pipeline::checkpoint::Checkpoint;
use crate::pipeline::config::{Mode, RunConfig};
use crate::pipeline::state::{transition, JobEventKind, Phase};
use crate::rng::{DeterministicStream, Domain};
use crate::selfmask::{infer_mask, pixel_mask_to_latent, structure_target, CropGrid};
use crate::tensor::{Image, LatentGrid, Tensor3};

/// Images a run may need besides its config.
#[derive(Debug, Clone, Default)]
pub struct JobInputs {
    pub init_image: Option<Image>,
    /// `true` marks editable pixels.
    pub mask: Option<PixelMask>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub iteration: u64,
    pub l_clip: f64,
    pub l_reg: f64,
    pub total: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub l_clip: f64,
    pub l_reg: f64,
    pub total: f64,
    /// Gradient of `total` with respect to the unquantized latent.
    pub grad: Option<LatentGrid>,
}

/// The per-iteration objective with everything but `z` held fixed.
#[derive(Clone, Copy)]
pub struct Objective<'a> {
    pub backend: &'a dyn Backend,
    pub targets: &'a [GuidanceTarget],
    pub augmentation: &'a AugmentationConfig,
    pub seed: u64,
    pub quantize: bool,
    pub exec: Execution,
}

struct CropPass {
    plan: ChainPlan,
    view: Tensor3,
    emb: CheckedEmbedding,
}

fn finite_or(t: &Tensor3, stage: &'static str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { stage })
    }
}

impl Objective<'_> {
    pub fn decode_input(&self, z: &LatentGrid) -> Result<LatentGrid> {
        if self.quantize {
            Ok(quantize_grid(z, &self.backend.info().codebook)?.values)
        } else {
            Ok(z.clone())
        }
    }

    pub fn evaluate(&self, z: &LatentGrid, iteration: u64, alpha: f64, with_grad: bool) -> Result<Evaluation> {
        let info = self.backend.info();
        z.ensure_dims(info.latent_dims(), "latent")?;
        finite_or(z, "latent")?;
        let zq = self.decode_input(z)?;
        let image = self.backend.decode(&zq)?;
        image.ensure_dims(info.image_dims(), "decoded image")?;
        finite_or(&image, "decode")?;

        let mut rng = DeterministicStream::new(self.seed, Domain::Crops, iteration);
        let chains = sample_crop_batch(
            &mut rng,
            (image.rows(), image.cols()),
            info.input_res,
            self.augmentation,
        )?;
        let passes: Vec<CropPass> = self
            .exec
            .map(&chains, |chain| -> Result<CropPass> {
                let plan = ChainPlan::new(chain)?;
                let view = plan.forward(&image)?;
                let raw = self.backend.embed_image(&view)?;
                if raw.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Diverged { stage: "embed" });
                }
                let emb = check_embedding(raw, info.embed_dim)?;
                Ok(CropPass { plan, view, emb })
            })
            .into_iter()
            .collect::<Result<_>>()?;

        let embs: Vec<Embedding> = passes.iter().map(|p| p.emb.unit.clone()).collect();
        let l_clip = aggregate_loss(&embs, self.targets)?;
        let l_reg = alpha * z.mean_sq();
        let total = l_clip + l_reg;
        if !total.is_finite() {
            return Err(Error::Diverged { stage: "loss" });
        }
        if !with_grad {
            return Ok(Evaluation {
                l_clip,
                l_reg,
                total,
                grad: None,
            });
        }

        let g_units = aggregate_loss_grad(&embs, self.targets)?;
        let work: Vec<(&CropPass, &Vec<f64>)> = passes.iter().zip(&g_units).collect();
        let per_crop: Vec<Tensor3> = self
            .exec
            .map(&work, |(p, gu)| -> Result<Tensor3> {
                let ge = renormalize_vjp(&p.emb.unit, p.emb.raw_norm, gu);
                let gv = self.backend.embed_image_vjp(&p.view, &ge)?;
                p.plan.vjp(&gv)
            })
            .into_iter()
            .collect::<Result<_>>()?;
        // Summed in crop order so every execution mode yields the same bits.
        let mut g_image = Tensor3::zeros(image.rows(), image.cols(), image.channels());
        for g in &per_crop {
            g_image.add_assign(g);
        }
        finite_or(&g_image, "embed_vjp")?;
        let g_zq = self.backend.decode_vjp(&zq, &g_image)?;
        finite_or(&g_zq, "decode_vjp")?;
        let mut grad = straight_through_adjoint(g_zq);
        grad.add_assign(&reg_gradient(z, alpha));
        Ok(Evaluation {
            l_clip,
            l_reg,
            total,
            grad: Some(grad),
        })
    }
}

/// Initial latent: uniform noise pixels encoded in generate mode, the
/// encoded (resized) init image otherwise.
pub fn init_latent(config: &RunConfig, backend: &dyn Backend, init_image: Option<&Image>) -> Result<LatentGrid> {
    let info = backend.info();
    let (rows, cols, ch) = info.image_dims();
    let image = match (config.mode, init_image) {
        (Mode::Generate, _) => init_noise(config.seed, rows, cols, ch),
        (_, Some(img)) => resize(img, rows, cols)?,
        (_, None) => return Err(Error::Config("init_image: edit modes need an initial image".into())),
    };
    let z = backend.encode(&image)?;
    z.ensure_dims(info.latent_dims(), "encoded latent")?;
    Ok(z)
}

pub fn init_noise(seed: u64, rows: usize, cols: usize, channels: usize) -> Image {
    let mut rng = DeterministicStream::new(seed, Domain::InitPixels, 0);
    let data = (0..rows * cols * channels).map(|_| rng.next_f64()).collect();
    Tensor3::from_vec(rows, cols, channels, data).expect("noise shape")
}

fn build_targets(config: &RunConfig, backend: &dyn Backend, init: Option<&Image>) -> Result<Vec<GuidanceTarget>> {
    let mut targets = config
        .prompts
        .iter()
        .map(|p| {
            Ok(GuidanceTarget {
                embedding: embed_text(backend, &p.text)?,
                weight: p.weight,
                kind: TargetKind::Text,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if let (Some(w), Some(img)) = (config.structure_weight(), init) {
        if w != 0.0 {
            targets.push(structure_target(img, backend, w)?);
        }
    }
    Ok(targets)
}

fn build_mask(
    config: &RunConfig,
    backend: &dyn Backend,
    init: Option<&Image>,
    mask: Option<&PixelMask>,
    exec: Execution,
) -> Result<Option<LatentMask>> {
    if config.mode != Mode::MaskedEdit {
        return Ok(None);
    }
    let info = backend.info();
    let pixel = match (mask, &config.self_mask, init) {
        (Some(m), _, _) => m.clone(),
        (None, Some(sm), Some(img)) => {
            let grid = sm.grid.unwrap_or_else(|| CropGrid::default_for(img.rows(), img.cols()));
            infer_mask(img, &sm.phrase, backend, grid, sm.k_sigma, exec)?
        }
        _ => {
            return Err(Error::Config(
                "mask: masked edits need a mask or a self-mask phrase".into(),
            ))
        }
    };
    let (rows, cols, _) = info.image_dims();
    if (pixel.rows, pixel.cols) != (rows, cols) {
        return Err(Error::Config(format!(
            "mask: {}x{} does not match the {rows}x{cols} image",
            pixel.rows, pixel.cols
        )));
    }
    Ok(Some(pixel_mask_to_latent(&pixel, info.latent_rows, info.latent_cols)?))
}

pub struct Job {
    config: RunConfig,
    backend: Arc<dyn Backend>,
    targets: Vec<GuidanceTarget>,
    mask: Option<LatentMask>,
    z: LatentGrid,
    adam: AdamState,
    iteration: u64,
    phase: Phase,
    exec: Execution,
    last: Option<LossReport>,
}

impl std::fmt::Debug for Job {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Job")
            .field("phase", &self.phase)
            .field("iteration", &self.iteration)
            .field("backend", &self.backend.info().name)
            .finish_non_exhaustive()
    }
}

impl Job {
    pub fn new(config: RunConfig, inputs: JobInputs, backend: Arc<dyn Backend>) -> Result<Self> {
        Self::with_execution(config, inputs, backend, Execution::default())
    }

    pub fn with_execution(
        config: RunConfig,
        inputs: JobInputs,
        backend: Arc<dyn Backend>,
        exec: Execution,
    ) -> Result<Self> {
        config.check(inputs.init_image.is_some(), inputs.mask.is_some())?;
        let info = backend.info().clone();
        info.validate()?;
        if (info.image_rows, info.image_cols) != (config.height, config.width) {
            return Err(Error::Config(format!(
                "width: backend renders {}x{}, config asks for {}x{}",
                info.image_rows, info.image_cols, config.height, config.width
            )));
        }
        let init = match &inputs.init_image {
            Some(img) => Some(resize(img, info.image_rows, info.image_cols)?),
            None => None,
        };
        let targets = build_targets(&config, backend.as_ref(), init.as_ref())?;
        let mask = build_mask(&config, backend.as_ref(), init.as_ref(), inputs.mask.as_ref(), exec)?;
        let z = init_latent(&config, backend.as_ref(), init.as_ref())?;
        let adam = AdamState::new(config.adam_params(), info.latent_dims());
        Ok(Self {
            config,
            backend,
            targets,
            mask,
            z,
            adam,
            iteration: 0,
            phase: Phase::Queued,
            exec,
            last: None,
        })
    }

    /// Rebuilds a job from its config, inputs and a checkpoint. The job
    /// comes back queued at the checkpoint's iteration.
    pub fn restore(
        config: RunConfig,
        inputs: JobInputs,
        backend: Arc<dyn Backend>,
        checkpoint: &Checkpoint,
    ) -> Result<Self> {
        if checkpoint.config_hash != config.structural_hash() {
            return Err(Error::IncompatibleCheckpoint(
                "checkpoint was written for different image dimensions or backend".into(),
            ));
        }
        let mut job = Self::new(config, inputs, backend)?;
        let dims = job.backend.info().latent_dims();
        if checkpoint.z.dims() != dims {
            return Err(Error::IncompatibleCheckpoint(format!(
                "latent {:?} does not match backend {:?}",
                checkpoint.z.dims(),
                dims
            )));
        }
        job.z = checkpoint.z.clone();
        job.adam = checkpoint.adam_state(job.config.adam_params());
        job.iteration = checkpoint.iteration;
        Ok(job)
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn info(&self) -> &BackendInfo {
        self.backend.info()
    }

    pub fn backend(&self) -> &Arc<dyn Backend> {
        &self.backend
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn latent(&self) -> &LatentGrid {
        &self.z
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    pub fn targets(&self) -> &[GuidanceTarget] {
        &self.targets
    }

    pub fn latent_mask(&self) -> Option<&LatentMask> {
        self.mask.as_ref()
    }

    pub fn last_report(&self) -> Option<&LossReport> {
        self.last.as_ref()
    }

    pub fn execution(&self) -> Execution {
        self.exec
    }

    pub fn set_execution(&mut self, exec: Execution) {
        self.exec = exec;
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.config.iterations
    }

    pub fn objective(&self) -> Objective<'_> {
        Objective {
            backend: self.backend.as_ref(),
            targets: &self.targets,
            augmentation: &self.config.augmentation,
            seed: self.config.seed,
            quantize: self.config.quantize,
            exec: self.exec,
        }
    }

    pub fn alpha(&self) -> f64 {
        alpha_at(&self.config.regularization, self.iteration)
    }

    pub fn apply(&mut self, event: JobEventKind) -> Result<Phase> {
        self.phase = transition(self.phase, event)?;
        Ok(self.phase)
    }

    pub fn start(&mut self) -> Result<()> {
        self.apply(JobEventKind::Start).map(|_| ())
    }

    pub fn pause(&mut self) -> Result<()> {
        self.apply(JobEventKind::Pause).map(|_| ())
    }

    pub fn resume(&mut self) -> Result<()> {
        self.apply(JobEventKind::Resume).map(|_| ())
    }

    pub fn cancel(&mut self) -> Result<()> {
        self.apply(JobEventKind::Cancel).map(|_| ())
    }

    /// One optimization step. A failure moves the job to `failed`; reaching
    /// the iteration budget moves it to `completed`.
    pub fn step(&mut self) -> Result<LossReport> {
        if self.phase != Phase::Running {
            return Err(Error::contract(format!("cannot step a {} job", self.phase)));
        }
        match self.step_inner() {
            Ok(r) => {
                self.last = Some(r);
                if self.is_done() {
                    self.apply(JobEventKind::Complete)?;
                }
                Ok(r)
            }
            Err(e) => {
                self.apply(JobEventKind::Fail)?;
                Err(e)
            }
        }
    }

    fn step_inner(&mut self) -> Result<LossReport> {
        let alpha = self.alpha();
        let eval = self.objective().evaluate(&self.z, self.iteration, alpha, true)?;
        let mut grad = eval.grad.expect("gradient requested");
        if let Some(mask) = &self.mask {
            mask_gradients(&mut grad, mask)?;
        }
        adam_step(&mut self.adam, &mut self.z, &grad)?;
        finite_or(&self.z, "update")?;
        self.iteration += 1;
        Ok(LossReport {
            iteration: self.iteration,
            l_clip: eval.l_clip,
            l_reg: eval.l_reg,
            total: eval.total,
            alpha,
        })
    }

    /// Decoded image of the current latent, quantized if the run quantizes.
    pub fn current_image(&self) -> Result<Image> {
        let obj = self.objective();
        self.backend.decode(&obj.decode_input(&self.z)?)
    }

    /// Decoded image of the current latent with quantization bypassed.
    pub fn current_image_raw(&self) -> Result<Image> {
        self.backend.decode(&self.z)
    }

    pub fn begin_inject(&mut self) -> Result<()> {
        self.apply(JobEventKind::BeginInject).map(|_| ())
    }

    /// Replaces the latent with the encoding of `image` and resets Adam.
    /// The iteration counter is kept. Errors return the job to `paused`
    /// with its latent untouched.
    pub fn inject_image(&mut self, image: &Image) -> Result<()> {
        if self.phase != Phase::AwaitingImage {
            return Err(Error::IllegalTransition {
                from: self.phase.to_string(),
                event: "inject_image".into(),
            });
        }
        let result = self.encode_injected(image);
        self.apply(JobEventKind::FinishInject)?;
        let z = result?;
        self.z = z;
        self.adam.reset();
        Ok(())
    }

    fn encode_injected(&self, image: &Image) -> Result<LatentGrid> {
        let info = self.backend.info();
        image.ensure_dims(info.image_dims(), "injected image")?;
        let z = self.backend.encode(image)?;
        z.ensure_dims(info.latent_dims(), "encoded latent")?;
        finite_or(&z, "encode")?;
        Ok(z)
    }

    /// Pause-inject-resume convenience for a running or paused job.
    pub fn replace_image(&mut self, image: &Image) -> Result<()> {
        let was_running = self.phase == Phase::Running;
        if was_running {
            self.pause()?;
        }
        self.begin_inject()?;
        self.inject_image(image)?;
        if was_running {
            self.resume()?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config_hash: self.config.structural_hash(),
            iteration: self.iteration,
            alpha: self.alpha(),
            seed: self.config.seed,
            z: self.z.clone(),
            m: self.adam.m.clone(),
            v: self.adam.v.clone(),
            adam_t: self.adam.t,
        }
    }
}

/// Callbacks fired by [`run`].
pub trait RunObserver {
    fn on_loss(&mut self, _report: &LossReport) -> Result<()> {
        Ok(())
    }

    fn on_frame(&mut self, _iteration: u64, _image: &Image, _is_final: bool) -> Result<()> {
        Ok(())
    }
}

impl RunObserver for () {}

/// Drives a job to completion, reporting every `save_every` iterations and
/// once more at the end. Returns the final image.
pub fn run(job: &mut Job, observer: &mut dyn RunObserver) -> Result<Image> {
    if job.phase() == Phase::Queued {
        job.start()?;
    }
    let every = job.config().save_every;
    while job.phase() == Phase::Running {
        let report = job.step()?;
        observer.on_loss(&report)?;
        if report.iteration % every == 0 {
            observer.on_frame(report.iteration, &job.current_image()?, false)?;
        }
    }
    let image = job.current_image()?;
    observer.on_frame(job.iteration(), &image, true)?;
    Ok(image)
}
