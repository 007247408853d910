use std::path::{Path, PathBuf};

use latentsteer_core::backend::{open_backend, remote, toy};
use latentsteer_core::imageio::{decode_mask_png, encode_mask_png, load_image};
use latentsteer_core::pipeline::{
    FieldError, Job, JobEvent, JobInputs, Mode, Phase, RunConfig, RunDir, SelfMaskConfig, EVENTS_FILE,
};
use latentsteer_core::selfmask::{infer_mask, CropGrid};
use latentsteer_core::{Error, Execution};
use latentsteer_service::Settings;

use crate::{BackendServeArgs, EditArgs, GenerateArgs, RunArgs, SelfmaskArgs, ServeArgs};

pub enum Failure {
    /// Exit code 2.
    Usage(String),
    /// Exit code 1.
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(msg) => Failure::Usage(msg),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn flag_for(field: &str) -> &str {
    match field {
        "prompts" => "--prompt",
        "iterations" => "--iterations",
        "lr" => "--lr",
        "width" | "height" => "--size",
        "save_every" => "--save-every",
        "backend" => "--backend",
        "init_image" => "--init-image",
        "mask" => "--mask",
        "struct_weight" => "--struct-weight",
        "self_mask.phrase" => "--self-mask",
        "regularization" => "--alpha0/--alpha-decay",
        "augmentation" => "--disable-aug/--cuts",
        other => other,
    }
}

fn usage(errors: &[FieldError]) -> Failure {
    Failure::Usage(
        errors
            .iter()
            .map(|e| format!("{}: {}", flag_for(&e.field), e.message))
            .collect::<Vec<_>>()
            .join("; "),
    )
}

/// Maps the shared flags onto a config exactly as the service would read
/// the equivalent JSON document.
fn base_config(a: &RunArgs) -> Result<RunConfig, Failure> {
    let mut c = RunConfig {
        prompts: a.prompts.clone(),
        iterations: a.iterations,
        lr: a.lr,
        seed: a.seed,
        quantize: !a.no_quantize,
        save_every: a.save_every,
        backend: a.backend.clone(),
        ..RunConfig::default()
    };
    if let Some((w, h)) = a.size {
        c.width = w;
        c.height = h;
    }
    if let Some(v) = a.alpha0 {
        c.regularization.alpha0 = v;
    }
    if let Some(v) = a.alpha_decay {
        c.regularization.decay = v;
    }
    if let Some(n) = a.cuts {
        c.augmentation.cuts = n;
    }
    for name in &a.disable_aug {
        c.augmentation
            .disable(name)
            .map_err(|e| Failure::Usage(format!("--disable-aug: {e}")))?;
    }
    Ok(c)
}

fn check(config: &RunConfig, inputs: &JobInputs) -> Result<(), Failure> {
    let errors = config.validate(inputs.init_image.is_some(), inputs.mask.is_some());
    if errors.is_empty() {
        Ok(())
    } else {
        Err(usage(&errors))
    }
}

/// Runs one job to completion, writing the same directory layout as a
/// service job.
pub fn execute(config: RunConfig, inputs: JobInputs, out: &Path) -> Result<PathBuf, Failure> {
    check(&config, &inputs)?;
    if out.join(EVENTS_FILE).exists() {
        return Err(Failure::Runtime(format!("{} already holds a run", out.display())));
    }
    let backend = open_backend(&config.backend, config.height, config.width)?;
    let mut job = Job::new(config.clone(), inputs.clone(), backend)?;
    let mut dir = RunDir::open(out)?;
    dir.write_config(&config)?;
    dir.write_inputs(&inputs)?;
    dir.record_state(&job)?;
    job.start()?;
    dir.record_state(&job)?;
    let total = config.iterations;
    loop {
        let report = match job.step() {
            Ok(r) => r,
            Err(e) => {
                dir.append(JobEvent::Error { message: e.to_string() })?;
                dir.record_state(&job)?;
                return Err(Failure::Runtime(e.to_string()));
            }
        };
        dir.record_step(&job, &report)?;
        if report.iteration % config.save_every == 0 {
            eprintln!(
                "iteration {}/{total}  loss {:.5}  (guidance {:.5}, reg {:.5})",
                report.iteration, report.total, report.l_clip, report.l_reg
            );
        }
        if job.phase() == Phase::Completed {
            dir.record_completion(&job)?;
            return Ok(dir.final_path());
        }
    }
}

pub fn generate(a: GenerateArgs) -> Result<(), Failure> {
    let config = base_config(&a.run)?;
    let path = execute(config, JobInputs::default(), &a.run.out)?;
    println!("{}", path.display());
    Ok(())
}

pub fn edit(a: EditArgs) -> Result<(), Failure> {
    let mut config = base_config(&a.run)?;
    let init = load_image(&a.init_image).map_err(|e| Failure::Runtime(format!("{}: {e}", a.init_image.display())))?;
    if a.run.size.is_none() {
        config.width = init.cols();
        config.height = init.rows();
    }
    let mask = match &a.mask {
        Some(p) => {
            let bytes = std::fs::read(p).map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())))?;
            Some(decode_mask_png(&bytes).map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())))?)
        }
        None => None,
    };
    config.mode = if mask.is_some() || a.self_mask.is_some() {
        Mode::MaskedEdit
    } else {
        Mode::Edit
    };
    config.self_mask = a.self_mask.as_ref().map(|phrase| SelfMaskConfig {
        phrase: phrase.clone(),
        k_sigma: a.k_sigma,
        grid: None,
    });
    config.struct_weight = a.struct_weight;
    let inputs = JobInputs {
        init_image: Some(init),
        mask,
    };
    let path = execute(config, inputs, &a.run.out)?;
    println!("{}", path.display());
    Ok(())
}

pub fn selfmask(a: SelfmaskArgs) -> Result<(), Failure> {
    if a.phrase.trim().is_empty() {
        return Err(Failure::Usage("--phrase: must not be empty".into()));
    }
    let image = load_image(&a.image).map_err(|e| Failure::Runtime(format!("{}: {e}", a.image.display())))?;
    let backend = open_backend(&a.backend, image.rows(), image.cols())?;
    let grid = CropGrid::default_for(image.rows(), image.cols());
    let mask = infer_mask(
        &image,
        &a.phrase,
        backend.as_ref(),
        grid,
        a.k_sigma,
        Execution::default(),
    )?;
    std::fs::write(&a.out, encode_mask_png(&mask)?)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", a.out.display())))?;
    println!(
        "{} ({} of {} pixels editable)",
        a.out.display(),
        mask.count(),
        mask.values.len()
    );
    Ok(())
}

pub fn serve(a: ServeArgs) -> Result<(), Failure> {
    let mut settings = Settings::from_env().map_err(Failure::Usage)?;
    if let Some(addr) = a.listen {
        settings.listen_addr = addr
            .parse()
            .map_err(|e| Failure::Usage(format!("--listen `{addr}`: {e}")))?;
    }
    if let Some(d) = a.data_dir {
        settings.data_dir = d;
    }
    if let Some(b) = a.backend {
        settings.backend = b;
    }
    if let Some(n) = a.max_jobs {
        if n == 0 {
            return Err(Failure::Usage("--max-jobs: must be at least 1".into()));
        }
        settings.max_jobs = n;
    }
    latentsteer_service::init_tracing();
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Failure::Runtime(e.to_string()))?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(settings.listen_addr)
            .await
            .map_err(|e| Failure::Runtime(format!("cannot listen on {}: {e}", settings.listen_addr)))?;
        let addr = listener.local_addr().map_err(|e| Failure::Runtime(e.to_string()))?;
        println!("listening on http://{addr}");
        latentsteer_service::serve_on(listener, settings, latentsteer_service::shutdown_signal())
            .await
            .map_err(|e| Failure::Runtime(e.to_string()))
    })
}

pub fn backend_serve(a: BackendServeArgs) -> Result<(), Failure> {
    let (w, h) = a.size;
    let backend = toy::ToyBackend::new(toy::ToyConfig::with_image(h, w))?;
    println!("serving toy backend on {}", a.socket.display());
    remote::serve_unix(std::sync::Arc::new(backend), &a.socket)?;
    Ok(())
}
