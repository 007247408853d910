mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use latentsteer_core::loss::PromptSpec;
use latentsteer_core::optim::DEFAULT_LR;
use latentsteer_core::pipeline::config::{DEFAULT_ITERATIONS, DEFAULT_SAVE_EVERY};
use latentsteer_core::selfmask::DEFAULT_K_SIGMA;

use crate::run::Failure;

#[derive(Parser)]
#[command(
    name = "latentsteer",
    version,
    about = "Steer a vector-quantized image latent toward text prompts"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize a latent from noise toward the prompts.
    Generate(GenerateArgs),
    /// Start from an existing image, optionally editing only a region.
    Edit(EditArgs),
    /// Infer the region of an image matching a phrase and write it as a mask.
    Selfmask(SelfmaskArgs),
    /// Run the HTTP job service.
    Serve(ServeArgs),
    /// Serve the toy backend over the binary socket protocol.
    BackendServe(BackendServeArgs),
}

/// `TEXT` or `TEXT:WEIGHT`; the weight defaults to 1 and may be negative.
fn parse_prompt(s: &str) -> Result<PromptSpec, String> {
    if let Some((text, weight)) = s.rsplit_once(':') {
        if let Ok(w) = weight.trim().parse::<f64>() {
            if text.trim().is_empty() {
                return Err("prompt text is empty".into());
            }
            return Ok(PromptSpec::new(text, w));
        }
    }
    Ok(PromptSpec::new(s, 1.0))
}

/// `WxH`, e.g. `64x64`.
fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("`{s}` is not WIDTHxHEIGHT"))?;
    let w = w.trim().parse().map_err(|_| format!("bad width in `{s}`"))?;
    let h = h.trim().parse().map_err(|_| format!("bad height in `{s}`"))?;
    Ok((w, h))
}

#[derive(Args, Clone)]
pub struct RunArgs {
    /// Target text, repeatable; `TEXT:WEIGHT` sets a weight (negative steers away).
    #[arg(long = "prompt", value_name = "TEXT[:WEIGHT]", value_parser = parse_prompt)]
    pub prompts: Vec<PromptSpec>,
    #[arg(long, default_value_t = DEFAULT_ITERATIONS)]
    pub iterations: u64,
    #[arg(long, default_value_t = DEFAULT_LR)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output size as WIDTHxHEIGHT.
    #[arg(long, value_name = "WxH", value_parser = parse_size)]
    pub size: Option<(usize, usize)>,
    /// `toy` or `socket:<path>`.
    #[arg(long, default_value = "toy")]
    pub backend: String,
    /// Run directory; must not already hold a run.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_SAVE_EVERY)]
    pub save_every: u64,
    /// Optimize the continuous latent without snapping to the codebook.
    #[arg(long)]
    pub no_quantize: bool,
    /// Initial regularization weight.
    #[arg(long)]
    pub alpha0: Option<f64>,
    /// Regularization decay per iteration.
    #[arg(long)]
    pub alpha_decay: Option<f64>,
    /// Augmentation stage to switch off, repeatable: flip, affine,
    /// perspective, color_jitter, noise.
    #[arg(long = "disable-aug", value_name = "NAME", num_args = 1..)]
    pub disable_aug: Vec<String>,
    /// Crops per iteration.
    #[arg(long)]
    pub cuts: Option<usize>,
}

#[derive(Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Args)]
pub struct EditArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, value_name = "PATH")]
    pub init_image: PathBuf,
    /// Mask PNG: white pixels may change, black pixels are frozen.
    #[arg(long, value_name = "PATH", conflicts_with = "self_mask")]
    pub mask: Option<PathBuf>,
    /// Infer the editable region from a phrase instead of a mask file.
    #[arg(long, value_name = "PHRASE")]
    pub self_mask: Option<String>,
    #[arg(long, default_value_t = DEFAULT_K_SIGMA, allow_negative_numbers = true)]
    pub k_sigma: f64,
    /// Weight of the term keeping the source image's overall content.
    #[arg(long, allow_negative_numbers = true)]
    pub struct_weight: Option<f64>,
}

#[derive(Args)]
pub struct SelfmaskArgs {
    #[arg(long, value_name = "PATH")]
    pub image: PathBuf,
    #[arg(long)]
    pub phrase: String,
    #[arg(long, default_value_t = DEFAULT_K_SIGMA, allow_negative_numbers = true)]
    pub k_sigma: f64,
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    #[arg(long, default_value = "toy")]
    pub backend: String,
}

#[derive(Args)]
pub struct ServeArgs {
    /// Address to listen on; defaults to $LISTEN_ADDR or 127.0.0.1:8080.
    #[arg(long)]
    pub listen: Option<String>,
    /// Defaults to $DATA_DIR or ./data.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Backend for requests that do not name one; defaults to $BACKEND or toy.
    #[arg(long)]
    pub backend: Option<String>,
    /// Jobs optimized at once; defaults to $MAX_JOBS or the CPU count.
    #[arg(long)]
    pub max_jobs: Option<usize>,
}

#[derive(Args)]
pub struct BackendServeArgs {
    #[arg(long, value_name = "PATH")]
    pub socket: PathBuf,
    #[arg(long, value_name = "WxH", value_parser = parse_size, default_value = "64x64")]
    pub size: (usize, usize),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => run::generate(a),
        Command::Edit(a) => run::edit(a),
        Command::Selfmask(a) => run::selfmask(a),
        Command::Serve(a) => run::serve(a),
        Command::BackendServe(a) => run::backend_serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
