//! Acceptance suite. Prints one verdict line per criterion.
//!
//! Exits non-zero when a verdict differs from `KNOWN_RED`: a new failure,
//! or a known failure that now passes. `ACCEPTANCE_STRICT=1` exits
//! non-zero on any failure.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use latentsteer_core::augment::{sample_crop_batch, AugChain, AugmentationConfig, ChainPlan};
use latentsteer_core::backend::remote::WireBackend;
use latentsteer_core::backend::toy::{ToyBackend, ToyConfig, RED_CODE};
use latentsteer_core::backend::{embed_text, Backend, F32Boundary};
use latentsteer_core::imageio::{encode_png, PixelMask};
use latentsteer_core::latent::{quantize_cell, quantize_grid, Codebook};
use latentsteer_core::loss::{spherical_sq_dist_grad_raw, spherical_sq_dist_raw, GuidanceTarget, TargetKind};
use latentsteer_core::optim::alpha_at;
use latentsteer_core::pipeline::{
    run, Checkpoint, Job, JobEvent, JobInputs, Mode, Phase, RunConfig, RunObserver, SelfMaskConfig, TRANSITIONS,
};
use latentsteer_core::rng::{DeterministicStream, Domain};
use latentsteer_core::selfmask::{normalize_scores, score_grid, threshold_mask, CropGrid, DEFAULT_K_SIGMA};
use latentsteer_core::{Execution, Image, Result as CoreResult, Tensor3};
use latentsteer_service::{ApiError, Control, CreateJob, Manager, Settings};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestCaseError, TestRunner};
use serde_json::json;

/// Criteria expected to fail, with the measured shortfall in the README.
const KNOWN_RED: [&str; 2] = ["convergence", "selfmask"];

struct Outcome {
    pass: bool,
    detail: String,
    /// Everything the criterion computed from backend outputs, for the
    /// substitutability comparison.
    bytes: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Attach {
    /// Double precision, in process.
    Direct,
    /// Single precision at the boundary, in process.
    Single,
    /// Single precision over the socket protocol on a loopback pair.
    Wire,
}

impl Attach {
    fn backend(self, rows: usize, cols: usize) -> Arc<dyn Backend> {
        let toy = ToyBackend::new(ToyConfig::with_image(rows, cols)).expect("toy backend");
        match self {
            Attach::Direct => Arc::new(toy),
            Attach::Single => Arc::new(F32Boundary::new(toy).expect("boundary")),
            Attach::Wire => {
                let n = std::thread::available_parallelism().map_or(1, |n| n.get());
                Arc::new(WireBackend::loopback(Arc::new(toy), n).expect("loopback"))
            }
        }
    }

    fn double(self) -> bool {
        self == Attach::Direct
    }
}

fn push(buf: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

fn stream(tag: u64) -> DeterministicStream {
    DeterministicStream::new(tag, Domain::Test, 0)
}

fn random_tensor(rng: &mut DeterministicStream, dims: (usize, usize, usize), lo: f64, hi: f64) -> Tensor3 {
    let n = dims.0 * dims.1 * dims.2;
    Tensor3::from_vec(
        dims.0,
        dims.1,
        dims.2,
        (0..n).map(|_| lo + (hi - lo) * rng.next_f64()).collect(),
    )
    .unwrap()
}

fn random_vec(rng: &mut DeterministicStream, n: usize) -> Vec<f64> {
    (0..n).map(|_| 2.0 * rng.next_f64() - 1.0).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

fn axpy(x: &Tensor3, h: f64, v: &Tensor3) -> Tensor3 {
    let data = x.as_slice().iter().zip(v.as_slice()).map(|(a, b)| a + h * b).collect();
    Tensor3::from_vec(x.rows(), x.cols(), x.channels(), data).unwrap()
}

fn red_target(b: &dyn Backend) -> Vec<GuidanceTarget> {
    vec![GuidanceTarget {
        embedding: embed_text(b, "red").unwrap(),
        weight: 1.0,
        kind: TargetKind::Text,
    }]
}

fn red_config(iterations: u64) -> RunConfig {
    RunConfig {
        iterations,
        seed: 42,
        ..RunConfig::with_prompt("red")
    }
}

// ---------------------------------------------------------------- constants

fn constants(_: Attach) -> Outcome {
    let c = RunConfig::default();
    let v = serde_json::to_value(&c).unwrap();
    let sm: SelfMaskConfig = serde_json::from_value(json!({"phrase": "x"})).unwrap();
    let checks = [
        ("lr", v["lr"] == json!(0.15)),
        ("betas", v["betas"] == json!([0.9, 0.999])),
        ("eps", v["eps"] == json!(1e-8)),
        ("iterations", v["iterations"] == json!(400)),
        ("alpha0", v["regularization"]["alpha0"] == json!(0.5)),
        ("decay", v["regularization"]["decay"] == json!(0.005)),
        ("schedule", alpha_at(&c.regularization, 1) == 0.5 * (1.0 - 0.005)),
        ("k_sigma", sm.k_sigma == -2.0 && DEFAULT_K_SIGMA == -2.0),
    ];
    let bad: Vec<&str> = checks.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    Outcome {
        pass: bad.is_empty(),
        detail: if bad.is_empty() {
            "lr 0.15, betas (0.9, 0.999), 400 iterations, decay 0.005, k_sigma -2".into()
        } else {
            format!("wrong defaults: {}", bad.join(", "))
        },
        bytes: v.to_string().into_bytes(),
    }
}

// ---------------------------------------------------------------- quantizer

fn brute_force(z: &[f64], codes: &[Vec<f64>]) -> usize {
    let d: Vec<f64> = codes
        .iter()
        .map(|c| c.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum())
        .collect();
    let m = d.iter().copied().fold(f64::INFINITY, f64::min);
    d.iter().position(|&x| x == m).unwrap()
}

/// Lattice values make exact ties common; duplicated codes and midpoints
/// force them.
fn instance(rng: &mut DeterministicStream, lattice: bool) -> (Vec<f64>, Vec<Vec<f64>>) {
    let k = 1 + (rng.next_f64() * 64.0) as usize;
    let dim = 1 + (rng.next_f64() * 8.0) as usize;
    let val = |rng: &mut DeterministicStream| {
        if lattice {
            (rng.next_f64() * 5.0).floor() - 2.0
        } else {
            rng.next_f64() * 4.0 - 2.0
        }
    };
    let mut codes: Vec<Vec<f64>> = (0..k).map(|_| (0..dim).map(|_| val(rng)).collect()).collect();
    if k > 1 && rng.next_f64() < 0.5 {
        let (a, b) = (
            (rng.next_f64() * k as f64) as usize,
            (rng.next_f64() * k as f64) as usize,
        );
        codes[b] = codes[a].clone();
    }
    let z = if k > 1 && rng.next_f64() < 0.3 {
        codes[0].iter().zip(&codes[1]).map(|(a, b)| (a + b) / 2.0).collect()
    } else {
        (0..dim).map(|_| val(rng)).collect()
    };
    (z, codes)
}

fn quantizer(_: Attach) -> Outcome {
    let mut rng = stream(99);
    let (mut mismatches, mut ties) = (0, 0);
    let mut bytes = Vec::new();
    for i in 0..1000 {
        let (z, codes) = instance(&mut rng, i % 2 == 0);
        let cb = Codebook::from_rows(&codes).unwrap();
        let (got, value) = quantize_cell(&z, &cb).unwrap();
        let want = brute_force(&z, &codes);
        if got != want || value != &codes[want][..] {
            mismatches += 1;
        }
        let dist = |c: &Vec<f64>| c.iter().zip(&z).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        let best = dist(&codes[want]);
        if codes.iter().filter(|c| dist(c) == best).count() > 1 {
            ties += 1;
        }
        bytes.extend_from_slice(&(got as u32).to_le_bytes());
    }
    Outcome {
        pass: mismatches == 0 && ties >= 100,
        detail: format!("1000 instances, K<=64, {ties} with exact ties, {mismatches} mismatches"),
        bytes,
    }
}

// ---------------------------------------------------------------- gradients

fn gradients(a: Attach) -> Outcome {
    const DOT_TOL: f64 = 1e-6;
    let b = a.backend(64, 64);
    let mut bytes = Vec::new();

    // Linear augmentation stages, each and composed.
    let cfg = AugmentationConfig {
        cuts: 8,
        flip_prob: 1.0,
        perspective_prob: 1.0,
        ..AugmentationConfig::default()
    };
    let mut crng = DeterministicStream::new(3, Domain::Crops, 0);
    let chains = sample_crop_batch(&mut crng, (64, 64), 16, &cfg).unwrap();
    let mut t = stream(11);
    let mut aug_worst = 0.0f64;
    let mut seen = BTreeSet::new();
    let mut chains: Vec<AugChain> = chains;
    chains.push(AugChain::identity(64, 64, 16));
    for chain in &chains {
        let plan = ChainPlan::new(chain).unwrap();
        let mut dims = (64, 64, 3);
        for stage in plan.stages() {
            let x = random_tensor(&mut t, dims, -1.0, 1.0);
            let ax = stage.forward_linear(&x);
            let y = random_tensor(&mut t, ax.dims(), -1.0, 1.0);
            aug_worst = aug_worst.max(rel_err(ax.dot(&y), x.dot(&stage.adjoint(&y))));
            seen.insert(stage.name());
            dims = ax.dims();
        }
        let x = random_tensor(&mut t, (64, 64, 3), 0.0, 1.0);
        let y = random_tensor(&mut t, (16, 16, 3), -1.0, 1.0);
        aug_worst = aug_worst.max(rel_err(
            plan.forward_linear(&x).unwrap().dot(&y),
            x.dot(&plan.vjp(&y).unwrap()),
        ));
    }
    let all_stages = ["crop", "flip", "affine", "perspective", "color_jitter", "noise"]
        .iter()
        .all(|s| seen.contains(s));

    // Nonlinear backend stages against central differences. Single
    // precision at the boundary needs a wider step and looser tolerance.
    let (h_dec, h_emb, tol) = if a.double() {
        (1e-5, 1e-6, DOT_TOL)
    } else {
        (1e-2, 1e-3, 1e-3)
    };
    let mut t = stream(13);
    let mut dec_worst = 0.0f64;
    for _ in 0..5 {
        let z = random_tensor(&mut t, (8, 8, 4), -3.0, 3.0);
        let v = random_tensor(&mut t, (8, 8, 4), -1.0, 1.0);
        let w = random_tensor(&mut t, (64, 64, 3), -1.0, 1.0);
        let plus = b.decode(&axpy(&z, h_dec, &v)).unwrap();
        let minus = b.decode(&axpy(&z, -h_dec, &v)).unwrap();
        let jv = (plus.dot(&w) - minus.dot(&w)) / (2.0 * h_dec);
        let g = b.decode_vjp(&z, &w).unwrap();
        push(&mut bytes, g.as_slice());
        dec_worst = dec_worst.max(rel_err(jv, v.dot(&g)));
    }
    let mut t = stream(14);
    let mut emb_worst = 0.0f64;
    for _ in 0..5 {
        let x = random_tensor(&mut t, (16, 16, 3), 0.0, 1.0);
        let v = random_tensor(&mut t, (16, 16, 3), -1.0, 1.0);
        let w = random_vec(&mut t, 3);
        let plus = b.embed_image(&axpy(&x, h_emb, &v)).unwrap();
        let minus = b.embed_image(&axpy(&x, -h_emb, &v)).unwrap();
        let jv = (dot(&plus, &w) - dot(&minus, &w)) / (2.0 * h_emb);
        let g = b.embed_image_vjp(&x, &w).unwrap();
        push(&mut bytes, g.as_slice());
        emb_worst = emb_worst.max(rel_err(jv, v.dot(&g)));
    }

    let mut t = stream(15);
    let mut loss_worst = 0.0f64;
    for _ in 0..20 {
        let mut u = random_vec(&mut t, 3);
        let mut w = random_vec(&mut t, 3);
        for x in [&mut u, &mut w] {
            let n = dot(x, x).sqrt();
            x.iter_mut().for_each(|e| *e /= n);
        }
        let d = random_vec(&mut t, 3);
        let h = 1e-6;
        let up: Vec<f64> = u.iter().zip(&d).map(|(a, b)| a + h * b).collect();
        let um: Vec<f64> = u.iter().zip(&d).map(|(a, b)| a - h * b).collect();
        let fd = (spherical_sq_dist_raw(&up, &w) - spherical_sq_dist_raw(&um, &w)) / (2.0 * h);
        loss_worst = loss_worst.max(rel_err(fd, dot(&d, &spherical_sq_dist_grad_raw(&u, &w))));
    }

    // Whole objective, every latent coordinate, quantization bypassed.
    let e2e = if a.double() {
        let targets = vec![
            GuidanceTarget {
                embedding: embed_text(b.as_ref(), "red").unwrap(),
                weight: 1.0,
                kind: TargetKind::Text,
            },
            GuidanceTarget {
                embedding: embed_text(b.as_ref(), "cyan").unwrap(),
                weight: -0.4,
                kind: TargetKind::Text,
            },
        ];
        let aug = AugmentationConfig {
            cuts: 8,
            ..AugmentationConfig::default()
        };
        let obj = latentsteer_core::pipeline::Objective {
            backend: b.as_ref(),
            targets: &targets,
            augmentation: &aug,
            seed: 42,
            quantize: false,
            exec: Execution::Sequential,
        };
        let z = random_tensor(&mut stream(17), (8, 8, 4), -2.0, 2.0);
        let g = obj.evaluate(&z, 5, 0.3, true).unwrap().grad.unwrap();
        let h = 1e-5;
        let mut sq = 0.0;
        for i in 0..z.len() {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp.as_mut_slice()[i] += h;
            zm.as_mut_slice()[i] -= h;
            let fd = (obj.evaluate(&zp, 5, 0.3, false).unwrap().total
                - obj.evaluate(&zm, 5, 0.3, false).unwrap().total)
                / (2.0 * h);
            sq += (g.as_slice()[i] - fd).powi(2);
        }
        Some(sq.sqrt() / g.dot(&g).sqrt())
    } else {
        None
    };

    let pass = all_stages
        && aug_worst <= DOT_TOL
        && loss_worst <= DOT_TOL
        && dec_worst <= tol
        && emb_worst <= tol
        && e2e.is_none_or(|e| e <= 1e-4);
    let e2e_text = match e2e {
        Some(e) => format!("end-to-end {e:.1e} (<=1e-4)"),
        None => "end-to-end skipped at single precision".into(),
    };
    Outcome {
        pass,
        detail: format!(
            "augment {aug_worst:.1e}, loss {loss_worst:.1e} (<=1e-6); decode {dec_worst:.1e}, embed {emb_worst:.1e} \
             (<={tol:.0e}); {e2e_text}"
        ),
        bytes,
    }
}

// ---------------------------------------------------------- straight-through

fn straight_through(a: Attach) -> Outcome {
    let b = a.backend(64, 64);
    let targets = red_target(b.as_ref());
    let aug = AugmentationConfig {
        cuts: 8,
        ..AugmentationConfig::default()
    };
    let obj = latentsteer_core::pipeline::Objective {
        backend: b.as_ref(),
        targets: &targets,
        augmentation: &aug,
        seed: 42,
        quantize: true,
        exec: Execution::Sequential,
    };
    let mut t = stream(21);
    let z = random_tensor(&mut t, (8, 8, 4), -2.0, 2.0);
    let codebook = &b.info().codebook;
    let codes = quantize_grid(&z, codebook).unwrap().indices;
    let g = obj.evaluate(&z, 5, 0.0, true).unwrap().grad.unwrap();
    let mut bytes = Vec::new();
    push(&mut bytes, g.as_slice());
    let h = 1e-3;
    let (mut fd_worst, mut dir_min, mut moved) = (0.0f64, f64::INFINITY, 0);
    for _ in 0..20 {
        let v = random_tensor(&mut t, (8, 8, 4), -1.0, 1.0);
        let (zp, zm) = (axpy(&z, h, &v), axpy(&z, -h, &v));
        for side in [&zp, &zm] {
            if quantize_grid(side, codebook).unwrap().indices != codes {
                moved += 1;
            }
        }
        let fd = (obj.evaluate(&zp, 5, 0.0, false).unwrap().total - obj.evaluate(&zm, 5, 0.0, false).unwrap().total)
            / (2.0 * h);
        push(&mut bytes, &[fd]);
        fd_worst = fd_worst.max(fd.abs());
        dir_min = dir_min.min(v.dot(&g).abs());
    }
    let norm = g.dot(&g).sqrt();
    Outcome {
        pass: moved == 0 && fd_worst <= 1e-12 && norm > 1e-8 && dir_min > 0.0,
        detail: format!(
            "20 directions at h=1e-3: codes unchanged in {}/40, max |FD| {fd_worst:.1e}; ST gradient norm {norm:.2e}, \
             min |directional| {dir_min:.1e}",
            40 - moved
        ),
        bytes,
    }
}

// ------------------------------------------------------------------ variance

fn variance(a: Attach) -> Outcome {
    let b = a.backend(64, 64);
    let targets = red_target(b.as_ref());
    let z = random_tensor(&mut stream(22), (8, 8, 4), -1.0, 1.0);
    let mut bytes = Vec::new();
    let mut spread = |cuts: usize| {
        let aug = AugmentationConfig {
            cuts,
            ..AugmentationConfig::default()
        };
        let obj = latentsteer_core::pipeline::Objective {
            backend: b.as_ref(),
            targets: &targets,
            augmentation: &aug,
            seed: 42,
            quantize: true,
            exec: Execution::default(),
        };
        let grads: Vec<Tensor3> = (0..100)
            .map(|i| obj.evaluate(&z, i, 0.0, true).unwrap().grad.unwrap())
            .collect();
        let mut mean = Tensor3::zeros(8, 8, 4);
        for g in &grads {
            mean.add_assign(g);
            push(&mut bytes, g.as_slice());
        }
        mean.scale(1.0 / grads.len() as f64);
        let var = grads
            .iter()
            .map(|g| {
                g.as_slice()
                    .iter()
                    .zip(mean.as_slice())
                    .map(|(x, m)| (x - m).powi(2))
                    .sum::<f64>()
            })
            .sum::<f64>()
            / grads.len() as f64;
        var.sqrt()
    };
    let (s1, s16) = (spread(1), spread(16));
    let ratio = s16 / s1;
    Outcome {
        pass: s1 > 0.0 && ratio <= 0.5,
        detail: format!("100 resamples: std C=1 {s1:.3e}, C=16 {s16:.3e}, ratio {ratio:.3} (<=0.5)"),
        bytes,
    }
}

// --------------------------------------------------------------- convergence

fn convergence(a: Attach) -> Outcome {
    let mut job = Job::new(red_config(400), JobInputs::default(), a.backend(64, 64)).unwrap();
    let image = run(&mut job, &mut ()).unwrap();
    let q = quantize_grid(job.latent(), &job.info().codebook).unwrap();
    let red = q.indices.iter().filter(|&&k| k == RED_CODE).count();
    let n = q.indices.len();
    let m = image.channel_means();
    Outcome {
        pass: red as f64 >= 0.9 * n as f64 && m[0] >= 0.9 && m[1] <= 0.1 && m[2] <= 0.1,
        detail: format!(
            "\"red\", seed 42, 400 iterations: {red}/{n} red cells (need >=90%), mean rgb ({:.3}, {:.3}, {:.3}) \
             (need R>=0.9, G,B<=0.1)",
            m[0], m[1], m[2]
        ),
        bytes: encode_png(&image).unwrap(),
    }
}

// ------------------------------------------------------------------ selfmask

fn selfmask(a: Attach) -> Outcome {
    let (top, left) = (24, 24);
    let inside = |r: usize, c: usize| (top..top + 16).contains(&r) && (left..left + 16).contains(&c);
    let image: Image = Tensor3::from_fn(64, 64, 3, |r, c, k| if inside(r, c) { [1.0, 0.0, 0.0][k] } else { 0.4 });
    let b = a.backend(64, 64);
    let map = score_grid(
        &image,
        "red",
        b.as_ref(),
        CropGrid::default_for(64, 64),
        Execution::default(),
    )
    .unwrap();
    let norm = normalize_scores(&map).unwrap();
    let (mut s_in, mut n_in, mut s_out, mut n_out) = (0.0, 0.0, 0.0, 0.0);
    for r in 0..64 {
        for c in 0..64 {
            if inside(r, c) {
                s_in += norm.get(r, c, 0);
                n_in += 1.0;
            } else {
                s_out += norm.get(r, c, 0);
                n_out += 1.0;
            }
        }
    }
    let gap = s_in / n_in - s_out / n_out;
    let mask = threshold_mask(&norm, 1.0);
    let (mut inter, mut union) = (0usize, 0usize);
    for r in 0..64 {
        for c in 0..64 {
            let (m, t) = (mask.get(r, c), inside(r, c));
            inter += usize::from(m && t);
            union += usize::from(m || t);
        }
    }
    let iou = inter as f64 / union as f64;
    let mut bytes = Vec::new();
    push(&mut bytes, norm.as_slice());
    bytes.extend(mask.values.iter().map(|&v| u8::from(v)));
    Outcome {
        pass: gap >= 0.3 && iou >= 0.5,
        detail: format!(
            "16x16 square on gray 0.4: score gap {gap:.3} (>=0.3), IoU at k=+1 {iou:.3} (>=0.5, mask {} px)",
            mask.count()
        ),
        bytes,
    }
}

// ------------------------------------------------------------------- masking

fn masking(a: Attach) -> Outcome {
    let init = Tensor3::from_fn(64, 64, 3, |r, c, _| (r * 64 + c) as f64 / 4096.0);
    let masked_run = |mask: PixelMask| {
        let config = RunConfig {
            mode: Mode::MaskedEdit,
            ..red_config(50)
        };
        let inputs = JobInputs {
            init_image: Some(init.clone()),
            mask: Some(mask),
        };
        let mut job = Job::new(config, inputs, a.backend(64, 64)).unwrap();
        let z0 = job.latent().clone();
        run(&mut job, &mut ()).unwrap();
        (z0, job)
    };
    let same_bits = |x: &[f64], y: &[f64]| x.iter().zip(y).all(|(a, b)| a.to_bits() == b.to_bits());

    let (z0, job) = masked_run(PixelMask::new(64, 64, vec![false; 64 * 64]).unwrap());
    let zero_ok = job.iteration() == 50 && same_bits(z0.as_slice(), job.latent().as_slice());
    let mut bytes = Vec::new();
    push(&mut bytes, job.latent().as_slice());

    let checker: Vec<bool> = (0..64 * 64).map(|i| ((i / 64) / 8 + (i % 64) / 8) % 2 == 0).collect();
    let (z0, job) = masked_run(PixelMask::new(64, 64, checker).unwrap());
    let lm = job.latent_mask().expect("masked edit keeps a latent mask");
    let (mut frozen_kept, mut free_moved, mut pattern_ok) = (0, 0, true);
    for r in 0..8 {
        for c in 0..8 {
            let editable = (r + c) % 2 == 0;
            pattern_ok &= lm.get(r, c) == if editable { 1.0 } else { 0.0 };
            let unchanged = same_bits(z0.cell(r, c), job.latent().cell(r, c));
            if editable && !unchanged {
                free_moved += 1;
            }
            if !editable && unchanged {
                frozen_kept += 1;
            }
        }
    }
    push(&mut bytes, job.latent().as_slice());
    Outcome {
        pass: zero_ok && pattern_ok && frozen_kept == 32 && free_moved == 32,
        detail: format!(
            "zero mask: latent {} after 50 steps; checkerboard: {frozen_kept}/32 masked cells bit-identical, \
             {free_moved}/32 editable cells moved",
            if zero_ok { "bit-identical" } else { "changed" }
        ),
        bytes,
    }
}

// --------------------------------------------------------------- determinism

#[derive(Default)]
struct Frames(Vec<Vec<u8>>);

impl RunObserver for Frames {
    fn on_frame(&mut self, _: u64, image: &Image, _: bool) -> CoreResult<()> {
        self.0.push(encode_png(image)?);
        Ok(())
    }
}

fn determinism(a: Attach) -> Outcome {
    let frames = || {
        let mut job = Job::new(red_config(400), JobInputs::default(), a.backend(64, 64)).unwrap();
        let mut f = Frames::default();
        run(&mut job, &mut f).unwrap();
        f.0
    };
    let (first, second) = (frames(), frames());
    let identical = first == second;

    let mut job = Job::new(red_config(400), JobInputs::default(), a.backend(64, 64)).unwrap();
    job.start().unwrap();
    for _ in 0..200 {
        job.step().unwrap();
    }
    job.pause().unwrap();
    let ck = job.checkpoint().to_bytes();
    drop(job);
    let restored = Checkpoint::from_bytes(&ck).unwrap();
    let mut resumed = Job::restore(red_config(400), JobInputs::default(), a.backend(64, 64), &restored).unwrap();
    let mut tail = Frames::default();
    run(&mut resumed, &mut tail).unwrap();
    let resume_ok = tail.0.last().is_some() && tail.0.last() == first.last();

    let mut bytes = first.concat();
    bytes.extend_from_slice(&ck);
    Outcome {
        pass: identical && resume_ok,
        detail: format!(
            "two runs: {} frames {}; restore at 200: final frame {}",
            first.len(),
            if identical { "byte-identical" } else { "differ" },
            if resume_ok { "byte-equal" } else { "differs" }
        ),
        bytes,
    }
}

// ---------------------------------------------------------------------- wire

type Criterion = fn(Attach) -> Outcome;

const BACKEND_SUITE: [(&str, f64, Criterion); 9] = [
    ("constants", 1.0, constants),
    ("quantizer", 5.0, quantizer),
    ("gradients", 30.0, gradients),
    ("straight-through", 5.0, straight_through),
    ("variance", 60.0, variance),
    ("convergence", 60.0, convergence),
    ("selfmask", 10.0, selfmask),
    ("masking", 10.0, masking),
    ("determinism", 120.0, determinism),
];

fn wire() -> Outcome {
    let (mut same_bytes, mut same_verdicts, mut wire_pass) = (Vec::new(), 0, 0);
    let (mut differ, mut red) = (Vec::new(), Vec::new());
    for (name, _, f) in BACKEND_SUITE {
        let local = f(Attach::Single);
        let remote = f(Attach::Wire);
        if local.bytes == remote.bytes {
            same_bytes.push(name);
        } else {
            differ.push(name);
        }
        same_verdicts += usize::from(local.pass == remote.pass);
        wire_pass += usize::from(remote.pass);
        if !remote.pass {
            red.push(format!("{name}: {}", remote.detail));
        }
    }
    let n = BACKEND_SUITE.len();
    Outcome {
        pass: differ.is_empty() && same_verdicts == n,
        detail: format!(
            "loopback wire vs in-process single precision: {}/{n} byte-identical{}, {same_verdicts}/{n} verdicts \
             agree, {wire_pass}/{n} pass over the wire{}",
            same_bytes.len(),
            if differ.is_empty() {
                String::new()
            } else {
                format!(" (differ: {})", differ.join(", "))
            },
            red.iter().map(|r| format!("\n      wire FAIL {r}")).collect::<String>()
        ),
        bytes: Vec::new(),
    }
}

// ------------------------------------------------------------------- service

#[derive(Debug, Clone, Copy)]
enum Op {
    Pause,
    Resume,
    Cancel,
    Inject,
    /// Upload with the wrong dimensions.
    BadInject,
}

fn small(iterations: u64, save_every: u64) -> RunConfig {
    let mut c = RunConfig {
        iterations,
        save_every,
        width: 32,
        height: 32,
        seed: 3,
        ..RunConfig::with_prompt("red")
    };
    c.augmentation.cuts = 4;
    c
}

async fn wait_until(m: &Manager, id: &str, what: impl Fn(Phase, u64) -> bool) -> Result<(), String> {
    let deadline = Instant::now() + Duration::from_secs(60);
    loop {
        let s = m.get(id).map_err(|e| e.to_string())?.summary();
        if what(s.phase, s.iteration) {
            return Ok(());
        }
        if Instant::now() > deadline {
            return Err(format!("job {id} stuck in {} at {}", s.phase, s.iteration));
        }
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
}

async fn create(m: &Manager, config: RunConfig) -> String {
    m.create(CreateJob {
        config,
        inputs: JobInputs::default(),
    })
    .await
    .expect("create job")
    .id
}

/// Applies `ops` to a running job and checks every reply against the state
/// machine, then checks the logged phase sequence.
async fn control_sequence(m: &Manager, ops: &[Op]) -> Result<usize, String> {
    let id = create(m, small(1_000_000, 1_000)).await;
    wait_until(m, &id, |p, _| p == Phase::Running).await?;
    let mut model = Phase::Running;
    for &op in ops {
        let (got, want) = match op {
            Op::Pause | Op::Resume | Op::Cancel => {
                let verb = match op {
                    Op::Pause => Control::Pause,
                    Op::Resume => Control::Resume,
                    _ => Control::Cancel,
                };
                let want = latentsteer_core::pipeline::transition(model, verb.kind()).ok();
                (m.control(&id, verb).await, want)
            }
            Op::Inject | Op::BadInject => {
                let side = if matches!(op, Op::Inject) { 32 } else { 16 };
                let legal = model == Phase::Paused && side == 32;
                let got = m.inject(&id, Tensor3::filled(side, side, 3, 0.5)).await;
                if model == Phase::Paused && side != 32 {
                    if !matches!(got, Err(ApiError::Invalid(_))) {
                        return Err(format!("{op:?} while paused: expected 422, got {got:?}"));
                    }
                    continue;
                }
                (got, legal.then_some(Phase::Paused))
            }
        };
        match (got, want) {
            (Ok(p), Some(w)) if p == w => model = p,
            (Err(ApiError::Conflict(_)), None) => {}
            (got, want) => return Err(format!("{op:?} from {model}: expected {want:?}, got {got:?}")),
        }
    }
    if !model.is_terminal() {
        m.control(&id, Control::Cancel).await.map_err(|e| e.to_string())?;
    }
    wait_until(m, &id, |p, _| p.is_terminal()).await?;
    let events = m
        .get(&id)
        .map_err(|e| e.to_string())?
        .read_events()
        .map_err(|e| e.to_string())?;
    let phases: Vec<Phase> = events
        .iter()
        .filter_map(|r| match r.event {
            JobEvent::State { phase, .. } => Some(phase),
            _ => None,
        })
        .collect();
    for w in phases.windows(2) {
        if !TRANSITIONS.iter().any(|&(from, _, to)| from == w[0] && to == w[1]) {
            return Err(format!("logged {} -> {}", w[0], w[1]));
        }
    }
    m.delete(&id).await.map_err(|e| e.to_string())?;
    Ok(ops.len())
}

fn copy_tree(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for entry in fs::read_dir(from).unwrap().flatten() {
        let target = to.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_tree(&entry.path(), &target);
        } else {
            // Temp files can vanish between listing and copying.
            let _ = fs::copy(entry.path(), &target);
        }
    }
}

fn losses(root: &Path) -> Vec<u64> {
    latentsteer_core::pipeline::read_event_log(&root.join("events.jsonl"))
        .unwrap()
        .iter()
        .filter_map(|r| match &r.event {
            JobEvent::Loss(l) => Some(l.iteration),
            _ => None,
        })
        .collect()
}

/// Snapshots a data directory holding a completed, a running, a paused and
/// a queued job, opens a fresh manager on the snapshot and drives every
/// recovered job to completion.
async fn crash_restart() -> Result<String, String> {
    let live = tempfile::tempdir().unwrap();
    let settings = |dir: &Path| Settings {
        max_jobs: 2,
        ..Settings::new(dir.to_path_buf())
    };
    let m = Manager::open(settings(live.path())).await.map_err(|e| e.to_string())?;
    let done = create(&m, small(5, 5)).await;
    wait_until(&m, &done, |p, _| p == Phase::Completed).await?;
    let paused = create(&m, small(200, 20)).await;
    wait_until(&m, &paused, |_, i| i >= 30).await?;
    m.control(&paused, Control::Pause).await.map_err(|e| e.to_string())?;
    let paused_at = m.get(&paused).unwrap().summary().iteration;
    let running = create(&m, small(300, 20)).await;
    wait_until(&m, &running, |_, i| i >= 30).await?;
    let queued = create(&m, small(20, 10)).await;
    let queued_phase = m.get(&queued).unwrap().summary().phase;
    let running_phase = m.get(&running).unwrap().summary().phase;

    let snap = tempfile::tempdir().unwrap();
    copy_tree(&live.path().join("jobs"), &snap.path().join("jobs"));
    wait_until(&m, &running, |p, _| p == Phase::Completed).await?;
    let reference = fs::read(m.get(&running).unwrap().final_path()).map_err(|e| e.to_string())?;
    m.shutdown().await;

    if queued_phase != Phase::Queued || running_phase != Phase::Running {
        return Err(format!(
            "setup raced: queued job {queued_phase}, running job {running_phase}"
        ));
    }
    let r = Manager::open(settings(snap.path())).await.map_err(|e| e.to_string())?;
    let back = r.get(&paused).unwrap().summary();
    if back.phase != Phase::Paused || back.iteration != paused_at {
        return Err(format!("paused job came back {} at {}", back.phase, back.iteration));
    }
    r.control(&paused, Control::Resume).await.map_err(|e| e.to_string())?;
    for id in [&running, &paused, &queued] {
        wait_until(&r, id, |p, _| p == Phase::Completed).await?;
    }
    let done_phase = r.get(&done).unwrap().summary().phase;
    let root = r.get(&running).unwrap().root().to_path_buf();
    let same_final = fs::read(root.join("final.png")).map_err(|e| e.to_string())? == reference;
    let clean_log = losses(&root) == (1..=300).collect::<Vec<_>>();
    r.shutdown().await;
    if done_phase != Phase::Completed || !same_final || !clean_log {
        return Err(format!(
            "completed job {done_phase}, recovered final {}, loss log {}",
            if same_final { "matches" } else { "differs" },
            if clean_log { "contiguous" } else { "broken" }
        ));
    }
    Ok(format!(
        "restart recovered running, paused (at {paused_at}) and queued jobs, all completed; \
         recovered final byte-equal to uninterrupted run"
    ))
}

fn service() -> Outcome {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let m = rt
        .block_on(Manager::open(Settings {
            max_jobs: 4,
            ..Settings::new(dir.path().to_path_buf())
        }))
        .unwrap();
    let ops = prop::collection::vec(
        prop_oneof![
            Just(Op::Pause),
            Just(Op::Resume),
            Just(Op::Cancel),
            Just(Op::Inject),
            Just(Op::BadInject)
        ],
        1..10,
    );
    let mut runner = TestRunner::new(PropConfig {
        cases: 32,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let commands = std::cell::Cell::new(0);
    let prop = runner.run(&ops, |ops| {
        let n = rt.block_on(control_sequence(&m, &ops)).map_err(TestCaseError::fail)?;
        commands.set(commands.get() + n);
        Ok(())
    });
    rt.block_on(m.shutdown());
    let restart = rt.block_on(crash_restart());
    let pass = prop.is_ok() && restart.is_ok();
    let mut detail = match &prop {
        Ok(()) => format!(
            "32 random control sequences ({} commands), no illegal transition; ",
            commands.get()
        ),
        Err(e) => format!("state machine violated: {e}; "),
    };
    match restart {
        Ok(s) => detail.push_str(&s),
        Err(e) => detail.push_str(&format!("crash-restart failed: {e}")),
    }
    Outcome {
        pass,
        detail,
        bytes: Vec::new(),
    }
}

// ---------------------------------------------------------------------- main

fn report(name: &str, budget: f64, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = f();
    let secs = start.elapsed().as_secs_f64();
    let in_time = secs <= budget;
    let pass = outcome.pass && in_time;
    println!(
        "{}  {name:<17} {}  [{secs:.1}s / {budget:.0}s{}]",
        if pass { "PASS" } else { "FAIL" },
        outcome.detail,
        if in_time { "" } else { " over budget" }
    );
    pass
}

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut verdicts = Vec::new();
    for (name, budget, f) in BACKEND_SUITE {
        verdicts.push((name, report(name, budget, || f(Attach::Direct))));
    }
    verdicts.push(("wire", report("wire", 300.0, wire)));
    verdicts.push(("service", report("service", 120.0, service)));

    let failed: Vec<&str> = verdicts.iter().filter(|(_, p)| !p).map(|(n, _)| *n).collect();
    let unexpected: Vec<&str> = verdicts
        .iter()
        .filter(|(n, p)| *p == KNOWN_RED.contains(n))
        .map(|(n, _)| *n)
        .collect();
    println!(
        "acceptance: {} passed, {} failed{}",
        verdicts.len() - failed.len(),
        failed.len(),
        if failed.is_empty() {
            String::new()
        } else {
            format!(" ({})", failed.join(", "))
        }
    );
    if !unexpected.is_empty() {
        println!("verdicts differ from the recorded baseline: {}", unexpected.join(", "));
        return ExitCode::FAILURE;
    }
    if strict && !failed.is_empty() {
        return ExitCode::FAILURE;
    }
    ExitCode::SUCCESS
}
