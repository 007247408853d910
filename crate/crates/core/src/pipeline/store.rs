//! On-disk layout of one run:
//!
//! ```text
//! <root>/config.json
//! <root>/init.png, mask.png      (edit inputs, when given)
//! <root>/frames/000010.png       (every save_every iterations)
//! <root>/final.png
//! <root>/events.jsonl            (one EventRecord per line)
//! <root>/checkpoint.bin
//! ```

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::imageio::{decode_mask_png, decode_png, encode_mask_png, encode_png};
use crate::pipeline::checkpoint::Checkpoint;
use crate::pipeline::config::RunConfig;
use crate::pipeline::job::{Job, JobInputs, LossReport, RunObserver};
use crate::pipeline::state::Phase;
use crate::tensor::Image;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "data", rename_all = "snake_case")]
pub enum JobEvent {
    State { phase: Phase, iteration: u64 },
    Loss(LossReport),
    Frame { iteration: u64, is_final: bool },
    Error { message: String },
}

impl JobEvent {
    pub fn name(&self) -> &'static str {
        match self {
            JobEvent::State { .. } => "state",
            JobEvent::Loss(_) => "loss",
            JobEvent::Frame { .. } => "frame",
            JobEvent::Error { .. } => "error",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub id: u64,
    pub ts_ms: u64,
    pub event: JobEvent,
}

#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
    next_id: u64,
    /// Highest iteration already logged for loss and for non-final frame
    /// events; a replay after restore skips anything at or below these.
    loss_mark: u64,
    frame_mark: u64,
}

/// Iterations between checkpoints of a running job.
pub const CHECKPOINT_EVERY: u64 = 25;

pub const CONFIG_FILE: &str = "config.json";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const FINAL_FILE: &str = "final.png";
pub const FRAMES_DIR: &str = "frames";

pub fn frame_file_name(iteration: u64) -> String {
    format!("{iteration:06}.png")
}

/// Readers see either no file or the whole file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// All complete records of an event log in order; a missing file is an
/// empty log. A torn trailing line from a crash is ignored.
pub fn read_event_log(path: &Path) -> Result<Vec<EventRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut out: Vec<EventRecord> = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if let Ok(rec) = serde_json::from_str::<EventRecord>(&line) {
            if out.last().is_none_or(|l| rec.id > l.id) {
                out.push(rec);
            }
        }
    }
    Ok(out)
}

impl RunDir {
    /// Creates the directory tree if needed and picks up any existing log.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(root.join(FRAMES_DIR))?;
        let mut dir = Self {
            root,
            next_id: 1,
            loss_mark: 0,
            frame_mark: 0,
        };
        for rec in dir.read_events()? {
            dir.next_id = dir.next_id.max(rec.id + 1);
            match rec.event {
                JobEvent::Loss(r) => dir.loss_mark = dir.loss_mark.max(r.iteration),
                JobEvent::Frame {
                    iteration,
                    is_final: false,
                } => dir.frame_mark = dir.frame_mark.max(iteration),
                _ => {}
            }
        }
        Ok(dir)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join(CONFIG_FILE)
    }

    pub fn events_path(&self) -> PathBuf {
        self.root.join(EVENTS_FILE)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.root.join("checkpoint.bin")
    }

    pub fn final_path(&self) -> PathBuf {
        self.root.join(FINAL_FILE)
    }

    pub fn frame_path(&self, iteration: u64) -> PathBuf {
        self.root.join(FRAMES_DIR).join(frame_file_name(iteration))
    }

    pub fn write_config(&self, config: &RunConfig) -> Result<()> {
        write_atomic(&self.config_path(), &serde_json::to_vec_pretty(config)?)
    }

    pub fn read_config(&self) -> Result<RunConfig> {
        Ok(serde_json::from_slice(&fs::read(self.config_path())?)?)
    }

    pub fn write_inputs(&self, inputs: &JobInputs) -> Result<()> {
        if let Some(img) = &inputs.init_image {
            write_atomic(&self.root.join("init.png"), &encode_png(img)?)?;
        }
        if let Some(m) = &inputs.mask {
            write_atomic(&self.root.join("mask.png"), &encode_mask_png(m)?)?;
        }
        Ok(())
    }

    pub fn read_inputs(&self) -> Result<JobInputs> {
        let init = self.root.join("init.png");
        let mask = self.root.join("mask.png");
        Ok(JobInputs {
            init_image: if init.exists() {
                Some(decode_png(&fs::read(init)?)?)
            } else {
                None
            },
            mask: if mask.exists() {
                Some(decode_mask_png(&fs::read(mask)?)?)
            } else {
                None
            },
        })
    }

    pub fn write_frame(&self, iteration: u64, image: &Image) -> Result<PathBuf> {
        let p = self.frame_path(iteration);
        write_atomic(&p, &encode_png(image)?)?;
        Ok(p)
    }

    pub fn write_final(&self, image: &Image) -> Result<PathBuf> {
        let p = self.final_path();
        write_atomic(&p, &encode_png(image)?)?;
        Ok(p)
    }

    pub fn write_checkpoint(&self, checkpoint: &Checkpoint) -> Result<()> {
        checkpoint.save(&self.checkpoint_path())
    }

    pub fn read_checkpoint(&self) -> Result<Option<Checkpoint>> {
        let p = self.checkpoint_path();
        if p.exists() {
            Ok(Some(Checkpoint::load(&p)?))
        } else {
            Ok(None)
        }
    }

    /// Appends one event. Loss and frame events already on disk from before
    /// a restore are skipped and yield `None`.
    pub fn append(&mut self, event: JobEvent) -> Result<Option<EventRecord>> {
        match &event {
            JobEvent::Loss(r) if r.iteration <= self.loss_mark => return Ok(None),
            JobEvent::Frame {
                iteration,
                is_final: false,
            } if *iteration <= self.frame_mark => return Ok(None),
            _ => {}
        }
        let rec = EventRecord {
            id: self.next_id,
            ts_ms: now_ms(),
            event,
        };
        let mut line = serde_json::to_vec(&rec)?;
        line.push(b'\n');
        let mut f = OpenOptions::new().create(true).append(true).open(self.events_path())?;
        f.write_all(&line)?;
        f.flush()?;
        self.next_id += 1;
        match &rec.event {
            JobEvent::Loss(r) => self.loss_mark = r.iteration,
            JobEvent::Frame {
                iteration,
                is_final: false,
            } => self.frame_mark = *iteration,
            _ => {}
        }
        Ok(Some(rec))
    }

    pub fn read_events(&self) -> Result<Vec<EventRecord>> {
        read_event_log(&self.events_path())
    }

    pub fn last_phase(&self) -> Result<Option<(Phase, u64)>> {
        Ok(self.read_events()?.into_iter().rev().find_map(|r| match r.event {
            JobEvent::State { phase, iteration } => Some((phase, iteration)),
            _ => None,
        }))
    }
}

/// Persistence of a job as it runs. Each method returns the records it
/// appended so callers can forward them live.
impl RunDir {
    pub fn record_state(&mut self, job: &Job) -> Result<Vec<EventRecord>> {
        Ok(self
            .append(JobEvent::State {
                phase: job.phase(),
                iteration: job.iteration(),
            })?
            .into_iter()
            .collect())
    }

    /// Loss event, a frame every `save_every` iterations and a checkpoint
    /// every [`CHECKPOINT_EVERY`]. Frames already on disk are left as they
    /// are.
    pub fn record_step(&mut self, job: &Job, report: &LossReport) -> Result<Vec<EventRecord>> {
        let mut out: Vec<EventRecord> = self.append(JobEvent::Loss(*report))?.into_iter().collect();
        let it = report.iteration;
        if it.is_multiple_of(job.config().save_every) {
            if !self.frame_path(it).exists() {
                self.write_frame(it, &job.current_image()?)?;
            }
            out.extend(self.append(JobEvent::Frame {
                iteration: it,
                is_final: false,
            })?);
        }
        if it.is_multiple_of(CHECKPOINT_EVERY) {
            self.write_checkpoint(&job.checkpoint())?;
        }
        Ok(out)
    }

    /// Final image, its frame event, a checkpoint and the terminal state.
    pub fn record_completion(&mut self, job: &Job) -> Result<Vec<EventRecord>> {
        self.write_final(&job.current_image()?)?;
        let mut out: Vec<EventRecord> = self
            .append(JobEvent::Frame {
                iteration: job.iteration(),
                is_final: true,
            })?
            .into_iter()
            .collect();
        self.write_checkpoint(&job.checkpoint())?;
        out.extend(self.record_state(job)?);
        Ok(out)
    }
}

impl RunObserver for RunDir {
    fn on_loss(&mut self, report: &LossReport) -> Result<()> {
        self.append(JobEvent::Loss(*report)).map(|_| ())
    }

    fn on_frame(&mut self, iteration: u64, image: &Image, is_final: bool) -> Result<()> {
        if is_final {
            self.write_final(image)?;
        } else {
            self.write_frame(iteration, image)?;
        }
        self.append(JobEvent::Frame { iteration, is_final }).map(|_| ())
    }
}
