//! Job registry, FIFO admission and the per-job worker.
//!
//! Each job owns one command queue and is the only writer of its event
//! log. Workers run on blocking threads; control requests reach them as
//! commands and are answered once the worker has applied them at an
//! iteration boundary.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use latentsteer_core::backend::open_backend;
use latentsteer_core::loss::PromptSpec;
use latentsteer_core::pipeline::{
    frame_file_name, read_event_log, transition, EventRecord, Job, JobEvent, JobEventKind, JobInputs, LossReport, Mode,
    Phase, RunConfig, RunDir, EVENTS_FILE, FINAL_FILE, FRAMES_DIR,
};
use latentsteer_core::{Image, Result as CoreResult};
use serde::Serialize;
use tokio::sync::{broadcast, mpsc, oneshot, watch, OwnedSemaphorePermit, Semaphore};
use tokio::task::JoinHandle;

use crate::error::ApiError;
use crate::settings::Settings;

const EVENT_BUFFER: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Pause,
    Resume,
    Cancel,
}

impl Control {
    pub fn kind(self) -> JobEventKind {
        match self {
            Control::Pause => JobEventKind::Pause,
            Control::Resume => JobEventKind::Resume,
            Control::Cancel => JobEventKind::Cancel,
        }
    }
}

/// What `list_jobs` reports for one job. Derived only from the config and
/// the event log, so a restarted service rebuilds it exactly.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JobSummary {
    pub id: String,
    pub phase: Phase,
    pub iteration: u64,
    pub iterations: u64,
    pub mode: Mode,
    pub prompts: Vec<PromptSpec>,
    pub created_ms: u64,
    pub updated_ms: u64,
    pub last_event_id: Option<u64>,
    pub last_loss: Option<LossReport>,
    /// Iterations with a frame on disk.
    pub frames: Vec<u64>,
    pub has_final: bool,
    pub error: Option<String>,
}

impl JobSummary {
    fn new(id: &str, config: &RunConfig) -> Self {
        Self {
            id: id.into(),
            phase: Phase::Queued,
            iteration: 0,
            iterations: config.iterations,
            mode: config.mode,
            prompts: config.prompts.clone(),
            created_ms: 0,
            updated_ms: 0,
            last_event_id: None,
            last_loss: None,
            frames: Vec::new(),
            has_final: false,
            error: None,
        }
    }

    pub fn replay(id: &str, config: &RunConfig, records: &[EventRecord]) -> Self {
        let mut s = Self::new(id, config);
        for r in records {
            s.apply(r);
        }
        s
    }

    pub fn apply(&mut self, rec: &EventRecord) {
        if self.last_event_id.is_none() {
            self.created_ms = rec.ts_ms;
        }
        self.last_event_id = Some(rec.id);
        self.updated_ms = rec.ts_ms;
        match &rec.event {
            JobEvent::State { phase, iteration } => {
                self.phase = *phase;
                self.iteration = *iteration;
            }
            JobEvent::Loss(r) => {
                self.iteration = r.iteration;
                self.last_loss = Some(*r);
            }
            JobEvent::Frame { is_final: true, .. } => self.has_final = true,
            JobEvent::Frame { iteration, .. } => {
                if let Err(at) = self.frames.binary_search(iteration) {
                    self.frames.insert(at, *iteration);
                }
            }
            JobEvent::Error { message } => self.error = Some(message.clone()),
        }
    }
}

enum Command {
    Control(Control),
    Inject(Image),
    Shutdown,
}

type Reply = oneshot::Sender<Result<Phase, ApiError>>;

struct Envelope {
    command: Command,
    reply: Option<Reply>,
}

fn answer(reply: Option<Reply>, result: Result<Phase, ApiError>) {
    if let Some(r) = reply {
        let _ = r.send(result);
    }
}

pub struct JobHandle {
    id: String,
    root: PathBuf,
    config: RunConfig,
    summary: Mutex<JobSummary>,
    commands: Option<mpsc::UnboundedSender<Envelope>>,
    events: broadcast::Sender<EventRecord>,
    task: Mutex<Option<JoinHandle<()>>>,
}

impl JobHandle {
    fn new(
        id: &str,
        root: PathBuf,
        config: RunConfig,
        summary: JobSummary,
        commands: Option<mpsc::UnboundedSender<Envelope>>,
    ) -> Arc<Self> {
        Arc::new(Self {
            id: id.into(),
            root,
            config,
            summary: Mutex::new(summary),
            commands,
            events: broadcast::channel(EVENT_BUFFER).0,
            task: Mutex::new(None),
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn summary(&self) -> JobSummary {
        self.summary.lock().expect("summary lock").clone()
    }

    pub fn subscribe(&self) -> broadcast::Receiver<EventRecord> {
        self.events.subscribe()
    }

    pub fn read_events(&self) -> CoreResult<Vec<EventRecord>> {
        read_event_log(&self.root.join(EVENTS_FILE))
    }

    pub fn frame_path(&self, iteration: u64) -> PathBuf {
        self.root.join(FRAMES_DIR).join(frame_file_name(iteration))
    }

    pub fn final_path(&self) -> PathBuf {
        self.root.join(FINAL_FILE)
    }

    fn send(&self, command: Command, want_reply: bool) -> Option<oneshot::Receiver<Result<Phase, ApiError>>> {
        let tx = self.commands.as_ref()?;
        let (reply, rx) = oneshot::channel();
        let reply = want_reply.then_some(reply);
        tx.send(Envelope { command, reply }).ok()?;
        Some(rx)
    }

    fn take_task(&self) -> Option<JoinHandle<()>> {
        self.task.lock().expect("task lock").take()
    }
}

/// Single writer of one job's event log; mirrors every appended record
/// into the in-memory summary and the live broadcast.
struct Recorder {
    dir: RunDir,
    handle: Arc<JobHandle>,
}

impl Recorder {
    fn publish(&self, records: impl IntoIterator<Item = EventRecord>) {
        for rec in records {
            self.handle.summary.lock().expect("summary lock").apply(&rec);
            let _ = self.handle.events.send(rec);
        }
    }

    fn emit(&mut self, event: JobEvent) -> CoreResult<()> {
        let rec = self.dir.append(event)?;
        self.publish(rec);
        Ok(())
    }

    fn state(&mut self, job: &Job) -> CoreResult<()> {
        let recs = self.dir.record_state(job)?;
        self.publish(recs);
        Ok(())
    }
}

enum Flow {
    Continue,
    Exit,
}

struct Worker {
    job: Job,
    rec: Recorder,
    rx: mpsc::UnboundedReceiver<Envelope>,
    /// Commands that arrived for a recovered paused job before it had a slot.
    pending: Vec<Envelope>,
    _permit: OwnedSemaphorePermit,
}

impl Worker {
    fn run(mut self, start_paused: bool) {
        if let Err(e) = self.drive(start_paused) {
            tracing::warn!(job = %self.rec.handle.id, error = %e, "job failed");
            if !self.job.phase().is_terminal() {
                let _ = self.job.apply(JobEventKind::Fail);
            }
            let _ = self.rec.emit(JobEvent::Error { message: e.to_string() });
            let _ = self.rec.state(&self.job);
        }
    }

    fn drive(&mut self, start_paused: bool) -> CoreResult<()> {
        self.job.start()?;
        self.rec.state(&self.job)?;
        if start_paused {
            self.job.pause()?;
            self.rec.state(&self.job)?;
        }
        for env in std::mem::take(&mut self.pending) {
            if let Flow::Exit = self.handle(env)? {
                return Ok(());
            }
        }
        loop {
            loop {
                let env = if self.job.phase() == Phase::Paused {
                    match self.rx.blocking_recv() {
                        Some(env) => env,
                        None => return Ok(()),
                    }
                } else {
                    match self.rx.try_recv() {
                        Ok(env) => env,
                        Err(_) => break,
                    }
                };
                if let Flow::Exit = self.handle(env)? {
                    return Ok(());
                }
            }
            if self.job.phase() != Phase::Running {
                return Ok(());
            }
            let report = self.job.step()?;
            let recs = self.rec.dir.record_step(&self.job, &report)?;
            self.rec.publish(recs);
            if self.job.phase() == Phase::Completed {
                let recs = self.rec.dir.record_completion(&self.job)?;
                self.rec.publish(recs);
                return Ok(());
            }
        }
    }

    fn checkpoint(&self) -> CoreResult<()> {
        self.rec.dir.write_checkpoint(&self.job.checkpoint())
    }

    fn handle(&mut self, env: Envelope) -> CoreResult<Flow> {
        match env.command {
            Command::Shutdown => {
                if !self.job.phase().is_terminal() {
                    self.checkpoint()?;
                }
                answer(env.reply, Ok(self.job.phase()));
                Ok(Flow::Exit)
            }
            Command::Control(c) => {
                let applied = match c {
                    Control::Pause => self.job.pause(),
                    Control::Resume => self.job.resume(),
                    Control::Cancel => self.job.cancel(),
                };
                if let Err(e) = applied {
                    answer(env.reply, Err(e.into()));
                    return Ok(Flow::Continue);
                }
                if c == Control::Pause {
                    self.checkpoint()?;
                }
                self.rec.state(&self.job)?;
                answer(env.reply, Ok(self.job.phase()));
                Ok(if self.job.phase().is_terminal() {
                    Flow::Exit
                } else {
                    Flow::Continue
                })
            }
            Command::Inject(image) => {
                let result = self.inject(&image)?;
                answer(env.reply, result);
                Ok(Flow::Continue)
            }
        }
    }

    /// Outer error: the job itself broke. Inner error: the request was
    /// refused and the job is unchanged.
    fn inject(&mut self, image: &Image) -> CoreResult<Result<Phase, ApiError>> {
        let phase = self.job.phase();
        if phase != Phase::Paused {
            return Ok(Err(ApiError::Conflict(format!(
                "images can only be uploaded to a paused job; job is {phase}"
            ))));
        }
        let (rows, cols, _) = self.job.info().image_dims();
        if (image.rows(), image.cols()) != (rows, cols) {
            return Ok(Err(ApiError::field(
                "image",
                format!("expected {cols}x{rows} pixels, got {}x{}", image.cols(), image.rows()),
            )));
        }
        self.job.begin_inject()?;
        self.rec.state(&self.job)?;
        let injected = self.job.inject_image(image);
        self.rec.state(&self.job)?;
        if let Err(e) = injected {
            return Ok(Err(e.into()));
        }
        self.checkpoint()?;
        Ok(Ok(self.job.phase()))
    }
}

/// Waits for a concurrency slot while answering commands, then hands the
/// job to a blocking worker. A job recovered as paused is logically paused
/// already, so its commands other than cancel wait for the worker.
async fn supervise(
    slots: Arc<Semaphore>,
    mut job: Job,
    mut rec: Recorder,
    mut rx: mpsc::UnboundedReceiver<Envelope>,
    start_paused: bool,
) {
    let mut pending = Vec::new();
    let permit = loop {
        tokio::select! {
            biased;
            env = rx.recv() => {
                let Some(env) = env else { return };
                match env.command {
                    Command::Shutdown => {
                        answer(env.reply, Ok(job.phase()));
                        return;
                    }
                    Command::Control(Control::Cancel) => {
                        let result = job.cancel().and_then(|_| rec.state(&job));
                        answer(env.reply, result.map(|_| job.phase()).map_err(ApiError::from));
                        if job.phase().is_terminal() {
                            return;
                        }
                    }
                    _ if start_paused => pending.push(env),
                    Command::Control(c) => {
                        answer(env.reply, transition(job.phase(), c.kind()).map_err(ApiError::from));
                    }
                    Command::Inject(_) => answer(
                        env.reply,
                        Err(ApiError::Conflict("images can only be uploaded to a paused job; job is queued".into())),
                    ),
                }
            }
            permit = slots.clone().acquire_owned() => break permit.expect("job slots are never closed"),
        }
    };
    let worker = Worker {
        job,
        rec,
        rx,
        pending,
        _permit: permit,
    };
    if let Err(e) = tokio::task::spawn_blocking(move || worker.run(start_paused)).await {
        tracing::error!(error = %e, "job worker panicked");
    }
}

/// A validated job request.
pub struct CreateJob {
    pub config: RunConfig,
    pub inputs: JobInputs,
}

pub struct Manager {
    settings: Settings,
    jobs: RwLock<HashMap<String, Arc<JobHandle>>>,
    slots: Arc<Semaphore>,
    closing: watch::Sender<bool>,
    shutting_down: AtomicBool,
}

impl Manager {
    /// Opens the data directory and recovers every job found there.
    /// Non-terminal jobs resume from their last checkpoint; paused ones
    /// come back paused.
    pub async fn open(settings: Settings) -> CoreResult<Arc<Self>> {
        let jobs_dir = settings.jobs_dir();
        fs::create_dir_all(&jobs_dir)?;
        let manager = Arc::new(Self {
            slots: Arc::new(Semaphore::new(settings.max_jobs.max(1))),
            settings,
            jobs: RwLock::new(HashMap::new()),
            closing: watch::channel(false).0,
            shutting_down: AtomicBool::new(false),
        });
        let mut roots: Vec<PathBuf> = fs::read_dir(&jobs_dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_dir())
            .collect();
        roots.sort();
        for root in roots {
            if let Err(e) = manager.recover(&root) {
                tracing::warn!(path = %root.display(), error = %e, "skipping unreadable job directory");
            }
        }
        Ok(manager)
    }

    pub fn settings(&self) -> &Settings {
        &self.settings
    }

    fn recover(&self, root: &Path) -> CoreResult<()> {
        let id = root
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        let dir = RunDir::open(root)?;
        let config = dir.read_config()?;
        let summary = JobSummary::replay(&id, &config, &dir.read_events()?);
        if summary.phase.is_terminal() {
            let handle = JobHandle::new(&id, root.into(), config, summary, None);
            self.insert(handle);
            return Ok(());
        }
        let start_paused = matches!(summary.phase, Phase::Paused | Phase::AwaitingImage);
        let restored = dir.read_inputs().and_then(|inputs| {
            let backend = open_backend(&config.backend, config.height, config.width)?;
            match dir.read_checkpoint()? {
                Some(ck) => Job::restore(config.clone(), inputs, backend, &ck),
                None => Job::new(config.clone(), inputs, backend),
            }
        });
        let job = match restored {
            Ok(job) => job,
            Err(e) => {
                tracing::warn!(job = %id, error = %e, "job could not be restored");
                let iteration = summary.iteration;
                let handle = JobHandle::new(&id, root.into(), config, summary, None);
                let mut rec = Recorder {
                    dir,
                    handle: Arc::clone(&handle),
                };
                rec.emit(JobEvent::Error {
                    message: format!("restore failed: {e}"),
                })?;
                rec.emit(JobEvent::State {
                    phase: Phase::Failed,
                    iteration,
                })?;
                self.insert(handle);
                return Ok(());
            }
        };
        let (tx, rx) = mpsc::unbounded_channel();
        let handle = JobHandle::new(&id, root.into(), config, summary, Some(tx));
        let mut rec = Recorder {
            dir,
            handle: Arc::clone(&handle),
        };
        if !start_paused {
            rec.state(&job)?;
        }
        tracing::info!(job = %id, iteration = job.iteration(), "recovered job");
        self.launch(handle, job, rec, rx, start_paused);
        Ok(())
    }

    fn insert(&self, handle: Arc<JobHandle>) {
        self.jobs.write().expect("jobs lock").insert(handle.id.clone(), handle);
    }

    fn launch(
        &self,
        handle: Arc<JobHandle>,
        job: Job,
        rec: Recorder,
        rx: mpsc::UnboundedReceiver<Envelope>,
        start_paused: bool,
    ) {
        let task = tokio::spawn(supervise(Arc::clone(&self.slots), job, rec, rx, start_paused));
        *handle.task.lock().expect("task lock") = Some(task);
        self.insert(handle);
    }

    pub async fn create(&self, request: CreateJob) -> Result<JobSummary, ApiError> {
        if self.shutting_down.load(Ordering::SeqCst) {
            return Err(ApiError::Unavailable("service is shutting down".into()));
        }
        let CreateJob { config, inputs } = request;
        let errors = config.validate(inputs.init_image.is_some(), inputs.mask.is_some());
        if !errors.is_empty() {
            return Err(ApiError::Invalid(errors));
        }
        let id = uuid::Uuid::new_v4().to_string();
        let root = self.settings.jobs_dir().join(&id);
        let cfg = config.clone();
        let dir_root = root.clone();
        let built = tokio::task::spawn_blocking(move || -> Result<(Job, RunDir), ApiError> {
            let backend = open_backend(&cfg.backend, cfg.height, cfg.width)?;
            let job = Job::new(cfg.clone(), inputs.clone(), backend)?;
            let dir = RunDir::open(&dir_root)?;
            dir.write_config(&cfg)?;
            dir.write_inputs(&inputs)?;
            Ok((job, dir))
        })
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?;
        let (job, dir) = match built {
            Ok(b) => b,
            Err(e) => {
                let _ = fs::remove_dir_all(&root);
                return Err(e);
            }
        };
        let (tx, rx) = mpsc::unbounded_channel();
        let handle = JobHandle::new(&id, root, config.clone(), JobSummary::new(&id, &config), Some(tx));
        let mut rec = Recorder {
            dir,
            handle: Arc::clone(&handle),
        };
        rec.state(&job).map_err(ApiError::from)?;
        let summary = handle.summary();
        self.launch(handle, job, rec, rx, false);
        Ok(summary)
    }

    /// Summaries ordered by creation time.
    pub fn list(&self) -> Vec<JobSummary> {
        let mut out: Vec<JobSummary> = self
            .jobs
            .read()
            .expect("jobs lock")
            .values()
            .map(|h| h.summary())
            .collect();
        out.sort_by(|a, b| (a.created_ms, &a.id).cmp(&(b.created_ms, &b.id)));
        out
    }

    pub fn get(&self, id: &str) -> Result<Arc<JobHandle>, ApiError> {
        self.jobs
            .read()
            .expect("jobs lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(format!("no job `{id}`")))
    }

    /// Applies a control verb at the job's next iteration boundary.
    pub async fn control(&self, id: &str, verb: Control) -> Result<Phase, ApiError> {
        let handle = self.get(id)?;
        if let Some(rx) = handle.send(Command::Control(verb), true) {
            if let Ok(result) = rx.await {
                return result;
            }
        }
        let phase = handle.summary().phase;
        if phase.is_terminal() {
            transition(phase, verb.kind()).map_err(ApiError::from)
        } else {
            Err(ApiError::Unavailable(format!(
                "job `{id}` is not running in this process"
            )))
        }
    }

    /// Replaces a paused job's latent with the encoding of `image`.
    pub async fn inject(&self, id: &str, image: Image) -> Result<Phase, ApiError> {
        let handle = self.get(id)?;
        if let Some(rx) = handle.send(Command::Inject(image), true) {
            if let Ok(result) = rx.await {
                return result;
            }
        }
        let phase = handle.summary().phase;
        Err(if phase.is_terminal() {
            ApiError::Conflict(format!("images can only be uploaded to a paused job; job is {phase}"))
        } else {
            ApiError::Unavailable(format!("job `{id}` is not running in this process"))
        })
    }

    /// Cancels the job if needed, then removes it and its directory.
    pub async fn delete(&self, id: &str) -> Result<(), ApiError> {
        let handle = self.get(id)?;
        if !handle.summary().phase.is_terminal() {
            let _ = self.control(id, Control::Cancel).await;
        }
        if let Some(task) = handle.take_task() {
            let _ = task.await;
        }
        self.jobs.write().expect("jobs lock").remove(id);
        let root = handle.root.clone();
        tokio::task::spawn_blocking(move || fs::remove_dir_all(root))
            .await
            .map_err(|e| ApiError::Internal(e.to_string()))?
            .map_err(|e| ApiError::Internal(e.to_string()))
    }

    /// Flips to `true` when the service starts shutting down.
    pub fn closing(&self) -> watch::Receiver<bool> {
        self.closing.subscribe()
    }

    /// Checkpoints every live job and waits for the workers to stop.
    pub async fn shutdown(&self) {
        self.shutting_down.store(true, Ordering::SeqCst);
        self.closing.send_replace(true);
        let handles: Vec<Arc<JobHandle>> = self.jobs.read().expect("jobs lock").values().cloned().collect();
        for h in &handles {
            h.send(Command::Shutdown, false);
        }
        for h in &handles {
            if let Some(task) = h.take_task() {
                let _ = task.await;
            }
        }
    }
}
