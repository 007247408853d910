pub mod checkpoint;
pub mod config;
pub mod job;
pub mod state;
pub mod store;

pub use checkpoint::Checkpoint;
pub use config::{FieldError, Mode, RunConfig, SelfMaskConfig};
pub use job::{init_latent, init_noise, run, Evaluation, Job, JobInputs, LossReport, Objective, RunObserver};
pub use state::{transition, JobEventKind, Phase, TRANSITIONS};
pub use store::{
    frame_file_name, read_event_log, EventRecord, JobEvent, RunDir, CHECKPOINT_EVERY, CONFIG_FILE, EVENTS_FILE,
    FINAL_FILE, FRAMES_DIR,
};
