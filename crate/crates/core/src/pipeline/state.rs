use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Queued,
    Running,
    Paused,
    AwaitingImage,
    Completed,
    Failed,
    Cancelled,
}

impl Phase {
    pub const ALL: [Phase; 7] = [
        Phase::Queued,
        Phase::Running,
        Phase::Paused,
        Phase::AwaitingImage,
        Phase::Completed,
        Phase::Failed,
        Phase::Cancelled,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(self, Phase::Completed | Phase::Failed | Phase::Cancelled)
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Phase::Queued => "queued",
            Phase::Running => "running",
            Phase::Paused => "paused",
            Phase::AwaitingImage => "awaiting_image",
            Phase::Completed => "completed",
            Phase::Failed => "failed",
            Phase::Cancelled => "cancelled",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobEventKind {
    Start,
    Pause,
    Resume,
    BeginInject,
    FinishInject,
    Complete,
    Fail,
    Cancel,
}

impl JobEventKind {
    pub const ALL: [JobEventKind; 8] = [
        JobEventKind::Start,
        JobEventKind::Pause,
        JobEventKind::Resume,
        JobEventKind::BeginInject,
        JobEventKind::FinishInject,
        JobEventKind::Complete,
        JobEventKind::Fail,
        JobEventKind::Cancel,
    ];
}

/// Every edge of the job state machine.
pub const TRANSITIONS: [(Phase, JobEventKind, Phase); 11] = [
    (Phase::Queued, JobEventKind::Start, Phase::Running),
    (Phase::Running, JobEventKind::Pause, Phase::Paused),
    (Phase::Paused, JobEventKind::Resume, Phase::Running),
    (Phase::Paused, JobEventKind::BeginInject, Phase::AwaitingImage),
    (Phase::AwaitingImage, JobEventKind::FinishInject, Phase::Paused),
    (Phase::Running, JobEventKind::Complete, Phase::Completed),
    (Phase::Running, JobEventKind::Fail, Phase::Failed),
    (Phase::Running, JobEventKind::Cancel, Phase::Cancelled),
    (Phase::Queued, JobEventKind::Cancel, Phase::Cancelled),
    (Phase::Paused, JobEventKind::Cancel, Phase::Cancelled),
    (Phase::AwaitingImage, JobEventKind::Cancel, Phase::Cancelled),
];

/// Applies one event. Cancelling a finished job is a no-op; every other
/// event outside [`TRANSITIONS`] is an error.
pub fn transition(from: Phase, event: JobEventKind) -> Result<Phase> {
    if let Some(&(_, _, to)) = TRANSITIONS.iter().find(|(f, e, _)| *f == from && *e == event) {
        return Ok(to);
    }
    if from.is_terminal() && event == JobEventKind::Cancel {
        return Ok(from);
    }
    Err(Error::IllegalTransition {
        from: from.to_string(),
        event: format!("{event:?}").to_lowercase(),
    })
}
