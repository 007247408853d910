use std::net::SocketAddr;
use std::path::PathBuf;

/// Process-level service configuration.
#[derive(Debug, Clone)]
pub struct Settings {
    pub listen_addr: SocketAddr,
    pub data_dir: PathBuf,
    /// Backend used when a job request does not name one.
    pub backend: String,
    pub max_jobs: usize,
}

pub const DEFAULT_LISTEN_ADDR: &str = "127.0.0.1:8080";

pub fn default_max_jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

impl Settings {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        Self {
            listen_addr: DEFAULT_LISTEN_ADDR.parse().expect("valid default address"),
            data_dir: data_dir.into(),
            backend: "toy".into(),
            max_jobs: default_max_jobs(),
        }
    }

    /// Reads `LISTEN_ADDR`, `DATA_DIR`, `BACKEND` and `MAX_JOBS`, falling
    /// back to defaults for unset variables.
    pub fn from_env() -> Result<Self, String> {
        let mut s = Self::new(std::env::var("DATA_DIR").unwrap_or_else(|_| "data".into()));
        if let Ok(addr) = std::env::var("LISTEN_ADDR") {
            s.listen_addr = addr.parse().map_err(|e| format!("LISTEN_ADDR `{addr}`: {e}"))?;
        }
        if let Ok(b) = std::env::var("BACKEND") {
            s.backend = b;
        }
        if let Ok(n) = std::env::var("MAX_JOBS") {
            s.max_jobs = n
                .parse()
                .ok()
                .filter(|&n: &usize| n > 0)
                .ok_or_else(|| format!("MAX_JOBS `{n}` is not a positive integer"))?;
        }
        Ok(s)
    }

    pub fn jobs_dir(&self) -> PathBuf {
        self.data_dir.join("jobs")
    }
}
