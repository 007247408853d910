#![allow(dead_code)]

use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use latentsteer_service::{router, Manager, Settings};
use serde_json::{json, Value};
use tempfile::TempDir;
use tower::ServiceExt;

pub struct App {
    dir: Option<TempDir>,
    pub manager: Arc<Manager>,
    pub router: Router,
}

pub fn settings(dir: &std::path::Path) -> Settings {
    Settings {
        max_jobs: 4,
        ..Settings::new(dir)
    }
}

impl App {
    pub async fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let manager = Manager::open(settings(dir.path())).await.unwrap();
        Self::with(dir, manager)
    }

    pub fn with(dir: TempDir, manager: Arc<Manager>) -> Self {
        let router = router(Arc::clone(&manager));
        Self {
            dir: Some(dir),
            manager,
            router,
        }
    }

    pub fn path(&self) -> &std::path::Path {
        self.dir.as_ref().expect("app directory").path()
    }

    pub fn take_dir(&mut self) -> TempDir {
        self.dir.take().expect("app directory")
    }

    /// Shuts the manager down and opens a fresh one on the same directory.
    pub async fn restart(mut self) -> Self {
        self.manager.shutdown().await;
        let dir = self.take_dir();
        let manager = Manager::open(settings(dir.path())).await.unwrap();
        Self::with(dir, manager)
    }

    pub async fn send(&self, req: Request<Body>) -> (StatusCode, Vec<u8>) {
        let res = self.router.clone().oneshot(req).await.unwrap();
        let status = res.status();
        let body = res.into_body().collect().await.unwrap().to_bytes().to_vec();
        (status, body)
    }

    pub async fn json(&self, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
        let req = Request::builder()
            .method(method)
            .uri(uri)
            .header("content-type", "application/json")
            .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
            .unwrap();
        let (status, bytes) = self.send(req).await;
        let value = if bytes.is_empty() {
            Value::Null
        } else {
            serde_json::from_slice(&bytes).unwrap_or(Value::Null)
        };
        (status, value)
    }

    pub async fn get_bytes(&self, uri: &str) -> (StatusCode, Vec<u8>) {
        self.send(Request::get(uri).body(Body::empty()).unwrap()).await
    }

    pub async fn create(&self, body: Value) -> String {
        let (status, v) = self.json(Method::POST, "/api/jobs", Some(body)).await;
        assert_eq!(status, StatusCode::CREATED, "{v}");
        v["id"].as_str().unwrap().to_string()
    }

    pub async fn job(&self, id: &str) -> Value {
        let (status, v) = self.json(Method::GET, &format!("/api/jobs/{id}"), None).await;
        assert_eq!(status, StatusCode::OK);
        v
    }

    pub async fn control(&self, id: &str, verb: &str) -> (StatusCode, Value) {
        self.json(Method::POST, &format!("/api/jobs/{id}/{verb}"), None).await
    }

    pub async fn wait_for(&self, id: &str, what: impl Fn(&Value) -> bool) -> Value {
        let start = Instant::now();
        loop {
            let v = self.job(id).await;
            if what(&v) {
                return v;
            }
            assert!(start.elapsed() < Duration::from_secs(120), "timed out waiting on {v}");
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
    }

    pub async fn wait_phase(&self, id: &str, phase: &str) -> Value {
        self.wait_for(id, |v| v["phase"] == phase).await
    }

    /// Reads up to `limit` server-sent events, or until the stream ends.
    pub async fn events(&self, id: &str, last_event_id: Option<u64>, limit: usize) -> Vec<Sse> {
        let mut req = Request::get(format!("/api/jobs/{id}/events"));
        if let Some(last) = last_event_id {
            req = req.header("last-event-id", last.to_string());
        }
        let res = self
            .router
            .clone()
            .oneshot(req.body(Body::empty()).unwrap())
            .await
            .unwrap();
        assert_eq!(res.status(), StatusCode::OK);
        let mut body = res.into_body();
        let mut buf = String::new();
        let mut out = Vec::new();
        while out.len() < limit {
            let frame = tokio::time::timeout(Duration::from_secs(120), body.frame())
                .await
                .expect("event stream stalled");
            let Some(frame) = frame else { break };
            if let Ok(data) = frame.unwrap().into_data() {
                buf.push_str(std::str::from_utf8(&data).unwrap());
            }
            while let Some(end) = buf.find("\n\n") {
                let block: String = buf.drain(..end + 2).collect();
                if let Some(ev) = Sse::parse(&block) {
                    out.push(ev);
                }
            }
        }
        out.truncate(limit);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sse {
    pub event: String,
    pub id: u64,
    pub data: Value,
}

impl Sse {
    fn parse(block: &str) -> Option<Self> {
        let (mut event, mut id, mut data) = (None, None, None);
        for line in block.lines() {
            if let Some(v) = line.strip_prefix("event:") {
                event = Some(v.trim().to_string());
            } else if let Some(v) = line.strip_prefix("id:") {
                id = v.trim().parse().ok();
            } else if let Some(v) = line.strip_prefix("data:") {
                data = serde_json::from_str(v.trim()).ok();
            }
        }
        Some(Self {
            event: event?,
            id: id?,
            data: data?,
        })
    }
}

/// A small fast toy job.
pub fn quick(prompt: &str, iterations: u64, save_every: u64) -> Value {
    json!({
        "prompts": [{"text": prompt}],
        "backend": "toy",
        "iterations": iterations,
        "save_every": save_every,
        "width": 32,
        "height": 32,
        "seed": 3,
        "augmentation": {"cuts": 4},
    })
}

pub fn png(width: u32, height: u32) -> Vec<u8> {
    let img = latentsteer_core::Tensor3::filled(height as usize, width as usize, 3, 0.5);
    latentsteer_core::imageio::encode_png(&img).unwrap()
}

impl App {
    pub async fn close(self) {
        self.manager.shutdown().await;
    }
}

/// A paused worker blocks its thread until told to stop, which would keep
/// the test runtime alive after a failed assertion.
impl Drop for App {
    fn drop(&mut self) {
        let m = Arc::clone(&self.manager);
        if let Ok(handle) = tokio::runtime::Handle::try_current() {
            tokio::task::block_in_place(|| handle.block_on(m.shutdown()));
        }
    }
}

/// Effectively unbounded, so the job is still running when inspected.
pub fn endless(prompt: &str) -> Value {
    quick(prompt, 1_000_000, 1_000)
}
