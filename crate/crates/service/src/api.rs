use std::collections::VecDeque;
use std::convert::Infallible;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Path, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use futures::stream::{self, Stream};
use latentsteer_core::imageio::{decode_mask_png, decode_png, PixelMask};
use latentsteer_core::pipeline::{EventRecord, JobEvent, JobInputs, Phase, RunConfig};
use latentsteer_core::Image;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use tokio::sync::{broadcast, watch};

use crate::error::ApiError;
use crate::manager::{Control, CreateJob, JobHandle, JobSummary, Manager};

const MAX_BODY: usize = 64 << 20;
const INDEX_HTML: &str = include_str!("../static/index.html");

pub fn router(manager: Arc<Manager>) -> Router {
    Router::new()
        .route("/", get(index))
        .route("/api/jobs", post(create_job).get(list_jobs))
        .route("/api/jobs/{id}", get(get_job).delete(delete_job))
        .route("/api/jobs/{id}/pause", post(pause_job))
        .route("/api/jobs/{id}/resume", post(resume_job))
        .route("/api/jobs/{id}/cancel", post(cancel_job))
        .route("/api/jobs/{id}/image", post(upload_image))
        .route("/api/jobs/{id}/frames/{file}", get(get_frame))
        .route("/api/jobs/{id}/events", get(stream_events))
        .layer(DefaultBodyLimit::max(MAX_BODY))
        .with_state(manager)
}

async fn index() -> Html<&'static str> {
    Html(INDEX_HTML)
}

fn content_type(headers: &HeaderMap) -> &str {
    headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .unwrap_or("")
}

fn decode_b64(field: &str, text: &str) -> Result<Vec<u8>, ApiError> {
    let payload = text.split_once("base64,").map_or(text, |(_, p)| p);
    base64::engine::general_purpose::STANDARD
        .decode(payload.trim())
        .map_err(|e| ApiError::field(field, format!("invalid base64: {e}")))
}

fn parse_image(field: &str, png: &[u8]) -> Result<Image, ApiError> {
    decode_png(png).map_err(|e| ApiError::field(field, format!("not a readable PNG: {e}")))
}

fn parse_mask(png: &[u8]) -> Result<PixelMask, ApiError> {
    decode_mask_png(png).map_err(|e| ApiError::field("mask", format!("not a readable PNG: {e}")))
}

fn parse_config(mut doc: Map<String, Value>, default_backend: &str) -> Result<RunConfig, ApiError> {
    doc.entry("backend").or_insert_with(|| json!(default_backend));
    serde_json::from_value(Value::Object(doc)).map_err(|e| ApiError::field("body", e.to_string()))
}

async fn multipart_parts(req: Request) -> Result<Vec<(String, Bytes)>, ApiError> {
    let mut form = Multipart::from_request(req, &())
        .await
        .map_err(|e| ApiError::field("body", e.body_text()))?;
    let mut parts = Vec::new();
    while let Some(field) = form
        .next_field()
        .await
        .map_err(|e| ApiError::field("body", e.body_text()))?
    {
        let name = field.name().unwrap_or_default().to_string();
        let data = field.bytes().await.map_err(|e| ApiError::field(&name, e.body_text()))?;
        parts.push((name, data));
    }
    Ok(parts)
}

/// Accepts either a JSON config document with optional base64 `init_image`
/// and `mask` members, or a multipart form with a `config` part and PNG
/// file parts of the same names.
async fn create_job(State(m): State<Arc<Manager>>, req: Request) -> Result<Response, ApiError> {
    let default_backend = m.settings().backend.clone();
    let (config, init_png, mask_png) = if content_type(req.headers()).starts_with("multipart/form-data") {
        let mut config = None;
        let (mut init, mut mask) = (None, None);
        for (name, data) in multipart_parts(req).await? {
            match name.as_str() {
                "config" => {
                    let doc: Map<String, Value> =
                        serde_json::from_slice(&data).map_err(|e| ApiError::field("config", e.to_string()))?;
                    config = Some(parse_config(doc, &default_backend)?);
                }
                "init_image" => init = Some(data.to_vec()),
                "mask" => mask = Some(data.to_vec()),
                _ => {}
            }
        }
        let config = config.ok_or_else(|| ApiError::field("config", "missing config part"))?;
        (config, init, mask)
    } else {
        let body = Bytes::from_request(req, &())
            .await
            .map_err(|e| ApiError::field("body", e.body_text()))?;
        let mut doc: Map<String, Value> =
            serde_json::from_slice(&body).map_err(|e| ApiError::field("body", e.to_string()))?;
        let mut take_png = |field: &str| -> Result<Option<Vec<u8>>, ApiError> {
            match doc.remove(field) {
                None | Some(Value::Null) => Ok(None),
                Some(Value::String(s)) => decode_b64(field, &s).map(Some),
                Some(_) => Err(ApiError::field(field, "expected a base64 PNG string")),
            }
        };
        let init = take_png("init_image")?;
        let mask = take_png("mask")?;
        (parse_config(doc, &default_backend)?, init, mask)
    };
    let inputs = JobInputs {
        init_image: init_png.as_deref().map(|p| parse_image("init_image", p)).transpose()?,
        mask: mask_png.as_deref().map(parse_mask).transpose()?,
    };
    let summary = m.create(CreateJob { config, inputs }).await?;
    let location = format!("/api/jobs/{}", summary.id);
    Ok((StatusCode::CREATED, [(header::LOCATION, location)], Json(summary)).into_response())
}

async fn list_jobs(State(m): State<Arc<Manager>>) -> Json<Vec<JobSummary>> {
    Json(m.list())
}

#[derive(Serialize)]
struct JobDetail {
    #[serde(flatten)]
    summary: JobSummary,
    config: RunConfig,
}

async fn get_job(State(m): State<Arc<Manager>>, Path(id): Path<String>) -> Result<Json<JobDetail>, ApiError> {
    let h = m.get(&id)?;
    Ok(Json(JobDetail {
        summary: h.summary(),
        config: h.config().clone(),
    }))
}

async fn delete_job(State(m): State<Arc<Manager>>, Path(id): Path<String>) -> Result<StatusCode, ApiError> {
    m.delete(&id).await?;
    Ok(StatusCode::NO_CONTENT)
}

#[derive(Serialize)]
struct PhaseReply {
    id: String,
    phase: Phase,
}

async fn control(m: Arc<Manager>, id: String, verb: Control) -> Result<Json<PhaseReply>, ApiError> {
    let phase = m.control(&id, verb).await?;
    Ok(Json(PhaseReply { id, phase }))
}

async fn pause_job(State(m): State<Arc<Manager>>, Path(id): Path<String>) -> Result<Json<PhaseReply>, ApiError> {
    control(m, id, Control::Pause).await
}

async fn resume_job(State(m): State<Arc<Manager>>, Path(id): Path<String>) -> Result<Json<PhaseReply>, ApiError> {
    control(m, id, Control::Resume).await
}

async fn cancel_job(State(m): State<Arc<Manager>>, Path(id): Path<String>) -> Result<Json<PhaseReply>, ApiError> {
    control(m, id, Control::Cancel).await
}

/// Raw `image/png`, JSON `{"image": "<base64>"}`, or a multipart `image`
/// part.
async fn upload_image(
    State(m): State<Arc<Manager>>,
    Path(id): Path<String>,
    req: Request,
) -> Result<Json<PhaseReply>, ApiError> {
    m.get(&id)?;
    let ct = content_type(req.headers()).to_string();
    let png: Vec<u8> = if ct.starts_with("multipart/form-data") {
        multipart_parts(req)
            .await?
            .into_iter()
            .find(|(name, _)| name == "image")
            .map(|(_, data)| data.to_vec())
            .ok_or_else(|| ApiError::field("image", "missing image part"))?
    } else {
        let body = Bytes::from_request(req, &())
            .await
            .map_err(|e| ApiError::field("body", e.body_text()))?;
        if ct.starts_with("application/json") {
            #[derive(Deserialize)]
            struct Upload {
                image: String,
            }
            let up: Upload = serde_json::from_slice(&body).map_err(|e| ApiError::field("body", e.to_string()))?;
            decode_b64("image", &up.image)?
        } else {
            body.to_vec()
        }
    };
    let image = parse_image("image", &png)?;
    let phase = m.inject(&id, image).await?;
    Ok(Json(PhaseReply { id, phase }))
}

/// `{n}.png` for the frame at iteration `n` (zero padding optional), or
/// `final.png`.
async fn get_frame(
    State(m): State<Arc<Manager>>,
    Path((id, file)): Path<(String, String)>,
) -> Result<Response, ApiError> {
    let h = m.get(&id)?;
    let stem = file.strip_suffix(".png").unwrap_or(&file);
    let path = if stem == "final" {
        h.final_path()
    } else {
        let n: u64 = stem
            .parse()
            .map_err(|_| ApiError::NotFound(format!("no frame `{file}`")))?;
        h.frame_path(n)
    };
    match tokio::fs::read(&path).await {
        Ok(bytes) => Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response()),
        Err(_) => Err(ApiError::NotFound(format!("no frame `{file}`"))),
    }
}

pub fn frame_url(id: &str, iteration: u64, is_final: bool) -> String {
    if is_final {
        format!("/api/jobs/{id}/frames/final.png")
    } else {
        format!("/api/jobs/{id}/frames/{iteration:06}.png")
    }
}

/// Payload of one server-sent event.
pub fn event_data(id: &str, rec: &EventRecord) -> Value {
    match &rec.event {
        JobEvent::State { phase, iteration } => json!({ "phase": phase, "iteration": iteration }),
        JobEvent::Loss(r) => json!(r),
        JobEvent::Frame { iteration, is_final } => json!({
            "iteration": iteration,
            "url": frame_url(id, *iteration, *is_final),
            "final": is_final,
        }),
        JobEvent::Error { message } => json!({ "message": message }),
    }
}

#[derive(Deserialize)]
struct EventsQuery {
    last_event_id: Option<u64>,
}

struct Cursor {
    handle: Arc<JobHandle>,
    after: Option<u64>,
    backlog: VecDeque<EventRecord>,
    live: broadcast::Receiver<EventRecord>,
    closing: watch::Receiver<bool>,
    done: bool,
}

impl Cursor {
    async fn next_record(&mut self) -> Option<EventRecord> {
        loop {
            let rec = match self.backlog.pop_front() {
                Some(r) => r,
                None => {
                    if *self.closing.borrow() {
                        return None;
                    }
                    tokio::select! {
                        r = self.live.recv() => match r {
                            Ok(r) => r,
                            Err(broadcast::error::RecvError::Lagged(_)) => {
                                self.backlog = self.handle.read_events().ok()?.into();
                                continue;
                            }
                            Err(broadcast::error::RecvError::Closed) => return None,
                        },
                        _ = self.closing.changed() => return None,
                    }
                }
            };
            if self.after.is_some_and(|a| rec.id <= a) {
                continue;
            }
            self.after = Some(rec.id);
            return Some(rec);
        }
    }
}

/// Replays the log after `Last-Event-Id` (or from the start), then follows
/// live events. The stream ends after a terminal state.
async fn stream_events(
    State(m): State<Arc<Manager>>,
    Path(id): Path<String>,
    Query(q): Query<EventsQuery>,
    headers: HeaderMap,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    let handle = m.get(&id)?;
    let after = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.trim().parse().ok())
        .or(q.last_event_id);
    let live = handle.subscribe();
    let backlog = handle.read_events()?;
    let cursor = Cursor {
        handle,
        after,
        backlog: backlog.into(),
        live,
        closing: m.closing(),
        done: false,
    };
    let events = stream::unfold(cursor, move |mut c| {
        let id = id.clone();
        async move {
            if c.done {
                return None;
            }
            let rec = c.next_record().await?;
            if let JobEvent::State { phase, .. } = rec.event {
                c.done = phase.is_terminal();
            }
            let event = Event::default()
                .event(rec.event.name())
                .id(rec.id.to_string())
                .data(event_data(&id, &rec).to_string());
            Some((Ok(event), c))
        }
    });
    Ok(Sse::new(events).keep_alive(KeepAlive::default()))
}
