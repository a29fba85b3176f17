//! HTTP service for inspecting and correcting refined annotations.
//!
//! | route                        | body                                   |
//! |------------------------------|----------------------------------------|
//! | `GET /api/frames`            | `[{frame, points, dynamic_points}]`    |
//! | `GET /api/frames/:t/points`  | binary, see [`encode_points`]          |
//! | `GET /api/frames/:t/tracks`  | tracks observed in frame `t`           |
//! | `POST /api/frames/:t/edits`  | an [`EditRequest`]; answers the frame  |
//! | `GET /api/summary`           | totals and edit count                  |
//!
//! Accepted edits are appended to the pipeline's edit log before they are
//! folded into the served annotations, and the next export replays the log.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use byteorder::{ByteOrder, LittleEndian};
use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use crate::dataset::{LabelValue, MosClass};
use crate::detect::ScanAnnotation;
use crate::edits::{append_edit, apply_edit, apply_edits, read_edit_log, EditRecord, EditScope};
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::pipeline::{Pipeline, PipelineConfig, Stage};
use crate::sync::{FrameSource, SyncedSequence};
use crate::tracking::{FilterOutcome, TrackStatus};

const POINT_RECORD_BYTES: usize = 16;

/// Count as `u32`, then per point three `f32` coordinates and the raw `u32`
/// label, all little-endian.
pub fn encode_points(cloud: &PointCloud, labels: &[LabelValue]) -> Result<Vec<u8>> {
    if cloud.len() != labels.len() {
        return Err(Error::CountMismatch {
            labels: labels.len(),
            points: cloud.len(),
        });
    }
    let n = u32::try_from(cloud.len()).map_err(|_| Error::invalid("points", "more than u32::MAX"))?;
    let mut out = vec![0u8; 4 + cloud.len() * POINT_RECORD_BYTES];
    LittleEndian::write_u32(&mut out, n);
    for ((p, l), rec) in cloud.points.iter().zip(labels).zip(out[4..].chunks_exact_mut(POINT_RECORD_BYTES)) {
        LittleEndian::write_f32_into(&[p.x as f32, p.y as f32, p.z as f32], &mut rec[..12]);
        LittleEndian::write_u32(&mut rec[12..], l.0);
    }
    Ok(out)
}

pub fn decode_points(bytes: &[u8]) -> Result<(Vec<[f32; 3]>, Vec<LabelValue>)> {
    let bad = |m: String| Error::format("points payload", m);
    if bytes.len() < 4 {
        return Err(bad("shorter than its header".into()));
    }
    let n = LittleEndian::read_u32(bytes) as usize;
    let body = &bytes[4..];
    if body.len() != n * POINT_RECORD_BYTES {
        return Err(bad(format!("header says {n} points, body holds {} bytes", body.len())));
    }
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for rec in body.chunks_exact(POINT_RECORD_BYTES) {
        let mut xyz = [0f32; 3];
        LittleEndian::read_f32_into(&rec[..12], &mut xyz);
        points.push(xyz);
        labels.push(LabelValue(LittleEndian::read_u32(&rec[12..])));
    }
    Ok((points, labels))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditRequest {
    pub scope: EditScope,
    pub class: MosClass,
    #[serde(default)]
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub frame: usize,
    pub points: usize,
    pub dynamic_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackEntry {
    pub track: u32,
    pub instance: u16,
    pub status: TrackStatus,
    pub centroid: [f64; 3],
    pub min: [f64; 3],
    pub max: [f64; 3],
    /// Whether the box was interpolated rather than observed.
    pub augmented: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub frames: usize,
    pub points: usize,
    pub dynamic_points: usize,
    pub tracks: usize,
    pub confirmed_tracks: usize,
    pub edits: usize,
}

/// Answer to an accepted edit: where it landed in the log and the frame's
/// new counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditAck {
    pub index: usize,
    pub frame: FrameEntry,
}

/// Everything a frame view needs, without the pipeline around it.
pub trait PointProvider: Send + Sync {
    /// Points of frame `t` in the reference sensor frame, index-aligned with
    /// that frame's annotation.
    fn points(&self, frame: usize) -> Result<PointCloud>;
}

impl PointProvider for SyncedSequence {
    fn points(&self, frame: usize) -> Result<PointCloud> {
        Ok(self.cloud(frame)?.into_owned())
    }
}

impl PointProvider for Vec<PointCloud> {
    fn points(&self, frame: usize) -> Result<PointCloud> {
        self.get(frame)
            .cloned()
            .ok_or_else(|| Error::invalid("frame", format!("{frame} out of range")))
    }
}

struct Editing {
    log: PathBuf,
    count: usize,
}

pub struct ReviewState {
    points: Box<dyn PointProvider>,
    filtered: FilterOutcome,
    annotations: RwLock<Vec<ScanAnnotation>>,
    editing: Mutex<Editing>,
}

impl ReviewState {
    /// Serves `filtered` with the edits already in `edit_log` folded in.
    pub fn new(points: Box<dyn PointProvider>, filtered: FilterOutcome, edit_log: PathBuf) -> Result<Self> {
        let edits = read_edit_log(&edit_log)?;
        let annotations = apply_edits(&filtered.annotations, &edits)?;
        Ok(Self {
            points,
            filtered,
            annotations: RwLock::new(annotations),
            editing: Mutex::new(Editing {
                log: edit_log,
                count: edits.len(),
            }),
        })
    }

    /// Loads tracking output from the pipeline cache.
    pub fn from_pipeline(pipeline: &Pipeline) -> Result<Self> {
        let filtered = pipeline.filtered()?;
        let seq = pipeline.synced_sequence()?;
        Self::new(Box::new(seq), filtered, pipeline.config().edit_log_path())
    }

    pub fn annotations(&self) -> Vec<ScanAnnotation> {
        self.annotations.read().expect("annotation lock").clone()
    }

    fn entry(a: &ScanAnnotation) -> FrameEntry {
        FrameEntry {
            frame: a.frame,
            points: a.labels.len(),
            dynamic_points: a.dynamic_count(),
        }
    }

    pub fn frames(&self) -> Vec<FrameEntry> {
        self.annotations.read().expect("annotation lock").iter().map(Self::entry).collect()
    }

    fn annotation(&self, t: usize) -> Option<ScanAnnotation> {
        self.annotations.read().expect("annotation lock").get(t).cloned()
    }

    pub fn points_payload(&self, t: usize) -> Result<Option<Vec<u8>>> {
        let Some(a) = self.annotation(t) else {
            return Ok(None);
        };
        encode_points(&self.points.points(t)?, &a.labels).map(Some)
    }

    pub fn tracks(&self, t: usize) -> Option<Vec<TrackEntry>> {
        if t >= self.filtered.annotations.len() {
            return None;
        }
        let arr = |p: Point3<f64>| [p.x, p.y, p.z];
        let mut out: Vec<TrackEntry> = self
            .filtered
            .tracks
            .tracks
            .iter()
            .flat_map(|tr| {
                tr.observations.iter().filter(|o| o.frame == t).map(move |o| TrackEntry {
                    track: tr.id,
                    instance: o.instance,
                    status: tr.status,
                    centroid: arr(o.centroid),
                    min: arr(o.aabb.min),
                    max: arr(o.aabb.max),
                    augmented: false,
                })
            })
            .collect();
        let status: BTreeMap<u32, TrackStatus> = self.filtered.tracks.tracks.iter().map(|t| (t.id, t.status)).collect();
        out.extend(self.filtered.boxes.iter().filter(|b| b.frame == t).map(|b| TrackEntry {
            track: b.track,
            instance: 0,
            status: status.get(&b.track).copied().unwrap_or(TrackStatus::ConfirmedMoving),
            centroid: arr(b.centroid),
            min: arr(b.aabb.min),
            max: arr(b.aabb.max),
            augmented: true,
        }));
        Some(out)
    }

    pub fn summary(&self) -> Summary {
        let anns = self.annotations.read().expect("annotation lock");
        let tracks = &self.filtered.tracks.tracks;
        Summary {
            frames: anns.len(),
            points: anns.iter().map(|a| a.labels.len()).sum(),
            dynamic_points: anns.iter().map(|a| a.dynamic_count()).sum(),
            tracks: tracks.len(),
            confirmed_tracks: tracks.iter().filter(|t| t.status == TrackStatus::ConfirmedMoving).count(),
            edits: self.editing.lock().expect("edit lock").count,
        }
    }

    /// Validates, logs, then applies one edit. Rejections leave both the log
    /// and the annotations untouched.
    pub fn submit(&self, frame: usize, req: EditRequest) -> std::result::Result<EditAck, String> {
        let mut editing = self.editing.lock().map_err(|_| "edit lock poisoned".to_string())?;
        let record = EditRecord {
            frame,
            scope: req.scope,
            class: req.class,
            note: req.note,
            timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64()),
        };
        let mut updated = self.annotation(frame).ok_or_else(|| format!("frame {frame} does not exist"))?;
        apply_edit(&mut updated, &record)?;
        append_edit(&editing.log, &record).map_err(|e| format!("could not persist edit: {e}"))?;
        let entry = Self::entry(&updated);
        self.annotations.write().map_err(|_| "annotation lock poisoned".to_string())?[frame] = updated;
        editing.count += 1;
        Ok(EditAck {
            index: editing.count - 1,
            frame: entry,
        })
    }
}

fn error_response(status: StatusCode, reason: impl Into<String>) -> Response {
    (status, Json(serde_json::json!({ "error": reason.into() }))).into_response()
}

fn missing_frame(t: usize) -> Response {
    error_response(StatusCode::NOT_FOUND, format!("frame {t} does not exist"))
}

async fn list_frames(State(state): State<Arc<ReviewState>>) -> Json<Vec<FrameEntry>> {
    Json(state.frames())
}

async fn frame_points(State(state): State<Arc<ReviewState>>, Path(t): Path<usize>) -> Response {
    let result = tokio::task::spawn_blocking(move || state.points_payload(t)).await;
    match result {
        Ok(Ok(Some(bytes))) => ([(header::CONTENT_TYPE, "application/octet-stream")], bytes).into_response(),
        Ok(Ok(None)) => missing_frame(t),
        Ok(Err(e)) => error_response(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        Err(e) => error_response(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn frame_tracks(State(state): State<Arc<ReviewState>>, Path(t): Path<usize>) -> Response {
    match state.tracks(t) {
        Some(tracks) => Json(tracks).into_response(),
        None => missing_frame(t),
    }
}

async fn post_edit(State(state): State<Arc<ReviewState>>, Path(t): Path<usize>, body: Bytes) -> Response {
    let req: EditRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error_response(StatusCode::BAD_REQUEST, format!("malformed edit: {e}")),
    };
    match tokio::task::spawn_blocking(move || state.submit(t, req)).await {
        Ok(Ok(ack)) => Json(ack).into_response(),
        Ok(Err(reason)) => error_response(StatusCode::BAD_REQUEST, reason),
        Err(e) => error_response(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn summary(State(state): State<Arc<ReviewState>>) -> Json<Summary> {
    Json(state.summary())
}

pub fn router(state: Arc<ReviewState>) -> Router {
    Router::new()
        .route("/api/frames", get(list_frames))
        .route("/api/frames/:t/points", get(frame_points))
        .route("/api/frames/:t/tracks", get(frame_tracks))
        .route("/api/frames/:t/edits", post(post_edit))
        .route("/api/summary", get(summary))
        .with_state(state)
}

/// Binds `addr` first so a busy port fails before any other work.
pub async fn bind(addr: &str) -> Result<tokio::net::TcpListener> {
    let addr: SocketAddr = addr
        .parse()
        .map_err(|e| Error::Config(format!("serve address `{addr}`: {e}")))?;
    tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| Error::Config(format!("cannot listen on {addr}: {e}")))
}

pub async fn serve(listener: tokio::net::TcpListener, state: Arc<ReviewState>) -> Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

/// Runs the pipeline through tracking (cached stages are reused) and serves
/// its output on `addr` until interrupted.
pub fn serve_review(config: PipelineConfig, addr: &str) -> Result<()> {
    let runtime = tokio::runtime::Runtime::new()?;
    let listener = runtime.block_on(bind(addr))?;
    let pipeline = Pipeline::new(config)?;
    pipeline.run_through(Stage::Track)?;
    let state = Arc::new(ReviewState::from_pipeline(&pipeline)?);
    log::info!("review service on http://{}", listener.local_addr()?);
    runtime.block_on(serve(listener, state))
}
