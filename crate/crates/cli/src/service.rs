//! HTTP facade over the classifier session.
//!
//! Each session owns the uploaded image and the pipeline artifacts computed
//! up to feature extraction. Mutating requests on one session are
//! serialized by a per-session mutex; reads are served from the snapshot
//! published after the last mutation.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::json;

use recurdet::classifier::{Phase, QueryBatch, QueryEntry, Session};
use recurdet::imaging::{decode_image, encode_png, GrayImage, Point};
use recurdet::mining::BoundingBox;
use recurdet::pipeline::{analyze, Detection, PipelineConfig, Timings};
use recurdet::{Error, Stage, StageError};

#[derive(Debug, Clone, Default)]
pub struct ServiceConfig {
    /// When set, a JSON snapshot of every session is written here after
    /// each change.
    pub state_dir: Option<PathBuf>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    kind: String,
    message: String,
    stage: Option<Stage>,
}

impl ApiError {
    fn new(status: StatusCode, kind: impl Into<String>, message: impl Into<String>) -> Self {
        ApiError { status, kind: kind.into(), message: message.into(), stage: None }
    }

    fn not_found(id: &str) -> Self {
        ApiError::new(StatusCode::NOT_FOUND, "NotFound", format!("no session {id}"))
    }

    fn bad_request(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "BadRequest", message)
    }

    fn internal(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::WrongPhase(_) => StatusCode::CONFLICT,
            Error::IncompleteResponse(_)
            | Error::InvalidConfig(_)
            | Error::DegenerateBox(_)
            | Error::InvalidImage(_)
            | Error::Decode(_)
            | Error::Json(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.kind(), e.to_string())
    }
}

impl From<StageError> for ApiError {
    fn from(e: StageError) -> Self {
        ApiError {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            kind: e.source.kind().into(),
            message: e.to_string(),
            stage: Some(e.stage),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "error": self.kind, "message": self.message, "stage": self.stage });
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Body of `POST /sessions`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    /// PNG or binary PGM, base64 encoded.
    pub image: String,
    /// Example object as `[x, y, w, h]` in image pixels.
    pub bbox: [f64; 4],
    #[serde(default)]
    pub config: Option<PipelineConfig>,
    /// Overrides the seed of `config`.
    #[serde(default)]
    pub seed: Option<u64>,
}

/// Body of `PUT /sessions/{id}/bias`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetBias {
    pub b: f64,
}

/// Body of `POST /sessions/{id}/labels`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubmitLabels {
    /// Round the labels answer; a stale round is rejected with 409.
    #[serde(default)]
    pub round: Option<usize>,
    /// Final label of every cluster in the batch, keyed by cluster id.
    pub labels: BTreeMap<usize, bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchEntryView {
    #[serde(flatten)]
    pub entry: QueryEntry,
    /// Cluster centre in image pixels.
    pub x: f64,
    pub y: f64,
    /// Object-size crop around the centre, base64 PNG.
    pub crop: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchView {
    pub round: usize,
    pub phase: Phase,
    pub b: f64,
    pub b_min: f64,
    pub b_max: f64,
    pub entries: Vec<BatchEntryView>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
    pub n_clusters: usize,
    pub timings: Timings,
    pub batch: BatchView,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseView {
    pub phase: Phase,
    pub round: usize,
    pub converged: bool,
    pub delta_plus: f64,
    pub delta_minus: f64,
    /// Corrections in the round just submitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corrections: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultView {
    pub count: usize,
    pub converged: bool,
    pub phase: Phase,
    pub rounds: usize,
    pub detections: Vec<Detection>,
}

struct Artifacts {
    image: GrayImage,
    bbox: BoundingBox,
    centers: Vec<Point>,
    created_at: u64,
}

struct Entry {
    artifacts: Arc<Artifacts>,
    session: Mutex<Session>,
    snapshot: RwLock<Arc<Session>>,
}

impl Entry {
    fn snapshot(&self) -> Arc<Session> {
        self.snapshot.read().expect("snapshot lock").clone()
    }
}

#[derive(Clone)]
pub struct AppState {
    sessions: Arc<RwLock<HashMap<String, Arc<Entry>>>>,
    config: Arc<ServiceConfig>,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Self {
        AppState { sessions: Arc::default(), config: Arc::new(config) }
    }

    fn get(&self, id: &str) -> ApiResult<Arc<Entry>> {
        self.sessions.read().expect("session table lock").get(id).cloned().ok_or_else(|| ApiError::not_found(id))
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/bias", put(set_bias))
        .route("/sessions/{id}/batch", get(get_batch))
        .route("/sessions/{id}/labels", post(submit_labels))
        .route("/sessions/{id}/result", get(get_result))
        .route("/sessions/{id}/log", get(get_log))
        .with_state(state)
}

/// Bind and serve until interrupted.
pub async fn serve(addr: std::net::SocketAddr, config: ServiceConfig) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(AppState::new(config)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

async fn healthz() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok" }))
}

fn parse_json<T: serde::de::DeserializeOwned>(body: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(e.to_string()))
}

fn render_crop(art: &Artifacts, k: usize) -> ApiResult<String> {
    let side = art.bbox.w.max(art.bbox.h).round().max(1.0) as usize;
    let c = art.centers[k];
    let x0 = (c.x - side as f64 / 2.0).round() as i64;
    let y0 = (c.y - side as f64 / 2.0).round() as i64;
    let png = encode_png(&art.image.crop_padded(x0, y0, side, side))?;
    Ok(BASE64.encode(png))
}

fn batch_view(art: &Artifacts, session: &Session) -> ApiResult<BatchView> {
    let batch: &QueryBatch = session.pending().ok_or_else(|| Error::WrongPhase(session.phase().name().into()))?;
    let st = session.state();
    let entries = batch
        .entries
        .iter()
        .map(|e| {
            Ok(BatchEntryView {
                entry: e.clone(),
                x: art.centers[e.cluster].x,
                y: art.centers[e.cluster].y,
                crop: render_crop(art, e.cluster)?,
            })
        })
        .collect::<ApiResult<_>>()?;
    Ok(BatchView { round: batch.round, phase: st.phase, b: st.separator.b, b_min: st.b_min, b_max: st.b_max, entries })
}

fn phase_view(session: &Session, corrections: Option<usize>) -> PhaseView {
    let st = session.state();
    PhaseView {
        phase: st.phase,
        round: st.round,
        converged: st.phase == Phase::Converged,
        delta_plus: st.delta_plus,
        delta_minus: st.delta_minus,
        corrections,
    }
}

fn persist(config: &ServiceConfig, id: &str, art: &Artifacts, session: &Session) {
    let Some(dir) = &config.state_dir else { return };
    let snapshot = json!({ "id": id, "created_at": art.created_at, "bbox": art.bbox, "session": session });
    let path = dir.join(format!("{id}.json"));
    let written = std::fs::create_dir_all(dir)
        .and_then(|_| std::fs::write(&path, serde_json::to_vec_pretty(&snapshot).expect("snapshot serializes")));
    if let Err(e) = written {
        tracing::warn!(path = %path.display(), error = %e, "could not persist session");
    }
}

async fn create_session(State(app): State<AppState>, body: Bytes) -> ApiResult<(StatusCode, Json<SessionCreated>)> {
    let req: CreateSession = parse_json(&body)?;
    let bytes =
        BASE64.decode(req.image.as_bytes()).map_err(|e| ApiError::bad_request(format!("image is not base64: {e}")))?;
    let image = decode_image(&bytes)?;
    let [x, y, w, h] = req.bbox;
    let bbox = BoundingBox::new(x, y, w, h);
    bbox.validate(image.width(), image.height())?;
    let mut cfg = req.config.unwrap_or_default();
    if let Some(seed) = req.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;

    let (artifacts, session, timings) = tokio::task::spawn_blocking(move || -> ApiResult<_> {
        let mut timings = Timings::new();
        let analysis = analyze(&image, &bbox, &cfg, &mut timings)?;
        let session = analysis.session(&cfg).map_err(|e| StageError::new(Stage::Classification, e))?;
        let created_at = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let artifacts = Artifacts { centers: analysis.centers(), image, bbox, created_at };
        Ok((artifacts, session, timings))
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))??;

    let id = uuid::Uuid::new_v4().simple().to_string();
    let batch = batch_view(&artifacts, &session)?;
    persist(&app.config, &id, &artifacts, &session);
    let created = SessionCreated { session_id: id.clone(), n_clusters: session.features().len(), timings, batch };
    let entry = Entry {
        artifacts: Arc::new(artifacts),
        snapshot: RwLock::new(Arc::new(session.clone())),
        session: Mutex::new(session),
    };
    app.sessions.write().expect("session table lock").insert(id.clone(), Arc::new(entry));
    tracing::info!(session = %id, clusters = created.n_clusters, "session created");
    Ok((StatusCode::CREATED, Json(created)))
}

/// Apply `f` to the session under its writer lock and publish the result.
async fn mutate<T: Send + 'static>(
    app: &AppState,
    id: &str,
    f: impl FnOnce(&mut Session) -> ApiResult<T> + Send + 'static,
) -> ApiResult<(T, Arc<Session>)> {
    let entry = app.get(id)?;
    let config = app.config.clone();
    let id = id.to_string();
    tokio::task::spawn_blocking(move || {
        let mut session = entry.session.lock().expect("session lock");
        let out = f(&mut session)?;
        let published = Arc::new(session.clone());
        *entry.snapshot.write().expect("snapshot lock") = published.clone();
        persist(&config, &id, &entry.artifacts, &session);
        Ok((out, published))
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))?
}

async fn set_bias(State(app): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<PhaseView>> {
    let req: SetBias = parse_json(&body)?;
    let ((), session) = mutate(&app, &id, move |s| Ok(s.set_bias(req.b)?)).await?;
    Ok(Json(phase_view(&session, None)))
}

async fn get_batch(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<BatchView>> {
    let entry = app.get(&id)?;
    Ok(Json(batch_view(&entry.artifacts, &entry.snapshot())?))
}

async fn submit_labels(State(app): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<PhaseView>> {
    let req: SubmitLabels = parse_json(&body)?;
    let (outcome, session) = mutate(&app, &id, move |s| {
        if s.phase() != Phase::Querying {
            return Err(Error::WrongPhase(s.phase().name().into()).into());
        }
        let current = s.pending().map(|b| b.round);
        if let Some(round) = req.round.filter(|r| Some(*r) != current) {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                "StaleRound",
                format!("labels answer round {round}, pending round is {current:?}"),
            ));
        }
        Ok(s.apply_corrections(&req.labels)?)
    })
    .await?;
    Ok(Json(phase_view(&session, Some(outcome.corrections))))
}

async fn get_result(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<ResultView>> {
    let entry = app.get(&id)?;
    let session = entry.snapshot();
    let c = session.classify_all();
    let b = session.state().separator.b;
    let detections = entry
        .artifacts
        .centers
        .iter()
        .zip(c.labels.iter().zip(&c.scores))
        .map(|(p, (&label, &s))| Detection { x: p.x, y: p.y, score: s - b, label })
        .collect();
    Ok(Json(ResultView {
        count: c.count,
        converged: c.converged,
        phase: session.phase(),
        rounds: session.state().round,
        detections,
    }))
}

async fn get_log(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let entry = app.get(&id)?;
    let body = entry.snapshot().log_jsonl();
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response())
}
