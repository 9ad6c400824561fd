//! HTTP facade over restoration, interactive sessions, glyph families and
//! dating. The checkpoint is loaded once and shared read-only by every
//! request; each session has its own lock, so sessions never wait on one
//! another and inference never takes a global lock.
//!
//! Sessions live in memory unless a session log is configured, in which case
//! every mutation is appended to it and replayed on startup.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tower_http::cors::CorsLayer;

use glyphmlm_core::api::{
    date, family_view, restore, AcceptRequest, DateRequest, ErrorBody, RestoreRequest, Session, SessionRequest,
    API_SCHEMA,
};
use glyphmlm_core::checkpoint::{Checkpoint, CheckpointError};
use glyphmlm_core::decode::{DecodeError, Restorer};
use glyphmlm_core::glyphnet::GlyphNet;
use glyphmlm_core::pipeline::{model_label, net_for_vocab, read_pairs, PipelineError};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("session log {path}: {message}")]
    SessionLog { path: PathBuf, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Default)]
pub struct ServiceConfig {
    pub checkpoint: PathBuf,
    pub pairs: Option<PathBuf>,
    /// Append-only session log; sessions are ephemeral without it.
    pub session_log: Option<PathBuf>,
}

/// One line of the session log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum SessionEvent {
    Create { id: String, request: SessionRequest },
    Accept { id: String, request: AcceptRequest },
    Undo { id: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Info {
    pub schema: String,
    pub model: String,
    pub vocab_size: usize,
    pub max_cells: usize,
    pub families: usize,
    pub dropped_pairs: usize,
    pub persistent_sessions: bool,
    /// Whether the checkpoint carries fine-tuned dating heads.
    pub dating: bool,
}

pub struct AppState {
    checkpoint: Checkpoint,
    net: GlyphNet,
    info: Info,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    next_id: Mutex<u64>,
    log: Option<Mutex<File>>,
}

impl AppState {
    pub fn load(config: &ServiceConfig) -> Result<Self, ServiceError> {
        let checkpoint = Checkpoint::load(&config.checkpoint)?;
        let pairs = config.pairs.as_deref().map(read_pairs).transpose()?.unwrap_or_default();
        Self::new(checkpoint, &pairs, config.session_log.as_deref())
    }

    pub fn new(
        checkpoint: Checkpoint,
        pairs: &[glyphmlm_core::glyphnet::AllographPair],
        session_log: Option<&Path>,
    ) -> Result<Self, ServiceError> {
        let (net, dropped_pairs) = net_for_vocab(pairs, &checkpoint.vocab).map_err(PipelineError::from)?;
        let info = Info {
            schema: API_SCHEMA.into(),
            model: model_label(&checkpoint.meta),
            vocab_size: checkpoint.vocab.len(),
            max_cells: checkpoint.model.config.max_seq_len.saturating_sub(2),
            families: net.non_singleton().count(),
            dropped_pairs,
            persistent_sessions: session_log.is_some(),
            dating: !checkpoint.meta.finetuned_heads.is_empty(),
        };
        let state = AppState {
            checkpoint,
            net,
            info,
            sessions: Mutex::new(HashMap::new()),
            next_id: Mutex::new(1),
            log: None,
        };
        match session_log {
            Some(path) => state.with_log(path),
            None => Ok(state),
        }
    }

    fn with_log(mut self, path: &Path) -> Result<Self, ServiceError> {
        let bad = |message: String| ServiceError::SessionLog {
            path: path.to_path_buf(),
            message,
        };
        if path.exists() {
            let r = self.restorer();
            let mut sessions: HashMap<String, Session> = HashMap::new();
            let mut max_id = 0;
            for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let ev: SessionEvent =
                    serde_json::from_str(&line).map_err(|e| bad(format!("line {}: {e}", i + 1)))?;
                let replay = |e: DecodeError| bad(format!("line {}: {e}", i + 1));
                match ev {
                    SessionEvent::Create { id, request } => {
                        if let Some(n) = id.strip_prefix('s').and_then(|n| n.parse::<u64>().ok()) {
                            max_id = max_id.max(n);
                        }
                        sessions.insert(id.clone(), Session::open(&r, id, &request).map_err(replay)?);
                    }
                    SessionEvent::Accept { id, request } => {
                        let s = sessions.get_mut(&id).ok_or_else(|| bad(format!("unknown session {id}")))?;
                        s.accept(&r, &request).map_err(replay)?;
                    }
                    SessionEvent::Undo { id } => {
                        let s = sessions.get_mut(&id).ok_or_else(|| bad(format!("unknown session {id}")))?;
                        s.undo();
                    }
                }
            }
            *self.next_id.get_mut().expect("fresh lock") = max_id + 1;
            *self.sessions.get_mut().expect("fresh lock") =
                sessions.into_iter().map(|(k, v)| (k, Arc::new(Mutex::new(v)))).collect();
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        self.log = Some(Mutex::new(file));
        Ok(self)
    }

    pub fn restorer(&self) -> Restorer<'_, f32> {
        Restorer::new(&self.checkpoint.model, &self.checkpoint.vocab, &self.net).expect("net built over checkpoint vocabulary")
    }

    pub fn info(&self) -> &Info {
        &self.info
    }

    fn record(&self, ev: &SessionEvent) -> Result<(), ApiError> {
        if let Some(log) = &self.log {
            let mut line = serde_json::to_string(ev).expect("event serializes");
            line.push('\n');
            let mut f = log.lock().expect("log lock");
            f.write_all(line.as_bytes())
                .and_then(|_| f.flush())
                .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, format!("session log: {e}")))?;
        }
        Ok(())
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        self.sessions
            .lock()
            .expect("session map lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("unknown session {id:?}")))
    }
}

/// Status code and message, rendered as an [`ErrorBody`].
#[derive(Debug)]
pub struct ApiError(pub StatusCode, pub String);

impl From<DecodeError> for ApiError {
    fn from(e: DecodeError) -> Self {
        let status = match e {
            DecodeError::NoMask | DecodeError::ZeroK | DecodeError::Empty | DecodeError::Parse(_) => {
                StatusCode::BAD_REQUEST
            }
            DecodeError::TooLong { .. } => StatusCode::PAYLOAD_TOO_LARGE,
            DecodeError::UnknownToken(_) | DecodeError::BadToken(_) => StatusCode::UNPROCESSABLE_ENTITY,
            DecodeError::NotAMask(_) => StatusCode::CONFLICT,
            DecodeError::VocabMismatch { .. } | DecodeError::Model(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(ErrorBody::new(self.0.as_u16(), self.1))).into_response()
    }
}

/// Parses a JSON body; any malformed body is a 400.
fn body<T: DeserializeOwned>(bytes: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(bytes).map_err(|e| ApiError(StatusCode::BAD_REQUEST, format!("malformed body: {e}")))
}

type Shared = Arc<AppState>;

/// Runs CPU-bound model work off the async workers.
async fn blocking<T, F>(state: &Shared, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&AppState) -> Result<T, ApiError> + Send + 'static,
{
    let st = state.clone();
    tokio::task::spawn_blocking(move || f(&st))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

async fn info(State(st): State<Shared>) -> Json<Info> {
    Json(st.info.clone())
}

async fn post_restore(State(st): State<Shared>, bytes: Bytes) -> Result<Response, ApiError> {
    let req: RestoreRequest = body(&bytes)?;
    let resp = blocking(&st, move |s| Ok(restore(&s.restorer(), &req)?)).await?;
    Ok(Json(resp).into_response())
}

async fn post_session(State(st): State<Shared>, bytes: Bytes) -> Result<Response, ApiError> {
    let req: SessionRequest = body(&bytes)?;
    let view = blocking(&st, move |s| {
        let r = s.restorer();
        let id = {
            let mut n = s.next_id.lock().expect("id lock");
            let id = format!("s{n}");
            *n += 1;
            id
        };
        let session = Session::open(&r, id.clone(), &req)?;
        let view = session.view(&r)?;
        s.record(&SessionEvent::Create { id: id.clone(), request: req })?;
        s.sessions.lock().expect("session map lock").insert(id, Arc::new(Mutex::new(session)));
        Ok(view)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(view)).into_response())
}

async fn get_session(State(st): State<Shared>, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    let view = blocking(&st, move |s| {
        let session = s.session(&id)?;
        let guard = session.lock().expect("session lock");
        Ok(guard.view(&s.restorer())?)
    })
    .await?;
    Ok(Json(view).into_response())
}

async fn post_accept(
    State(st): State<Shared>,
    UrlPath(id): UrlPath<String>,
    bytes: Bytes,
) -> Result<Response, ApiError> {
    let req: AcceptRequest = body(&bytes)?;
    let view = blocking(&st, move |s| {
        let session = s.session(&id)?;
        let mut guard = session.lock().expect("session lock");
        let r = s.restorer();
        let mut next = guard.clone();
        next.accept(&r, &req)?;
        let view = next.view(&r)?;
        s.record(&SessionEvent::Accept { id, request: req })?;
        *guard = next;
        Ok(view)
    })
    .await?;
    Ok(Json(view).into_response())
}

async fn post_undo(State(st): State<Shared>, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    let view = blocking(&st, move |s| {
        let session = s.session(&id)?;
        let mut guard = session.lock().expect("session lock");
        if guard.history.is_empty() {
            return Err(ApiError(StatusCode::CONFLICT, "nothing to undo".into()));
        }
        s.record(&SessionEvent::Undo { id })?;
        guard.undo();
        Ok(guard.view(&s.restorer())?)
    })
    .await?;
    Ok(Json(view).into_response())
}

async fn get_family(State(st): State<Shared>, UrlPath(token): UrlPath<String>) -> Result<Response, ApiError> {
    family_view(&st.net, &st.checkpoint.vocab, &token)
        .map(|v| Json(v).into_response())
        .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("unknown token {token:?}")))
}

async fn post_date(State(st): State<Shared>, bytes: Bytes) -> Result<Response, ApiError> {
    let req: DateRequest = body(&bytes)?;
    if !st.info.dating {
        return Err(ApiError(StatusCode::CONFLICT, "checkpoint has no fine-tuned dating heads".into()));
    }
    let resp = blocking(&st, move |s| Ok(date(&s.restorer(), &req)?)).await?;
    Ok(Json(resp).into_response())
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/info", get(info))
        .route("/restore", post(post_restore))
        .route("/sessions", post(post_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/accept", post(post_accept))
        .route("/sessions/{id}/undo", post(post_undo))
        .route("/families/{token}", get(get_family))
        .route("/date", post(post_date))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

/// Serves until ctrl-c. `on_bound` receives the bound address, which is
/// useful with port 0.
pub async fn serve(state: AppState, addr: SocketAddr, on_bound: impl FnOnce(SocketAddr)) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    on_bound(listener.local_addr()?);
    axum::serve(listener, router(Arc::new(state)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
