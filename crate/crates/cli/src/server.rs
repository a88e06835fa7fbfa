//! HTTP API used by the browser editor.
//!
//! * `GET  /api/v1/health` returns `{status, model_id}`.
//! * `POST /api/v1/edit` takes a PNG/PPM body (or a multipart form with an
//!   `image` field) and returns base64 PNG previews of every decoder at
//!   network resolution plus a session id.
//! * `POST /api/v1/export` takes `{session, temperature}` or `{session, wb}`
//!   and returns the full-resolution PNG.
//!
//! Errors are JSON `{code, message}`.

use std::collections::{HashMap, VecDeque};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Request, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use wbstudio_core::model::{read_checkpoint, DecoderId, WbNet};
use wbstudio_core::pipeline::{prepare, Prepared, WbTarget};
use wbstudio_core::{ImageRGB, WbError};

/// Largest accepted request body.
pub const MAX_BODY_BYTES: usize = 256 << 20;
/// Sessions kept in memory; the oldest is dropped first.
pub const SESSION_CAPACITY: usize = 8;

struct Session {
    image: ImageRGB,
    prepared: Prepared,
}

#[derive(Default)]
struct Sessions {
    map: HashMap<String, Arc<Session>>,
    order: VecDeque<String>,
}

impl Sessions {
    fn insert(&mut self, id: String, s: Session) {
        if self.map.insert(id.clone(), Arc::new(s)).is_none() {
            self.order.push_back(id);
        }
        while self.order.len() > SESSION_CAPACITY {
            if let Some(old) = self.order.pop_front() {
                self.map.remove(&old);
            }
        }
    }
}

struct Inner {
    net: WbNet,
    model_id: String,
    sessions: Mutex<Sessions>,
}

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl AppState {
    pub fn new(net: WbNet, model_id: impl Into<String>) -> Self {
        AppState {
            inner: Arc::new(Inner {
                net,
                model_id: model_id.into(),
                sessions: Mutex::default(),
            }),
        }
    }

    /// Parses a weight file; the model id is a prefix of its SHA-256.
    pub fn from_model_bytes(bytes: &[u8]) -> wbstudio_core::Result<Self> {
        let (net, _) = read_checkpoint(bytes)?;
        Ok(Self::new(net, hex_digest(bytes)[..16].to_string()))
    }

    pub fn model_id(&self) -> &str {
        &self.inner.model_id
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/v1/health", get(health))
        .route("/api/v1/edit", post(edit))
        .route("/api/v1/export", post(export))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(state)
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
        }
    }
}

impl From<WbError> for ApiError {
    fn from(e: WbError) -> Self {
        let (status, code) = match &e {
            WbError::Image(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_image"),
            e if e.is_numerical() => (StatusCode::INTERNAL_SERVER_ERROR, "numerical"),
            WbError::Io { .. } | WbError::ModelFormat(_) => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
            _ => (StatusCode::BAD_REQUEST, "bad_request"),
        };
        ApiError::new(status, code, e.to_string())
    }
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    code: &'a str,
    message: &'a str,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            code: self.code,
            message: &self.message,
        };
        (self.status, Json(body)).into_response()
    }
}

#[derive(Serialize, Deserialize, Debug, PartialEq)]
pub struct Health {
    pub status: String,
    pub model_id: String,
}

async fn health(State(state): State<AppState>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        model_id: state.inner.model_id.clone(),
    })
}

#[derive(Serialize, Deserialize, Debug)]
pub struct EditResponse {
    pub session: String,
    /// Preview size (network resolution).
    pub width: usize,
    pub height: usize,
    pub original_width: usize,
    pub original_height: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub awb: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tungsten: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shade: Option<String>,
}

async fn image_bytes(state: &AppState, req: Request) -> Result<Bytes, ApiError> {
    let is_multipart = req
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("multipart/form-data"));
    if !is_multipart {
        return Bytes::from_request(req, state)
            .await
            .map_err(|e| ApiError::new(e.status(), "bad_request", e.body_text()));
    }
    let mut form = Multipart::from_request(req, state)
        .await
        .map_err(|e| ApiError::new(e.status(), "bad_request", e.body_text()))?;
    while let Some(field) = form
        .next_field()
        .await
        .map_err(|e| ApiError::new(e.status(), "bad_request", e.body_text()))?
    {
        if field.name() == Some("image") {
            return field
                .bytes()
                .await
                .map_err(|e| ApiError::new(e.status(), "bad_request", e.body_text()));
        }
    }
    Err(ApiError::new(StatusCode::BAD_REQUEST, "bad_request", "multipart form has no `image` field"))
}

fn encode_b64_png(img: &ImageRGB) -> Result<String, ApiError> {
    Ok(base64::engine::general_purpose::STANDARD.encode(img.encode_png()?))
}

async fn edit(State(state): State<AppState>, req: Request) -> Result<Json<EditResponse>, ApiError> {
    let bytes = image_bytes(&state, req).await?;
    if bytes.is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "bad_request", "empty body"));
    }
    let session = hex_digest(&bytes)[..32].to_string();
    let worker = state.clone();
    let response = tokio::task::spawn_blocking(move || -> Result<EditResponse, ApiError> {
        let image = ImageRGB::decode(&bytes)?;
        let ids = worker.inner.net.decoder_ids().to_vec();
        let prepared = prepare(&worker.inner.net, &image, &ids)?;
        let preview = |id| prepared.previews.get(&id).map(encode_b64_png).transpose();
        let (width, height) = prepared.resized.dims();
        let resp = EditResponse {
            session: session.clone(),
            width,
            height,
            original_width: image.width(),
            original_height: image.height(),
            awb: preview(DecoderId::Awb)?,
            tungsten: preview(DecoderId::Tungsten)?,
            shade: preview(DecoderId::Shade)?,
        };
        worker
            .inner
            .sessions
            .lock()
            .expect("session lock")
            .insert(session, Session { image, prepared });
        Ok(resp)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
    Ok(Json(response))
}

#[derive(Serialize, Deserialize, Debug, Default)]
pub struct ExportRequest {
    pub session: String,
    /// Kelvin in 2850..=7500.
    #[serde(default)]
    pub temperature: Option<f64>,
    /// `awb`, `tungsten` or `shade`.
    #[serde(default)]
    pub wb: Option<String>,
}

async fn export(State(state): State<AppState>, body: Result<Json<ExportRequest>, JsonRejection>) -> Result<Response, ApiError> {
    let Json(req) = body.map_err(|e| ApiError::new(e.status(), "bad_request", e.body_text()))?;
    let target = match (req.temperature, req.wb.as_deref()) {
        (Some(t), None) => {
            let target = WbTarget::Temperature(t);
            target.validate()?;
            target
        }
        (None, Some(wb)) => wb.parse::<WbTarget>()?,
        _ => {
            return Err(ApiError::new(
                StatusCode::BAD_REQUEST,
                "bad_request",
                "give exactly one of `temperature` or `wb`",
            ))
        }
    };
    let session = state
        .inner
        .sessions
        .lock()
        .expect("session lock")
        .map
        .get(&req.session)
        .cloned()
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown_session", format!("no session `{}`", req.session)))?;
    let png = tokio::task::spawn_blocking(move || -> Result<Vec<u8>, ApiError> {
        Ok(session.prepared.render(&session.image, target)?.encode_png()?)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}
