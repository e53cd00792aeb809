//! HTTP + JSON front end for the editing sessions.
//!
//! Rasters travel as base64-encoded PNG in JSON bodies; exports and
//! previews are returned as `image/png`. Errors are
//! `{"code", "message", "detail"}`.

use std::path::{Component, Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use axum::body::Body;
use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::json;

use rimatte::compositing::ObservedImage;
use rimatte::imageio;
use rimatte::rim::{IterationConfig, RimWeights};
use rimatte::service::{
    preview, EditCommand, EditTarget, ExportKind, NewBackground, SessionStore, SessionSummary, PREVIEW_MAX_SIDE,
};
use rimatte::Error;

use crate::config::RunConfig;

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<SessionStore>,
    pub defaults: IterationConfig,
    pub static_dir: Option<PathBuf>,
}

pub struct ApiError {
    status: StatusCode,
    code: String,
    message: String,
    detail: serde_json::Value,
}

impl ApiError {
    fn bad_request(code: &str, message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::BAD_REQUEST,
            code: code.into(),
            message: message.into(),
            detail: serde_json::Value::Null,
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::NotFound(_) => StatusCode::NOT_FOUND,
            Error::Shape(_) | Error::Parameter(_) | Error::Validation(_) | Error::Image { .. } | Error::Plan(_) => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError {
            status,
            code: e.code().into(),
            message: e.to_string(),
            detail: match &e {
                Error::NotFound(id) => json!({ "id": id }),
                _ => serde_json::Value::Null,
            },
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError {
            status: e.status(),
            code: "body".into(),
            message: e.body_text(),
            detail: serde_json::Value::Null,
        }
    }
}

impl From<QueryRejection> for ApiError {
    fn from(e: QueryRejection) -> Self {
        ApiError::bad_request("query", e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "code": self.code, "message": self.message, "detail": self.detail });
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

fn b64(field: &str, s: &str) -> ApiResult<Vec<u8>> {
    base64::engine::general_purpose::STANDARD
        .decode(s.trim())
        .map_err(|e| ApiError::bad_request("base64", format!("{field}: {e}")))
}

/// Run blocking session work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> rimatte::Result<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            code: "internal".into(),
            message: e.to_string(),
            detail: serde_json::Value::Null,
        })?
        .map_err(ApiError::from)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateRequest {
    pub image: String,
    pub alpha: String,
    pub trimap: Option<String>,
    pub config: Option<IterationConfig>,
}

#[derive(Debug, Serialize)]
pub struct SessionView {
    #[serde(flatten)]
    pub summary: SessionSummary,
    pub previews: serde_json::Value,
}

fn view(s: SessionSummary) -> SessionView {
    let base = format!("/sessions/{}", s.id);
    let previews = json!({
        "foreground": format!("{base}/preview/foreground"),
        "background": format!("{base}/preview/background"),
        "alpha": format!("{base}/preview/alpha"),
        "composite": format!("{base}/preview/composite"),
        "export": format!("{base}/export"),
    });
    SessionView {
        summary: s,
        previews,
    }
}

async fn create(
    State(app): State<AppState>,
    req: std::result::Result<Json<CreateRequest>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<SessionView>)> {
    let Json(req) = req?;
    let image = imageio::decode_rgb(&b64("image", &req.image)?)?;
    let alpha = imageio::decode_gray(&b64("alpha", &req.alpha)?)?;
    let trimap = match &req.trimap {
        Some(t) => Some(imageio::decode_trimap(&b64("trimap", t)?)?),
        None => None,
    };
    if alpha.dims()[2..] != image.dims()[2..] {
        return Err(ApiError::from(Error::Shape(format!(
            "alpha is {}x{} but image is {}x{}",
            alpha.dims()[3],
            alpha.dims()[2],
            image.dims()[3],
            image.dims()[2]
        ))));
    }
    let config = req.config.unwrap_or_else(|| app.defaults.clone());
    let store = app.store.clone();
    let summary = blocking(move || store.create(ObservedImage::new(image)?, &alpha, trimap, config)).await?;
    Ok((StatusCode::CREATED, Json(view(summary))))
}

async fn get_session(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<SessionView>> {
    let store = app.store.clone();
    Ok(Json(view(blocking(move || store.summary(&id)).await?)))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRequest {
    #[serde(default = "one")]
    pub n: usize,
}

fn one() -> usize {
    1
}

async fn step(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: std::result::Result<Json<StepRequest>, JsonRejection>,
) -> ApiResult<Json<SessionView>> {
    let n = match body {
        Ok(Json(b)) => b.n,
        Err(JsonRejection::MissingJsonContentType(_)) => 1,
        Err(e) => return Err(e.into()),
    };
    let store = app.store.clone();
    Ok(Json(view(blocking(move || store.step(&id, n)).await?)))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditRequest {
    pub target: EditTarget,
    /// Grayscale PNG; white marks edited pixels.
    pub mask: String,
    /// RGB PNG (grayscale for alpha) with the new values.
    pub values: String,
    #[serde(default)]
    pub keep_hidden: bool,
}

async fn edit(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<String>,
    req: std::result::Result<Json<EditRequest>, JsonRejection>,
) -> ApiResult<Json<SessionView>> {
    let Json(req) = req?;
    let mask = imageio::decode_gray(&b64("mask", &req.mask)?)?;
    let bytes = b64("values", &req.values)?;
    let values = match req.target {
        EditTarget::Alpha => imageio::decode_gray(&bytes)?,
        _ => imageio::decode_rgb(&bytes)?,
    };
    let cmd = EditCommand {
        target: req.target,
        mask,
        values,
        keep_hidden: req.keep_hidden,
    };
    let store = app.store.clone();
    Ok(Json(view(blocking(move || store.edit(&id, cmd)).await?)))
}

async fn reset(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<SessionView>> {
    let store = app.store.clone();
    Ok(Json(view(blocking(move || store.reset(&id)).await?)))
}

async fn delete(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<StatusCode> {
    app.store.delete(&id)?;
    Ok(StatusCode::NO_CONTENT)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportQuery {
    pub what: String,
    /// `#rrggbb` colour for composites; black when absent.
    pub bg: Option<String>,
}

/// `#rrggbb` or `rrggbb`.
pub fn parse_color(s: &str) -> rimatte::Result<[f32; 3]> {
    let hex = s.trim_start_matches('#');
    let bad = || Error::Parameter(format!("background colour '{s}' is not #rrggbb"));
    if hex.len() != 6 || !hex.is_ascii() {
        return Err(bad());
    }
    let mut out = [0.0f32; 3];
    for (i, v) in out.iter_mut().enumerate() {
        let b = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        *v = b as f32 / 255.0;
    }
    Ok(out)
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

async fn export(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<String>,
    q: std::result::Result<Query<ExportQuery>, QueryRejection>,
) -> ApiResult<Response> {
    let Query(q) = q?;
    let kind: ExportKind = q.what.parse()?;
    let bg = match &q.bg {
        Some(c) => NewBackground::Color(parse_color(c)?),
        None => NewBackground::default(),
    };
    let store = app.store.clone();
    let bytes = blocking(move || imageio::png16(&store.export(&id, kind, &bg)?)).await?;
    Ok(png(bytes))
}

async fn preview_image(
    State(app): State<AppState>,
    UrlPath((id, what)): UrlPath<(String, String)>,
) -> ApiResult<Response> {
    let kind: ExportKind = what.parse()?;
    let store = app.store.clone();
    let bytes = blocking(move || {
        let t = preview(&store.export(&id, kind, &NewBackground::default())?, PREVIEW_MAX_SIDE);
        if t.dims()[1] == 1 {
            let rgb = rimatte::numerics::Tensor::concat_channels(&[&t, &t, &t])?;
            imageio::png_rgb8(&rgb)
        } else {
            imageio::png_rgb8(&t)
        }
    })
    .await?;
    Ok(png(bytes))
}

fn safe_join(root: &Path, rel: &str) -> Option<PathBuf> {
    let rel = Path::new(rel.trim_start_matches('/'));
    if rel.components().any(|c| !matches!(c, Component::Normal(_))) {
        return None;
    }
    Some(root.join(rel))
}

fn content_type(p: &Path) -> &'static str {
    match p.extension().and_then(|e| e.to_str()) {
        Some("html") => "text/html; charset=utf-8",
        Some("js") | Some("mjs") => "text/javascript",
        Some("css") => "text/css",
        Some("json") => "application/json",
        Some("png") => "image/png",
        Some("svg") => "image/svg+xml",
        Some("wasm") => "application/wasm",
        _ => "application/octet-stream",
    }
}

async fn static_file(State(app): State<AppState>, uri: axum::http::Uri) -> Response {
    let Some(root) = &app.static_dir else {
        return StatusCode::NOT_FOUND.into_response();
    };
    let rel = match uri.path() {
        "/" | "" => "index.html",
        p => p,
    };
    let Some(path) = safe_join(root, rel) else {
        return StatusCode::NOT_FOUND.into_response();
    };
    match std::fs::read(&path) {
        Ok(bytes) => ([(header::CONTENT_TYPE, content_type(&path))], Body::from(bytes)).into_response(),
        Err(_) => StatusCode::NOT_FOUND.into_response(),
    }
}

pub fn router(app: AppState) -> Router {
    Router::new()
        .route("/sessions", post(create))
        .route("/sessions/{id}", get(get_session).delete(delete))
        .route("/sessions/{id}/step", post(step))
        .route("/sessions/{id}/edit", post(edit))
        .route("/sessions/{id}/reset", post(reset))
        .route("/sessions/{id}/export", get(export))
        .route("/sessions/{id}/preview/{what}", get(preview_image))
        .fallback(static_file)
        .with_state(app)
}

pub fn app_state(cfg: &RunConfig, weights: RimWeights, static_dir: Option<PathBuf>) -> AppState {
    AppState {
        store: Arc::new(SessionStore::new(weights)),
        defaults: cfg.iteration.clone(),
        static_dir,
    }
}

pub fn serve(cfg: &RunConfig, weights: RimWeights, host: &str, port: u16, static_dir: Option<PathBuf>) -> Result<()> {
    let app = router(app_state(cfg, weights, static_dir));
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .context("starting the async runtime")?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind((host, port))
            .await
            .with_context(|| format!("binding {host}:{port}"))?;
        log::info!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, app).await.context("server failed")
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colors() {
        assert_eq!(parse_color("#ff0000").unwrap(), [1.0, 0.0, 0.0]);
        assert_eq!(parse_color("000000").unwrap(), [0.0; 3]);
        assert!(parse_color("#fff").is_err());
        assert!(parse_color("#gg0000").is_err());
    }

    #[test]
    fn static_paths_stay_inside_root() {
        let root = Path::new("/srv");
        assert_eq!(safe_join(root, "/app.js").unwrap(), PathBuf::from("/srv/app.js"));
        assert!(safe_join(root, "/../etc/passwd").is_none());
    }
}
