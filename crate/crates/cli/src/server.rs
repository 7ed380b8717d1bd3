//! HTTP front end of the counting service.
//!
//! | route | |
//! |---|---|
//! | `POST /images` | raw PNG/JPEG body → `{"image_id"}` |
//! | `POST /count` | `{image_id, box:{x,y,w,h}, mode, threshold, min_distance}` → queued job |
//! | `GET /jobs/{id}` | job status and, once done, the count and detections |
//! | `GET /maps/{id}.png` / `GET /maps/{id}.gmnd` | similarity map of a finished job |
//! | `GET /stats` | cache and embedding counters |

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use gmn_core::model::Gmn;
use gmn_core::service::{CountRequest, CountService, ServiceConfig};
use gmn_core::Error;
use serde_json::json;

pub struct ApiError(Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        Self(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            Error::UnknownImage(_) | Error::UnknownJob(_) => StatusCode::NOT_FOUND,
            Error::Io(_) | Error::Json(_) | Error::Checkpoint(_) => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        };
        (status, Json(json!({ "error": self.0.to_string() }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

async fn upload(State(svc): State<Arc<CountService>>, body: Bytes) -> ApiResult<Response> {
    let id = tokio::task::spawn_blocking(move || svc.upload_image(&body))
        .await
        .expect("upload task")?;
    Ok((StatusCode::CREATED, Json(json!({ "image_id": id }))).into_response())
}

async fn start_count(State(svc): State<Arc<CountService>>, Json(req): Json<CountRequest>) -> ApiResult<Response> {
    let job = svc.submit(req)?;
    Ok((StatusCode::ACCEPTED, Json(job)).into_response())
}

async fn job(State(svc): State<Arc<CountService>>, Path(id): Path<u64>) -> ApiResult<Response> {
    Ok(Json(svc.job(id)?).into_response())
}

async fn map(State(svc): State<Arc<CountService>>, Path(file): Path<String>) -> ApiResult<Response> {
    let bad = || Error::InvalidArgument(format!("expected <job id>.png or <job id>.gmnd, got `{file}`"));
    let (stem, ext) = file.rsplit_once('.').ok_or_else(bad)?;
    let id: u64 = stem.parse().map_err(|_| bad())?;
    let map = svc.job_map(id)?;
    let grid = json!({
        "height": map.height,
        "width": map.width,
        "stride": map.grid.stride,
        "offset_x": map.grid.offset_x,
        "offset_y": map.grid.offset_y,
    });
    let (body, content_type) = match ext {
        "png" => (map.heatmap_png()?, "image/png"),
        "gmnd" => (map.to_gmnd_bytes(), "application/octet-stream"),
        _ => return Err(bad().into()),
    };
    let mut resp = body.into_response();
    resp.headers_mut().insert(header::CONTENT_TYPE, HeaderValue::from_static(content_type));
    resp.headers_mut()
        .insert("x-map-grid", HeaderValue::from_str(&grid.to_string()).expect("ascii json"));
    Ok(resp)
}

async fn stats(State(svc): State<Arc<CountService>>) -> Json<serde_json::Value> {
    Json(json!({
        "counters": svc.counters(),
        "cache_bytes": svc.cache_bytes(),
        "checkpoint": svc.checkpoint_id(),
    }))
}

pub fn router(svc: Arc<CountService>) -> Router {
    Router::new()
        .route("/images", post(upload))
        .route("/count", post(start_count))
        .route("/jobs/{id}", get(job))
        .route("/maps/{file}", get(map))
        .route("/stats", get(stats))
        .with_state(svc)
}

pub async fn serve(model: Gmn<f32>, checkpoint_id: String, cfg: ServiceConfig, addr: &str) -> anyhow::Result<()> {
    let svc = Arc::new(CountService::new(model, checkpoint_id, &cfg));
    let workers = svc.spawn_workers(cfg.workers);
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(svc.clone()))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    svc.shutdown();
    for w in workers {
        let _ = w.join();
    }
    Ok(())
}
