//! HTTP routes under `/api/v1`.
//!
//! Controller calls block on the worker thread, so handlers hop onto the
//! blocking pool before making them.

use std::path::PathBuf;

use axum::body::Body;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use positioner_analysis::{grid, sweep, MeanGrid, Run, SweepSeries};
use positioner_core::backend::BackendPose;
use positioner_core::sources::SourceDescriptor;
use serde::Deserialize;
use tower_http::services::ServeDir;

use crate::controller::{Controller, CreateRunRequest, JogRequest, RunState, ServiceStatus};
use crate::error::ServiceError;

type ApiResult<T> = Result<Json<T>, ServiceError>;

async fn blocking<T, F>(ctl: Controller, f: F) -> Result<T, ServiceError>
where
    T: Send + 'static,
    F: FnOnce(Controller) -> Result<T, ServiceError> + Send + 'static,
{
    tokio::task::spawn_blocking(move || f(ctl))
        .await
        .map_err(|_| ServiceError::Unavailable)?
}

async fn status(State(ctl): State<Controller>) -> Json<ServiceStatus> {
    Json(ctl.status())
}

async fn jog(State(ctl): State<Controller>, Json(req): Json<JogRequest>) -> ApiResult<BackendPose> {
    blocking(ctl, move |c| c.jog(req)).await.map(Json)
}

async fn home(State(ctl): State<Controller>) -> ApiResult<BackendPose> {
    blocking(ctl, |c| c.home()).await.map(Json)
}

async fn sources(State(ctl): State<Controller>) -> Json<Vec<SourceDescriptor>> {
    Json(ctl.sources())
}

async fn create_run(
    State(ctl): State<Controller>,
    Json(req): Json<CreateRunRequest>,
) -> Result<(StatusCode, Json<RunState>), ServiceError> {
    let state = blocking(ctl, move |c| c.create_run(req)).await?;
    Ok((StatusCode::CREATED, Json(state)))
}

async fn list_runs(State(ctl): State<Controller>) -> Json<Vec<RunState>> {
    Json(ctl.runs())
}

async fn get_run(State(ctl): State<Controller>, Path(id): Path<String>) -> ApiResult<RunState> {
    ctl.run_progress(&id).map(Json)
}

async fn start_run(State(ctl): State<Controller>, Path(id): Path<String>) -> ApiResult<RunState> {
    blocking(ctl, move |c| c.start_run(&id)).await.map(Json)
}

async fn pause_run(State(ctl): State<Controller>, Path(id): Path<String>) -> ApiResult<RunState> {
    blocking(ctl, move |c| c.pause(&id)).await.map(Json)
}

async fn abort_run(State(ctl): State<Controller>, Path(id): Path<String>) -> ApiResult<RunState> {
    blocking(ctl, move |c| c.abort(&id)).await.map(Json)
}

async fn archive(
    State(ctl): State<Controller>,
    Path(id): Path<String>,
) -> Result<Response, ServiceError> {
    let name = id.clone();
    let bytes = blocking(ctl, move |c| {
        let path: PathBuf = c.archive(&id)?;
        std::fs::read(path).map_err(|e| ServiceError::Storage(e.to_string()))
    })
    .await?;
    Ok((
        [
            (header::CONTENT_TYPE, "application/zip".to_string()),
            (
                header::CONTENT_DISPOSITION,
                format!("attachment; filename=\"{name}.zip\""),
            ),
        ],
        Body::from(bytes),
    )
        .into_response())
}

/// Checkpointed data of a run, finished or not.
fn load_run(ctl: &Controller, id: &str) -> Result<Run, ServiceError> {
    ctl.run_progress(id)?;
    let (config, records) = ctl.store().load_session(id)?;
    Ok(Run { config, records })
}

async fn run_grid(State(ctl): State<Controller>, Path(id): Path<String>) -> ApiResult<MeanGrid> {
    blocking(ctl, move |c| Ok(grid(&load_run(&c, &id)?)?))
        .await
        .map(Json)
}

#[derive(Debug, Deserialize)]
struct SweepQuery {
    phi: f64,
}

async fn run_sweep(
    State(ctl): State<Controller>,
    Path(id): Path<String>,
    Query(q): Query<SweepQuery>,
) -> ApiResult<SweepSeries> {
    blocking(ctl, move |c| Ok(sweep(&load_run(&c, &id)?, q.phi)?))
        .await
        .map(Json)
}

/// The `/api/v1` router, plus static UI assets at `/` when `ui_dir` is set.
pub fn router(ctl: Controller, ui_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/status", get(status))
        .route("/jog", post(jog))
        .route("/home", post(home))
        .route("/sources", get(sources))
        .route("/runs", get(list_runs).post(create_run))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/start", post(start_run))
        .route("/runs/{id}/pause", post(pause_run))
        .route("/runs/{id}/abort", post(abort_run))
        .route("/runs/{id}/archive", get(archive))
        .route("/runs/{id}/grid", get(run_grid))
        .route("/runs/{id}/sweep", get(run_sweep))
        .with_state(ctl);
    let app = Router::new().nest("/api/v1", api);
    match ui_dir {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app,
    }
}
