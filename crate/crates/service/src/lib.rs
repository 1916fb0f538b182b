//! HTTP/JSON front for the qsparse operators, training runs and run tools.
//!
//! | method | path                   | body → response                         |
//! |--------|------------------------|-----------------------------------------|
//! | GET    | `/healthz`             | → `Health`                              |
//! | GET    | `/v1/presets`          | → preset names                          |
//! | POST   | `/v1/runs`             | `RunRequest` → `RunStatus` (202)        |
//! | GET    | `/v1/runs`             | → `[RunStatus]`                         |
//! | GET    | `/v1/runs/{id}`        | → `RunStatus`                           |
//! | GET    | `/v1/runs/{id}/metrics`| → `[MetricsRecord]` so far              |
//! | POST   | `/v1/compare`          | `CompareRequest` → `Summary`            |
//! | POST   | `/v1/plotdata`         | `PlotRequest` → `PlotFiles`             |
//! | POST   | `/v1/eval`             | `EvalRequest` → `EvalReport`            |
//! | POST   | `/v1/ops/shrink`       | `ShrinkRequest` → `Tensor`              |
//! | POST   | `/v1/ops/project`      | `ProjectRequest` → `QuantizedLayer`     |
//! | POST   | `/v1/ops/group-lasso`  | `GroupLassoRequest` → `GroupLassoResponse` |
//! | POST   | `/v1/ops/ctl1`         | `Ctl1Request` → `Ctl1Response`          |
//! | POST   | `/v1/ops/schedule`     | `ScheduleRequest` → `[ScheduleState]`   |
//!
//! Errors come back as `ApiError` JSON with a 4xx/5xx status.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use qsparse_core::api::*;
use qsparse_core::metrics::MetricsRecord;
use qsparse_core::penalties::{
    ctl1_layer, ctl1_layer_grad, group_lasso_layer, group_lasso_layer_grad, group_lasso_layer_prox,
    shrink, LayerGroups,
};
use qsparse_core::quantizer::{alternating_projection, project_layer, QuantizedLayer};
use qsparse_core::run::{self, EvalReport, Outcome, PlotFiles, Summary};
use qsparse_core::schedule::schedule;
use qsparse_core::{Error, Tensor};
use tokio::net::TcpListener;
use tokio::task::JoinHandle;

#[derive(Debug)]
pub struct AppError {
    status: StatusCode,
    body: ApiError,
}

impl AppError {
    fn new(status: StatusCode, kind: ErrorKind, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ApiError {
                kind,
                message: message.into(),
            },
        }
    }
}

impl From<Error> for AppError {
    fn from(e: Error) -> Self {
        let body = ApiError::from(&e);
        let status = match body.kind {
            ErrorKind::Invalid => StatusCode::BAD_REQUEST,
            ErrorKind::NotFound => StatusCode::NOT_FOUND,
            ErrorKind::Corrupt => StatusCode::UNPROCESSABLE_ENTITY,
            ErrorKind::Internal => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self { status, body }
    }
}

impl From<JsonRejection> for AppError {
    fn from(r: JsonRejection) -> Self {
        AppError::new(r.status(), ErrorKind::Invalid, r.body_text())
    }
}

impl IntoResponse for AppError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, AppError>;

struct RunEntry {
    status: RunStatus,
    records: Vec<MetricsRecord>,
}

#[derive(Default)]
pub struct AppState {
    runs: Mutex<BTreeMap<u64, RunEntry>>,
    next_id: AtomicU64,
}

pub fn router() -> Router {
    Router::new()
        .route("/healthz", get(health))
        .route("/v1/presets", get(presets))
        .route("/v1/runs", post(start_run).get(list_runs))
        .route("/v1/runs/{id}", get(run_status))
        .route("/v1/runs/{id}/metrics", get(run_metrics))
        .route("/v1/compare", post(compare))
        .route("/v1/plotdata", post(plotdata))
        .route("/v1/eval", post(eval))
        .route("/v1/ops/shrink", post(op_shrink))
        .route("/v1/ops/project", post(op_project))
        .route("/v1/ops/group-lasso", post(op_group_lasso))
        .route("/v1/ops/ctl1", post(op_ctl1))
        .route("/v1/ops/schedule", post(op_schedule))
        .with_state(Arc::new(AppState::default()))
}

pub async fn serve(listener: TcpListener) -> std::io::Result<()> {
    axum::serve(listener, router()).await
}

/// Binds `addr` (port 0 for an ephemeral port) and serves in the background.
pub async fn spawn(
    addr: SocketAddr,
) -> std::io::Result<(SocketAddr, JoinHandle<std::io::Result<()>>)> {
    let listener = TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    tracing::info!(%local, "listening");
    Ok((local, tokio::spawn(serve(listener))))
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> qsparse_core::Result<T> + Send + 'static,
) -> ApiResult<T> {
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => Ok(Json(r?)),
        Err(e) => Err(AppError::new(
            StatusCode::INTERNAL_SERVER_ERROR,
            ErrorKind::Internal,
            format!("worker failed: {e}"),
        )),
    }
}

async fn health() -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        build: run::build_id(),
    })
}

async fn presets() -> Json<Vec<&'static str>> {
    Json(
        qsparse_core::config::PRESETS
            .iter()
            .map(|(n, _)| *n)
            .collect(),
    )
}

async fn start_run(
    State(state): State<Arc<AppState>>,
    req: Result<Json<RunRequest>, JsonRejection>,
) -> Result<(StatusCode, Json<RunStatus>), AppError> {
    let Json(req) = req?;
    let (cfg, dir) = req.resolve()?;
    let id = state.next_id.fetch_add(1, Ordering::Relaxed) + 1;
    let status = RunStatus {
        id,
        dir: dir.clone(),
        state: RunState::Running,
        epochs: cfg.run.epochs,
        epochs_done: 0,
        error: None,
        manifest: None,
    };
    {
        let mut runs = state.runs.lock().unwrap();
        if runs
            .values()
            .any(|e| e.status.dir == dir && !e.status.state.is_finished())
        {
            return Err(AppError::new(
                StatusCode::CONFLICT,
                ErrorKind::Invalid,
                format!("a run is already writing to {}", dir.display()),
            ));
        }
        runs.insert(
            id,
            RunEntry {
                status: status.clone(),
                records: vec![],
            },
        );
    }
    tracing::info!(id, dir = %dir.display(), algorithm = %cfg.run.algorithm, seed = cfg.run.seed, "run started");

    let worker = state.clone();
    tokio::task::spawn_blocking(move || {
        let progress = worker.clone();
        let result = run::execute_run(&cfg, &dir, |record| {
            if let Some(e) = progress.runs.lock().unwrap().get_mut(&id) {
                e.status.epochs_done = record.epoch;
                e.records.push(record.clone());
            }
        });
        let mut runs = worker.runs.lock().unwrap();
        let entry = runs.get_mut(&id).expect("run registered");
        match result {
            Ok(report) => {
                entry.status.state = match report.manifest.outcome {
                    Outcome::Completed => RunState::Completed,
                    Outcome::Collapsed => RunState::Collapsed,
                };
                entry.status.manifest = Some(report.manifest);
            }
            Err(e) => {
                tracing::error!(id, error = %e, "run failed");
                entry.status.state = RunState::Failed;
                entry.status.error = Some(ApiError::from(&e));
            }
        }
    });
    Ok((StatusCode::ACCEPTED, Json(status)))
}

fn unknown_run(id: u64) -> AppError {
    AppError::new(
        StatusCode::NOT_FOUND,
        ErrorKind::NotFound,
        format!("no run with id {id}"),
    )
}

async fn list_runs(State(state): State<Arc<AppState>>) -> Json<Vec<RunStatus>> {
    Json(
        state
            .runs
            .lock()
            .unwrap()
            .values()
            .map(|e| e.status.clone())
            .collect(),
    )
}

async fn run_status(
    State(state): State<Arc<AppState>>,
    Path(id): Path<u64>,
) -> ApiResult<RunStatus> {
    let runs = state.runs.lock().unwrap();
    runs.get(&id)
        .map(|e| Json(e.status.clone()))
        .ok_or_else(|| unknown_run(id))
}

async fn run_metrics(
    State(state): State<Arc<AppState>>,
    Path(id): Path<u64>,
) -> ApiResult<Vec<MetricsRecord>> {
    let runs = state.runs.lock().unwrap();
    runs.get(&id)
        .map(|e| Json(e.records.clone()))
        .ok_or_else(|| unknown_run(id))
}

async fn compare(req: Result<Json<CompareRequest>, JsonRejection>) -> ApiResult<Summary> {
    let Json(req) = req?;
    blocking(move || run::compare(&req.runs)).await
}

async fn plotdata(req: Result<Json<PlotRequest>, JsonRejection>) -> ApiResult<PlotFiles> {
    let Json(req) = req?;
    blocking(move || run::plotdata(&req.run, req.out.as_deref())).await
}

async fn eval(req: Result<Json<EvalRequest>, JsonRejection>) -> ApiResult<EvalReport> {
    let Json(req) = req?;
    blocking(move || run::eval_run(&req.run)).await
}

async fn op_shrink(req: Result<Json<ShrinkRequest>, JsonRejection>) -> ApiResult<Tensor> {
    let Json(req) = req?;
    Ok(Json(shrink(&req.x, req.threshold)?))
}

async fn op_project(req: Result<Json<ProjectRequest>, JsonRejection>) -> ApiResult<QuantizedLayer> {
    let Json(req) = req?;
    let layer = match req.alternating_rounds {
        Some(rounds) => alternating_projection(&req.w, req.bits, rounds, req.previous_scale)?.0,
        None => project_layer(&req.w, req.bits, req.previous_scale)?,
    };
    Ok(Json(layer))
}

async fn op_group_lasso(
    req: Result<Json<GroupLassoRequest>, JsonRejection>,
) -> ApiResult<GroupLassoResponse> {
    let Json(req) = req?;
    let groups = LayerGroups::of(&req.w);
    Ok(Json(GroupLassoResponse {
        value: group_lasso_layer(&req.w, groups),
        subgradient: group_lasso_layer_grad(&req.w, groups),
        prox: group_lasso_layer_prox(&req.w, req.threshold, groups)?,
    }))
}

async fn op_ctl1(req: Result<Json<Ctl1Request>, JsonRejection>) -> ApiResult<Ctl1Response> {
    let Json(req) = req?;
    Ok(Json(Ctl1Response {
        value: ctl1_layer(&req.w, req.a)?,
        gradient: ctl1_layer_grad(&req.w, req.a)?,
    }))
}

async fn op_schedule(
    req: Result<Json<ScheduleRequest>, JsonRejection>,
) -> ApiResult<ScheduleResponse> {
    let Json(req) = req?;
    req.penalty.validate()?;
    req.schedule.validate(usize::MAX)?;
    Ok(Json(
        req.epochs
            .iter()
            .map(|&e| schedule(&req.schedule, &req.penalty, e))
            .collect(),
    ))
}
