//! Typed async client for the qsparse service.

use std::path::PathBuf;
use std::time::Duration;

use qsparse_core::api::*;
use qsparse_core::metrics::MetricsRecord;
use qsparse_core::quantizer::QuantizedLayer;
use qsparse_core::run::{EvalReport, PlotFiles, Summary};
use qsparse_core::Tensor;
use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("request failed: {0}")]
    Http(#[from] reqwest::Error),
    #[error("server returned {status}: {error}")]
    Api { status: u16, error: ApiError },
}

impl ClientError {
    /// The server-side error category, if the server answered.
    pub fn kind(&self) -> Option<ErrorKind> {
        match self {
            ClientError::Api { error, .. } => Some(error.kind),
            ClientError::Http(_) => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Debug, Clone)]
pub struct Client {
    http: reqwest::Client,
    base: String,
}

impl Client {
    /// `base` is e.g. `http://127.0.0.1:8080`.
    pub fn new(base: impl Into<String>) -> Self {
        Self {
            http: reqwest::Client::new(),
            base: base.into().trim_end_matches('/').to_string(),
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    async fn decode<T: DeserializeOwned>(resp: reqwest::Response) -> Result<T> {
        let status = resp.status();
        if status.is_success() {
            return Ok(resp.json().await?);
        }
        let text = resp.text().await?;
        let error = serde_json::from_str(&text).unwrap_or(ApiError {
            kind: ErrorKind::Internal,
            message: text,
        });
        Err(ClientError::Api {
            status: status.as_u16(),
            error,
        })
    }

    async fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T> {
        Self::decode(self.http.get(format!("{}{path}", self.base)).send().await?).await
    }

    async fn post<B: Serialize + ?Sized, T: DeserializeOwned>(
        &self,
        path: &str,
        body: &B,
    ) -> Result<T> {
        Self::decode(
            self.http
                .post(format!("{}{path}", self.base))
                .json(body)
                .send()
                .await?,
        )
        .await
    }

    pub async fn health(&self) -> Result<Health> {
        self.get("/healthz").await
    }

    pub async fn presets(&self) -> Result<Vec<String>> {
        self.get("/v1/presets").await
    }

    pub async fn start_run(&self, req: &RunRequest) -> Result<RunStatus> {
        self.post("/v1/runs", req).await
    }

    pub async fn runs(&self) -> Result<Vec<RunStatus>> {
        self.get("/v1/runs").await
    }

    pub async fn run_status(&self, id: u64) -> Result<RunStatus> {
        self.get(&format!("/v1/runs/{id}")).await
    }

    pub async fn run_metrics(&self, id: u64) -> Result<Vec<MetricsRecord>> {
        self.get(&format!("/v1/runs/{id}/metrics")).await
    }

    /// Polls until the run leaves the running state.
    pub async fn wait_for_run(&self, id: u64, poll: Duration) -> Result<RunStatus> {
        loop {
            let status = self.run_status(id).await?;
            if status.state.is_finished() {
                return Ok(status);
            }
            tokio::time::sleep(poll).await;
        }
    }

    pub async fn compare(&self, runs: Vec<PathBuf>) -> Result<Summary> {
        self.post("/v1/compare", &CompareRequest { runs }).await
    }

    pub async fn plotdata(&self, run: PathBuf, out: Option<PathBuf>) -> Result<PlotFiles> {
        self.post("/v1/plotdata", &PlotRequest { run, out }).await
    }

    pub async fn eval(&self, run: PathBuf) -> Result<EvalReport> {
        self.post("/v1/eval", &EvalRequest { run }).await
    }

    pub async fn shrink(&self, x: Tensor, threshold: f64) -> Result<Tensor> {
        self.post("/v1/ops/shrink", &ShrinkRequest { x, threshold })
            .await
    }

    pub async fn project(&self, req: &ProjectRequest) -> Result<QuantizedLayer> {
        self.post("/v1/ops/project", req).await
    }

    pub async fn group_lasso(&self, w: Tensor, threshold: f64) -> Result<GroupLassoResponse> {
        self.post("/v1/ops/group-lasso", &GroupLassoRequest { w, threshold })
            .await
    }

    pub async fn ctl1(&self, w: Tensor, a: f64) -> Result<Ctl1Response> {
        self.post("/v1/ops/ctl1", &Ctl1Request { w, a }).await
    }

    pub async fn schedule(&self, req: &ScheduleRequest) -> Result<ScheduleResponse> {
        self.post("/v1/ops/schedule", req).await
    }
}
