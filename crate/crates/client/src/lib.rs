//! Thin HTTP/JSON client for the hetsim service, plus the wire types shared
//! between the service and its clients.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use hetsim_core::kb::Profile;
use hetsim_core::trace::ReportSummary;
use hetsim_core::tuner::SearchStep;

// ── Wire types ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunScenarioRequest {
    /// Scenario file content (TOML).
    pub scenario: String,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub no_profiling: bool,
    /// Knowledge-base file content to start from, if any.
    #[serde(default)]
    pub kb: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunScenarioResponse {
    pub trace: String,
    pub kb: String,
    pub series_csv: String,
    pub summary: ReportSummary,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ProfileRequest {
    pub scenario: String,
    pub sct: String,
    pub workload: String,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub kb: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProfileResponse {
    pub profile: Profile,
    pub kb: String,
    pub search: Vec<SearchStep>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DeriveRequest {
    pub scenario: String,
    pub sct: String,
    pub workload: String,
    #[serde(default)]
    pub kb: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeriveResponse {
    pub scope: String,
    pub split_cpu: f64,
    pub split_gpu: f64,
    pub fission: String,
    pub overlap: u32,
    #[serde(default)]
    pub wgs: Option<std::collections::BTreeMap<String, u64>>,
    /// The stored profile verbatim, on an exact knowledge-base hit.
    #[serde(default)]
    pub stored: Option<Profile>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ReportRequest {
    /// Trace file content (TOML).
    pub trace: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportResponse {
    pub summary: ReportSummary,
}

/// Structured error body returned with non-2xx statuses.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ApiErrorBody {
    /// "validation" or "runtime".
    pub kind: String,
    pub message: String,
}

// ── Client ──────────────────────────────────────────────────────────────────

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("transport failure: {0}")]
    Transport(#[from] reqwest::Error),
    #[error("{kind} failure: {message}")]
    Api { kind: String, message: String },
}

impl ClientError {
    pub fn is_validation(&self) -> bool {
        matches!(self, ClientError::Api { kind, .. } if kind == "validation")
    }
}

/// Async client against a running hetsim service.
#[derive(Debug, Clone)]
pub struct ApiClient {
    base: String,
    http: reqwest::Client,
}

impl ApiClient {
    pub fn new(base_url: &str) -> Self {
        ApiClient { base: base_url.trim_end_matches('/').to_string(), http: reqwest::Client::new() }
    }

    async fn post<Req: Serialize, Resp: for<'de> Deserialize<'de>>(
        &self,
        path: &str,
        body: &Req,
    ) -> Result<Resp, ClientError> {
        let resp = self.http.post(format!("{}{path}", self.base)).json(body).send().await?;
        if resp.status().is_success() {
            Ok(resp.json().await?)
        } else {
            let status = resp.status();
            let body: ApiErrorBody = resp.json().await.unwrap_or(ApiErrorBody {
                kind: "runtime".into(),
                message: format!("service returned {status}"),
            });
            Err(ClientError::Api { kind: body.kind, message: body.message })
        }
    }

    pub async fn health(&self) -> Result<(), ClientError> {
        let resp = self.http.get(format!("{}/v1/health", self.base)).send().await?;
        resp.error_for_status()?;
        Ok(())
    }

    pub async fn run_scenario(
        &self,
        req: &RunScenarioRequest,
    ) -> Result<RunScenarioResponse, ClientError> {
        self.post("/v1/run", req).await
    }

    pub async fn profile(&self, req: &ProfileRequest) -> Result<ProfileResponse, ClientError> {
        self.post("/v1/profile", req).await
    }

    pub async fn derive(&self, req: &DeriveRequest) -> Result<DeriveResponse, ClientError> {
        self.post("/v1/derive", req).await
    }

    pub async fn report(&self, req: &ReportRequest) -> Result<ReportResponse, ClientError> {
        self.post("/v1/report", req).await
    }
}
