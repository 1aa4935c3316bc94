//! Collection server: hosts the active poll, stores submissions in an
//! append-only log and serves results and accuracy analysis.
//!
//! Endpoints:
//!
//! * `GET /poll`: canonical poll JSON, identical bytes on every request
//! * `POST /submit`: one submission; the acknowledgment body is constant
//! * `GET /results`: [`ResultsDocument`] over the current log snapshot
//! * `POST /analyze`: [`AnalysisDocument`] for a candidate poll

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use serde::{Deserialize, Serialize};

use rrpoll_core::accuracy::{self, Given};
use rrpoll_core::aggregator::{self, AggregatorError, AuditEntry, EstimateReport};
use rrpoll_core::mechanism::{self, TransitionMatrix};
use rrpoll_core::poll::{self, Poll, Violation};
use rrpoll_core::protocol::{self, LeafIndex, ResponseRecord};
use rrpoll_core::rational::{self, Exact};

pub mod log;

pub use log::ResponseLog;

pub const DEFAULT_PORT: u16 = 5000;
pub const SCHEMA_VERSION: u32 = 1;
pub const ACK_BODY: &str = r#"{"status":"ok"}"#;

/// The poll being collected, with everything derived from it.
#[derive(Debug)]
pub struct ActivePoll {
    pub poll: Poll,
    pub document: String,
    pub matrices: Vec<TransitionMatrix>,
    pub index: LeafIndex,
}

#[derive(Debug, thiserror::Error)]
pub enum ActivePollError {
    #[error(transparent)]
    Format(#[from] poll::PollFormatError),
    #[error("poll is invalid: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
}

impl ActivePoll {
    pub fn new(poll: Poll) -> Result<Self, ActivePollError> {
        let violations = poll::validate_poll(&poll);
        if !violations.is_empty() {
            return Err(ActivePollError::Invalid(violations));
        }
        let matrices = mechanism::build_matrices(&poll).expect("validated polls build");
        Ok(ActivePoll {
            document: poll::serialize_poll(&poll),
            index: LeafIndex::new(&poll),
            matrices,
            poll,
        })
    }

    pub fn parse(document: &str) -> Result<Self, ActivePollError> {
        Self::new(poll::parse_poll(document)?)
    }
}

#[derive(Debug)]
pub struct AppState {
    active: Option<ActivePoll>,
    log: RwLock<ResponseLog>,
    audit: Mutex<Vec<AuditEntry>>,
    reporting_beta: f64,
}

impl AppState {
    pub fn new(active: Option<ActivePoll>, log: ResponseLog, reporting_beta: f64) -> Arc<Self> {
        Arc::new(AppState {
            active,
            log: RwLock::new(log),
            audit: Mutex::new(Vec::new()),
            reporting_beta,
        })
    }

    pub fn active(&self) -> Option<&ActivePoll> {
        self.active.as_ref()
    }

    pub fn audit(&self) -> Vec<AuditEntry> {
        self.audit.lock().unwrap().clone()
    }

    pub fn snapshot(&self) -> Vec<ResponseRecord> {
        self.log.read().unwrap().records().to_vec()
    }

    /// Validates and appends one submission body.
    pub fn submit(&self, body: &[u8]) -> Result<(), SubmitError> {
        let active = self.active.as_ref().ok_or(SubmitError::NoPoll)?;
        let doc = protocol::parse_submission(body, &active.index).map_err(|err| {
            tracing::warn!(target: "audit", %err, "rejected submission");
            self.audit.lock().unwrap().push(AuditEntry {
                respondent_tag: String::new(),
                subtree: String::new(),
                reason: err.to_string(),
            });
            SubmitError::Invalid(err)
        })?;
        let received_at = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_millis() as u64);
        let mut log = self.log.write().unwrap();
        let record = ResponseRecord {
            respondent_tag: format!("r{}", log.len()),
            received_at,
            responses: doc.responses,
        };
        log.append(record).map_err(SubmitError::Io)
    }

    pub fn results(&self) -> Result<Option<ResultsDocument>, AggregatorError> {
        let Some(active) = &self.active else {
            return Ok(None);
        };
        let records = self.snapshot();
        let report = aggregator::report_with(&active.matrices, &records, self.reporting_beta)?;
        Ok(Some(ResultsDocument::new(&active.poll, report)))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SubmitError {
    #[error("no active poll")]
    NoPoll,
    #[error(transparent)]
    Invalid(protocol::SubmissionError),
    #[error("response log write failed: {0}")]
    Io(std::io::Error),
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/poll", get(get_poll))
        .route("/submit", post(post_submit))
        .route("/results", get(get_results))
        .route("/analyze", post(post_analyze))
        .with_state(state)
}

fn json_response(status: StatusCode, body: String) -> Response {
    (status, [(header::CONTENT_TYPE, "application/json")], body).into_response()
}

fn error_response(status: StatusCode, code: &str, message: String) -> Response {
    json_response(
        status,
        serde_json::json!({ "error": code, "message": message }).to_string(),
    )
}

async fn get_poll(State(state): State<Arc<AppState>>) -> Response {
    match state.active() {
        Some(active) => json_response(StatusCode::OK, active.document.clone()),
        None => error_response(StatusCode::NOT_FOUND, "NO_POLL", "no active poll".into()),
    }
}

async fn post_submit(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    match state.submit(&body) {
        Ok(()) => json_response(StatusCode::OK, ACK_BODY.to_owned()),
        Err(SubmitError::NoPoll) => error_response(StatusCode::NOT_FOUND, "NO_POLL", "no active poll".into()),
        Err(SubmitError::Invalid(err)) => {
            let code = serde_json::to_value(&err)
                .ok()
                .and_then(|v| v["code"].as_str().map(str::to_owned))
                .unwrap_or_default();
            error_response(StatusCode::BAD_REQUEST, &code, err.to_string())
        }
        Err(SubmitError::Io(err)) => {
            tracing::error!(%err, "response log append failed");
            error_response(StatusCode::INTERNAL_SERVER_ERROR, "STORAGE", "response not stored".into())
        }
    }
}

async fn get_results(State(state): State<Arc<AppState>>) -> Response {
    match state.results() {
        Ok(Some(doc)) => json_response(StatusCode::OK, serde_json::to_string(&doc).unwrap()),
        Ok(None) => error_response(StatusCode::NOT_FOUND, "NO_POLL", "no active poll".into()),
        Err(err) => error_response(StatusCode::INTERNAL_SERVER_ERROR, "ESTIMATOR", err.to_string()),
    }
}

async fn post_analyze(body: Bytes) -> Response {
    match analyze(&body) {
        Ok(doc) => json_response(StatusCode::OK, serde_json::to_string(&doc).unwrap()),
        Err(AnalyzeError::Request(message)) => error_response(StatusCode::BAD_REQUEST, "BAD_REQUEST", message),
        Err(AnalyzeError::Invalid(violations)) => json_response(
            StatusCode::UNPROCESSABLE_ENTITY,
            serde_json::json!({ "error": "INVALID_POLL", "violations": violations }).to_string(),
        ),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LeafAccuracyDoc {
    pub alpha: Option<f64>,
    pub beta: f64,
    pub n: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubtreeResults {
    pub id: String,
    pub labels: Vec<String>,
    pub paths: Vec<Vec<String>>,
    pub epsilon: f64,
    pub epsilon_exact_ratio: Option<Exact>,
    pub counts: Vec<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub raw: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub raw_exact: Option<Vec<Exact>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clamped: Option<Vec<f64>>,
    /// `posterior[b][a] = P(true = a | observed = b)`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub posterior: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<Vec<LeafAccuracyDoc>>,
}

/// Body of `GET /results`. Field names are frozen at schema 1.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultsDocument {
    pub schema: u32,
    pub title: String,
    pub responses: u64,
    pub beta: f64,
    pub epsilon: f64,
    pub epsilon_exact_ratio: Option<Exact>,
    pub subtrees: Vec<SubtreeResults>,
}

impl ResultsDocument {
    pub fn new(poll: &Poll, report: EstimateReport) -> Self {
        let subtrees = report
            .subtrees
            .into_iter()
            .map(|s| {
                let est = s.estimates;
                SubtreeResults {
                    id: s.id,
                    labels: s.labels,
                    paths: s.paths,
                    epsilon: s.epsilon.value,
                    epsilon_exact_ratio: s.epsilon.exact_ratio.map(Exact),
                    counts: s.counts,
                    raw: est.as_ref().map(|e| e.raw_approx.clone()),
                    raw_exact: est.as_ref().map(|e| e.raw.clone()),
                    clamped: est.as_ref().map(|e| e.clamped.clone()),
                    posterior: est.as_ref().map(|e| e.posterior.clone()),
                    accuracy: est.map(|e| {
                        e.accuracy
                            .into_iter()
                            .map(|a| LeafAccuracyDoc {
                                alpha: a.alpha,
                                beta: a.beta,
                                n: a.n,
                            })
                            .collect()
                    }),
                }
            })
            .collect();
        ResultsDocument {
            schema: SCHEMA_VERSION,
            title: poll.title.clone(),
            responses: report.responses,
            beta: report.beta,
            epsilon: report.poll_epsilon.value,
            epsilon_exact_ratio: report.poll_epsilon.exact_ratio.map(Exact),
            subtrees,
        }
    }
}

/// Two of `alpha`, `beta`, `n`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccuracyQuery {
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub n: Option<u64>,
}

/// Body of `POST /analyze`: `query` applies to every leaf unless `leaves`
/// overrides it for a key `"<subtree_id>:<answer_id>/<answer_id>..."`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeRequest {
    pub poll: serde_json::Value,
    #[serde(default)]
    pub query: Option<AccuracyQuery>,
    #[serde(default)]
    pub leaves: BTreeMap<String, AccuracyQuery>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LeafError {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LeafAnalysis {
    pub key: String,
    pub label: String,
    pub path: Vec<String>,
    pub t: Exact,
    pub r: Exact,
    pub truth_probability: Exact,
    pub error_rate: Exact,
    pub solved: Option<accuracy::Solved>,
    pub error: Option<LeafError>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubtreeAnalysis {
    pub id: String,
    pub epsilon: f64,
    pub epsilon_exact_ratio: Option<Exact>,
    pub leaves: Vec<LeafAnalysis>,
}

/// Body of a successful `POST /analyze`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisDocument {
    pub schema: u32,
    pub epsilon: f64,
    pub epsilon_exact_ratio: Option<Exact>,
    pub subtrees: Vec<SubtreeAnalysis>,
}

#[derive(Debug)]
pub enum AnalyzeError {
    Request(String),
    Invalid(Vec<Violation>),
}

pub fn leaf_key(subtree: &str, path: &[String]) -> String {
    format!("{subtree}:{}", path.join("/"))
}

pub fn analyze(body: &[u8]) -> Result<AnalysisDocument, AnalyzeError> {
    let request: AnalyzeRequest = serde_json::from_slice(body).map_err(|e| AnalyzeError::Request(e.to_string()))?;
    let poll = poll::parse_poll(&request.poll.to_string()).map_err(|e| AnalyzeError::Request(e.to_string()))?;
    let violations = poll::validate_poll(&poll);
    if !violations.is_empty() {
        return Err(AnalyzeError::Invalid(violations));
    }
    let mut total = mechanism::EpsilonValue::zero();
    let mut subtrees = Vec::new();
    for m in mechanism::build_matrices(&poll).expect("validated polls build") {
        let eps = mechanism::epsilon_of_matrix(&m).expect("valid matrices are positive");
        total = total + eps.clone();
        let leaves = m
            .leaves()
            .iter()
            .zip(m.masses())
            .map(|(leaf, mass)| {
                let key = leaf_key(m.subtree(), &leaf.path);
                let query = request.leaves.get(&key).copied().or(request.query);
                let (solved, error) = match query {
                    None => (None, None),
                    Some(q) => match Given::from_parts(q.alpha, q.beta, q.n) {
                        None => (
                            None,
                            Some(LeafError {
                                code: "NEED_TWO_PARAMETERS".into(),
                                message: "give exactly two of alpha, beta, n".into(),
                            }),
                        ),
                        Some(given) => match given.solve(eps.value) {
                            Ok(s) => (Some(s), None),
                            Err(e) => (
                                None,
                                Some(LeafError {
                                    code: e.code().into(),
                                    message: e.to_string(),
                                }),
                            ),
                        },
                    },
                };
                LeafAnalysis {
                    key,
                    label: leaf.label.clone(),
                    path: leaf.path.clone(),
                    t: mass.t.clone().into(),
                    r: mass.r.clone().into(),
                    truth_probability: mass.truth_probability().into(),
                    error_rate: mass.error_rate().into(),
                    solved,
                    error,
                }
            })
            .collect();
        subtrees.push(SubtreeAnalysis {
            id: m.subtree().to_owned(),
            epsilon: eps.value,
            epsilon_exact_ratio: eps.exact_ratio.map(Exact),
            leaves,
        });
    }
    Ok(AnalysisDocument {
        schema: SCHEMA_VERSION,
        epsilon: total.value,
        epsilon_exact_ratio: total.exact_ratio.map(Exact),
        subtrees,
    })
}

/// Parses a `"num/den"` or decimal beta for the command line.
pub fn parse_beta(text: &str) -> Result<f64, String> {
    let value = match rational::parse_rational(text) {
        Ok(r) => rational::to_f64(&r),
        Err(_) => text.parse::<f64>().map_err(|e| e.to_string())?,
    };
    if value > 0.0 && value < 1.0 {
        Ok(value)
    } else {
        Err(format!("beta {value} is outside (0,1)"))
    }
}
