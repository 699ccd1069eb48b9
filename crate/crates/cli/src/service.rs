//! HTTP service over a registry of fitted models.
//!
//! Requests read an immutable snapshot of the registry, so a request sees
//! exactly one registry version. Fitting builds the new model outside any
//! lock and then publishes a fresh snapshot.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::{Arc, RwLock};
use std::time::Duration;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use intentgrasp_core::dataset::BUILTIN_NAMES;
use intentgrasp_core::persist::parse_dataset;
use intentgrasp_core::{builtin_spec, generate, load_dataset, DivergenceReport, LabeledSample, MultiTaskModel};
use serde::{Deserialize, Serialize};
use tokio::sync::Mutex;

use crate::error::CliError;
use crate::ops::{
    ambiguity_report, fit_dataset, intent_report, plan_report, resolve_layout, IntentReport, ModelSummary, PlanReport,
    PlanRequest,
};

pub const DEFAULT_LISTEN: &str = "127.0.0.1:8630";

/// Wall-clock limit for one planning request; the best pose found so far is
/// returned, flagged as non-converged.
pub const PLAN_TIME_LIMIT: Duration = Duration::from_secs(30);

/// A registered model and the samples it was fitted on. The samples seed
/// initial pose selection and substitute task populations.
#[derive(Debug)]
pub struct Entry {
    pub model: MultiTaskModel,
    pub samples: Vec<LabeledSample>,
}

#[derive(Debug, Default)]
pub struct Snapshot {
    pub version: u64,
    pub models: BTreeMap<String, Arc<Entry>>,
}

#[derive(Debug, Default)]
pub struct Registry {
    current: RwLock<Arc<Snapshot>>,
    publish: Mutex<()>,
}

#[derive(Debug, PartialEq, Eq)]
pub enum PublishError {
    Duplicate(String),
}

impl Registry {
    /// Generates and fits every built-in model.
    pub fn with_builtins() -> Result<Self, CliError> {
        let mut models = BTreeMap::new();
        for name in BUILTIN_NAMES {
            let spec = builtin_spec(name)?;
            let samples = generate(&spec)?;
            let model = intentgrasp_core::fit_model(
                &samples,
                &spec.layout,
                &spec.schema,
                &intentgrasp_core::FitConfig::default(),
            )?;
            models.insert(name.to_string(), Arc::new(Entry { model, samples }));
        }
        Ok(Self {
            current: RwLock::new(Arc::new(Snapshot { version: 1, models })),
            publish: Mutex::new(()),
        })
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.current.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    /// Adds a model under a new name and bumps the version.
    pub async fn publish(&self, name: &str, entry: Entry) -> Result<u64, PublishError> {
        let _guard = self.publish.lock().await;
        let old = self.snapshot();
        if old.models.contains_key(name) {
            return Err(PublishError::Duplicate(name.to_string()));
        }
        let mut models = old.models.clone();
        models.insert(name.to_string(), Arc::new(entry));
        let version = old.version + 1;
        *self.current.write().unwrap_or_else(|e| e.into_inner()) = Arc::new(Snapshot { version, models });
        Ok(version)
    }
}

/// JSON error body with an HTTP status.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn unknown_model(name: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("unknown model {name:?}"))
    }
}

impl From<CliError> for ApiError {
    fn from(e: CliError) -> Self {
        let status = match e {
            CliError::Validation(_) | CliError::Io(_) => StatusCode::UNPROCESSABLE_ENTITY,
            CliError::Mismatch(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        let status = match e {
            JsonRejection::JsonDataError(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ref other => other.status(),
        };
        Self::new(status, e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    /// Registry version; grows by one with every added model.
    pub version: u64,
    pub build: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentRequest {
    pub w: Vec<f64>,
    #[serde(default)]
    pub clarification_threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRequest {
    pub name: String,
    /// Dataset file contents.
    #[serde(default)]
    pub dataset: Option<String>,
    /// Dataset file on the server.
    #[serde(default)]
    pub dataset_path: Option<String>,
    /// Layout choice as accepted by `fit --layout`.
    #[serde(default = "dataset_layout")]
    pub layout: String,
}

fn dataset_layout() -> String {
    "dataset".into()
}

pub fn router(registry: Arc<Registry>) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/models", get(list_models))
        .route("/api/models/fit", post(fit))
        .route("/api/models/{name}/intent", post(intent))
        .route("/api/models/{name}/plan", post(plan))
        .route("/api/models/{name}/ambiguity", get(ambiguity))
        .with_state(registry)
}

pub async fn serve(listen: SocketAddr, registry: Arc<Registry>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(listen).await?;
    axum::serve(listener, router(registry)).await
}

fn lookup(snapshot: &Snapshot, name: &str) -> Result<Arc<Entry>, ApiError> {
    snapshot
        .models
        .get(name)
        .cloned()
        .ok_or_else(|| ApiError::unknown_model(name))
}

/// Runs CPU-bound work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, CliError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(ApiError::from)
}

async fn health(State(registry): State<Arc<Registry>>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        version: registry.snapshot().version,
        build: env!("CARGO_PKG_VERSION").into(),
    })
}

async fn list_models(State(registry): State<Arc<Registry>>) -> Json<Vec<ModelSummary>> {
    let snapshot = registry.snapshot();
    Json(
        snapshot
            .models
            .iter()
            .map(|(n, e)| ModelSummary::of(n, &e.model))
            .collect(),
    )
}

async fn intent(
    State(registry): State<Arc<Registry>>,
    UrlPath(name): UrlPath<String>,
    body: Result<Json<IntentRequest>, JsonRejection>,
) -> ApiResult<IntentReport> {
    let entry = lookup(&registry.snapshot(), &name)?;
    let Json(req) = body?;
    Ok(Json(intent_report(
        entry.model.layout(),
        &req.w,
        req.clarification_threshold,
    )?))
}

async fn plan(
    State(registry): State<Arc<Registry>>,
    UrlPath(name): UrlPath<String>,
    body: Result<Json<PlanRequest>, JsonRejection>,
) -> ApiResult<PlanReport> {
    let entry = lookup(&registry.snapshot(), &name)?;
    let Json(req) = body?;
    let report = blocking(move || plan_report(&entry.model, &entry.samples, &req, Some(PLAN_TIME_LIMIT))).await?;
    Ok(Json(report))
}

async fn ambiguity(
    State(registry): State<Arc<Registry>>,
    UrlPath(name): UrlPath<String>,
) -> ApiResult<DivergenceReport> {
    let entry = lookup(&registry.snapshot(), &name)?;
    Ok(Json(
        blocking(move || {
            let samples = (!entry.samples.is_empty()).then_some(entry.samples.as_slice());
            ambiguity_report(&entry.model, samples)
        })
        .await?,
    ))
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && name.len() <= 64
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

async fn fit(
    State(registry): State<Arc<Registry>>,
    body: Result<Json<FitRequest>, JsonRejection>,
) -> Result<(StatusCode, Json<ModelSummary>), ApiError> {
    let Json(req) = body?;
    let unprocessable = |m: String| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, m);
    if !valid_name(&req.name) {
        return Err(unprocessable(format!("invalid model name {:?}", req.name)));
    }
    let duplicate = |name: &str| ApiError::new(StatusCode::CONFLICT, format!("model {name:?} already exists"));
    if registry.snapshot().models.contains_key(&req.name) {
        return Err(duplicate(&req.name));
    }
    let FitRequest {
        name,
        dataset,
        dataset_path,
        layout,
    } = req;
    let entry = blocking(move || {
        let dataset = match (dataset, dataset_path) {
            (Some(text), None) => parse_dataset(&text, None)?,
            (None, Some(path)) => load_dataset(Path::new(&path), None)?,
            _ => return Err(CliError::validation("give exactly one of dataset and dataset_path")),
        };
        let layout = resolve_layout(&dataset.layout, &layout)?;
        let model = fit_dataset(&dataset, &layout)?;
        Ok(Entry {
            model,
            samples: dataset.samples,
        })
    })
    .await?;
    let summary = ModelSummary::of(&name, &entry.model);
    match registry.publish(&name, entry).await {
        Ok(_) => Ok((StatusCode::CREATED, Json(summary))),
        Err(PublishError::Duplicate(n)) => Err(duplicate(&n)),
    }
}
