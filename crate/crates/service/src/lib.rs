//! HTTP service over one immutable checkpoint.
//!
//! * `GET /api/health`: liveness, checkpoint hash and task.
//! * `GET /api/meta`: vocabulary, dimensions, variants, schedulers and
//!   defaults.
//! * `POST /api/sweep`: an α-sweep with images, ground-truth references,
//!   metrics and the effective config.
//!
//! Handlers never mutate shared state, so identical requests produce
//! identical response bytes.

pub mod image;
pub mod request;

use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;

use adaor_core::eval::{case_params, references};
use adaor_core::guidance::{Scheduler, Variant, DEFAULT_SCALE};
use adaor_core::metrics::{evaluate_sweep, text_direction_proxy, Embedding, EmbeddingKind, MetricsReport};
use adaor_core::model::DenoiserNet;
use adaor_core::sampler::{sweep, uniform_alphas, SamplerError};
use adaor_core::task::{Instruction, TaskKind};
use adaor_core::flow::DEFAULT_STEPS;
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;
use tower_http::cors::CorsLayer;

pub use request::{FieldError, SweepRequest};

/// Cases averaged into the instruction direction used by sweep metrics.
pub const DIRECTION_CASES: usize = 16;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("cannot read checkpoint {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error(transparent)]
    Model(#[from] adaor_core::model::ModelError),
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: SocketAddr, source: std::io::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Read-only state shared by all handlers.
pub struct AppState {
    pub net: DenoiserNet,
    /// SHA-256 of the checkpoint bytes, hex encoded.
    pub checkpoint_id: String,
}

impl AppState {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ServiceError> {
        let net = DenoiserNet::from_bytes(bytes)?;
        Ok(Self {
            net,
            checkpoint_id: hex::encode(Sha256::digest(bytes)),
        })
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, ServiceError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| ServiceError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    pub fn from_net(net: DenoiserNet) -> Self {
        let bytes = net.to_bytes();
        Self {
            net,
            checkpoint_id: hex::encode(Sha256::digest(&bytes)),
        }
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/meta", get(meta))
        .route("/api/sweep", post(sweep_handler))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

/// Binds `addr` and serves until Ctrl-C.
pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> Result<(), ServiceError> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|source| ServiceError::Bind { addr, source })?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

fn json_response(status: StatusCode, body: &impl Serialize) -> Response {
    let bytes = serde_json::to_vec(body).expect("response types serialize");
    (status, [(header::CONTENT_TYPE, "application/json")], bytes).into_response()
}

async fn health(State(state): State<Arc<AppState>>) -> Response {
    json_response(
        StatusCode::OK,
        &json!({
            "status": "ok",
            "checkpoint_id": state.checkpoint_id,
            "task": state.net.task().name(),
        }),
    )
}

fn edit_names(task: TaskKind) -> Vec<&'static str> {
    Instruction::edits().map(|i| task.token_name(i).expect("edit token")).collect()
}

async fn meta(State(state): State<Arc<AppState>>) -> Response {
    let task = state.net.task();
    let (width, height) = image::layout(task);
    json_response(
        StatusCode::OK,
        &json!({
            "task": task.name(),
            "dim": task.dim(),
            "image": { "width": width, "height": height },
            "instructions": edit_names(task),
            "variants": Variant::ALL.iter().map(|v| v.name()).collect::<Vec<_>>(),
            "schedulers": [Scheduler::Sqrt.name(), Scheduler::Linear.name()],
            "defaults": {
                "variant": Variant::Adaor.name(),
                "w": DEFAULT_SCALE,
                "scheduler": Scheduler::Sqrt.name(),
                "alphas": uniform_alphas(6),
                "steps": DEFAULT_STEPS,
                "seed": 0,
                "case_seed": 0,
            },
        }),
    )
}

#[derive(Debug, Serialize)]
pub struct Image {
    pub values: Vec<f64>,
    pub png: String,
}

#[derive(Debug, Serialize)]
pub struct Output {
    pub alpha: f64,
    #[serde(flatten)]
    pub image: Image,
    /// Largest guided-prediction norm along the trajectory.
    pub max_norm: f64,
}

#[derive(Debug, Serialize)]
pub struct Reference {
    pub alpha: f64,
    #[serde(flatten)]
    pub image: Image,
}

#[derive(Debug, Serialize)]
pub struct SweepResponse {
    pub config: SweepRequest,
    pub source: Image,
    pub outputs: Vec<Output>,
    pub references: Vec<Reference>,
    /// `None` when fewer than three strengths were requested.
    pub metrics: Option<MetricsReport>,
}

fn image_of(task: TaskKind, values: &[f64]) -> Image {
    let png = image::to_gray(task, values)
        .and_then(|g| g.to_png_base64())
        .expect("task-shaped samples encode");
    Image {
        values: values.to_vec(),
        png,
    }
}

#[derive(Debug)]
pub enum SweepFailure {
    Invalid(Vec<FieldError>),
    Diverged { step: usize, t: f64, variant: Variant, alpha: f64 },
    Internal(String),
}

/// Runs a validated request against the network.
pub fn run_sweep(net: &DenoiserNet, req: &SweepRequest) -> Result<SweepResponse, SweepFailure> {
    let task = net.task();
    let ins = task
        .instruction(&req.instruction)
        .map_err(|e| SweepFailure::Invalid(vec![FieldError::new("instruction", e.to_string())]))?;
    let case = case_params(task, req.case_seed, 0);
    let source = case.render();
    let s = match sweep(net, &source, ins, &req.sweep_config()) {
        Ok(s) => s,
        Err(SamplerError::Diverged { step, t, variant, alpha }) => {
            return Err(SweepFailure::Diverged { step, t, variant, alpha })
        }
        Err(e) => return Err(SweepFailure::Internal(e.to_string())),
    };
    let refs = references(&case, ins, &req.alphas).map_err(|e| SweepFailure::Internal(e.to_string()))?;
    let metrics = if s.outputs.len() >= 3 {
        let emb = Embedding::new(EmbeddingKind::RandProj, task.dim());
        let dir = text_direction_proxy(task, ins, &emb, DIRECTION_CASES, 0).map_err(|e| SweepFailure::Internal(e.to_string()))?;
        Some(evaluate_sweep(&s, task, &emb, &dir).map_err(|e| SweepFailure::Internal(e.to_string()))?)
    } else {
        None
    };
    Ok(SweepResponse {
        config: req.clone(),
        source: image_of(task, &source),
        outputs: s
            .alphas
            .iter()
            .zip(&s.outputs)
            .zip(&s.norm_traces)
            .map(|((&alpha, o), &max_norm)| Output {
                alpha,
                image: image_of(task, o),
                max_norm,
            })
            .collect(),
        references: req
            .alphas
            .iter()
            .zip(&refs)
            .map(|(&alpha, r)| Reference {
                alpha,
                image: image_of(task, r),
            })
            .collect(),
        metrics,
    })
}

fn failure_response(f: SweepFailure) -> Response {
    match f {
        SweepFailure::Invalid(fields) => json_response(
            StatusCode::BAD_REQUEST,
            &json!({ "error": "invalid request", "fields": fields }),
        ),
        SweepFailure::Diverged { step, t, variant, alpha } => json_response(
            StatusCode::UNPROCESSABLE_ENTITY,
            &json!({
                "error": "sampling diverged",
                "step": step,
                "t": t,
                "variant": variant.name(),
                "alpha": alpha,
            }),
        ),
        SweepFailure::Internal(msg) => json_response(StatusCode::INTERNAL_SERVER_ERROR, &json!({ "error": msg })),
    }
}

async fn sweep_handler(State(state): State<Arc<AppState>>, body: axum::body::Bytes) -> Response {
    let req = match SweepRequest::parse(&body, state.net.task()) {
        Ok(r) => r,
        Err(fields) => return failure_response(SweepFailure::Invalid(fields)),
    };
    let worker = Arc::clone(&state);
    let result = tokio::task::spawn_blocking(move || run_sweep(&worker.net, &req)).await;
    match result {
        Ok(Ok(resp)) => json_response(StatusCode::OK, &resp),
        Ok(Err(f)) => failure_response(f),
        Err(e) => failure_response(SweepFailure::Internal(e.to_string())),
    }
}
