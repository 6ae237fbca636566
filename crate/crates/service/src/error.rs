use std::path::PathBuf;

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use prefbo_core::bench::BenchError;
use prefbo_core::boloop::BoError;
use prefbo_core::harness::HarnessError;
use prefbo_core::pbnn::PbnnError;
use serde::Serialize;
use thiserror::Error;

use crate::session::Phase;
use crate::SCHEMA_VERSION;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("unknown optimization run {0}")]
    UnknownRun(String),
    #[error("benchmark {name} has d = {dim}; sessions need a 2-D benchmark")]
    UnsupportedBenchmark { name: String, dim: usize },
    #[error("not available in the {phase} phase: {detail}")]
    Phase { phase: Phase, detail: String },
    #[error("pair {got} is not the outstanding question ({})", match outstanding {
        Some(k) => format!("pair {k} is"),
        None => "none is".to_string(),
    })]
    Conflict { got: usize, outstanding: Option<usize> },
    #[error("invalid request: {0}")]
    BadRequest(String),
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error(transparent)]
    Bo(#[from] BoError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Pbnn(#[from] PbnnError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("journal {}, line {line}: {detail}", path.display())]
    Journal { path: PathBuf, line: usize, detail: String },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("internal error: {0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, ServiceError>;

impl ServiceError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::UnknownSession(_) | Self::UnknownRun(_) => "not-found",
            Self::UnsupportedBenchmark { .. } => "unsupported-benchmark",
            Self::Phase { .. } => "phase",
            Self::Conflict { .. } => "conflict",
            Self::BadRequest(_) | Self::Bench(BenchError::Unknown(_)) => "bad-request",
            _ => "internal",
        }
    }

    pub fn status(&self) -> StatusCode {
        match self.code() {
            "not-found" => StatusCode::NOT_FOUND,
            "unsupported-benchmark" => StatusCode::UNPROCESSABLE_ENTITY,
            "phase" | "conflict" => StatusCode::CONFLICT,
            "bad-request" => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

/// Body of every error response.
#[derive(Debug, Serialize)]
pub struct ErrorBody {
    pub schema: u32,
    pub error: &'static str,
    pub message: String,
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        if self.status().is_server_error() {
            log::error!("{self}");
        }
        let body = ErrorBody {
            schema: SCHEMA_VERSION,
            error: self.code(),
            message: self.to_string(),
        };
        (self.status(), Json(body)).into_response()
    }
}
