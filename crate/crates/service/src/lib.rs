//! HTTP facade for interactive generation.
//!
//! Checkpoints listed in a registry directory are loaded once at startup and
//! shared read-only between requests. Masks and images travel as base64 PNG
//! inside JSON bodies. Sessions persist an append-only event log plus the
//! artifacts of every generation.

pub mod api;
pub mod registry;
pub mod sessions;

use std::path::PathBuf;
use std::sync::Arc;

pub use api::{router, AppState};
pub use registry::{ModelEntry, Registry, Stage};
pub use sessions::{Session, SessionEvent, SessionStore};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Internal(String),
}

impl ServiceError {
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::BadRequest(_) => "bad_request",
            ServiceError::NotFound(_) => "not_found",
            ServiceError::Conflict(_) => "conflict",
            ServiceError::Internal(_) => "internal",
        }
    }
}

impl From<priorpath::Error> for ServiceError {
    fn from(e: priorpath::Error) -> Self {
        match e {
            priorpath::Error::NotFound(m) => ServiceError::NotFound(m),
            e if e.is_validation() => ServiceError::BadRequest(e.to_string()),
            e => ServiceError::Internal(e.to_string()),
        }
    }
}

pub type ServiceResult<T> = Result<T, ServiceError>;

/// Startup options for [`serve`].
#[derive(Clone, Debug)]
pub struct ServeOptions {
    pub registry_dir: PathBuf,
    /// Defaults to `<registry>/sessions`.
    pub session_dir: Option<PathBuf>,
    pub host: String,
    pub port: u16,
}

/// Loads the registry and serves until the process is stopped.
pub async fn serve(opts: ServeOptions) -> ServiceResult<()> {
    let registry = Registry::open(&opts.registry_dir)?;
    let sessions = SessionStore::open(
        opts.session_dir
            .unwrap_or_else(|| opts.registry_dir.join("sessions")),
    )?;
    let state = AppState {
        registry: Arc::new(registry),
        sessions: Arc::new(sessions),
    };
    let addr = format!("{}:{}", opts.host, opts.port);
    let listener = tokio::net::TcpListener::bind(&addr)
        .await
        .map_err(|e| ServiceError::Internal(format!("bind {addr}: {e}")))?;
    log::info!("serving {} model(s) on {addr}", state.registry.list().len());
    axum::serve(listener, router(state))
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))
}
