//! Orchestrator service for the two-axis positioner: a run controller that
//! drives the scan plan against a backend and a source, checkpointing every
//! position, exposed over a JSON HTTP API.

pub mod api;
pub mod config;
pub mod controller;
pub mod error;

use std::sync::Arc;
use std::time::Duration;

use positioner_core::backend::{Backend, SimBackend};
use positioner_core::session::SessionStore;
use positioner_core::sources::SourceRegistry;

pub use config::ServiceConfig;
pub use controller::{
    Controller, ControllerOptions, CreateRunRequest, JogRequest, Phase, RunState,
};
pub use error::ServiceError;

/// Builds a controller with the simulated backend and the built-in sources.
pub fn build_controller(cfg: &ServiceConfig) -> Result<Controller, ServiceError> {
    let backend: Arc<dyn Backend> = Arc::new(SimBackend::new(cfg.backend_config(), cfg.axes));
    Controller::start(
        backend,
        SessionStore::new(&cfg.data_dir),
        Arc::new(SourceRegistry::with_builtins()),
        ControllerOptions {
            settle: Duration::from_millis(cfg.settle_ms),
        },
    )
}
