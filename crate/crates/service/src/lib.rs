//! HTTP/JSON service and batch CLI for interactive attention introspection.
//!
//! The server holds one immutable model, corpus and feature store shared by
//! all requests, plus per-client [`session::Session`]s that remember the
//! current prune selection, aggregation kind, the latest forward and a few
//! snapshots for comparison. See [`api`] for the endpoint table.

pub mod api;
pub mod artifacts;
pub mod error;
pub mod session;
pub mod state;

pub use api::router;
pub use error::{ApiError, ApiResult};
pub use state::{AppState, ServiceConfig};
