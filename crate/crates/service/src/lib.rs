//! Local HTTP service for layered edit sessions.
//!
//! A session holds a base image and a [`LayerStack`](layered_core::compositor::LayerStack).
//! Every mutation bumps the session revision; clients pass the revision
//! they last saw in `If-Match` and get `409` when it is stale. Responses to
//! mutations carry SHA-256 digests of the flattened condition maps so a
//! client can tell whether its previews are current. Generation runs the
//! toy model from a checkpoint loaded at startup.
//!
//! The API is described in `openapi.yaml` next to this crate's manifest and
//! is also served at `/openapi.yaml`.

pub mod app;
pub mod error;
pub mod generate;
pub mod session;

pub use app::{router, serve, AppState, LoadedModel, ServiceConfig};
pub use error::{ApiError, ApiResult};
