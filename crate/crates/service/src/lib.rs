//! HTTP service and command-line front end for the revision engine.
//!
//! The same view types back both the `/v1` JSON API and the CLI's `--json`
//! output, so the two surfaces report identical fields.

pub mod cli;
pub mod config;
pub mod http;
pub mod views;

pub use cli::run;
pub use config::{BackendMode, ServiceConfig};
pub use http::{router, AppState};
