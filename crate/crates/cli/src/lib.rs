//! Command line driver and HTTP session service for `recurdet`.

pub mod commands;
pub mod service;

pub use service::{router, serve, AppState, ServiceConfig};
