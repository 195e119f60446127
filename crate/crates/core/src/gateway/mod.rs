//! The gateway: the only component reachable from outside. Public
//! registration, admin review, confirmation, job upload/execute/download,
//! the cluster dashboard and admin fan-out.
//!
//! [`ClusterService`] holds the workflow logic; [`http`] binds it to routes.

mod config;
mod error;
pub mod http;
mod service;

pub use config::{ConfigError, GatewayConfig, DEFAULT_MAX_UPLOAD_BYTES};
pub use error::ApiError;
pub use http::{router, serve, ADMIN_HEADER};
pub use service::{
    AdminAppView, AppView, BlockEntry, BootError, ClusterService, ClusterSnapshot, ConfirmResponse,
    FanoutRequest, FanoutResponse, FanoutResult, JobView, NodeEntry, ReviewDecision,
    ReviewResponse, ServiceParts, SubmitResponse,
};
