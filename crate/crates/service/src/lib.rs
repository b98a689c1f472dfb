//! Session service, manual annotations and batch runs on top of `vsalient-core`.
//!
//! The [`http`] module exposes sessions over HTTP with a server-sent event
//! stream; [`session::Session`] is the transport-free state machine behind it
//! and can be driven directly in process.

pub mod annotation;
pub mod error;
pub mod http;
pub mod run;
pub mod session;

pub use error::ServiceError;
pub use http::{router, Service, ServiceConfig};
pub use session::{Command, ConstraintSource, Lifecycle, Session, SessionMessage};
