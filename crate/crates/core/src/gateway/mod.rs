//! Service mode: live queries over HTTP with a human review queue.
//!
//! Human-terminal queries become escalations. Expert answers are stored as
//! feedback records and drive online threshold updates. State is durable
//! through an append-only event log in the data directory.

pub mod api;
pub mod log;
pub mod service;

pub use api::{router, serve, AppState};
pub use log::{Event, EventLog, LogError};
pub use service::{
    Escalation, EscalationPage, EscalationStatus, FeedbackResponse, Gateway, GatewayError,
    ServiceMetrics, SubmitRequest, SubmitResponse, ThresholdSnapshot,
};
