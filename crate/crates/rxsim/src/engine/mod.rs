//! Deterministic discrete-event simulation of the receive path.

mod config;
mod metrics;
mod sim;

pub use config::{FlowConfig, GlobalLimit, SimConfig, TaskBehavior, TaskConfig};
pub use metrics::{
    AuditEvent, AuditLog, FlowMetrics, IsrPath, MetricsStore, TaskCpu, TaskRole,
};
pub use sim::StackVariant;

use thiserror::Error;

use crate::buffer_pool::PoolError;
use crate::flow_queues::FlowQueueError;
use crate::model::TimeError;
use crate::rate_limiter::RateLimitError;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    /// The configuration is invalid; the message names the offending field.
    #[error("config error: {0}")]
    Config(String),
    /// A runtime invariant failed while auditing was enabled.
    #[error("invariant violation: {0}")]
    Audit(String),
    /// Simulated time left the representable range.
    #[error(transparent)]
    Time(#[from] TimeError),
    /// A component rejected an engine-internal operation; simulator bug.
    #[error("internal engine fault: {0}")]
    Internal(String),
}

impl From<PoolError> for SimError {
    fn from(e: PoolError) -> Self {
        SimError::Internal(format!("buffer pool: {e}"))
    }
}

impl From<FlowQueueError> for SimError {
    fn from(e: FlowQueueError) -> Self {
        SimError::Internal(format!("flow queues: {e}"))
    }
}

impl From<RateLimitError> for SimError {
    fn from(e: RateLimitError) -> Self {
        SimError::Internal(format!("rate limiter: {e}"))
    }
}

/// Run the modified (early-demultiplexing) receive path.
pub fn run(config: &SimConfig) -> Result<MetricsStore, SimError> {
    sim::Sim::new(config, StackVariant::Modified)?.run()
}

/// Run the unmodified baseline stack under the same workload model.
pub fn run_baseline(config: &SimConfig) -> Result<MetricsStore, SimError> {
    sim::Sim::new(config, StackVariant::Baseline)?.run()
}
