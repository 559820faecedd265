//! Deterministic discrete-event simulator of a priority-aware embedded IP
//! receive path: early demultiplexing in the ISR, per-flow queues ordered by
//! priority, deferrable-server rate limits (per flow and overall, with a
//! polling fallback), priority-inherited protocol processing and BD-ring
//! buffer recycling — next to a baseline model of an unmodified stack for
//! comparison.

pub mod buffer_pool;
pub mod classifier;
pub mod engine;
pub mod flow_queues;
pub mod model;
pub mod rate_limiter;
pub mod workload;

pub use engine::{
    run, run_baseline, FlowConfig, GlobalLimit, IsrPath, MetricsStore, SimConfig, SimError,
    TaskBehavior, TaskConfig,
};
pub use model::{Capacity, CostModel, Duration, FlowKey, Packet, Priority, Timestamp};
