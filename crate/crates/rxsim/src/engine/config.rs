//! Simulation configuration.

use crate::classifier::L4Protocol;
use crate::model::{Capacity, CostModel, Duration, FlowKey, Priority, DEFAULT_MAX_PRIORITY};
use crate::workload::WorkloadSpec;

/// A socket binding and the flow it defines.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowConfig {
    pub protocol: L4Protocol,
    pub local_port: u16,
    pub priority: Priority,
    pub capacity: Capacity,
    pub period: Duration,
}

impl FlowConfig {
    pub fn flow_key(&self) -> FlowKey {
        match self.protocol {
            L4Protocol::Udp => FlowKey::Udp(self.local_port),
            L4Protocol::Tcp => FlowKey::Tcp(self.local_port),
        }
    }
}

/// What a configured task does when it runs.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskBehavior {
    /// CPU hog; never blocks.
    BusyWorker,
    /// CPU hog whose share is reported as the passive load measurement.
    Measurement,
    /// Consumes delivered packets of one flow at a fixed per-packet cost.
    Receiver {
        flow: FlowKey,
        per_packet: Duration,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskConfig {
    pub name: String,
    pub priority: Priority,
    pub behavior: TaskBehavior,
}

/// Overall receive limit: at most `capacity` packets handled per `period`
/// before the path falls back to polling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GlobalLimit {
    pub capacity: u64,
    pub period: Duration,
}

/// Complete description of one simulation run.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub duration: Duration,
    pub cost: CostModel,
    pub ring_capacity: u32,
    /// Recycle threshold as a rational `num/den` of the ring capacity.
    pub recycle_threshold: (u32, u32),
    pub max_priority: Priority,
    /// Priority the network task falls back to with nothing to process.
    pub network_idle_floor: Priority,
    pub arp_icmp_priority: Priority,
    pub arp_icmp_capacity: Capacity,
    pub arp_icmp_period: Duration,
    /// Priority of the polling fallback task; defaults to the idle floor.
    pub polling_priority: Option<Priority>,
    pub poll_batch: u32,
    pub global_limit: Option<GlobalLimit>,
    pub flows: Vec<FlowConfig>,
    pub tasks: Vec<TaskConfig>,
    pub workload: WorkloadSpec,
    /// Disable the short-circuiting ISR branch (drops become recycles).
    pub shortcircuit_enabled: bool,
    /// Establish cache coherency eagerly in the ISR instead of deferring it;
    /// buffers are replaced immediately and recycling never engages.
    pub eager_cache: bool,
    /// Extra cost charged per ISR execution to model active instrumentation.
    pub instrumentation_overhead: Duration,
    /// Keep every per-path ISR duration sample (memory heavy).
    pub record_path_latencies: bool,
    /// Check structural invariants after every step and record an event log.
    pub audit: bool,
    pub max_sockets: usize,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            duration: Duration::from_secs(1),
            cost: CostModel::default(),
            ring_capacity: 64,
            recycle_threshold: (1, 2),
            max_priority: Priority(DEFAULT_MAX_PRIORITY),
            network_idle_floor: Priority(1),
            arp_icmp_priority: Priority(1),
            arp_icmp_capacity: Capacity::Unbounded,
            arp_icmp_period: Duration::from_millis(1),
            polling_priority: None,
            poll_batch: 32,
            global_limit: None,
            flows: Vec::new(),
            tasks: Vec::new(),
            workload: WorkloadSpec::default(),
            shortcircuit_enabled: true,
            eager_cache: false,
            instrumentation_overhead: Duration::ZERO,
            record_path_latencies: false,
            audit: false,
            max_sockets: crate::classifier::DEFAULT_MAX_SOCKETS,
            seed: 0,
        }
    }
}

impl SimConfig {
    /// Field-level validation; the returned messages name the offending field.
    pub fn validate(&self) -> Result<(), String> {
        if self.duration.nanos() == 0 {
            return Err("duration: must be positive".into());
        }
        self.cost.validate().map_err(|e| format!("cost: {e}"))?;
        if self.ring_capacity == 0 {
            return Err("ring_capacity: must be at least 1".into());
        }
        let (num, den) = self.recycle_threshold;
        if den == 0 {
            return Err("recycle_threshold: denominator must be nonzero".into());
        }
        if num > den {
            return Err("recycle_threshold: fraction must not exceed 1".into());
        }
        if self.max_priority.level() > crate::model::PRIORITY_LEVEL_LIMIT {
            return Err(format!(
                "max_priority: must not exceed {}",
                crate::model::PRIORITY_LEVEL_LIMIT
            ));
        }
        let check_prio = |name: &str, p: Priority| -> Result<(), String> {
            if p > self.max_priority {
                Err(format!(
                    "{name}: priority {p} exceeds max_priority {}",
                    self.max_priority
                ))
            } else {
                Ok(())
            }
        };
        check_prio("network_idle_floor", self.network_idle_floor)?;
        check_prio("arp_icmp_priority", self.arp_icmp_priority)?;
        if let Some(p) = self.polling_priority {
            check_prio("polling_priority", p)?;
        }
        if self.poll_batch == 0 {
            return Err("poll_batch: must be at least 1".into());
        }
        if let Some(limit) = &self.global_limit {
            if limit.capacity == 0 {
                return Err("global_limit.capacity: must be at least 1".into());
            }
            if limit.period.nanos() == 0 {
                return Err("global_limit.period: must be positive".into());
            }
        }
        if self.flows.len() > self.max_sockets {
            return Err(format!(
                "flows: {} bindings exceed max_sockets {}",
                self.flows.len(),
                self.max_sockets
            ));
        }
        for (i, flow) in self.flows.iter().enumerate() {
            check_prio(&format!("flow.{i}.priority"), flow.priority)?;
            if let Capacity::PerPeriod(_) = flow.capacity {
                if flow.period.nanos() == 0 {
                    return Err(format!("flow.{i}.period: must be positive"));
                }
            }
            if self
                .flows
                .iter()
                .take(i)
                .any(|f| f.protocol == flow.protocol && f.local_port == flow.local_port)
            {
                return Err(format!("flow.{i}: duplicate binding of the same port"));
            }
        }
        let mut measurements = 0;
        for (i, task) in self.tasks.iter().enumerate() {
            check_prio(&format!("task.{i}.priority"), task.priority)?;
            match &task.behavior {
                TaskBehavior::Measurement => measurements += 1,
                TaskBehavior::Receiver { flow, .. } => {
                    let known = match flow {
                        FlowKey::ArpIcmp | FlowKey::Background => true,
                        _ => self.flows.iter().any(|f| f.flow_key() == *flow),
                    };
                    if !known {
                        return Err(format!("task.{i}.flow: {flow} is not a configured flow"));
                    }
                }
                TaskBehavior::BusyWorker => {}
            }
        }
        if measurements > 1 {
            return Err("tasks: at most one measurement task is supported".into());
        }
        Ok(())
    }
}
