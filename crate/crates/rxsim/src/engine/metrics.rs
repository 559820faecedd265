//! Run results: CPU accounting, per-flow counters, path statistics and the
//! optional audit trail.

use std::collections::BTreeMap;

use crate::model::{Duration, FlowKey, Priority, Timestamp};

/// Execution path taken by one top-half ISR invocation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum IsrPath {
    Regular,
    Shortcircuit,
    Mitigating,
    PrioRaise,
    RecycleAndRaise,
}

impl IsrPath {
    pub const ALL: [IsrPath; 5] = [
        IsrPath::Regular,
        IsrPath::Shortcircuit,
        IsrPath::Mitigating,
        IsrPath::PrioRaise,
        IsrPath::RecycleAndRaise,
    ];

    pub fn label(self) -> &'static str {
        match self {
            IsrPath::Regular => "regular",
            IsrPath::Shortcircuit => "shortcircuit",
            IsrPath::Mitigating => "mitigating",
            IsrPath::PrioRaise => "prio-raise",
            IsrPath::RecycleAndRaise => "recycle-prio-raise",
        }
    }

    fn index(self) -> usize {
        match self {
            IsrPath::Regular => 0,
            IsrPath::Shortcircuit => 1,
            IsrPath::Mitigating => 2,
            IsrPath::PrioRaise => 3,
            IsrPath::RecycleAndRaise => 4,
        }
    }
}

/// Per-flow packet accounting over one run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlowMetrics {
    /// Frames offered by the workload, whether or not any CPU saw them.
    pub sent: u64,
    /// Frames the NIC dropped for lack of an armed ring buffer.
    pub nic_dropped: u64,
    /// Frames admitted into a flow queue.
    pub accepted: u64,
    /// Frames dropped by per-flow admission.
    pub declined_rate: u64,
    /// Frames dropped by the short-circuiting ISR branch.
    pub shortcircuited: u64,
    /// Queued frames whose buffer was revoked to refill the ring.
    pub revoked: u64,
    /// Frames fully processed by the network task (or baseline stack).
    pub processed: u64,
    /// Frames consumed by the flow's receiver task.
    pub delivered: u64,
}

/// Role of a task, for locating the measurement/network shares.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskRole {
    Network,
    Polling,
    BusyWorker,
    Measurement,
    Receiver,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskCpu {
    pub name: String,
    pub role: TaskRole,
    pub priority: Priority,
    pub cpu: Duration,
}

/// Entry of the audit trail (recorded only with auditing enabled).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AuditEvent {
    IsrServiced {
        time: Timestamp,
        path: IsrPath,
        flow: FlowKey,
        flow_priority: Priority,
        effective_before: Priority,
        effective_after: Priority,
    },
    NetworkStart {
        time: Timestamp,
        flow: FlowKey,
    },
    NetworkDone {
        time: Timestamp,
        flow: FlowKey,
        effective_after: Priority,
    },
    PollingEntered {
        time: Timestamp,
    },
    PollingExited {
        time: Timestamp,
    },
}

/// Audit trail plus admission timestamps for window checks.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AuditLog {
    pub events: Vec<AuditEvent>,
    pub admitted_at: BTreeMap<FlowKey, Vec<Timestamp>>,
}

/// All observable results of one simulation run.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsStore {
    pub elapsed: Duration,
    pub idle: Duration,
    pub isr_cpu: Duration,
    pub tasks: Vec<TaskCpu>,
    pub flows: BTreeMap<FlowKey, FlowMetrics>,
    /// Frames that failed header decoding and were dropped in the ISR.
    pub malformed_dropped: u64,
    /// Frames serviced by the ISR (they consumed ISR CPU).
    pub isr_handled: u64,
    /// Frames serviced by the polling task.
    pub polled_handled: u64,
    pub path_counts: [u64; 5],
    /// Per-path ISR durations, kept only when sample recording is on.
    pub path_samples: Option<BTreeMap<IsrPath, Vec<Duration>>>,
    pub polling_engaged: bool,
    pub polling_entries: u32,
    /// Polling intervals; an open interval means polling was still active at
    /// the end of the run.
    pub polling_intervals: Vec<(Timestamp, Option<Timestamp>)>,
    pub audit: Option<AuditLog>,
}

impl MetricsStore {
    pub(crate) fn new(record_samples: bool, audit: bool) -> MetricsStore {
        MetricsStore {
            elapsed: Duration::ZERO,
            idle: Duration::ZERO,
            isr_cpu: Duration::ZERO,
            tasks: Vec::new(),
            flows: BTreeMap::new(),
            malformed_dropped: 0,
            isr_handled: 0,
            polled_handled: 0,
            path_counts: [0; 5],
            path_samples: record_samples.then(BTreeMap::new),
            polling_engaged: false,
            polling_entries: 0,
            polling_intervals: Vec::new(),
            audit: audit.then(AuditLog::default),
        }
    }

    pub(crate) fn record_path(&mut self, path: IsrPath, cost: Duration) {
        self.path_counts[path.index()] += 1;
        if let Some(samples) = &mut self.path_samples {
            samples.entry(path).or_default().push(cost);
        }
    }

    pub fn path_count(&self, path: IsrPath) -> u64 {
        self.path_counts[path.index()]
    }

    pub fn flow(&self, flow: FlowKey) -> FlowMetrics {
        self.flows.get(&flow).copied().unwrap_or_default()
    }

    pub(crate) fn flow_mut(&mut self, flow: FlowKey) -> &mut FlowMetrics {
        self.flows.entry(flow).or_default()
    }

    /// CPU spent on packet work: ISR plus the network and polling tasks.
    pub fn networking_cpu(&self) -> Duration {
        let mut total = self.isr_cpu.nanos();
        for t in &self.tasks {
            if matches!(t.role, TaskRole::Network | TaskRole::Polling) {
                total += t.cpu.nanos();
            }
        }
        Duration(total)
    }

    /// Packets that consumed receive-path CPU.
    pub fn handled_packets(&self) -> u64 {
        self.isr_handled + self.polled_handled
    }

    /// Mean receive-path CPU per handled packet, in microseconds.
    pub fn avg_cost_per_handled_us(&self) -> Option<f64> {
        let handled = self.handled_packets();
        (handled > 0).then(|| self.networking_cpu().nanos() as f64 / 1_000.0 / handled as f64)
    }

    /// CPU utilization as the passive measurement task observes it: the share
    /// of time it did not get. Falls back to the busy fraction when no
    /// measurement task is configured.
    pub fn utilization(&self) -> f64 {
        let elapsed = self.elapsed.nanos().max(1) as f64;
        match self
            .tasks
            .iter()
            .find(|t| t.role == TaskRole::Measurement)
        {
            Some(m) => 1.0 - m.cpu.nanos() as f64 / elapsed,
            None => 1.0 - self.idle.nanos() as f64 / elapsed,
        }
    }

    /// CPU-time conservation: all contexts plus idle add up to the run length.
    pub fn cpu_conserved(&self) -> bool {
        let spent: u64 = self.idle.nanos()
            + self.isr_cpu.nanos()
            + self.tasks.iter().map(|t| t.cpu.nanos()).sum::<u64>();
        spent == self.elapsed.nanos()
    }
}
