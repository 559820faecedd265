//! The deterministic discrete-event simulator.
//!
//! One CPU, three context kinds: ISR, task, idle. The ISR preempts every
//! task and is non-nestable, so pending frames queue inside the BD ring until
//! the ISR (or the polling task, once the global limit tripped) services
//! them. Tasks run under fixed-priority preemptive scheduling; only the
//! network task's priority is dynamic, tracking the highest priority among
//! queued and in-process packets.
//!
//! Determinism: all state transitions are driven by integer-nanosecond event
//! times with a fixed tie order (completions, then arrivals, then timers,
//! then dispatch), and same-instant arrivals keep workload order.

use std::collections::{BinaryHeap, VecDeque};

use crate::buffer_pool::BdRing;
use crate::classifier::{classify, SocketTable};
use crate::flow_queues::FlowQueueSet;
use crate::model::frame::{decode_headers, HeaderSummary};
use crate::model::{BufferId, Capacity, Duration, FlowKey, Packet, Priority, Timestamp};
use crate::rate_limiter::DeferrableServer;
use crate::workload::ArrivalTimes;

use super::config::{SimConfig, TaskBehavior};
use super::metrics::{AuditEvent, IsrPath, MetricsStore, TaskCpu, TaskRole};
use super::SimError;

/// Which receive-path design a run simulates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StackVariant {
    /// Early demultiplexing, flow queues, priority-inherited network task.
    Modified,
    /// Unmodified stack: full per-packet processing in interrupt context,
    /// with an optional overall rate limit and the same polling fallback.
    Baseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Ctx {
    Idle,
    Isr,
    Task(usize),
}

/// A DMA-completed frame occupying a ring buffer, awaiting service.
struct Pending {
    buffer: BufferId,
    source: usize,
    arrival: Timestamp,
}

struct InFlight {
    packet: Packet,
    remaining: Duration,
}

struct PollPass {
    frames: Vec<Pending>,
    remaining: Duration,
}

enum Work {
    Busy,
    Receiver {
        per_packet: Duration,
        flow: FlowKey,
        mailbox: u64,
        remaining: Option<Duration>,
    },
    Network {
        current: Option<InFlight>,
    },
    Polling {
        pass: Option<PollPass>,
    },
}

struct Task {
    name: String,
    base: Priority,
    role: TaskRole,
    work: Work,
    cpu: Duration,
}

/// Effects a completed baseline ISR applies.
struct BaselineFinish {
    buffer: BufferId,
    flow: FlowKey,
}

enum IsrStart {
    Started,
    SwitchedToPolling,
}

struct SourceInfo {
    flow: FlowKey,
    summary: Option<HeaderSummary>,
    payload_len: u16,
}

pub(crate) struct Sim<'a> {
    cfg: &'a SimConfig,
    variant: StackVariant,
    clock: Timestamp,
    horizon: Timestamp,

    ring: BdRing,
    pending: VecDeque<Pending>,
    fq: FlowQueueSet,
    global: Option<DeferrableServer>,
    polling: bool,
    poll_exit_candidate: bool,

    tasks: Vec<Task>,
    network_task: Option<usize>,
    receiver_of: Vec<(FlowKey, usize)>,
    net_eff: Priority,

    ctx: Ctx,
    isr_until: Timestamp,
    isr_finish: Option<BaselineFinish>,

    arrivals: std::iter::Peekable<ArrivalTimes>,
    sources: Vec<SourceInfo>,
    timers: BinaryHeap<std::cmp::Reverse<(u64, u64)>>,
    timer_seq: u64,

    metrics: MetricsStore,
}

impl<'a> Sim<'a> {
    pub(crate) fn new(cfg: &'a SimConfig, variant: StackVariant) -> Result<Sim<'a>, SimError> {
        cfg.validate().map_err(SimError::Config)?;

        let mut sockets = SocketTable::new(cfg.max_sockets);
        for (i, flow) in cfg.flows.iter().enumerate() {
            sockets
                .bind(
                    flow.protocol,
                    flow.local_port,
                    flow.priority,
                    flow.capacity,
                    flow.period,
                )
                .map_err(|e| SimError::Config(format!("flow.{i}: {e}")))?;
        }

        let mut fq = FlowQueueSet::new(cfg.max_priority);
        if variant == StackVariant::Modified {
            fq.register_flow(
                FlowKey::Background,
                Priority::BACKGROUND,
                Capacity::Unbounded,
                Duration::from_millis(1),
            )
            .expect("fresh queue set");
            fq.register_flow(
                FlowKey::ArpIcmp,
                cfg.arp_icmp_priority,
                cfg.arp_icmp_capacity,
                cfg.arp_icmp_period,
            )
            .expect("fresh queue set");
            for flow in &cfg.flows {
                fq.register_flow(flow.flow_key(), flow.priority, flow.capacity, flow.period)
                    .map_err(|e| SimError::Config(format!("flows: {e}")))?;
            }
        }

        // Per-source decode/classify, once; every arrival of a source shares
        // the same frame bytes.
        let mut sources = Vec::with_capacity(cfg.workload.items.len());
        for (i, item) in cfg.workload.items.iter().enumerate() {
            let frame = crate::model::frame::build_frame(&item.frame)
                .map_err(|e| SimError::Config(format!("workload.{i}: {e}")))?;
            let (flow, summary) = match decode_headers(&frame) {
                Ok(summary) => (classify(&summary, &sockets), Some(summary)),
                Err(_) => (FlowKey::Background, None),
            };
            sources.push(SourceInfo {
                flow,
                summary,
                payload_len: item.frame.payload_len,
            });
        }

        // The run seed perturbs stochastic traffic sources; deterministic
        // patterns are unaffected.
        let mut workload = cfg.workload.clone();
        if cfg.seed != 0 {
            for item in &mut workload.items {
                if let crate::workload::TrafficPattern::Poisson { seed, .. } = &mut item.pattern {
                    *seed = seed.wrapping_add(cfg.seed);
                }
            }
        }
        let arrivals = ArrivalTimes::new(&workload, cfg.duration)
            .map_err(|e| SimError::Config(format!("workload: {e}")))?
            .peekable();

        let global = match &cfg.global_limit {
            Some(limit) => Some(
                DeferrableServer::new(limit.capacity, limit.period)
                    .map_err(|e| SimError::Config(format!("global_limit: {e}")))?,
            ),
            None => None,
        };

        let mut tasks = Vec::new();
        let mut network_task = None;
        if variant == StackVariant::Modified {
            network_task = Some(tasks.len());
            tasks.push(Task {
                name: "network".into(),
                base: cfg.network_idle_floor,
                role: TaskRole::Network,
                work: Work::Network { current: None },
                cpu: Duration::ZERO,
            });
        }
        if global.is_some() {
            tasks.push(Task {
                name: "polling".into(),
                base: cfg.polling_priority.unwrap_or(cfg.network_idle_floor),
                role: TaskRole::Polling,
                work: Work::Polling { pass: None },
                cpu: Duration::ZERO,
            });
        }
        let mut receiver_of = Vec::new();
        for (i, spec) in cfg.tasks.iter().enumerate() {
            let (role, work) = match &spec.behavior {
                TaskBehavior::BusyWorker => (TaskRole::BusyWorker, Work::Busy),
                TaskBehavior::Measurement => (TaskRole::Measurement, Work::Busy),
                TaskBehavior::Receiver { flow, per_packet } => {
                    if receiver_of.iter().any(|(f, _)| f == flow) {
                        return Err(SimError::Config(format!(
                            "task.{i}.flow: flow {flow} already has a receiver"
                        )));
                    }
                    receiver_of.push((*flow, tasks.len()));
                    (
                        TaskRole::Receiver,
                        Work::Receiver {
                            per_packet: *per_packet,
                            flow: *flow,
                            mailbox: 0,
                            remaining: None,
                        },
                    )
                }
            };
            tasks.push(Task {
                name: spec.name.clone(),
                base: spec.priority,
                role,
                work,
                cpu: Duration::ZERO,
            });
        }

        Ok(Sim {
            cfg,
            variant,
            clock: Timestamp::ZERO,
            horizon: Timestamp(cfg.duration.nanos()),
            ring: BdRing::new(
                cfg.ring_capacity,
                cfg.recycle_threshold.0,
                cfg.recycle_threshold.1,
            ),
            pending: VecDeque::new(),
            fq,
            global,
            polling: false,
            poll_exit_candidate: false,
            tasks,
            network_task,
            receiver_of,
            net_eff: cfg.network_idle_floor,
            ctx: Ctx::Idle,
            isr_until: Timestamp::ZERO,
            isr_finish: None,
            arrivals,
            sources,
            timers: BinaryHeap::new(),
            timer_seq: 0,
            metrics: MetricsStore::new(cfg.record_path_latencies, cfg.audit),
        })
    }

    pub(crate) fn run(mut self) -> Result<MetricsStore, SimError> {
        self.dispatch()?;
        self.audit_check()?;
        loop {
            let target = self.next_wake();
            self.advance_to(target)?;
            if self.clock >= self.horizon {
                break;
            }
            self.handle_completion()?;
            self.handle_events()?;
            self.dispatch()?;
            self.audit_check()?;
        }
        self.finish()
    }

    // ---- time bookkeeping ----

    fn current_deadline(&self) -> Option<Timestamp> {
        match self.ctx {
            Ctx::Idle => None,
            Ctx::Isr => Some(self.isr_until),
            Ctx::Task(i) => {
                let remaining = match &self.tasks[i].work {
                    Work::Busy => None,
                    Work::Receiver { remaining, .. } => *remaining,
                    Work::Network { current } => current.as_ref().map(|c| c.remaining),
                    Work::Polling { pass } => pass.as_ref().map(|p| p.remaining),
                }?;
                Some(Timestamp(self.clock.nanos() + remaining.nanos()))
            }
        }
    }

    fn next_wake(&mut self) -> Timestamp {
        let mut t = self.horizon;
        if let Some((at, _)) = self.arrivals.peek() {
            t = t.min(*at);
        }
        if let Some(std::cmp::Reverse((at, _))) = self.timers.peek() {
            t = t.min(Timestamp(*at));
        }
        if let Some(deadline) = self.current_deadline() {
            t = t.min(deadline);
        }
        t.max(self.clock)
    }

    fn advance_to(&mut self, target: Timestamp) -> Result<(), SimError> {
        let dt = target.since(self.clock);
        if dt.nanos() > 0 {
            match self.ctx {
                Ctx::Idle => self.metrics.idle = self.metrics.idle.checked_add(dt)?,
                Ctx::Isr => self.metrics.isr_cpu = self.metrics.isr_cpu.checked_add(dt)?,
                Ctx::Task(i) => {
                    let task = &mut self.tasks[i];
                    task.cpu = task.cpu.checked_add(dt)?;
                    match &mut task.work {
                        Work::Busy => {}
                        Work::Receiver { remaining, .. } => {
                            if let Some(r) = remaining {
                                *r = r.saturating_sub(dt);
                            }
                        }
                        Work::Network { current } => {
                            if let Some(c) = current {
                                c.remaining = c.remaining.saturating_sub(dt);
                            }
                        }
                        Work::Polling { pass } => {
                            if let Some(p) = pass {
                                p.remaining = p.remaining.saturating_sub(dt);
                            }
                        }
                    }
                }
            }
            self.clock = target;
        }
        Ok(())
    }

    // ---- event handling ----

    fn handle_completion(&mut self) -> Result<(), SimError> {
        match self.ctx {
            Ctx::Isr if self.clock >= self.isr_until => {
                if let Some(finish) = self.isr_finish.take() {
                    self.ring.return_buffer(finish.buffer)?;
                    self.metrics.flow_mut(finish.flow).processed += 1;
                    self.deliver(finish.flow);
                }
                self.ctx = Ctx::Idle;
            }
            Ctx::Task(i) if self.current_deadline() == Some(self.clock) => {
                self.complete_task_work(i)?;
                self.ctx = Ctx::Idle;
            }
            _ => {}
        }
        Ok(())
    }

    fn complete_task_work(&mut self, i: usize) -> Result<(), SimError> {
        // Temporarily detach the work to sidestep aliasing with `self`.
        match &mut self.tasks[i].work {
            Work::Receiver {
                flow,
                mailbox,
                remaining,
                ..
            } => {
                let flow = *flow;
                *mailbox -= 1;
                *remaining = None;
                self.metrics.flow_mut(flow).delivered += 1;
            }
            Work::Network { current } => {
                let done = current.take().expect("network completion without work");
                let flow = done.packet.flow;
                if let Some(buffer) = done.packet.buffer {
                    self.ring.return_buffer(buffer)?;
                }
                self.metrics.flow_mut(flow).processed += 1;
                self.deliver(flow);
                // Priority is lowered right after each completed packet if
                // nothing queued or in process demands the current level.
                let expected = self.network_priority_formula();
                if expected < self.net_eff {
                    self.net_eff = expected;
                }
                if let Some(log) = self.metrics.audit.as_mut() {
                    log.events.push(AuditEvent::NetworkDone {
                        time: self.clock,
                        flow,
                        effective_after: self.net_eff,
                    });
                }
            }
            Work::Polling { pass } => {
                let pass = pass.take().expect("polling completion without a pass");
                for frame in pass.frames {
                    self.metrics.polled_handled += 1;
                    match self.variant {
                        StackVariant::Modified => {
                            self.service_frame_modified(frame)?;
                        }
                        StackVariant::Baseline => {
                            let flow = self.sources[frame.source].flow;
                            self.ring.return_buffer(frame.buffer)?;
                            self.metrics.flow_mut(flow).processed += 1;
                            self.deliver(flow);
                        }
                    }
                }
                self.maybe_exit_polling();
            }
            Work::Busy => unreachable!("busy work never completes"),
        }
        Ok(())
    }

    fn handle_events(&mut self) -> Result<(), SimError> {
        // Arrivals strictly before timer-driven replenishment checks.
        while let Some((at, _)) = self.arrivals.peek() {
            if *at > self.clock {
                break;
            }
            let (_, source) = self.arrivals.next().expect("peeked");
            self.on_arrival(source);
        }
        while let Some(std::cmp::Reverse((at, _))) = self.timers.peek() {
            if Timestamp(*at) > self.clock {
                break;
            }
            self.timers.pop();
            self.on_poll_boundary();
        }
        Ok(())
    }

    fn on_arrival(&mut self, source: usize) {
        let flow = self.sources[source].flow;
        self.metrics.flow_mut(flow).sent += 1;
        match self.ring.take_buffer() {
            Ok(buffer) => self.pending.push_back(Pending {
                buffer,
                source,
                arrival: self.clock,
            }),
            Err(_) => {
                // No armed descriptor: the NIC drops the frame, no CPU cost.
                self.metrics.flow_mut(flow).nic_dropped += 1;
            }
        }
    }

    fn on_poll_boundary(&mut self) {
        if !self.polling {
            return;
        }
        let now = self.clock;
        let saturated = self
            .global
            .as_mut()
            .map(|g| g.saturated_until_next_period(now))
            .unwrap_or(false);
        if self.pending.is_empty() && !saturated {
            self.exit_polling();
        } else {
            self.poll_exit_candidate = true;
            self.schedule_poll_boundary();
        }
    }

    fn schedule_poll_boundary(&mut self) {
        let period = self
            .global
            .as_ref()
            .expect("polling requires a global limit")
            .period()
            .nanos();
        let next = (self.clock.nanos() / period + 1) * period;
        self.timer_seq += 1;
        self.timers.push(std::cmp::Reverse((next, self.timer_seq)));
    }

    fn enter_polling(&mut self) {
        self.polling = true;
        self.poll_exit_candidate = false;
        self.metrics.polling_engaged = true;
        self.metrics.polling_entries += 1;
        self.metrics.polling_intervals.push((self.clock, None));
        if let Some(log) = self.metrics.audit.as_mut() {
            log.events.push(AuditEvent::PollingEntered { time: self.clock });
        }
        self.schedule_poll_boundary();
    }

    fn exit_polling(&mut self) {
        self.polling = false;
        if let Some(last) = self.metrics.polling_intervals.last_mut() {
            last.1 = Some(self.clock);
        }
        if let Some(log) = self.metrics.audit.as_mut() {
            log.events.push(AuditEvent::PollingExited { time: self.clock });
        }
    }

    fn maybe_exit_polling(&mut self) {
        if !self.polling || !self.poll_exit_candidate || !self.pending.is_empty() {
            return;
        }
        let now = self.clock;
        let saturated = self
            .global
            .as_mut()
            .map(|g| g.saturated_until_next_period(now))
            .unwrap_or(false);
        if !saturated {
            self.exit_polling();
        }
    }

    // ---- ISR ----

    fn try_start_isr(&mut self) -> Result<IsrStart, SimError> {
        debug_assert!(!self.polling && !self.pending.is_empty());
        if let Some(global) = &mut self.global {
            if !global.try_consume(self.clock, 1)? {
                // Budget exhausted: receive IRQs are disabled and the frame
                // stays in the ring for the polling task.
                self.enter_polling();
                return Ok(IsrStart::SwitchedToPolling);
            }
        }
        let frame = self.pending.pop_front().expect("pending frame");
        self.metrics.isr_handled += 1;
        let cost = match self.variant {
            StackVariant::Modified => {
                let audit_before = self.isr_audit_snapshot();
                let eff_before = self.net_eff;
                let outcome = self.service_frame_modified(frame)?;
                let mut cost = match outcome {
                    Some((path, _)) => self.path_cost(path),
                    None => self.cfg.cost.isr_shortcircuit,
                };
                if self.cfg.eager_cache {
                    cost = cost.checked_add(self.cfg.cost.isr_eager_cache_extra)?;
                }
                cost = cost.checked_add(self.cfg.instrumentation_overhead)?;
                if let Some((path, flow)) = outcome {
                    self.metrics.record_path(path, cost);
                    if let Some(log) = self.metrics.audit.as_mut() {
                        let flow_priority =
                            self.fq.priority_of(flow).unwrap_or(Priority::BACKGROUND);
                        log.events.push(AuditEvent::IsrServiced {
                            time: self.clock,
                            path,
                            flow,
                            flow_priority,
                            effective_before: eff_before,
                            effective_after: self.net_eff,
                        });
                    }
                }
                self.isr_audit_verify(audit_before)?;
                cost
            }
            StackVariant::Baseline => {
                let flow = self.sources[frame.source].flow;
                self.isr_finish = Some(BaselineFinish {
                    buffer: frame.buffer,
                    flow,
                });
                self.cfg
                    .cost
                    .baseline_full
                    .checked_add(self.cfg.instrumentation_overhead)?
            }
        };
        self.isr_until = self.clock.checked_add(cost)?;
        self.ctx = Ctx::Isr;
        Ok(IsrStart::Started)
    }

    fn path_cost(&self, path: IsrPath) -> Duration {
        match path {
            IsrPath::Regular => self.cfg.cost.isr_regular,
            IsrPath::Shortcircuit => self.cfg.cost.isr_shortcircuit,
            IsrPath::Mitigating => self.cfg.cost.isr_mitigating,
            IsrPath::PrioRaise => self.cfg.cost.isr_prio_raise,
            IsrPath::RecycleAndRaise => self.cfg.cost.isr_recycle_raise,
        }
    }

    /// Classify and place one frame, mirroring the top-half execution paths:
    /// (a) short-circuit drop of a lowest-priority packet while the ring is
    /// low, (b) per-flow admission drop, (c) revocation of a queued
    /// lowest-priority buffer to refill the ring. Returns the taken path, or
    /// `None` for an undecodable frame (dropped).
    fn service_frame_modified(
        &mut self,
        frame: Pending,
    ) -> Result<Option<(IsrPath, FlowKey)>, SimError> {
        let info = &self.sources[frame.source];
        let summary = match info.summary {
            Some(s) => s,
            None => {
                self.ring.return_buffer(frame.buffer)?;
                self.metrics.malformed_dropped += 1;
                return Ok(None);
            }
        };
        let flow = info.flow;
        let payload_len = info.payload_len;
        let priority = self
            .fq
            .priority_of(flow)
            .expect("classified flows are registered");

        // (a) short-circuit: recycle the incoming packet itself.
        if self.cfg.shortcircuit_enabled
            && !self.cfg.eager_cache
            && self.ring.needs_recycle()
            && self
                .fq
                .lowest_enqueued_priority()
                .is_some_and(|lowest| priority <= lowest)
        {
            self.ring.return_buffer(frame.buffer)?;
            self.fq.note_shortcircuit(flow);
            return Ok(Some((IsrPath::Shortcircuit, flow)));
        }

        // (b) per-flow admission.
        if !self.fq.try_admit(flow, self.clock)? {
            self.ring.return_buffer(frame.buffer)?;
            return Ok(Some((IsrPath::Mitigating, flow)));
        }
        if let Some(log) = self.metrics.audit.as_mut() {
            log.admitted_at.entry(flow).or_default().push(self.clock);
        }

        // (c) revoke a queued lowest-priority buffer to refill the ring.
        let mut recycled = false;
        if !self.cfg.eager_cache && self.ring.needs_recycle() {
            if let Some(victim) = self.fq.revoke_lowest() {
                if let Some(buffer) = victim.buffer {
                    self.ring.return_buffer(buffer)?;
                }
                recycled = true;
            }
        }

        let mut packet = Packet {
            buffer: Some(frame.buffer),
            flow,
            arrival: frame.arrival,
            payload_len,
            summary,
        };
        if self.cfg.eager_cache {
            // Coherency established and a fresh buffer prepared right here:
            // the queued packet no longer pins a ring buffer.
            self.ring.return_buffer(frame.buffer)?;
            packet.buffer = None;
        }
        self.fq.insert_admitted(packet)?;

        // Elevate the network task only when the new packet outranks it.
        let raised = priority > self.net_eff;
        if raised {
            self.net_eff = priority;
        }
        let path = match (recycled, raised) {
            (true, true) => IsrPath::RecycleAndRaise,
            (false, true) => IsrPath::PrioRaise,
            // A revocation without a raise swaps one buffer for another at
            // no extra modeled cost.
            (true, false) | (false, false) => IsrPath::Regular,
        };
        Ok(Some((path, flow)))
    }

    // ---- dispatch ----

    fn effective(&self, i: usize) -> Priority {
        if Some(i) == self.network_task {
            self.net_eff
        } else {
            self.tasks[i].base
        }
    }

    fn ready(&mut self, i: usize) -> bool {
        match &self.tasks[i].work {
            Work::Busy => true,
            Work::Receiver {
                mailbox, remaining, ..
            } => remaining.is_some() || *mailbox > 0,
            Work::Network { current } => current.is_some() || self.fq.total_queued() > 0,
            Work::Polling { pass } => {
                if pass.is_some() {
                    return true;
                }
                if !self.polling || self.pending.is_empty() {
                    return false;
                }
                let now = self.clock;
                self.global
                    .as_mut()
                    .map(|g| g.remaining_at(now) > 0)
                    .unwrap_or(false)
            }
        }
    }

    fn dispatch(&mut self) -> Result<(), SimError> {
        loop {
            if self.ctx == Ctx::Isr {
                if self.clock < self.isr_until {
                    return Ok(());
                }
                self.ctx = Ctx::Idle;
            }
            if !self.polling && !self.pending.is_empty() {
                match self.try_start_isr()? {
                    IsrStart::Started => return Ok(()),
                    IsrStart::SwitchedToPolling => continue,
                }
            }

            let mut best: Option<usize> = None;
            for i in 0..self.tasks.len() {
                if self.ready(i)
                    && best.is_none_or(|b| self.effective(i) > self.effective(b))
                {
                    best = Some(i);
                }
            }
            // The running task keeps the CPU on priority ties.
            if let Ctx::Task(cur) = self.ctx {
                if self.ready(cur)
                    && best.is_none_or(|b| self.effective(cur) >= self.effective(b))
                {
                    best = Some(cur);
                }
            }
            let Some(next) = best else {
                self.ctx = Ctx::Idle;
                return Ok(());
            };
            if self.plan_work(next)? {
                self.ctx = Ctx::Task(next);
                return Ok(());
            }
            // Zero-cost work completed instantly; re-evaluate.
            self.ctx = Ctx::Idle;
        }
    }

    /// Make sure the task has a concrete work segment. Returns false if the
    /// task consumed its (zero-cost) work on the spot and is no longer
    /// runnable.
    fn plan_work(&mut self, i: usize) -> Result<bool, SimError> {
        match &mut self.tasks[i].work {
            Work::Busy => Ok(true),
            Work::Receiver {
                per_packet,
                flow,
                mailbox,
                remaining,
            } => {
                if remaining.is_some() {
                    return Ok(true);
                }
                if per_packet.nanos() == 0 {
                    // Counting alone: consume the whole mailbox instantly.
                    let n = *mailbox;
                    let flow = *flow;
                    *mailbox = 0;
                    self.metrics.flow_mut(flow).delivered += n;
                    return Ok(false);
                }
                *remaining = Some(*per_packet);
                Ok(true)
            }
            Work::Network { current } => {
                if current.is_some() {
                    return Ok(true);
                }
                let packet = self
                    .fq
                    .dequeue_highest()
                    .expect("network task dispatched with empty queues");
                if let Some(log) = self.metrics.audit.as_mut() {
                    log.events.push(AuditEvent::NetworkStart {
                        time: self.clock,
                        flow: packet.flow,
                    });
                }
                let proto = self.cfg.cost.proto_processing;
                self.tasks[i].work = Work::Network {
                    current: Some(InFlight {
                        packet,
                        remaining: proto,
                    }),
                };
                Ok(true)
            }
            Work::Polling { pass } => {
                if pass.is_some() {
                    return Ok(true);
                }
                let now = self.clock;
                let global = self.global.as_mut().expect("polling without global limit");
                let budget = global.remaining_at(now);
                let k = (self.cfg.poll_batch as u64)
                    .min(self.pending.len() as u64)
                    .min(budget);
                debug_assert!(k > 0, "polling task dispatched without budget or frames");
                for _ in 0..k {
                    let granted = global.try_consume(now, 1)?;
                    debug_assert!(granted);
                }
                if global.saturated_until_next_period(now) {
                    // Capacity was reached immediately in this period.
                    self.poll_exit_candidate = false;
                }
                let frames: Vec<Pending> = self.pending.drain(..k as usize).collect();
                let per_packet = match self.variant {
                    StackVariant::Modified => self.cfg.cost.poll_batch_per_packet,
                    // Retrieval is batched; full protocol processing remains.
                    StackVariant::Baseline => Duration(
                        self.cfg.cost.poll_batch_per_packet.nanos()
                            + self
                                .cfg
                                .cost
                                .baseline_full
                                .saturating_sub(self.cfg.cost.isr_regular)
                                .nanos(),
                    ),
                };
                let cost = Duration(
                    self.cfg.cost.poll_fixed_overhead.nanos() + k * per_packet.nanos(),
                );
                self.tasks[i].work = Work::Polling {
                    pass: Some(PollPass {
                        frames,
                        remaining: cost,
                    }),
                };
                Ok(true)
            }
        }
    }

    fn deliver(&mut self, flow: FlowKey) {
        if let Some(&(_, idx)) = self.receiver_of.iter().find(|(f, _)| *f == flow) {
            if let Work::Receiver { mailbox, .. } = &mut self.tasks[idx].work {
                *mailbox += 1;
            }
        }
    }

    // ---- auditing ----

    /// Demanded network-task priority: the maximum over every nonempty flow
    /// queue and the packet in process. The idle floor is the task's base
    /// priority; inheritance only ever elevates above it.
    fn network_priority_formula(&self) -> Priority {
        let mut p = self.cfg.network_idle_floor;
        if let Some(queued) = self.fq.highest_enqueued_priority() {
            p = p.max(queued);
        }
        if let Some(idx) = self.network_task {
            if let Work::Network {
                current: Some(inflight),
            } = &self.tasks[idx].work
            {
                let proc = self
                    .fq
                    .priority_of(inflight.packet.flow)
                    .unwrap_or(Priority::BACKGROUND);
                p = p.max(proc);
            }
        }
        p
    }

    fn isr_audit_snapshot(&self) -> Option<(u32, bool)> {
        if !self.cfg.audit {
            return None;
        }
        let one_recycle_due = !self.cfg.eager_cache
            && self.ring.needs_recycle()
            && self.fq.lowest_enqueued_priority().is_some();
        Some((self.ring.free_in_ring(), one_recycle_due))
    }

    fn isr_audit_verify(&self, snapshot: Option<(u32, bool)>) -> Result<(), SimError> {
        let Some((free_before, one_recycle_due)) = snapshot else {
            return Ok(());
        };
        if one_recycle_due && self.ring.free_in_ring() != free_before + 1 {
            return Err(SimError::Audit(format!(
                "ISR at {} entered below the recycle threshold with revocable \
                 packets but did not reclaim exactly one buffer",
                self.clock
            )));
        }
        Ok(())
    }

    fn audit_check(&mut self) -> Result<(), SimError> {
        if !self.cfg.audit {
            return Ok(());
        }
        if self.variant == StackVariant::Modified {
            let expected = self.network_priority_formula();
            if expected != self.net_eff {
                return Err(SimError::Audit(format!(
                    "network task priority {} diverges from formula value {} at {}",
                    self.net_eff, expected, self.clock
                )));
            }
            if !self.fq.check_consistency() {
                return Err(SimError::Audit(format!(
                    "flow queue occupancy summary inconsistent at {}",
                    self.clock
                )));
            }
        }
        if !self.ring.conserved() {
            return Err(SimError::Audit(format!(
                "buffer pool lost conservation at {}",
                self.clock
            )));
        }
        let spent = self.metrics.idle.nanos()
            + self.metrics.isr_cpu.nanos()
            + self.tasks.iter().map(|t| t.cpu.nanos()).sum::<u64>();
        if spent != self.clock.nanos() {
            return Err(SimError::Audit(format!(
                "CPU time not conserved at {}: accounted {} ns",
                self.clock, spent
            )));
        }
        Ok(())
    }

    fn finish(mut self) -> Result<MetricsStore, SimError> {
        self.metrics.elapsed = Duration(self.horizon.nanos());
        for task in &self.tasks {
            self.metrics.tasks.push(TaskCpu {
                name: task.name.clone(),
                role: task.role,
                priority: task.base,
                cpu: task.cpu,
            });
        }
        let mut keys = vec![FlowKey::Background, FlowKey::ArpIcmp];
        keys.extend(self.cfg.flows.iter().map(|f| f.flow_key()));
        for flow in keys {
            let counters = self.fq.counters(flow).unwrap_or_default();
            let m = self.metrics.flow_mut(flow);
            m.accepted = counters.accepted;
            m.declined_rate = counters.declined_rate;
            m.revoked = counters.revoked;
            m.shortcircuited = counters.shortcircuited;
        }
        debug_assert!(self.metrics.cpu_conserved());
        Ok(self.metrics)
    }
}
