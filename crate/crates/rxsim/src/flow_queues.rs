//! Differentiated flow queues: one FIFO per registered flow, organized by the
//! flow's priority with constant-time access to both the highest- and the
//! lowest-priority nonempty queue.
//!
//! Occupancy is summarized in a per-level bitmap (one bit per priority
//! level), so locating the extremes is a single leading/trailing-zeros
//! operation. Flows sharing a level are served round-robin. Admission runs
//! through a per-flow deferrable server and is charged when a packet is
//! admitted; revoked packets are not refunded.

use std::collections::{BTreeMap, VecDeque};

use thiserror::Error;

use crate::model::{Capacity, Duration, FlowKey, Packet, Priority, Timestamp};
use crate::rate_limiter::{DeferrableServer, RateLimitError};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FlowQueueError {
    #[error("flow {0} is already registered")]
    DuplicateFlow(FlowKey),
    #[error("flow {0} is not registered")]
    UnknownFlow(FlowKey),
    #[error(transparent)]
    RateLimit(#[from] RateLimitError),
}

/// Outcome of offering a packet to its flow queue.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnqueueOutcome {
    Accepted,
    DeclinedRateLimit,
}

/// Per-flow bookkeeping counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlowCounters {
    pub accepted: u64,
    pub declined_rate: u64,
    pub revoked: u64,
    pub shortcircuited: u64,
}

#[derive(Debug)]
struct FlowState {
    priority: Priority,
    server: Option<DeferrableServer>,
    queue: VecDeque<Packet>,
    counters: FlowCounters,
}

/// Priority-indexed set of per-flow FIFO queues.
#[derive(Debug)]
pub struct FlowQueueSet {
    flows: BTreeMap<FlowKey, FlowState>,
    /// Round-robin service order of the nonempty flows at each level.
    levels: Vec<VecDeque<FlowKey>>,
    /// Bit `i` set iff some flow at priority `i` holds packets.
    occupancy: u64,
    total_queued: usize,
}

impl FlowQueueSet {
    pub fn new(max_priority: Priority) -> FlowQueueSet {
        assert!(
            max_priority.level() <= crate::model::PRIORITY_LEVEL_LIMIT,
            "priority space exceeds bitmap width"
        );
        FlowQueueSet {
            flows: BTreeMap::new(),
            levels: (0..=max_priority.level()).map(|_| VecDeque::new()).collect(),
            occupancy: 0,
            total_queued: 0,
        }
    }

    /// Register a flow with an empty queue and a full admission budget.
    pub fn register_flow(
        &mut self,
        flow: FlowKey,
        priority: Priority,
        capacity: Capacity,
        period: Duration,
    ) -> Result<(), FlowQueueError> {
        assert!(
            (priority.level() as usize) < self.levels.len(),
            "flow priority outside the configured level space"
        );
        if self.flows.contains_key(&flow) {
            return Err(FlowQueueError::DuplicateFlow(flow));
        }
        let server = match capacity {
            Capacity::Unbounded => None,
            Capacity::PerPeriod(units) => Some(DeferrableServer::new(units, period)?),
        };
        self.flows.insert(
            flow,
            FlowState {
                priority,
                server,
                queue: VecDeque::new(),
                counters: FlowCounters::default(),
            },
        );
        Ok(())
    }

    pub fn is_registered(&self, flow: FlowKey) -> bool {
        self.flows.contains_key(&flow)
    }

    pub fn priority_of(&self, flow: FlowKey) -> Option<Priority> {
        self.flows.get(&flow).map(|f| f.priority)
    }

    pub fn counters(&self, flow: FlowKey) -> Option<FlowCounters> {
        self.flows.get(&flow).map(|f| f.counters)
    }

    pub fn total_queued(&self) -> usize {
        self.total_queued
    }

    pub fn queue_len(&self, flow: FlowKey) -> Option<usize> {
        self.flows.get(&flow).map(|f| f.queue.len())
    }

    /// Ask the flow's server for one admission unit without inserting.
    pub fn try_admit(&mut self, flow: FlowKey, now: Timestamp) -> Result<bool, FlowQueueError> {
        let state = self
            .flows
            .get_mut(&flow)
            .ok_or(FlowQueueError::UnknownFlow(flow))?;
        let granted = match &mut state.server {
            None => true,
            Some(server) => server.try_consume(now, 1)?,
        };
        if !granted {
            state.counters.declined_rate += 1;
        }
        Ok(granted)
    }

    /// Append an already-admitted packet to its flow queue.
    pub fn insert_admitted(&mut self, packet: Packet) -> Result<(), FlowQueueError> {
        let flow = packet.flow;
        let state = self
            .flows
            .get_mut(&flow)
            .ok_or(FlowQueueError::UnknownFlow(flow))?;
        let was_empty = state.queue.is_empty();
        state.queue.push_back(packet);
        state.counters.accepted += 1;
        self.total_queued += 1;
        if was_empty {
            let level = state.priority.level();
            self.levels[level as usize].push_back(flow);
            self.occupancy |= 1 << level;
        }
        Ok(())
    }

    /// Admission plus FIFO insertion in one step.
    pub fn enqueue(
        &mut self,
        packet: Packet,
        now: Timestamp,
    ) -> Result<EnqueueOutcome, FlowQueueError> {
        if self.try_admit(packet.flow, now)? {
            self.insert_admitted(packet)?;
            Ok(EnqueueOutcome::Accepted)
        } else {
            Ok(EnqueueOutcome::DeclinedRateLimit)
        }
    }

    /// Record a short-circuited drop for the flow's counters.
    pub fn note_shortcircuit(&mut self, flow: FlowKey) {
        if let Some(state) = self.flows.get_mut(&flow) {
            state.counters.shortcircuited += 1;
        }
    }

    pub fn highest_enqueued_priority(&self) -> Option<Priority> {
        if self.occupancy == 0 {
            None
        } else {
            Some(Priority(63 - self.occupancy.leading_zeros() as u8))
        }
    }

    pub fn lowest_enqueued_priority(&self) -> Option<Priority> {
        if self.occupancy == 0 {
            None
        } else {
            Some(Priority(self.occupancy.trailing_zeros() as u8))
        }
    }

    /// Remove the head of the highest-priority nonempty queue. Flows at the
    /// same level take turns.
    pub fn dequeue_highest(&mut self) -> Option<Packet> {
        let level = self.highest_enqueued_priority()?;
        Some(self.pop_at_level(level))
    }

    /// Remove the oldest packet of the lowest-priority nonempty flow, for
    /// buffer revocation.
    pub fn revoke_lowest(&mut self) -> Option<Packet> {
        let level = self.lowest_enqueued_priority()?;
        let packet = self.pop_at_level(level);
        self.flows
            .get_mut(&packet.flow)
            .expect("flow of a queued packet is registered")
            .counters
            .revoked += 1;
        Some(packet)
    }

    fn pop_at_level(&mut self, level: Priority) -> Packet {
        let rotation = &mut self.levels[level.level() as usize];
        let flow = *rotation.front().expect("occupancy bit implies a flow");
        let state = self.flows.get_mut(&flow).expect("rotated flow is registered");
        let packet = state.queue.pop_front().expect("rotated flow is nonempty");
        self.total_queued -= 1;
        rotation.pop_front();
        if state.queue.is_empty() {
            if rotation.is_empty() {
                self.occupancy &= !(1 << level.level());
            }
        } else {
            rotation.push_back(flow);
        }
        packet
    }

    /// Internal consistency: the occupancy summary matches the queues and the
    /// global count matches the per-flow lengths.
    pub fn check_consistency(&self) -> bool {
        let sum: usize = self.flows.values().map(|f| f.queue.len()).sum();
        if sum != self.total_queued {
            return false;
        }
        for (idx, rotation) in self.levels.iter().enumerate() {
            let bit = self.occupancy & (1 << idx) != 0;
            if bit != !rotation.is_empty() {
                return false;
            }
            for flow in rotation {
                match self.flows.get(flow) {
                    Some(f) if !f.queue.is_empty() && f.priority.level() as usize == idx => {}
                    _ => return false,
                }
            }
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::frame::HeaderSummary;
    use crate::model::BufferId;

    fn packet(flow: FlowKey, id: u32, arrival_ns: u64) -> Packet {
        Packet {
            buffer: Some(BufferId(id)),
            flow,
            arrival: Timestamp(arrival_ns),
            payload_len: 0,
            summary: HeaderSummary::Ipv4 {
                protocol: 17,
                fragmented: false,
                dst_port: None,
            },
        }
    }

    fn set_with_flows() -> FlowQueueSet {
        let mut fq = FlowQueueSet::new(Priority(15));
        fq.register_flow(
            FlowKey::Udp(7),
            Priority(10),
            Capacity::PerPeriod(1),
            Duration::from_millis(1),
        )
        .unwrap();
        fq.register_flow(
            FlowKey::Background,
            Priority(0),
            Capacity::Unbounded,
            Duration::from_millis(1),
        )
        .unwrap();
        fq.register_flow(
            FlowKey::Udp(9),
            Priority(3),
            Capacity::Unbounded,
            Duration::from_millis(1),
        )
        .unwrap();
        fq
    }

    #[test]
    fn duplicate_registration_is_rejected() {
        let mut fq = set_with_flows();
        assert_eq!(
            fq.register_flow(
                FlowKey::Udp(7),
                Priority(4),
                Capacity::Unbounded,
                Duration::from_millis(1)
            ),
            Err(FlowQueueError::DuplicateFlow(FlowKey::Udp(7)))
        );
    }

    #[test]
    fn admission_declines_beyond_budget_and_replenishes() {
        let mut fq = set_with_flows();
        let flow = FlowKey::Udp(7);
        assert_eq!(
            fq.enqueue(packet(flow, 0, 0), Timestamp::ZERO).unwrap(),
            EnqueueOutcome::Accepted
        );
        assert_eq!(
            fq.enqueue(packet(flow, 1, 0), Timestamp::ZERO).unwrap(),
            EnqueueOutcome::DeclinedRateLimit
        );
        assert_eq!(fq.counters(flow).unwrap().declined_rate, 1);
        // Budget is back at the period boundary.
        let t = Timestamp(Duration::from_millis(1).nanos());
        assert_eq!(
            fq.enqueue(packet(flow, 1, t.nanos()), t).unwrap(),
            EnqueueOutcome::Accepted
        );
    }

    #[test]
    fn unbounded_flow_never_declines() {
        let mut fq = set_with_flows();
        for i in 0..10_000 {
            assert_eq!(
                fq.enqueue(packet(FlowKey::Background, i, 0), Timestamp::ZERO)
                    .unwrap(),
                EnqueueOutcome::Accepted
            );
        }
        assert_eq!(fq.queue_len(FlowKey::Background), Some(10_000));
    }

    #[test]
    fn unknown_flow_is_an_error() {
        let mut fq = set_with_flows();
        assert_eq!(
            fq.enqueue(packet(FlowKey::Udp(1234), 0, 0), Timestamp::ZERO),
            Err(FlowQueueError::UnknownFlow(FlowKey::Udp(1234)))
        );
    }

    #[test]
    fn dequeue_takes_highest_fifo() {
        let mut fq = set_with_flows();
        fq.enqueue(packet(FlowKey::Udp(9), 0, 0), Timestamp::ZERO)
            .unwrap();
        fq.enqueue(packet(FlowKey::Udp(7), 1, 0), Timestamp::ZERO)
            .unwrap();
        let t = Timestamp(Duration::from_millis(1).nanos());
        fq.enqueue(packet(FlowKey::Udp(7), 2, t.nanos()), t).unwrap();

        assert_eq!(fq.dequeue_highest().unwrap().buffer, Some(BufferId(1)));
        assert_eq!(fq.dequeue_highest().unwrap().buffer, Some(BufferId(2)));
        assert_eq!(fq.dequeue_highest().unwrap().buffer, Some(BufferId(0)));
        assert!(fq.dequeue_highest().is_none());
    }

    #[test]
    fn revoke_takes_oldest_of_lowest() {
        let mut fq = set_with_flows();
        fq.enqueue(packet(FlowKey::Udp(7), 0, 0), Timestamp::ZERO)
            .unwrap();
        fq.enqueue(packet(FlowKey::Udp(9), 1, 0), Timestamp::ZERO)
            .unwrap();
        fq.enqueue(packet(FlowKey::Udp(9), 2, 0), Timestamp::ZERO)
            .unwrap();
        let revoked = fq.revoke_lowest().unwrap();
        assert_eq!(revoked.buffer, Some(BufferId(1)));
        assert_eq!(fq.counters(FlowKey::Udp(9)).unwrap().revoked, 1);
        assert!(fq.check_consistency());
    }

    #[test]
    fn revoke_on_empty_set_is_none() {
        let mut fq = set_with_flows();
        assert!(fq.revoke_lowest().is_none());
    }

    #[test]
    fn priority_extremes_track_occupancy() {
        let mut fq = set_with_flows();
        assert_eq!(fq.highest_enqueued_priority(), None);
        fq.enqueue(packet(FlowKey::Udp(9), 0, 0), Timestamp::ZERO)
            .unwrap();
        fq.enqueue(packet(FlowKey::Udp(7), 1, 0), Timestamp::ZERO)
            .unwrap();
        assert_eq!(fq.highest_enqueued_priority(), Some(Priority(10)));
        assert_eq!(fq.lowest_enqueued_priority(), Some(Priority(3)));
        fq.dequeue_highest().unwrap();
        assert_eq!(fq.highest_enqueued_priority(), Some(Priority(3)));
    }

    #[test]
    fn equal_priority_flows_round_robin() {
        let mut fq = FlowQueueSet::new(Priority(15));
        for port in [1u16, 2] {
            fq.register_flow(
                FlowKey::Udp(port),
                Priority(5),
                Capacity::Unbounded,
                Duration::from_millis(1),
            )
            .unwrap();
        }
        for i in 0..2 {
            fq.enqueue(packet(FlowKey::Udp(1), i * 2, 0), Timestamp::ZERO)
                .unwrap();
            fq.enqueue(packet(FlowKey::Udp(2), i * 2 + 1, 0), Timestamp::ZERO)
                .unwrap();
        }
        let order: Vec<FlowKey> = (0..4).map(|_| fq.dequeue_highest().unwrap().flow).collect();
        assert_eq!(
            order,
            vec![
                FlowKey::Udp(1),
                FlowKey::Udp(2),
                FlowKey::Udp(1),
                FlowKey::Udp(2)
            ]
        );
    }

    // Admission never exceeds the deferrable-server demand bound in any
    // window, for randomized arrival times.
    #[test]
    fn admission_respects_demand_bound() {
        use rand::rngs::StdRng;
        use rand::{Rng, SeedableRng};

        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..50 {
            let capacity = rng.gen_range(1..5u64);
            let period = Duration::from_micros(rng.gen_range(50..500));
            let mut fq = FlowQueueSet::new(Priority(15));
            fq.register_flow(
                FlowKey::Udp(7),
                Priority(4),
                Capacity::PerPeriod(capacity),
                period,
            )
            .unwrap();

            let mut times: Vec<u64> = (0..300)
                .map(|_| rng.gen_range(0..period.nanos() * 40))
                .collect();
            times.sort_unstable();
            let mut accepted_at = Vec::new();
            for (i, t) in times.iter().enumerate() {
                let outcome = fq
                    .enqueue(packet(FlowKey::Udp(7), i as u32, *t), Timestamp(*t))
                    .unwrap();
                if outcome == EnqueueOutcome::Accepted {
                    accepted_at.push(*t);
                }
                // Keep queues small; draining does not refund budget.
                fq.dequeue_highest();
            }
            for _ in 0..200 {
                let start = rng.gen_range(0..period.nanos() * 40);
                let delta = rng.gen_range(0..period.nanos() * 6);
                let in_window = accepted_at
                    .iter()
                    .filter(|t| **t >= start && **t < start + delta)
                    .count() as u64;
                let bound = crate::rate_limiter::demand_bound(capacity, period, Duration(delta));
                assert!(
                    in_window <= bound,
                    "window [{start}, {}) admitted {in_window} > bound {bound}",
                    start + delta
                );
            }
        }
    }
}
