//! Deferrable-server budget accounting.
//!
//! A server grants up to `capacity` units per period; unused budget is kept
//! until the period ends and the full budget is restored at every period
//! boundary. Periods are anchored at simulation time zero, so boundary `k`
//! lies at `k * period` for every server — this keeps runs reproducible.

use thiserror::Error;

use crate::model::{Duration, Timestamp};

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum RateLimitError {
    #[error("time went backwards: observed {observed} after {latest}")]
    NonMonotonicTime {
        latest: Timestamp,
        observed: Timestamp,
    },
    #[error("server period must be positive")]
    ZeroPeriod,
}

/// Budget state of one deferrable server.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeferrableServer {
    capacity: u64,
    period: Duration,
    remaining: u64,
    period_start: Timestamp,
    latest: Timestamp,
}

impl DeferrableServer {
    /// Create a server with a full budget at time zero.
    pub fn new(capacity: u64, period: Duration) -> Result<DeferrableServer, RateLimitError> {
        if period.nanos() == 0 {
            return Err(RateLimitError::ZeroPeriod);
        }
        Ok(DeferrableServer {
            capacity,
            period,
            remaining: capacity,
            period_start: Timestamp::ZERO,
            latest: Timestamp::ZERO,
        })
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn period(&self) -> Duration {
        self.period
    }

    /// Advance to the latest period boundary at or before `now`, restoring
    /// the budget when a boundary is crossed.
    fn replenish(&mut self, now: Timestamp) {
        let boundary = Timestamp(now.nanos() - now.nanos() % self.period.nanos());
        if boundary > self.period_start {
            self.period_start = boundary;
            self.remaining = self.capacity;
        }
    }

    /// Try to consume `units` of budget at `now`.
    ///
    /// Returns `Ok(true)` and decrements on success; `Ok(false)` leaves the
    /// state unchanged apart from replenishment. Calls must be made with
    /// nondecreasing times.
    pub fn try_consume(&mut self, now: Timestamp, units: u64) -> Result<bool, RateLimitError> {
        if now < self.latest {
            return Err(RateLimitError::NonMonotonicTime {
                latest: self.latest,
                observed: now,
            });
        }
        self.latest = now;
        self.replenish(now);
        if self.remaining >= units {
            self.remaining -= units;
            Ok(true)
        } else {
            Ok(false)
        }
    }

    /// Budget still grantable at `now` (after replenishment).
    pub fn remaining_at(&mut self, now: Timestamp) -> u64 {
        self.replenish(now);
        self.remaining
    }

    /// True iff the budget is exhausted at `now` and stays so until the next
    /// period boundary.
    pub fn saturated_until_next_period(&mut self, now: Timestamp) -> bool {
        self.replenish(now);
        self.remaining == 0
    }

    /// Worst-case units grantable inside any window of length `delta`:
    /// `capacity * (ceil(delta / period) + 1)`.
    pub fn demand_bound(&self, delta: Duration) -> u64 {
        demand_bound(self.capacity, self.period, delta)
    }
}

/// Worst-case grants of a `(capacity, period)` server in a window `delta`.
pub fn demand_bound(capacity: u64, period: Duration, delta: Duration) -> u64 {
    let periods = delta.nanos().div_ceil(period.nanos());
    capacity.saturating_mul(periods + 1)
}
