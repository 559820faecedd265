//! Deterministic traffic generation.
//!
//! Arrival times are produced purely from the workload description (plus a
//! seed for Poisson traffic), so two runs of the same spec yield the same
//! event list byte for byte.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::frame::{build_frame, FrameError, FrameSpec};
use crate::model::{Duration, Timestamp};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WorkloadError {
    #[error("workload {index}: rate must be positive")]
    InvalidRate { index: usize },
    #[error("workload {index}: burst spacing must be positive")]
    InvalidSpacing { index: usize },
    #[error("workload {index}: {source}")]
    Frame { index: usize, source: FrameError },
    #[error("horizon must be positive")]
    EmptyHorizon,
}

/// Arrival pattern of one traffic source.
#[derive(Debug, Clone, PartialEq)]
pub enum TrafficPattern {
    /// `rate` packets per second, evenly spaced, phase anchored at t=0.
    ConstantRate { rate: u64 },
    /// `count` packets starting at `start`, one every `spacing`.
    Burst {
        count: u64,
        spacing: Duration,
        start: Timestamp,
    },
    /// Exponentially distributed gaps with the given mean rate, reproducible
    /// from the seed.
    Poisson { mean_rate: u64, seed: u64 },
}

/// One traffic source: which frame to send and when.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadItem {
    pub frame: FrameSpec,
    pub pattern: TrafficPattern,
}

/// A set of traffic sources fed into one simulation run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WorkloadSpec {
    pub items: Vec<WorkloadItem>,
}

/// One scheduled frame arrival. The frame bytes are shared across all
/// arrivals of the same source.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Arrival {
    pub time: Timestamp,
    pub source: usize,
    pub frame: Arc<Vec<u8>>,
}

/// Expand a workload into a time-ordered arrival list over `[0, horizon)`.
///
/// A constant-rate source emits exactly `floor(rate * horizon)` arrivals.
/// Arrivals of different sources at the same instant keep the source order
/// of the spec.
pub fn generate(spec: &WorkloadSpec, horizon: Duration) -> Result<Vec<Arrival>, WorkloadError> {
    let frames: Vec<Arc<Vec<u8>>> = spec
        .items
        .iter()
        .enumerate()
        .map(|(index, item)| {
            build_frame(&item.frame)
                .map(Arc::new)
                .map_err(|source| WorkloadError::Frame { index, source })
        })
        .collect::<Result<_, _>>()?;
    let times = ArrivalTimes::new(spec, horizon)?;
    Ok(times
        .map(|(time, source)| Arrival {
            time,
            source,
            frame: Arc::clone(&frames[source]),
        })
        .collect())
}

/// Streaming merge of all sources, yielding `(time, source)` pairs in the
/// same order `generate` produces, without materializing the list.
pub struct ArrivalTimes {
    sources: Vec<SourceState>,
    // Next pending arrival of each live source: (time, source, per-source seq).
    heap: std::collections::BinaryHeap<std::cmp::Reverse<(u64, usize, u64)>>,
    horizon: u64,
}

enum SourceState {
    Constant { rate: u64, next_k: u64, total: u64 },
    Burst {
        start: u64,
        spacing: u64,
        next_k: u64,
        total: u64,
    },
    Poisson { mean_rate: u64, rng: ChaCha8Rng, t: f64 },
}

impl ArrivalTimes {
    pub fn new(spec: &WorkloadSpec, horizon: Duration) -> Result<ArrivalTimes, WorkloadError> {
        const NS_PER_SEC: u128 = 1_000_000_000;
        if horizon.nanos() == 0 {
            return Err(WorkloadError::EmptyHorizon);
        }
        let mut sources = Vec::with_capacity(spec.items.len());
        for (index, item) in spec.items.iter().enumerate() {
            let state = match &item.pattern {
                TrafficPattern::ConstantRate { rate } => {
                    if *rate == 0 {
                        return Err(WorkloadError::InvalidRate { index });
                    }
                    let total = (horizon.nanos() as u128 * *rate as u128 / NS_PER_SEC) as u64;
                    SourceState::Constant {
                        rate: *rate,
                        next_k: 0,
                        total,
                    }
                }
                TrafficPattern::Burst {
                    count,
                    spacing,
                    start,
                } => {
                    if spacing.nanos() == 0 && *count > 1 {
                        return Err(WorkloadError::InvalidSpacing { index });
                    }
                    SourceState::Burst {
                        start: start.nanos(),
                        spacing: spacing.nanos(),
                        next_k: 0,
                        total: *count,
                    }
                }
                TrafficPattern::Poisson { mean_rate, seed } => {
                    if *mean_rate == 0 {
                        return Err(WorkloadError::InvalidRate { index });
                    }
                    SourceState::Poisson {
                        mean_rate: *mean_rate,
                        rng: ChaCha8Rng::seed_from_u64(*seed),
                        t: 0.0,
                    }
                }
            };
            sources.push(state);
        }
        let mut iter = ArrivalTimes {
            sources,
            heap: std::collections::BinaryHeap::new(),
            horizon: horizon.nanos(),
        };
        for source in 0..iter.sources.len() {
            iter.push_next(source, 0);
        }
        Ok(iter)
    }

    fn push_next(&mut self, source: usize, seq: u64) {
        const NS_PER_SEC: u128 = 1_000_000_000;
        let horizon = self.horizon;
        let next = match &mut self.sources[source] {
            SourceState::Constant { rate, next_k, total } => {
                if *next_k >= *total {
                    None
                } else {
                    let t = (*next_k as u128 * NS_PER_SEC / *rate as u128) as u64;
                    *next_k += 1;
                    Some(t)
                }
            }
            SourceState::Burst {
                start,
                spacing,
                next_k,
                total,
            } => {
                if *next_k >= *total {
                    None
                } else {
                    let t = *start + *next_k * *spacing;
                    *next_k += 1;
                    (t < horizon).then_some(t)
                }
            }
            SourceState::Poisson { mean_rate, rng, t } => {
                // Inverse-CDF exponential gap, in nanoseconds.
                let u: f64 = rand::Rng::gen_range(rng, f64::MIN_POSITIVE..1.0);
                *t += -u.ln() / (*mean_rate as f64) * 1e9;
                (*t < horizon as f64).then_some(*t as u64)
            }
        };
        if let Some(t) = next {
            self.heap.push(std::cmp::Reverse((t, source, seq)));
        }
    }
}

impl Iterator for ArrivalTimes {
    type Item = (Timestamp, usize);

    fn next(&mut self) -> Option<(Timestamp, usize)> {
        let std::cmp::Reverse((t, source, seq)) = self.heap.pop()?;
        self.push_next(source, seq + 1);
        Some((Timestamp(t), source))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_item(rate: u64) -> WorkloadItem {
        WorkloadItem {
            frame: FrameSpec::udp(7, 0),
            pattern: TrafficPattern::ConstantRate { rate },
        }
    }

    #[test]
    fn constant_rate_count_and_spacing() {
        let spec = WorkloadSpec {
            items: vec![constant_item(1_000)],
        };
        let arrivals = generate(&spec, Duration::from_secs(1)).unwrap();
        assert_eq!(arrivals.len(), 1_000);
        assert_eq!(arrivals[0].time, Timestamp::ZERO);
        assert_eq!(arrivals[1].time.nanos(), 1_000_000);
        assert_eq!(arrivals[999].time.nanos(), 999_000_000);
    }

    #[test]
    fn constant_rate_count_is_floor_of_rate_times_horizon() {
        let spec = WorkloadSpec {
            items: vec![constant_item(3)],
        };
        // 3 pkt/s over 1.5s -> floor(4.5) = 4 events.
        let arrivals = generate(&spec, Duration::from_millis(1_500)).unwrap();
        assert_eq!(arrivals.len(), 4);
        assert!(arrivals.iter().all(|a| a.time.nanos() < 1_500_000_000));
    }

    #[test]
    fn burst_emits_count_events() {
        let spec = WorkloadSpec {
            items: vec![WorkloadItem {
                frame: FrameSpec::udp(7, 0),
                pattern: TrafficPattern::Burst {
                    count: 100_000,
                    spacing: Duration::from_nanos(672),
                    start: Timestamp::ZERO,
                },
            }],
        };
        let arrivals = generate(&spec, Duration::from_secs(1)).unwrap();
        assert_eq!(arrivals.len(), 100_000);
    }

    #[test]
    fn poisson_is_reproducible() {
        let item = WorkloadItem {
            frame: FrameSpec::udp(7, 0),
            pattern: TrafficPattern::Poisson {
                mean_rate: 5_000,
                seed: 99,
            },
        };
        let spec = WorkloadSpec {
            items: vec![item],
        };
        let a = generate(&spec, Duration::from_millis(100)).unwrap();
        let b = generate(&spec, Duration::from_millis(100)).unwrap();
        assert_eq!(a.len(), b.len());
        assert!(a.iter().zip(&b).all(|(x, y)| x.time == y.time));
    }

    #[test]
    fn zero_rate_is_invalid() {
        let spec = WorkloadSpec {
            items: vec![constant_item(0)],
        };
        assert_eq!(
            generate(&spec, Duration::from_secs(1)),
            Err(WorkloadError::InvalidRate { index: 0 })
        );
    }

    #[test]
    fn merge_preserves_per_source_order() {
        let spec = WorkloadSpec {
            items: vec![constant_item(977), constant_item(1_523)],
        };
        let arrivals = generate(&spec, Duration::from_secs(1)).unwrap();
        assert_eq!(arrivals.len(), 977 + 1_523);
        let mut last_per_source = [Timestamp::ZERO, Timestamp::ZERO];
        let mut last_time = Timestamp::ZERO;
        for a in &arrivals {
            assert!(a.time >= last_time);
            assert!(a.time >= last_per_source[a.source]);
            last_per_source[a.source] = a.time;
            last_time = a.time;
        }
    }
}
