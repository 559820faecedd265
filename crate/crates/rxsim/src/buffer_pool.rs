//! Closed pool of packet buffers shared by the BD ring and the flow queues.
//!
//! The pool only tracks accounting: which buffers sit armed in the ring and
//! which are out (awaiting service, queued in a flow queue, or being
//! processed). Cache operations and fresh-buffer preparation are modeled as
//! execution costs elsewhere, not as data movement.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::model::BufferId;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum PoolError {
    /// No armed buffer is available; the NIC drops the frame.
    #[error("BD ring has no free buffer")]
    RingEmpty,
    #[error("buffer {0:?} is not part of this pool")]
    UnknownBuffer(BufferId),
    #[error("buffer {0:?} returned twice")]
    DoubleReturn(BufferId),
}

/// BD ring bookkeeping for a closed pool of `capacity` buffers.
#[derive(Debug, Clone)]
pub struct BdRing {
    capacity: u32,
    free: Vec<BufferId>,
    out: BTreeSet<BufferId>,
    threshold: u32,
}

impl BdRing {
    /// `threshold` is the recycle fraction as a rational `num/den`; recycling
    /// is needed once `free <= floor(capacity * num / den)`.
    pub fn new(capacity: u32, threshold_num: u32, threshold_den: u32) -> BdRing {
        assert!(threshold_den > 0, "threshold denominator must be nonzero");
        let threshold =
            ((capacity as u64 * threshold_num as u64) / threshold_den as u64) as u32;
        BdRing {
            capacity,
            free: (0..capacity).rev().map(BufferId).collect(),
            out: BTreeSet::new(),
            threshold,
        }
    }

    pub fn capacity(&self) -> u32 {
        self.capacity
    }

    pub fn free_in_ring(&self) -> u32 {
        self.free.len() as u32
    }

    pub fn buffers_out(&self) -> u32 {
        self.out.len() as u32
    }

    /// Take an armed buffer out of the ring (a DMA transfer completed into it).
    pub fn take_buffer(&mut self) -> Result<BufferId, PoolError> {
        let id = self.free.pop().ok_or(PoolError::RingEmpty)?;
        self.out.insert(id);
        Ok(id)
    }

    /// Arm a buffer back into the ring.
    pub fn return_buffer(&mut self, id: BufferId) -> Result<(), PoolError> {
        if id.0 >= self.capacity {
            return Err(PoolError::UnknownBuffer(id));
        }
        if !self.out.remove(&id) {
            return Err(PoolError::DoubleReturn(id));
        }
        self.free.push(id);
        Ok(())
    }

    /// True once the fill state fell to the recycle threshold.
    pub fn needs_recycle(&self) -> bool {
        self.threshold > 0 && self.free_in_ring() <= self.threshold
    }

    /// Closed-pool conservation: every buffer is either armed or out.
    pub fn conserved(&self) -> bool {
        self.free.len() + self.out.len() == self.capacity as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn take_decrements_free() {
        let mut ring = BdRing::new(64, 1, 2);
        assert_eq!(ring.free_in_ring(), 64);
        ring.take_buffer().unwrap();
        assert_eq!(ring.free_in_ring(), 63);
        assert_eq!(ring.buffers_out(), 1);
    }

    #[test]
    fn exhausted_ring_reports_empty() {
        let mut ring = BdRing::new(4, 1, 2);
        for _ in 0..4 {
            ring.take_buffer().unwrap();
        }
        assert_eq!(ring.take_buffer(), Err(PoolError::RingEmpty));
    }

    #[test]
    fn return_restores_free() {
        let mut ring = BdRing::new(64, 1, 2);
        let id = ring.take_buffer().unwrap();
        ring.return_buffer(id).unwrap();
        assert_eq!(ring.free_in_ring(), 64);
    }

    #[test]
    fn double_return_is_rejected() {
        let mut ring = BdRing::new(64, 1, 2);
        let id = ring.take_buffer().unwrap();
        ring.return_buffer(id).unwrap();
        assert_eq!(ring.return_buffer(id), Err(PoolError::DoubleReturn(id)));
    }

    #[test]
    fn unknown_buffer_is_rejected() {
        let mut ring = BdRing::new(64, 1, 2);
        assert_eq!(
            ring.return_buffer(BufferId(64)),
            Err(PoolError::UnknownBuffer(BufferId(64)))
        );
    }

    #[test]
    fn recycle_threshold_boundary() {
        let mut ring = BdRing::new(64, 1, 2);
        let mut taken = Vec::new();
        // Down to 33 free: not yet at the threshold.
        for _ in 0..31 {
            taken.push(ring.take_buffer().unwrap());
        }
        assert_eq!(ring.free_in_ring(), 33);
        assert!(!ring.needs_recycle());
        // 32 free: at floor(64/2), recycling kicks in.
        taken.push(ring.take_buffer().unwrap());
        assert_eq!(ring.free_in_ring(), 32);
        assert!(ring.needs_recycle());
    }

    #[test]
    fn zero_threshold_never_recycles_while_buffers_remain() {
        let mut ring = BdRing::new(8, 0, 2);
        for _ in 0..7 {
            ring.take_buffer().unwrap();
        }
        assert!(!ring.needs_recycle());
    }

    proptest! {
        // Closed-pool conservation under arbitrary take/return interleavings,
        // cross-checked against a plain counter.
        #[test]
        fn conservation_under_random_interleavings(ops in proptest::collection::vec(any::<bool>(), 0..400)) {
            let mut ring = BdRing::new(16, 1, 2);
            let mut held: Vec<BufferId> = Vec::new();
            let mut expected_out = 0usize;
            for take in ops {
                if take {
                    match ring.take_buffer() {
                        Ok(id) => {
                            held.push(id);
                            expected_out += 1;
                        }
                        Err(PoolError::RingEmpty) => prop_assert_eq!(held.len(), 16),
                        Err(e) => return Err(TestCaseError::fail(format!("{e}"))),
                    }
                } else if let Some(id) = held.pop() {
                    ring.return_buffer(id).unwrap();
                    expected_out -= 1;
                }
                prop_assert!(ring.conserved());
                prop_assert_eq!(ring.buffers_out() as usize, expected_out);
                prop_assert_eq!(ring.free_in_ring() as usize, 16 - expected_out);
            }
        }
    }
}
