//! Early demultiplexing: map decoded headers to a flow using the bound-socket
//! table, the way the top-half driver does it inside the ISR.
//!
//! Lookup is a plain linear scan over the bound entries, matching the list
//! structure of small embedded stacks. The caller is responsible for mutual
//! exclusion between table mutation and classification.

use thiserror::Error;

use crate::model::frame::HeaderSummary;
use crate::model::{Capacity, Duration, FlowKey, Priority};

const IP_PROTO_ICMP: u8 = 1;
const IP_PROTO_TCP: u8 = 6;
const IP_PROTO_UDP: u8 = 17;

/// Default limit on bound sockets.
pub const DEFAULT_MAX_SOCKETS: usize = 32;

/// Transport protocol of a bound socket.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum L4Protocol {
    Udp,
    Tcp,
}

/// Opaque handle returned by [`SocketTable::bind`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SocketHandle(u32);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SocketEntry {
    pub protocol: L4Protocol,
    pub local_port: u16,
    pub flow_priority: Priority,
    pub capacity: Capacity,
    pub period: Duration,
    handle: SocketHandle,
}

impl SocketEntry {
    pub fn flow_key(&self) -> FlowKey {
        match self.protocol {
            L4Protocol::Udp => FlowKey::Udp(self.local_port),
            L4Protocol::Tcp => FlowKey::Tcp(self.local_port),
        }
    }
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum SocketTableError {
    #[error("(protocol, port) pair is already bound")]
    AlreadyBound,
    #[error("socket table is full ({0} entries)")]
    TableFull(usize),
    #[error("unknown socket handle")]
    UnknownHandle,
}

/// Ordered list of bound sockets.
#[derive(Debug, Clone)]
pub struct SocketTable {
    entries: Vec<SocketEntry>,
    max_entries: usize,
    next_handle: u32,
}

impl Default for SocketTable {
    fn default() -> Self {
        SocketTable::new(DEFAULT_MAX_SOCKETS)
    }
}

impl SocketTable {
    pub fn new(max_entries: usize) -> SocketTable {
        SocketTable {
            entries: Vec::new(),
            max_entries,
            next_handle: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[SocketEntry] {
        &self.entries
    }

    /// Bind a local port, defining the flow's priority and admission budget.
    pub fn bind(
        &mut self,
        protocol: L4Protocol,
        local_port: u16,
        flow_priority: Priority,
        capacity: Capacity,
        period: Duration,
    ) -> Result<SocketHandle, SocketTableError> {
        if self
            .entries
            .iter()
            .any(|e| e.protocol == protocol && e.local_port == local_port)
        {
            return Err(SocketTableError::AlreadyBound);
        }
        if self.entries.len() >= self.max_entries {
            return Err(SocketTableError::TableFull(self.max_entries));
        }
        let handle = SocketHandle(self.next_handle);
        self.next_handle += 1;
        self.entries.push(SocketEntry {
            protocol,
            local_port,
            flow_priority,
            capacity,
            period,
            handle,
        });
        Ok(handle)
    }

    /// Remove a binding. Packets already classified keep their flow key;
    /// later packets to the port fall back to the background flow.
    pub fn unbind(&mut self, handle: SocketHandle) -> Result<SocketEntry, SocketTableError> {
        let idx = self
            .entries
            .iter()
            .position(|e| e.handle == handle)
            .ok_or(SocketTableError::UnknownHandle)?;
        Ok(self.entries.remove(idx))
    }

    /// Linear lookup; also reports how many entries were scanned so tests can
    /// verify the O(table length) cost bound.
    pub fn lookup_counting(
        &self,
        protocol: L4Protocol,
        local_port: u16,
    ) -> (Option<&SocketEntry>, usize) {
        let mut scanned = 0;
        for entry in &self.entries {
            scanned += 1;
            if entry.protocol == protocol && entry.local_port == local_port {
                return (Some(entry), scanned);
            }
        }
        (None, scanned)
    }

    pub fn lookup(&self, protocol: L4Protocol, local_port: u16) -> Option<&SocketEntry> {
        self.lookup_counting(protocol, local_port).0
    }
}

/// Classify decoded headers into a flow. Pure and total over valid summaries.
///
/// ARP and ICMP share one flow. Fragments and traffic without a bound socket
/// go to the background flow instead of being dropped.
pub fn classify(summary: &HeaderSummary, table: &SocketTable) -> FlowKey {
    classify_counting(summary, table).0
}

/// [`classify`] plus the number of socket entries scanned.
pub fn classify_counting(summary: &HeaderSummary, table: &SocketTable) -> (FlowKey, usize) {
    match summary {
        HeaderSummary::Arp => (FlowKey::ArpIcmp, 0),
        HeaderSummary::Ipv4 {
            protocol,
            fragmented,
            dst_port,
        } => {
            if *protocol == IP_PROTO_ICMP && !fragmented {
                return (FlowKey::ArpIcmp, 0);
            }
            if *fragmented {
                return (FlowKey::Background, 0);
            }
            let l4 = match *protocol {
                IP_PROTO_UDP => L4Protocol::Udp,
                IP_PROTO_TCP => L4Protocol::Tcp,
                _ => return (FlowKey::Background, 0),
            };
            match dst_port {
                Some(port) => {
                    let (entry, scanned) = table.lookup_counting(l4, *port);
                    match entry {
                        Some(e) => (e.flow_key(), scanned),
                        None => (FlowKey::Background, scanned),
                    }
                }
                None => (FlowKey::Background, 0),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::frame::{build_frame, decode_headers, FrameSpec};

    fn default_bind(table: &mut SocketTable, port: u16) -> SocketHandle {
        table
            .bind(
                L4Protocol::Udp,
                port,
                Priority(10),
                Capacity::PerPeriod(1),
                Duration::from_millis(1),
            )
            .unwrap()
    }

    #[test]
    fn bind_then_classify_matches_flow() {
        let mut table = SocketTable::default();
        default_bind(&mut table, 7);
        assert_eq!(table.len(), 1);
        let frame = build_frame(&FrameSpec::udp(7, 0)).unwrap();
        let summary = decode_headers(&frame).unwrap();
        assert_eq!(classify(&summary, &table), FlowKey::Udp(7));
    }

    #[test]
    fn double_bind_is_rejected() {
        let mut table = SocketTable::default();
        default_bind(&mut table, 7);
        assert_eq!(
            table.bind(
                L4Protocol::Udp,
                7,
                Priority(3),
                Capacity::Unbounded,
                Duration::from_millis(1),
            ),
            Err(SocketTableError::AlreadyBound)
        );
        // Same port on the other protocol is a distinct binding.
        table
            .bind(
                L4Protocol::Tcp,
                7,
                Priority(3),
                Capacity::Unbounded,
                Duration::from_millis(1),
            )
            .unwrap();
    }

    #[test]
    fn table_capacity_is_enforced() {
        let mut table = SocketTable::default();
        for port in 0..32 {
            default_bind(&mut table, port);
        }
        assert_eq!(
            table.bind(
                L4Protocol::Udp,
                100,
                Priority(1),
                Capacity::Unbounded,
                Duration::from_millis(1),
            ),
            Err(SocketTableError::TableFull(32))
        );
    }

    #[test]
    fn unbind_falls_back_to_background() {
        let mut table = SocketTable::default();
        let handle = default_bind(&mut table, 7);
        table.unbind(handle).unwrap();
        let frame = build_frame(&FrameSpec::udp(7, 0)).unwrap();
        let summary = decode_headers(&frame).unwrap();
        assert_eq!(classify(&summary, &table), FlowKey::Background);
        assert_eq!(table.unbind(handle), Err(SocketTableError::UnknownHandle));
    }

    #[test]
    fn icmp_and_arp_share_one_flow() {
        let table = SocketTable::default();
        let icmp = decode_headers(&build_frame(&FrameSpec::icmp(0)).unwrap()).unwrap();
        assert_eq!(classify(&icmp, &table), FlowKey::ArpIcmp);
        let arp = decode_headers(&build_frame(&FrameSpec::arp()).unwrap()).unwrap();
        assert_eq!(classify(&arp, &table), FlowKey::ArpIcmp);
    }

    #[test]
    fn fragments_go_to_background_even_when_bound() {
        let mut table = SocketTable::default();
        default_bind(&mut table, 7);
        let spec = FrameSpec {
            fragment: true,
            ..FrameSpec::udp(7, 8)
        };
        let summary = decode_headers(&build_frame(&spec).unwrap()).unwrap();
        assert_eq!(classify(&summary, &table), FlowKey::Background);
    }

    #[test]
    fn lookup_scans_linearly() {
        let mut table = SocketTable::default();
        for port in 0..10 {
            default_bind(&mut table, port);
        }
        let (hit, scanned) = table.lookup_counting(L4Protocol::Udp, 0);
        assert!(hit.is_some());
        assert_eq!(scanned, 1);
        let (hit, scanned) = table.lookup_counting(L4Protocol::Udp, 9);
        assert!(hit.is_some());
        assert_eq!(scanned, 10);
        let (miss, scanned) = table.lookup_counting(L4Protocol::Udp, 99);
        assert!(miss.is_none());
        assert_eq!(scanned, table.len());
    }

    // Brute-force oracle over the whole port space: every bound entry
    // classifies a matching non-fragment frame to its own flow, every other
    // port to background.
    #[test]
    fn exhaustive_port_space_against_random_table() {
        use rand::rngs::StdRng;
        use rand::{Rng, SeedableRng};

        let mut rng = StdRng::seed_from_u64(7);
        let mut table = SocketTable::default();
        let mut bound = std::collections::HashSet::new();
        while bound.len() < 24 {
            let port: u16 = rng.gen();
            if bound.insert(port) {
                default_bind(&mut table, port);
            }
        }
        for port in 0..=u16::MAX {
            let summary = crate::model::frame::HeaderSummary::Ipv4 {
                protocol: 17,
                fragmented: false,
                dst_port: Some(port),
            };
            let expected = if bound.contains(&port) {
                FlowKey::Udp(port)
            } else {
                FlowKey::Background
            };
            let (got, scanned) = classify_counting(&summary, &table);
            assert_eq!(got, expected, "port {port}");
            assert!(scanned <= table.len());
        }
    }
}
