//! Byte-level frame construction and header decoding.
//!
//! Frames use standard on-wire layouts (Ethernet II, ARP, IPv4, UDP, TCP) in
//! network byte order. Decoding peeks only at the leading header region of a
//! frame, mirroring a driver that invalidates just the first cache lines
//! before classification.

use thiserror::Error;

/// Maximum number of bytes `decode_headers` may inspect.
pub const HEADER_PEEK_LIMIT: usize = 64;

/// Default maximum payload accepted by the frame builder.
pub const DEFAULT_MTU: usize = 1500;

const ETHERTYPE_IPV4: u16 = 0x0800;
const ETHERTYPE_ARP: u16 = 0x0806;

const IP_PROTO_ICMP: u8 = 1;
const IP_PROTO_TCP: u8 = 6;
const IP_PROTO_UDP: u8 = 17;

const SRC_MAC: [u8; 6] = [0x02, 0x00, 0x00, 0x00, 0x00, 0x02];
const DST_MAC: [u8; 6] = [0x02, 0x00, 0x00, 0x00, 0x00, 0x01];
const SRC_IP: [u8; 4] = [192, 168, 1, 2];
const DST_IP: [u8; 4] = [192, 168, 1, 1];

/// Protocol selector for the frame builder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    Arp,
    Icmp,
    Udp,
    Tcp,
}

/// Recipe for a synthetic received frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameSpec {
    pub protocol: Protocol,
    /// Destination port on the receiving system (UDP/TCP only).
    pub local_port: Option<u16>,
    /// Source port of the remote sender (UDP/TCP only).
    pub remote_port: Option<u16>,
    pub payload_len: u16,
    /// Emit a non-first IPv4 fragment (fragment offset != 0, MF set).
    pub fragment: bool,
}

impl FrameSpec {
    pub fn udp(local_port: u16, payload_len: u16) -> FrameSpec {
        FrameSpec {
            protocol: Protocol::Udp,
            local_port: Some(local_port),
            remote_port: Some(40_000),
            payload_len,
            fragment: false,
        }
    }

    pub fn tcp(local_port: u16, payload_len: u16) -> FrameSpec {
        FrameSpec {
            protocol: Protocol::Tcp,
            local_port: Some(local_port),
            remote_port: Some(40_000),
            payload_len,
            fragment: false,
        }
    }

    pub fn arp() -> FrameSpec {
        FrameSpec {
            protocol: Protocol::Arp,
            local_port: None,
            remote_port: None,
            payload_len: 0,
            fragment: false,
        }
    }

    pub fn icmp(payload_len: u16) -> FrameSpec {
        FrameSpec {
            protocol: Protocol::Icmp,
            local_port: None,
            remote_port: None,
            payload_len,
            fragment: false,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FrameError {
    #[error("invalid frame spec: {0}")]
    InvalidSpec(String),
    #[error("frame truncated: declared length exceeds available bytes")]
    TruncatedFrame,
    #[error("malformed header: {0}")]
    MalformedHeader(&'static str),
}

/// Classification-relevant header fields extracted by the top-half driver.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeaderSummary {
    Arp,
    Ipv4 {
        protocol: u8,
        fragmented: bool,
        /// L4 destination port; `None` when the frame is a later fragment or
        /// the transport header lies beyond the peek limit.
        dst_port: Option<u16>,
    },
}

impl HeaderSummary {
    pub fn is_icmp(&self) -> bool {
        matches!(
            self,
            HeaderSummary::Ipv4 {
                protocol: IP_PROTO_ICMP,
                ..
            }
        )
    }
}

/// Build a well-formed Ethernet II frame for the given spec.
pub fn build_frame(spec: &FrameSpec) -> Result<Vec<u8>, FrameError> {
    build_frame_with_mtu(spec, DEFAULT_MTU)
}

pub fn build_frame_with_mtu(spec: &FrameSpec, mtu: usize) -> Result<Vec<u8>, FrameError> {
    if spec.payload_len as usize > mtu {
        return Err(FrameError::InvalidSpec(format!(
            "payload_len {} exceeds MTU {}",
            spec.payload_len, mtu
        )));
    }
    match spec.protocol {
        Protocol::Arp | Protocol::Icmp => {
            if spec.local_port.is_some() || spec.remote_port.is_some() {
                return Err(FrameError::InvalidSpec(format!(
                    "{:?} frames carry no ports",
                    spec.protocol
                )));
            }
        }
        Protocol::Udp | Protocol::Tcp => {
            if spec.local_port.is_none() {
                return Err(FrameError::InvalidSpec(format!(
                    "{:?} frames require a local port",
                    spec.protocol
                )));
            }
        }
    }
    if spec.fragment && spec.protocol == Protocol::Arp {
        return Err(FrameError::InvalidSpec(
            "ARP cannot be fragmented".to_string(),
        ));
    }

    let mut frame = Vec::with_capacity(64 + spec.payload_len as usize);
    frame.extend_from_slice(&DST_MAC);
    frame.extend_from_slice(&SRC_MAC);

    match spec.protocol {
        Protocol::Arp => {
            frame.extend_from_slice(&ETHERTYPE_ARP.to_be_bytes());
            // ARP request for an IPv4 address over Ethernet.
            frame.extend_from_slice(&1u16.to_be_bytes()); // htype: Ethernet
            frame.extend_from_slice(&ETHERTYPE_IPV4.to_be_bytes()); // ptype
            frame.push(6); // hlen
            frame.push(4); // plen
            frame.extend_from_slice(&1u16.to_be_bytes()); // oper: request
            frame.extend_from_slice(&SRC_MAC);
            frame.extend_from_slice(&SRC_IP);
            frame.extend_from_slice(&[0u8; 6]);
            frame.extend_from_slice(&DST_IP);
        }
        Protocol::Icmp | Protocol::Udp | Protocol::Tcp => {
            frame.extend_from_slice(&ETHERTYPE_IPV4.to_be_bytes());
            build_ipv4(spec, &mut frame)?;
        }
    }
    Ok(frame)
}

fn build_ipv4(spec: &FrameSpec, frame: &mut Vec<u8>) -> Result<(), FrameError> {
    let (ip_proto, l4_header_len) = match spec.protocol {
        Protocol::Icmp => (IP_PROTO_ICMP, 8usize),
        Protocol::Udp => (IP_PROTO_UDP, 8usize),
        Protocol::Tcp => (IP_PROTO_TCP, 20usize),
        Protocol::Arp => unreachable!(),
    };

    // A non-first fragment carries raw payload continuation instead of the
    // transport header.
    let l4_len = if spec.fragment {
        spec.payload_len as usize
    } else {
        l4_header_len + spec.payload_len as usize
    };
    let total_len = 20 + l4_len;

    let ip_start = frame.len();
    frame.push(0x45); // version 4, IHL 5
    frame.push(0); // DSCP/ECN
    frame.extend_from_slice(&(total_len as u16).to_be_bytes());
    frame.extend_from_slice(&0x1234u16.to_be_bytes()); // identification
    if spec.fragment {
        // MF set, fragment offset 1 (8 bytes).
        frame.extend_from_slice(&(0x2000u16 | 1).to_be_bytes());
    } else {
        frame.extend_from_slice(&0u16.to_be_bytes());
    }
    frame.push(64); // TTL
    frame.push(ip_proto);
    frame.extend_from_slice(&0u16.to_be_bytes()); // checksum placeholder
    frame.extend_from_slice(&SRC_IP);
    frame.extend_from_slice(&DST_IP);
    let csum = internet_checksum(&frame[ip_start..ip_start + 20]);
    frame[ip_start + 10..ip_start + 12].copy_from_slice(&csum.to_be_bytes());

    if spec.fragment {
        frame.extend(std::iter::repeat_n(0xA5, spec.payload_len as usize));
        return Ok(());
    }

    let l4_start = frame.len();
    match spec.protocol {
        Protocol::Icmp => {
            frame.push(8); // echo request
            frame.push(0);
            frame.extend_from_slice(&0u16.to_be_bytes()); // checksum placeholder
            frame.extend_from_slice(&0x0001u16.to_be_bytes()); // identifier
            frame.extend_from_slice(&0x0001u16.to_be_bytes()); // sequence
            frame.extend(std::iter::repeat_n(0, spec.payload_len as usize));
            let csum = internet_checksum(&frame[l4_start..]);
            frame[l4_start + 2..l4_start + 4].copy_from_slice(&csum.to_be_bytes());
        }
        Protocol::Udp => {
            let src = spec.remote_port.unwrap_or(40_000);
            let dst = spec.local_port.unwrap();
            frame.extend_from_slice(&src.to_be_bytes());
            frame.extend_from_slice(&dst.to_be_bytes());
            frame.extend_from_slice(&(l4_len as u16).to_be_bytes());
            frame.extend_from_slice(&0u16.to_be_bytes()); // checksum placeholder
            frame.extend(std::iter::repeat_n(0, spec.payload_len as usize));
            let csum = l4_checksum(&frame[l4_start..], IP_PROTO_UDP);
            // An all-zero UDP checksum means "not computed"; the ones
            // complement sum maps zero to 0xFFFF.
            let csum = if csum == 0 { 0xFFFF } else { csum };
            frame[l4_start + 6..l4_start + 8].copy_from_slice(&csum.to_be_bytes());
        }
        Protocol::Tcp => {
            let src = spec.remote_port.unwrap_or(40_000);
            let dst = spec.local_port.unwrap();
            frame.extend_from_slice(&src.to_be_bytes());
            frame.extend_from_slice(&dst.to_be_bytes());
            frame.extend_from_slice(&1u32.to_be_bytes()); // seq
            frame.extend_from_slice(&0u32.to_be_bytes()); // ack
            frame.push(0x50); // data offset 5
            frame.push(0x10); // ACK
            frame.extend_from_slice(&0x1000u16.to_be_bytes()); // window
            frame.extend_from_slice(&0u16.to_be_bytes()); // checksum placeholder
            frame.extend_from_slice(&0u16.to_be_bytes()); // urgent
            frame.extend(std::iter::repeat_n(0, spec.payload_len as usize));
            let csum = l4_checksum(&frame[l4_start..], IP_PROTO_TCP);
            frame[l4_start + 16..l4_start + 18].copy_from_slice(&csum.to_be_bytes());
        }
        Protocol::Arp => unreachable!(),
    }
    Ok(())
}

fn internet_checksum(data: &[u8]) -> u16 {
    ones_complement_sum(data, 0)
}

fn l4_checksum(segment: &[u8], proto: u8) -> u16 {
    let mut pseudo = Vec::with_capacity(12);
    pseudo.extend_from_slice(&SRC_IP);
    pseudo.extend_from_slice(&DST_IP);
    pseudo.push(0);
    pseudo.push(proto);
    pseudo.extend_from_slice(&(segment.len() as u16).to_be_bytes());
    let partial = sum_words(&pseudo);
    ones_complement_sum(segment, partial)
}

fn sum_words(data: &[u8]) -> u32 {
    let mut sum = 0u32;
    let mut chunks = data.chunks_exact(2);
    for c in &mut chunks {
        sum += u32::from(u16::from_be_bytes([c[0], c[1]]));
    }
    if let [last] = chunks.remainder() {
        sum += u32::from(u16::from_be_bytes([*last, 0]));
    }
    sum
}

fn ones_complement_sum(data: &[u8], initial: u32) -> u16 {
    let mut sum = initial + sum_words(data);
    while sum > 0xFFFF {
        sum = (sum & 0xFFFF) + (sum >> 16);
    }
    !(sum as u16)
}

/// Decode the classification-relevant header fields of a frame.
///
/// Inspects at most [`HEADER_PEEK_LIMIT`] leading bytes. Only ARP and IPv4
/// frames are accepted; anything else (including IPv6) is malformed for this
/// receive path.
pub fn decode_headers(frame: &[u8]) -> Result<HeaderSummary, FrameError> {
    let head = &frame[..frame.len().min(HEADER_PEEK_LIMIT)];
    if head.len() < 14 {
        return Err(FrameError::TruncatedFrame);
    }
    let ethertype = u16::from_be_bytes([head[12], head[13]]);
    match ethertype {
        ETHERTYPE_ARP => {
            if frame.len() < 42 {
                return Err(FrameError::TruncatedFrame);
            }
            Ok(HeaderSummary::Arp)
        }
        ETHERTYPE_IPV4 => decode_ipv4(frame, head),
        _ => Err(FrameError::MalformedHeader("unsupported ethertype")),
    }
}

fn decode_ipv4(frame: &[u8], head: &[u8]) -> Result<HeaderSummary, FrameError> {
    if head.len() < 14 + 20 {
        return Err(FrameError::TruncatedFrame);
    }
    let ip = &head[14..];
    let version = ip[0] >> 4;
    if version != 4 {
        return Err(FrameError::MalformedHeader("IP version is not 4"));
    }
    let ihl = (ip[0] & 0x0F) as usize;
    if ihl < 5 {
        return Err(FrameError::MalformedHeader("IPv4 IHL below 5"));
    }
    let total_len = u16::from_be_bytes([ip[2], ip[3]]) as usize;
    if total_len < ihl * 4 {
        return Err(FrameError::MalformedHeader(
            "IPv4 total length below header length",
        ));
    }
    if total_len > frame.len() - 14 {
        return Err(FrameError::TruncatedFrame);
    }
    let frag_word = u16::from_be_bytes([ip[6], ip[7]]);
    let more_fragments = frag_word & 0x2000 != 0;
    let frag_offset = frag_word & 0x1FFF;
    let fragmented = more_fragments || frag_offset != 0;
    let protocol = ip[9];

    let dst_port = if frag_offset == 0 && (protocol == IP_PROTO_UDP || protocol == IP_PROTO_TCP) {
        let l4_start = 14 + ihl * 4;
        if l4_start + 4 <= head.len() {
            if total_len < ihl * 4 + 4 {
                return Err(FrameError::TruncatedFrame);
            }
            Some(u16::from_be_bytes([head[l4_start + 2], head[l4_start + 3]]))
        } else {
            // Transport header lies beyond the peek window (large IP options).
            None
        }
    } else {
        None
    };

    Ok(HeaderSummary::Ipv4 {
        protocol,
        fragmented,
        dst_port,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_length_udp_frame_is_42_bytes() {
        let frame = build_frame(&FrameSpec::udp(7, 0)).unwrap();
        assert_eq!(frame.len(), 42);
        let summary = decode_headers(&frame).unwrap();
        assert_eq!(
            summary,
            HeaderSummary::Ipv4 {
                protocol: IP_PROTO_UDP,
                fragmented: false,
                dst_port: Some(7),
            }
        );
    }

    #[test]
    fn arp_frame_is_42_bytes() {
        let frame = build_frame(&FrameSpec::arp()).unwrap();
        assert_eq!(frame.len(), 42);
        assert_eq!(decode_headers(&frame).unwrap(), HeaderSummary::Arp);
    }

    #[test]
    fn fragment_flag_sets_nonzero_offset() {
        let spec = FrameSpec {
            fragment: true,
            ..FrameSpec::udp(7, 16)
        };
        let frame = build_frame(&spec).unwrap();
        let frag_word = u16::from_be_bytes([frame[20], frame[21]]);
        assert_ne!(frag_word & 0x1FFF, 0);
        match decode_headers(&frame).unwrap() {
            HeaderSummary::Ipv4 {
                fragmented,
                dst_port,
                ..
            } => {
                assert!(fragmented);
                assert_eq!(dst_port, None);
            }
            other => panic!("unexpected summary {other:?}"),
        }
    }

    #[test]
    fn port_on_arp_is_invalid() {
        let spec = FrameSpec {
            protocol: Protocol::Arp,
            local_port: Some(7),
            remote_port: None,
            payload_len: 0,
            fragment: false,
        };
        assert!(matches!(
            build_frame(&spec),
            Err(FrameError::InvalidSpec(_))
        ));
    }

    #[test]
    fn oversized_payload_is_invalid() {
        let spec = FrameSpec::udp(7, 1501);
        assert!(matches!(
            build_frame(&spec),
            Err(FrameError::InvalidSpec(_))
        ));
    }

    #[test]
    fn short_input_is_truncated() {
        assert_eq!(
            decode_headers(&[0u8; 13]),
            Err(FrameError::TruncatedFrame)
        );
    }

    #[test]
    fn ipv6_is_malformed() {
        let mut frame = build_frame(&FrameSpec::udp(7, 0)).unwrap();
        frame[12] = 0x86;
        frame[13] = 0xDD;
        assert!(matches!(
            decode_headers(&frame),
            Err(FrameError::MalformedHeader(_))
        ));
    }

    #[test]
    fn declared_length_beyond_frame_is_truncated() {
        let mut frame = build_frame(&FrameSpec::udp(7, 0)).unwrap();
        // Claim a 100-byte IPv4 datagram inside a 42-byte frame.
        frame[16..18].copy_from_slice(&100u16.to_be_bytes());
        assert_eq!(decode_headers(&frame), Err(FrameError::TruncatedFrame));
    }

    #[test]
    fn ip_header_checksum_is_valid() {
        let frame = build_frame(&FrameSpec::udp(7, 11)).unwrap();
        assert_eq!(internet_checksum(&frame[14..34]), 0);
    }

    fn arb_spec() -> impl Strategy<Value = FrameSpec> {
        (0u8..4, any::<u16>(), any::<u16>(), 0u16..=1500, any::<bool>()).prop_map(
            |(proto, local, remote, len, frag)| match proto {
                0 => FrameSpec::arp(),
                1 => FrameSpec::icmp(len),
                2 => FrameSpec {
                    fragment: frag,
                    ..FrameSpec {
                        remote_port: Some(remote),
                        ..FrameSpec::udp(local, len)
                    }
                },
                _ => FrameSpec {
                    fragment: frag,
                    ..FrameSpec {
                        remote_port: Some(remote),
                        ..FrameSpec::tcp(local, len)
                    }
                },
            },
        )
    }

    proptest! {
        // Round-trip: decoding a built frame reproduces the classification
        // relevant fields of the spec.
        #[test]
        fn decode_inverts_build(spec in arb_spec()) {
            let frame = build_frame(&spec).unwrap();
            let summary = decode_headers(&frame).unwrap();
            match spec.protocol {
                Protocol::Arp => prop_assert_eq!(summary, HeaderSummary::Arp),
                Protocol::Icmp => {
                    prop_assert_eq!(summary, HeaderSummary::Ipv4 {
                        protocol: IP_PROTO_ICMP,
                        fragmented: spec.fragment,
                        dst_port: None,
                    });
                }
                Protocol::Udp | Protocol::Tcp => {
                    let proto = if spec.protocol == Protocol::Udp { IP_PROTO_UDP } else { IP_PROTO_TCP };
                    let port = if spec.fragment { None } else { spec.local_port };
                    prop_assert_eq!(summary, HeaderSummary::Ipv4 {
                        protocol: proto,
                        fragmented: spec.fragment,
                        dst_port: port,
                    });
                }
            }
        }

        // Bytes past the peek limit never influence the decode result.
        #[test]
        fn decode_ignores_bytes_past_peek_limit(spec in arb_spec(), junk in any::<u8>()) {
            let frame = build_frame(&spec).unwrap();
            let before = decode_headers(&frame);
            let mut poisoned = frame.clone();
            for b in poisoned.iter_mut().skip(HEADER_PEEK_LIMIT) {
                *b = junk;
            }
            prop_assert_eq!(before, decode_headers(&poisoned));
        }
    }
}
