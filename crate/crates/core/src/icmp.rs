//! Raw-socket ICMP Echo backend in Paris mode.
//!
//! Per-flow load balancers hash the first four bytes of the ICMP header (type, code,
//! checksum). Each probe carries a two-byte payload chosen so the checksum equals the
//! trace's flow id, while the sequence number encodes the TTL for reply matching.

use std::net::Ipv4Addr;
use std::time::{Duration, Instant};

use crate::record::FlowId;
use crate::tracer::{BackendError, Probe, ProbeReply, ProbingBackend};

const ECHO_REQUEST: u8 = 8;
const ECHO_REPLY: u8 = 0;
const DEST_UNREACHABLE: u8 = 3;
const TIME_EXCEEDED: u8 = 11;

/// Length of a probe: 8-byte header plus the 2-byte checksum compensation word.
pub const PROBE_LEN: usize = 10;

fn ones_add(a: u16, b: u16) -> u16 {
    let s = a as u32 + b as u32;
    ((s & 0xFFFF) + (s >> 16)) as u16
}

/// Internet checksum (RFC 1071) over `data`.
pub fn checksum(data: &[u8]) -> u16 {
    let mut sum = 0u16;
    for chunk in data.chunks(2) {
        let word = u16::from_be_bytes([chunk[0], *chunk.get(1).unwrap_or(&0)]);
        sum = ones_add(sum, word);
    }
    !sum
}

/// Echo request whose checksum field equals `flow_id`.
pub fn build_probe(ident: u16, seq: u16, flow_id: FlowId) -> [u8; PROBE_LEN] {
    let mut p = [0u8; PROBE_LEN];
    p[0] = ECHO_REQUEST;
    p[2..4].copy_from_slice(&flow_id.to_be_bytes());
    p[4..6].copy_from_slice(&ident.to_be_bytes());
    p[6..8].copy_from_slice(&seq.to_be_bytes());
    // Sum over the packet with checksum field included must come to 0xFFFF.
    let partial = [u16::from_be_bytes([p[0], p[1]]), flow_id, ident, seq]
        .into_iter()
        .fold(0u16, ones_add);
    let pad = !partial;
    p[8..10].copy_from_slice(&pad.to_be_bytes());
    p
}

/// Bytes per-flow load balancers hash for ICMP.
pub fn flow_header(packet: &[u8]) -> [u8; 4] {
    [packet[0], packet[1], packet[2], packet[3]]
}

fn seq_for(ttl: u8, attempt: u8) -> u16 {
    u16::from_be_bytes([ttl, attempt])
}

#[derive(Debug, PartialEq, Eq)]
enum Parsed {
    Exceeded {
        from: Ipv4Addr,
        dst: Ipv4Addr,
        ident: u16,
        seq: u16,
    },
    Unreachable {
        from: Ipv4Addr,
        dst: Ipv4Addr,
        ident: u16,
        seq: u16,
    },
    Echo {
        from: Ipv4Addr,
        ident: u16,
        seq: u16,
    },
}

/// Parses an IPv4 datagram carrying ICMP, as delivered by a raw socket.
fn parse_reply(buf: &[u8]) -> Option<Parsed> {
    let ihl = (*buf.first()? & 0x0F) as usize * 4;
    if buf.len() < ihl + 8 || buf[9] != libc::IPPROTO_ICMP as u8 {
        return None;
    }
    let from = Ipv4Addr::new(buf[12], buf[13], buf[14], buf[15]);
    let icmp = &buf[ihl..];
    let quoted = |icmp: &[u8]| -> Option<(Ipv4Addr, u16, u16)> {
        let inner = icmp.get(8..)?;
        let qihl = (*inner.first()? & 0x0F) as usize * 4;
        let q = inner.get(qihl..qihl + 8)?;
        if q[0] != ECHO_REQUEST {
            return None;
        }
        let dst = Ipv4Addr::new(inner[16], inner[17], inner[18], inner[19]);
        Some((dst, u16::from_be_bytes([q[4], q[5]]), u16::from_be_bytes([q[6], q[7]])))
    };
    match icmp[0] {
        ECHO_REPLY => Some(Parsed::Echo {
            from,
            ident: u16::from_be_bytes([icmp[4], icmp[5]]),
            seq: u16::from_be_bytes([icmp[6], icmp[7]]),
        }),
        TIME_EXCEEDED => quoted(icmp).map(|(dst, ident, seq)| Parsed::Exceeded { from, dst, ident, seq }),
        DEST_UNREACHABLE => quoted(icmp).map(|(dst, ident, seq)| Parsed::Unreachable { from, dst, ident, seq }),
        _ => None,
    }
}

/// Real-network backend. Each send opens its own raw socket, so concurrent callers
/// each see every ICMP reply and keep only their own.
#[derive(Debug)]
pub struct IcmpBackend {
    ident: u16,
    local: Ipv4Addr,
}

struct Fd(libc::c_int);

impl Drop for Fd {
    fn drop(&mut self) {
        unsafe {
            libc::close(self.0);
        }
    }
}

fn last_os_error(what: &str) -> BackendError {
    let e = std::io::Error::last_os_error();
    if matches!(e.raw_os_error(), Some(libc::EPERM) | Some(libc::EACCES)) {
        BackendError::Unavailable(format!(
            "{what}: {e}; raw ICMP needs root or CAP_NET_RAW (try `--backend simnet:<scenario>` instead)"
        ))
    } else {
        BackendError::Unavailable(format!("{what}: {e}"))
    }
}

fn open_socket() -> Result<Fd, BackendError> {
    let fd = unsafe { libc::socket(libc::AF_INET, libc::SOCK_RAW, libc::IPPROTO_ICMP) };
    if fd < 0 {
        return Err(last_os_error("opening raw ICMP socket"));
    }
    Ok(Fd(fd))
}

fn sockaddr(addr: Ipv4Addr) -> libc::sockaddr_in {
    let mut sa: libc::sockaddr_in = unsafe { std::mem::zeroed() };
    sa.sin_family = libc::AF_INET as libc::sa_family_t;
    sa.sin_addr = libc::in_addr {
        s_addr: u32::from(addr).to_be(),
    };
    sa
}

impl IcmpBackend {
    /// Checks privileges up front so callers can fall back early.
    pub fn new(local: Ipv4Addr) -> Result<Self, BackendError> {
        drop(open_socket()?);
        Ok(Self {
            ident: (std::process::id() & 0xFFFF) as u16,
            local,
        })
    }
}

impl ProbingBackend for IcmpBackend {
    fn send(&self, probe: &Probe) -> Result<ProbeReply, BackendError> {
        let sock = open_socket()?;
        let ttl: libc::c_int = probe.ttl as libc::c_int;
        let rc = unsafe {
            libc::setsockopt(
                sock.0,
                libc::IPPROTO_IP,
                libc::IP_TTL,
                &ttl as *const _ as *const libc::c_void,
                std::mem::size_of::<libc::c_int>() as libc::socklen_t,
            )
        };
        if rc < 0 {
            return Err(last_os_error("setting IP_TTL"));
        }
        let seq = seq_for(probe.ttl, 0);
        let packet = build_probe(self.ident, seq, probe.flow_id);
        let sa = sockaddr(probe.dst);
        let started = Instant::now();
        let rc = unsafe {
            libc::sendto(
                sock.0,
                packet.as_ptr() as *const libc::c_void,
                packet.len(),
                0,
                &sa as *const libc::sockaddr_in as *const libc::sockaddr,
                std::mem::size_of::<libc::sockaddr_in>() as libc::socklen_t,
            )
        };
        if rc < 0 {
            let e = std::io::Error::last_os_error();
            return match e.raw_os_error() {
                Some(libc::ENETUNREACH) | Some(libc::EHOSTUNREACH) => Err(BackendError::Unroutable(e.to_string())),
                _ => Err(last_os_error("sending probe")),
            };
        }

        let deadline = started + probe.timeout;
        let mut buf = [0u8; 1500];
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return Ok(ProbeReply::Timeout);
            }
            let mut pfd = libc::pollfd {
                fd: sock.0,
                events: libc::POLLIN,
                revents: 0,
            };
            let ms = left.as_millis().clamp(1, i32::MAX as u128) as libc::c_int;
            let ready = unsafe { libc::poll(&mut pfd, 1, ms) };
            if ready < 0 {
                let e = std::io::Error::last_os_error();
                if e.kind() == std::io::ErrorKind::Interrupted {
                    continue;
                }
                return Err(BackendError::Unavailable(format!("poll: {e}")));
            }
            if ready == 0 {
                return Ok(ProbeReply::Timeout);
            }
            let n = unsafe { libc::recv(sock.0, buf.as_mut_ptr() as *mut libc::c_void, buf.len(), 0) };
            if n <= 0 {
                continue;
            }
            let rtt_us = elapsed_us(started.elapsed());
            match parse_reply(&buf[..n as usize]) {
                Some(Parsed::Exceeded {
                    from,
                    dst,
                    ident,
                    seq: s,
                }) if dst == probe.dst && ident == self.ident && s == seq => {
                    return Ok(ProbeReply::TtlExceeded {
                        responder: from,
                        rtt_us,
                    });
                }
                Some(Parsed::Unreachable {
                    from,
                    dst,
                    ident,
                    seq: s,
                }) if dst == probe.dst && ident == self.ident && s == seq && from == probe.dst => {
                    return Ok(ProbeReply::EchoReply {
                        responder: from,
                        rtt_us,
                    });
                }
                Some(Parsed::Echo { from, ident, seq: s }) if from == probe.dst && ident == self.ident && s == seq => {
                    return Ok(ProbeReply::EchoReply {
                        responder: from,
                        rtt_us,
                    });
                }
                _ => {}
            }
        }
    }

    fn local_addr(&self) -> Ipv4Addr {
        self.local
    }
}

fn elapsed_us(d: Duration) -> u64 {
    d.as_micros().min(u64::MAX as u128) as u64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checksum_equals_flow_id_for_every_sequence() {
        for flow in [1u16, 0x1234, 0xFFFE, 0x8000] {
            for seq in (0..=u16::MAX).step_by(7) {
                let p = build_probe(0xBEEF, seq, flow);
                assert_eq!(u16::from_be_bytes([p[2], p[3]]), flow);
                // a valid packet sums to zero after complementing
                assert_eq!(checksum(&p), 0, "flow {flow:#x} seq {seq}");
            }
        }
    }

    #[test]
    fn flow_header_constant_across_probes() {
        let first = flow_header(&build_probe(7, seq_for(1, 0), 0x4242));
        for ttl in 1..=30 {
            for attempt in 0..2 {
                assert_eq!(flow_header(&build_probe(7, seq_for(ttl, attempt), 0x4242)), first);
            }
        }
    }

    fn ip_header(src: [u8; 4], dst: [u8; 4]) -> Vec<u8> {
        let mut h = vec![0x45, 0, 0, 0, 0, 0, 0, 0, 64, 1, 0, 0];
        h.extend_from_slice(&src);
        h.extend_from_slice(&dst);
        h
    }

    #[test]
    fn parses_time_exceeded_quote() {
        let probe = build_probe(9, seq_for(4, 0), 77);
        let mut pkt = ip_header([200, 87, 1, 1], [10, 0, 0, 2]);
        pkt.extend_from_slice(&[TIME_EXCEEDED, 0, 0, 0, 0, 0, 0, 0]);
        pkt.extend_from_slice(&ip_header([10, 0, 0, 2], [200, 87, 9, 9]));
        pkt.extend_from_slice(&probe[..8]);
        assert_eq!(
            parse_reply(&pkt),
            Some(Parsed::Exceeded {
                from: Ipv4Addr::new(200, 87, 1, 1),
                dst: Ipv4Addr::new(200, 87, 9, 9),
                ident: 9,
                seq: seq_for(4, 0),
            })
        );
        assert_eq!(parse_reply(&pkt[..30]), None);
    }

    #[test]
    fn parses_echo_reply() {
        let mut pkt = ip_header([200, 87, 9, 9], [10, 0, 0, 2]);
        pkt.extend_from_slice(&[ECHO_REPLY, 0, 0, 0, 0, 9, 0x04, 0]);
        assert_eq!(
            parse_reply(&pkt),
            Some(Parsed::Echo {
                from: Ipv4Addr::new(200, 87, 9, 9),
                ident: 9,
                seq: seq_for(4, 0),
            })
        );
    }
}
