//! Live network backend: UDP probes with a TTL, answers read from a raw
//! ICMP socket. Needs CAP_NET_RAW (or root).

use std::io::{ErrorKind, Read};
use std::net::{Ipv4Addr, SocketAddrV4, UdpSocket};
use std::time::{Duration, Instant};

use chrono::Utc;
use socket2::{Domain, Protocol, Socket, Type};

use crate::types::{to_micros, GraObservation, HopReply, Timestamp};

use super::{PathResponder, ProbeConfig, ProbeError, RevelioNetwork, StunClient, StunError, UpnpClient};

/// First destination port of classic traceroute.
pub const BASE_PORT: u16 = 33434;
const IP_UDP_HEADERS: u16 = 28;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IcmpKind {
    TimeExceeded,
    Unreachable,
}

/// An ICMP error that quotes one of our UDP probes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IcmpQuote {
    pub responder: Ipv4Addr,
    pub kind: IcmpKind,
    pub probe_target: Ipv4Addr,
    pub src_port: u16,
    pub dst_port: u16,
}

fn be16(b: &[u8], at: usize) -> Option<u16> {
    Some(u16::from_be_bytes([*b.get(at)?, *b.get(at + 1)?]))
}

fn ipv4_at(b: &[u8], at: usize) -> Option<Ipv4Addr> {
    let o: [u8; 4] = b.get(at..at + 4)?.try_into().ok()?;
    Some(Ipv4Addr::from(o))
}

/// Parses a raw IPv4 datagram carrying ICMP Time Exceeded or Destination
/// Unreachable around a quoted UDP header. Anything else yields `None`.
pub fn parse_icmp_quote(packet: &[u8]) -> Option<IcmpQuote> {
    if packet.first()? >> 4 != 4 || *packet.get(9)? != 1 {
        return None;
    }
    let ihl = usize::from(packet[0] & 0x0f) * 4;
    let responder = ipv4_at(packet, 12)?;
    let kind = match *packet.get(ihl)? {
        11 => IcmpKind::TimeExceeded,
        3 => IcmpKind::Unreachable,
        _ => return None,
    };
    let quoted = packet.get(ihl + 8..)?;
    if quoted.first()? >> 4 != 4 || *quoted.get(9)? != 17 {
        return None;
    }
    let qihl = usize::from(quoted[0] & 0x0f) * 4;
    Some(IcmpQuote {
        responder,
        kind,
        probe_target: ipv4_at(quoted, 16)?,
        src_port: be16(quoted, qihl)?,
        dst_port: be16(quoted, qihl + 2)?,
    })
}

pub struct LiveNetwork {
    udp: UdpSocket,
    icmp: Socket,
    local_port: u16,
    seq: u16,
}

impl LiveNetwork {
    pub fn open() -> Result<Self, ProbeError> {
        let icmp = Socket::new(Domain::IPV4, Type::RAW, Some(Protocol::ICMPV4)).map_err(|e| {
            if e.kind() == ErrorKind::PermissionDenied {
                ProbeError::PermissionDenied("raw ICMP socket needs CAP_NET_RAW".into())
            } else {
                ProbeError::SendFailure(e.to_string())
            }
        })?;
        let udp = UdpSocket::bind("0.0.0.0:0").map_err(|e| ProbeError::SendFailure(e.to_string()))?;
        let local_port = udp.local_addr().map_err(|e| ProbeError::SendFailure(e.to_string()))?.port();
        Ok(LiveNetwork { udp, icmp, local_port, seq: 0 })
    }

    fn next_port(&mut self) -> u16 {
        self.seq = (self.seq + 1) % 1024;
        BASE_PORT + self.seq
    }
}

impl PathResponder for LiveNetwork {
    fn probe(&mut self, target: Ipv4Addr, size: u16, ttl: u8, timeout: Duration) -> Result<Option<HopReply>, ProbeError> {
        let send_err = |e: std::io::Error| ProbeError::SendFailure(e.to_string());
        let port = self.next_port();
        let payload = vec![0u8; usize::from(size.saturating_sub(IP_UDP_HEADERS))];
        self.udp.set_ttl(u32::from(ttl)).map_err(send_err)?;
        let sent = Instant::now();
        self.udp.send_to(&payload, SocketAddrV4::new(target, port)).map_err(send_err)?;

        let mut buf = [0u8; 1500];
        let deadline = sent + timeout;
        while let Some(left) = deadline.checked_duration_since(Instant::now()).filter(|d| !d.is_zero()) {
            self.icmp.set_read_timeout(Some(left)).map_err(send_err)?;
            let n = match (&self.icmp).read(&mut buf) {
                Ok(n) => n,
                Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => break,
                Err(e) => return Err(send_err(e)),
            };
            let rtt = sent.elapsed();
            match parse_icmp_quote(&buf[..n]) {
                Some(q) if q.src_port == self.local_port && q.dst_port == port && q.probe_target == target => {
                    return Ok(Some(HopReply { responder: q.responder, rtt_us: rtt.as_secs_f64() * 1e6 }));
                }
                _ => continue,
            }
        }
        Ok(None)
    }

    fn now(&self) -> Timestamp {
        to_micros(Utc::now())
    }

    fn pause(&mut self, gap: Duration) {
        std::thread::sleep(gap);
    }
}

impl RevelioNetwork for LiveNetwork {
    fn discover_gra(&mut self, cfg: &ProbeConfig) -> Result<GraObservation, StunError> {
        StunClient::new(cfg.stun_server.clone()).discover()
    }

    fn query_upnp(&mut self) -> Option<Ipv4Addr> {
        UpnpClient::default().query_wan_ip()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn icmp_packet(icmp_type: u8, responder: [u8; 4], target: [u8; 4], sport: u16, dport: u16) -> Vec<u8> {
        let mut p = vec![0x45, 0, 0, 56, 0, 0, 0, 0, 64, 1, 0, 0];
        p.extend(responder);
        p.extend([192, 168, 1, 5]);
        p.extend([icmp_type, 0, 0, 0, 0, 0, 0, 0]);
        p.extend([0x45, 0, 0, 120, 0, 0, 0, 0, 1, 17, 0, 0, 192, 168, 1, 5]);
        p.extend(target);
        p.extend(sport.to_be_bytes());
        p.extend(dport.to_be_bytes());
        p.extend([0, 100, 0, 0]);
        p
    }

    #[test]
    fn parses_time_exceeded() {
        let p = icmp_packet(11, [100, 64, 0, 1], [8, 8, 8, 8], 40000, 33435);
        let q = parse_icmp_quote(&p).unwrap();
        assert_eq!(q.responder, Ipv4Addr::new(100, 64, 0, 1));
        assert_eq!(q.kind, IcmpKind::TimeExceeded);
        assert_eq!(q.probe_target, Ipv4Addr::new(8, 8, 8, 8));
        assert_eq!((q.src_port, q.dst_port), (40000, 33435));
    }

    #[test]
    fn parses_port_unreachable() {
        let p = icmp_packet(3, [8, 8, 8, 8], [8, 8, 8, 8], 40000, 33500);
        assert_eq!(parse_icmp_quote(&p).unwrap().kind, IcmpKind::Unreachable);
    }

    #[test]
    fn ignores_echo_and_truncation() {
        let mut echo = icmp_packet(0, [1, 1, 1, 1], [8, 8, 8, 8], 1, 2);
        assert!(parse_icmp_quote(&echo).is_none());
        echo[20] = 11;
        assert!(parse_icmp_quote(&echo[..40]).is_none());
        assert!(parse_icmp_quote(&[]).is_none());
        let mut tcp = icmp_packet(11, [1, 1, 1, 1], [8, 8, 8, 8], 1, 2);
        tcp[37] = 6;
        assert!(parse_icmp_quote(&tcp).is_none());
    }

    #[test]
    fn open_reports_missing_privilege_cleanly() {
        // succeeds as root, otherwise must be PermissionDenied rather than a panic
        match LiveNetwork::open() {
            Ok(net) => assert_ne!(net.local_port, 0),
            Err(e) => assert!(matches!(e, ProbeError::PermissionDenied(_) | ProbeError::SendFailure(_)), "{e}"),
        }
    }
}
