//! STUN (RFC 5389) Binding exchange, just enough to learn the mapped address.

use std::net::{Ipv4Addr, SocketAddr, SocketAddrV4, ToSocketAddrs, UdpSocket};
use std::time::Duration;

use chrono::Utc;
use thiserror::Error;

use crate::types::{classify_address, to_micros, GraObservation, IpClass};

pub const MAGIC_COOKIE: u32 = 0x2112_A442;
pub const BINDING_REQUEST: u16 = 0x0001;
pub const BINDING_RESPONSE: u16 = 0x0101;
pub const ATTR_MAPPED_ADDRESS: u16 = 0x0001;
pub const ATTR_XOR_MAPPED_ADDRESS: u16 = 0x0020;
const FAMILY_IPV4: u8 = 0x01;
const HEADER_LEN: usize = 20;

pub type TransactionId = [u8; 12];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StunError {
    #[error("no STUN response after {0} retransmissions")]
    Timeout(u32),
    #[error("malformed STUN message: {0}")]
    Malformed(String),
    #[error("mapped address {0} is not public")]
    NonPublicMapping(Ipv4Addr),
    #[error("cannot resolve STUN server {0}")]
    Resolve(String),
    #[error("STUN socket error: {0}")]
    Io(String),
}

impl From<std::io::Error> for StunError {
    fn from(e: std::io::Error) -> Self {
        StunError::Io(e.to_string())
    }
}

fn malformed(msg: impl Into<String>) -> StunError {
    StunError::Malformed(msg.into())
}

fn write_header(buf: &mut Vec<u8>, msg_type: u16, body_len: u16, txn: &TransactionId) {
    buf.extend_from_slice(&msg_type.to_be_bytes());
    buf.extend_from_slice(&body_len.to_be_bytes());
    buf.extend_from_slice(&MAGIC_COOKIE.to_be_bytes());
    buf.extend_from_slice(txn);
}

pub fn encode_binding_request(txn: &TransactionId) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN);
    write_header(&mut buf, BINDING_REQUEST, 0, txn);
    buf
}

/// XORs an address and port with the magic cookie; its own inverse.
pub fn xor_address(addr: SocketAddrV4) -> SocketAddrV4 {
    let ip = u32::from(*addr.ip()) ^ MAGIC_COOKIE;
    let port = addr.port() ^ (MAGIC_COOKIE >> 16) as u16;
    SocketAddrV4::new(Ipv4Addr::from(ip), port)
}

fn address_value(addr: SocketAddrV4) -> [u8; 8] {
    let mut v = [0u8; 8];
    v[1] = FAMILY_IPV4;
    v[2..4].copy_from_slice(&addr.port().to_be_bytes());
    v[4..8].copy_from_slice(&addr.ip().octets());
    v
}

/// Success response carrying XOR-MAPPED-ADDRESS, plus MAPPED-ADDRESS when
/// `include_legacy` is set.
pub fn encode_binding_response(txn: &TransactionId, mapped: SocketAddrV4, include_legacy: bool) -> Vec<u8> {
    let mut attrs = Vec::new();
    if include_legacy {
        attrs.extend_from_slice(&ATTR_MAPPED_ADDRESS.to_be_bytes());
        attrs.extend_from_slice(&8u16.to_be_bytes());
        attrs.extend_from_slice(&address_value(mapped));
    }
    attrs.extend_from_slice(&ATTR_XOR_MAPPED_ADDRESS.to_be_bytes());
    attrs.extend_from_slice(&8u16.to_be_bytes());
    attrs.extend_from_slice(&address_value(xor_address(mapped)));

    let mut buf = Vec::with_capacity(HEADER_LEN + attrs.len());
    write_header(&mut buf, BINDING_RESPONSE, attrs.len() as u16, txn);
    buf.extend_from_slice(&attrs);
    buf
}

struct Header {
    msg_type: u16,
    body_len: usize,
    txn: TransactionId,
}

fn parse_header(buf: &[u8]) -> Result<Header, StunError> {
    if buf.len() < HEADER_LEN {
        return Err(malformed(format!("{} bytes, header needs {HEADER_LEN}", buf.len())));
    }
    if buf[0] & 0xC0 != 0 {
        return Err(malformed("leading bits of message type are not zero"));
    }
    let msg_type = u16::from_be_bytes([buf[0], buf[1]]);
    let body_len = usize::from(u16::from_be_bytes([buf[2], buf[3]]));
    let cookie = u32::from_be_bytes([buf[4], buf[5], buf[6], buf[7]]);
    if cookie != MAGIC_COOKIE {
        return Err(malformed(format!("bad magic cookie {cookie:#010x}")));
    }
    if body_len % 4 != 0 || HEADER_LEN + body_len > buf.len() {
        return Err(malformed(format!("message length {body_len} inconsistent with {} bytes", buf.len())));
    }
    let mut txn = [0u8; 12];
    txn.copy_from_slice(&buf[8..20]);
    Ok(Header { msg_type, body_len, txn })
}

/// Decodes a Binding Request, returning its transaction id.
pub fn decode_binding_request(buf: &[u8]) -> Result<TransactionId, StunError> {
    let header = parse_header(buf)?;
    if header.msg_type != BINDING_REQUEST {
        return Err(malformed(format!("expected Binding Request, got {:#06x}", header.msg_type)));
    }
    Ok(header.txn)
}

fn parse_address_value(value: &[u8]) -> Result<SocketAddrV4, StunError> {
    if value.len() < 8 {
        return Err(malformed("address attribute shorter than 8 bytes"));
    }
    if value[1] != FAMILY_IPV4 {
        return Err(malformed(format!("unsupported address family {:#04x}", value[1])));
    }
    let port = u16::from_be_bytes([value[2], value[3]]);
    let ip = Ipv4Addr::new(value[4], value[5], value[6], value[7]);
    Ok(SocketAddrV4::new(ip, port))
}

/// Decodes a Binding success response for `expected`, preferring
/// XOR-MAPPED-ADDRESS over MAPPED-ADDRESS.
pub fn decode_binding_response(buf: &[u8], expected: &TransactionId) -> Result<SocketAddrV4, StunError> {
    let header = parse_header(buf)?;
    if header.msg_type != BINDING_RESPONSE {
        return Err(malformed(format!("expected Binding Response, got {:#06x}", header.msg_type)));
    }
    if &header.txn != expected {
        return Err(malformed("transaction id mismatch"));
    }

    let body = &buf[HEADER_LEN..HEADER_LEN + header.body_len];
    let mut pos = 0;
    let mut legacy = None;
    while pos < body.len() {
        if pos + 4 > body.len() {
            return Err(malformed("truncated attribute header"));
        }
        let attr_type = u16::from_be_bytes([body[pos], body[pos + 1]]);
        let attr_len = usize::from(u16::from_be_bytes([body[pos + 2], body[pos + 3]]));
        let start = pos + 4;
        let end = start + attr_len;
        if end > body.len() {
            return Err(malformed(format!("attribute {attr_type:#06x} overruns message")));
        }
        match attr_type {
            ATTR_XOR_MAPPED_ADDRESS => return Ok(xor_address(parse_address_value(&body[start..end])?)),
            ATTR_MAPPED_ADDRESS if legacy.is_none() => legacy = Some(parse_address_value(&body[start..end])?),
            _ => {}
        }
        // attributes are padded to a 4-byte boundary
        pos = start + attr_len.div_ceil(4) * 4;
    }
    legacy.ok_or_else(|| malformed("no mapped address attribute"))
}

/// Accepts a mapping as GRA evidence. The identity mapping (nothing
/// translates) is accepted whatever its realm; any other mapping must be public.
pub fn validate_mapping(local: SocketAddrV4, mapped: SocketAddrV4) -> Result<(), StunError> {
    if local == mapped || classify_address(*mapped.ip()) == IpClass::Public {
        Ok(())
    } else {
        Err(StunError::NonPublicMapping(*mapped.ip()))
    }
}

/// Blocking STUN client over UDP with exponential retransmission backoff.
#[derive(Debug, Clone)]
pub struct StunClient {
    pub server: String,
    /// First retransmission timeout; doubles after each attempt.
    pub initial_rto: Duration,
    pub retransmits: u32,
}

impl StunClient {
    pub fn new(server: impl Into<String>) -> Self {
        StunClient { server: server.into(), initial_rto: Duration::from_millis(500), retransmits: 3 }
    }

    fn resolve(&self) -> Result<SocketAddr, StunError> {
        self.server
            .to_socket_addrs()
            .map_err(|_| StunError::Resolve(self.server.clone()))?
            .find(SocketAddr::is_ipv4)
            .ok_or_else(|| StunError::Resolve(self.server.clone()))
    }

    pub fn discover(&self) -> Result<GraObservation, StunError> {
        let server = self.resolve()?;
        let socket = UdpSocket::bind("0.0.0.0:0")?;
        socket.connect(server)?;
        let SocketAddr::V4(local) = socket.local_addr()? else {
            return Err(StunError::Io("socket bound to a non-IPv4 address".into()));
        };

        let txn: TransactionId = rand::random();
        let request = encode_binding_request(&txn);
        let mut buf = [0u8; 1500];
        let mut rto = self.initial_rto;
        for _ in 0..=self.retransmits {
            socket.send(&request)?;
            let deadline = std::time::Instant::now() + rto;
            while let Some(left) = deadline.checked_duration_since(std::time::Instant::now()) {
                if left.is_zero() {
                    break;
                }
                socket.set_read_timeout(Some(left))?;
                let n = match socket.recv(&mut buf) {
                    Ok(n) => n,
                    Err(e) if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => break,
                    Err(e) => return Err(e.into()),
                };
                // stray datagrams for other transactions are ignored
                match decode_binding_response(&buf[..n], &txn) {
                    Ok(mapped) => {
                        validate_mapping(local, mapped)?;
                        return Ok(GraObservation {
                            gra: *mapped.ip(),
                            mapped_port: mapped.port(),
                            local_address: *local.ip(),
                            local_port: local.port(),
                            timestamp: to_micros(Utc::now()),
                        });
                    }
                    Err(StunError::Malformed(m)) if m == "transaction id mismatch" => continue,
                    Err(e) => return Err(e),
                }
            }
            rto *= 2;
        }
        Err(StunError::Timeout(self.retransmits))
    }
}
