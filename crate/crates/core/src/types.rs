//! Shared vocabulary: address realms, hop observations, per-probe state and
//! verdicts.

use std::collections::BTreeSet;
use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use chrono::{DateTime, DurationRound, TimeDelta, Utc};
use serde::{Deserialize, Serialize};

pub type Timestamp = DateTime<Utc>;

/// Smallest IP total length a probe may carry (IPv4 + UDP headers plus payload).
pub const MIN_PROBE_SIZE: u16 = 64;
/// Largest probe size; one Ethernet MTU, no fragmentation.
pub const MAX_PROBE_SIZE: u16 = 1500;

/// Truncates a timestamp to microsecond resolution.
pub fn to_micros(ts: Timestamp) -> Timestamp {
    ts.duration_trunc(TimeDelta::microseconds(1)).unwrap_or(ts)
}

/// Address realm of an IPv4 address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IpClass {
    Public,
    Private,
    Shared,
    Loopback,
    LinkLocal,
    Unspecified,
}

impl IpClass {
    /// Private or shared space, the two realms that hint at an ISP-side NAT.
    pub fn is_special(self) -> bool {
        matches!(self, IpClass::Private | IpClass::Shared)
    }

    /// Loopback, link-local and unspecified replies carry no topological
    /// meaning and are treated as missing by access-link logic.
    pub fn is_topological(self) -> bool {
        !matches!(self, IpClass::Loopback | IpClass::LinkLocal | IpClass::Unspecified)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            IpClass::Public => "public",
            IpClass::Private => "private",
            IpClass::Shared => "shared",
            IpClass::Loopback => "loopback",
            IpClass::LinkLocal => "link_local",
            IpClass::Unspecified => "unspecified",
        }
    }
}

impl fmt::Display for IpClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for IpClass {
    type Err = ParseEnumError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "public" => IpClass::Public,
            "private" => IpClass::Private,
            "shared" => IpClass::Shared,
            "loopback" => IpClass::Loopback,
            "link_local" => IpClass::LinkLocal,
            "unspecified" => IpClass::Unspecified,
            _ => return Err(ParseEnumError::new("address class", s)),
        })
    }
}

// (network, prefix length, class); first match wins, anything else is public.
const RESERVED_BLOCKS: [(u32, u32, IpClass); 7] = [
    (0x0000_0000, 8, IpClass::Unspecified), // 0.0.0.0/8
    (0x7F00_0000, 8, IpClass::Loopback),    // 127.0.0.0/8
    (0xA9FE_0000, 16, IpClass::LinkLocal),  // 169.254.0.0/16
    (0x0A00_0000, 8, IpClass::Private),     // 10.0.0.0/8
    (0xAC10_0000, 12, IpClass::Private),    // 172.16.0.0/12
    (0xC0A8_0000, 16, IpClass::Private),    // 192.168.0.0/16
    (0x6440_0000, 10, IpClass::Shared),     // 100.64.0.0/10
];

/// Classifies an IPv4 address into its realm. Total over the address space.
pub fn classify_address(addr: Ipv4Addr) -> IpClass {
    let bits = u32::from(addr);
    RESERVED_BLOCKS
        .iter()
        .find(|(net, len, _)| bits & (u32::MAX << (32 - len)) == *net)
        .map(|&(_, _, class)| class)
        .unwrap_or(IpClass::Public)
}

/// The answer to one TTL-limited probe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HopReply {
    pub responder: Ipv4Addr,
    /// Round-trip time in microseconds.
    pub rtt_us: f64,
}

/// One traceroute probe and its outcome. A `None` reply is a timeout: both
/// responder and RTT are missing together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HopObservation {
    pub ttl: u8,
    pub reply: Option<HopReply>,
    /// Total IP length of the probe in bytes.
    pub probe_size: u16,
    pub target: Ipv4Addr,
    pub timestamp: Timestamp,
}

impl HopObservation {
    pub fn reply(
        ttl: u8,
        responder: Ipv4Addr,
        rtt_us: f64,
        probe_size: u16,
        target: Ipv4Addr,
        timestamp: Timestamp,
    ) -> Self {
        HopObservation {
            ttl,
            reply: Some(HopReply { responder, rtt_us }),
            probe_size,
            target,
            timestamp: to_micros(timestamp),
        }
    }

    pub fn timeout(ttl: u8, probe_size: u16, target: Ipv4Addr, timestamp: Timestamp) -> Self {
        HopObservation { ttl, reply: None, probe_size, target, timestamp: to_micros(timestamp) }
    }

    pub fn responder(&self) -> Option<Ipv4Addr> {
        self.reply.map(|r| r.responder)
    }

    pub fn rtt_us(&self) -> Option<f64> {
        self.reply.map(|r| r.rtt_us)
    }

    /// Responder if it is a topologically meaningful address.
    pub fn topological_responder(&self) -> Option<Ipv4Addr> {
        self.responder().filter(|a| classify_address(*a).is_topological())
    }

    pub fn is_valid(&self) -> bool {
        self.ttl >= 1
            && (MIN_PROBE_SIZE..=MAX_PROBE_SIZE).contains(&self.probe_size)
            && self.reply.is_none_or(|r| r.rtt_us.is_finite() && r.rtt_us >= 0.0)
    }
}

/// Globally routable address as reported by a STUN server.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GraObservation {
    pub gra: Ipv4Addr,
    pub mapped_port: u16,
    pub local_address: Ipv4Addr,
    pub local_port: u16,
    pub timestamp: Timestamp,
}

impl GraObservation {
    /// The mapped endpoint is the local socket itself: nothing upstream translates.
    pub fn is_identity_mapping(&self) -> bool {
        self.gra == self.local_address && self.mapped_port == self.local_port
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessTechnology {
    Dsl,
    Cable,
    Fiber,
    Satellite,
    #[default]
    Unknown,
}

impl AccessTechnology {
    pub const KNOWN: [AccessTechnology; 4] = [
        AccessTechnology::Dsl,
        AccessTechnology::Cable,
        AccessTechnology::Fiber,
        AccessTechnology::Satellite,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AccessTechnology::Dsl => "dsl",
            AccessTechnology::Cable => "cable",
            AccessTechnology::Fiber => "fiber",
            AccessTechnology::Satellite => "satellite",
            AccessTechnology::Unknown => "unknown",
        }
    }
}

impl fmt::Display for AccessTechnology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AccessTechnology {
    type Err = ParseEnumError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "dsl" => AccessTechnology::Dsl,
            "cable" => AccessTechnology::Cable,
            "fiber" | "fibre" | "ftth" => AccessTechnology::Fiber,
            "satellite" => AccessTechnology::Satellite,
            "unknown" | "" => AccessTechnology::Unknown,
            _ => return Err(ParseEnumError::new("access technology", s)),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown {what}: {value:?}")]
pub struct ParseEnumError {
    what: &'static str,
    value: String,
}

impl ParseEnumError {
    pub(crate) fn new(what: &'static str, value: &str) -> Self {
        ParseEnumError { what, value: value.to_owned() }
    }
}

/// Per-probe aggregate of every run, the input to reporting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RevelioState {
    pub device_id: String,
    pub isp_name: String,
    pub country: String,
    pub technology: AccessTechnology,
    pub local_ip: Option<Ipv4Addr>,
    pub gra_set: Vec<GraObservation>,
    pub hops_to_gra: Option<u8>,
    /// Index of the access link; equals the hop number of its ISP-side end.
    pub access_link_hop: Option<u8>,
    pub private_after_cpe: BTreeSet<Ipv4Addr>,
    pub shared_after_access: BTreeSet<Ipv4Addr>,
    pub upnp_wan_ip: Option<Ipv4Addr>,
    pub run_count: u32,
}

impl RevelioState {
    pub fn distinct_gras(&self) -> BTreeSet<Ipv4Addr> {
        self.gra_set.iter().map(|o| o.gra).collect()
    }

    pub fn check_invariants(&self) -> bool {
        self.private_after_cpe.iter().all(|a| classify_address(*a) == IpClass::Private)
            && self.shared_after_access.iter().all(|a| classify_address(*a) == IpClass::Shared)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictKind {
    Inconclusive,
    NoHomeNat,
    SimpleHomeNat,
    CarrierGradeNat,
}

impl VerdictKind {
    pub const ALL: [VerdictKind; 4] = [
        VerdictKind::Inconclusive,
        VerdictKind::NoHomeNat,
        VerdictKind::SimpleHomeNat,
        VerdictKind::CarrierGradeNat,
    ];

    pub fn is_definite(self) -> bool {
        self != VerdictKind::Inconclusive
    }

    pub fn as_str(self) -> &'static str {
        match self {
            VerdictKind::Inconclusive => "inconclusive",
            VerdictKind::NoHomeNat => "no_home_nat",
            VerdictKind::SimpleHomeNat => "simple_home_nat",
            VerdictKind::CarrierGradeNat => "carrier_grade_nat",
        }
    }
}

impl fmt::Display for VerdictKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VerdictKind {
    type Err = ParseEnumError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        VerdictKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| ParseEnumError::new("verdict", s))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Correction {
    SpuriousLinkPurge,
    ExpectedDelayCorrection,
}

/// The individual test a finding came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RevelioTest {
    Stun,
    TracerouteToGra,
    Pathchar,
    PathcharToGra,
    Upnp,
    SpecialAddresses,
    RunFusion,
}

/// Observation backing a verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "finding", rename_all = "snake_case")]
pub enum Finding {
    StunFailed { reason: String },
    LocalIpIsGra { address: Ipv4Addr },
    UpnpMatchesGra { address: Ipv4Addr },
    UpnpSpecialAddress { address: Ipv4Addr, class: IpClass },
    UpnpOtherPublic { address: Ipv4Addr },
    /// The UPnP answer came from an inner router, not the CPE.
    UpnpNotFromCpe { address: Ipv4Addr, class: IpClass },
    UpnpUnavailable,
    AccessLink { link: u8, delay_us: f64, corrected: bool },
    AccessLinkUndetermined,
    ProfileGap { link: u8 },
    GraBeforeAccessLink { gra_hop: u8, access_link: u8 },
    GraAfterAccessLink { gra_hop: u8, access_link: u8 },
    RoutedPastAccessLink { hop: u8, responder: Ipv4Addr, access_link: u8 },
    GraUnreachable,
    SpuriousLinkPurged { link: u8, external_delay_us: f64, gra_delay_us: f64 },
    SpuriousCheckSkipped { reason: String },
    PrivateAfterAccess { addresses: Vec<Ipv4Addr> },
    SharedAfterAccess { addresses: Vec<Ipv4Addr> },
    TestsDisagree { upnp: VerdictKind, traceroute: VerdictKind },
    RunsDisagree { kinds: Vec<VerdictKind> },
}

impl Finding {
    pub fn test(&self) -> RevelioTest {
        use Finding::*;
        match self {
            StunFailed { .. } | LocalIpIsGra { .. } => RevelioTest::Stun,
            UpnpMatchesGra { .. }
            | UpnpSpecialAddress { .. }
            | UpnpOtherPublic { .. }
            | UpnpNotFromCpe { .. }
            | UpnpUnavailable => RevelioTest::Upnp,
            AccessLink { .. } | AccessLinkUndetermined | ProfileGap { .. } => RevelioTest::Pathchar,
            GraBeforeAccessLink { .. }
            | GraAfterAccessLink { .. }
            | RoutedPastAccessLink { .. }
            | GraUnreachable => RevelioTest::TracerouteToGra,
            SpuriousLinkPurged { .. } | SpuriousCheckSkipped { .. } => RevelioTest::PathcharToGra,
            PrivateAfterAccess { .. } | SharedAfterAccess { .. } => RevelioTest::SpecialAddresses,
            TestsDisagree { .. } | RunsDisagree { .. } => RevelioTest::RunFusion,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub test: RevelioTest,
    #[serde(flatten)]
    pub finding: Finding,
}

impl From<Finding> for Evidence {
    fn from(finding: Finding) -> Self {
        Evidence { test: finding.test(), finding }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub kind: VerdictKind,
    pub evidence: Vec<Evidence>,
    pub corrections_applied: BTreeSet<Correction>,
}

impl Verdict {
    pub fn findings(&self) -> impl Iterator<Item = &Finding> {
        self.evidence.iter().map(|e| &e.finding)
    }

    /// A no-home-NAT verdict must cite the local address matching the GRA, a
    /// CGN verdict must place the GRA-NAT past the access link.
    pub fn check_invariants(&self) -> bool {
        match self.kind {
            VerdictKind::NoHomeNat => {
                self.findings().any(|f| matches!(f, Finding::LocalIpIsGra { .. }))
            }
            VerdictKind::CarrierGradeNat => self.findings().any(|f| {
                matches!(
                    f,
                    Finding::GraAfterAccessLink { .. }
                        | Finding::RoutedPastAccessLink { .. }
                        | Finding::UpnpSpecialAddress { .. }
                )
            }),
            _ => true,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ip(s: &str) -> Ipv4Addr {
        s.parse().unwrap()
    }

    #[test]
    fn classify_examples() {
        assert_eq!(classify_address(ip("192.168.1.10")), IpClass::Private);
        assert_eq!(classify_address(ip("100.64.0.1")), IpClass::Shared);
        assert_eq!(classify_address(ip("8.8.8.8")), IpClass::Public);
    }

    #[test]
    fn classify_block_edges() {
        let cases = [
            ("100.63.255.255", IpClass::Public),
            ("100.64.0.0", IpClass::Shared),
            ("100.127.255.255", IpClass::Shared),
            ("100.128.0.0", IpClass::Public),
            ("172.15.255.255", IpClass::Public),
            ("172.16.0.0", IpClass::Private),
            ("172.31.255.255", IpClass::Private),
            ("172.32.0.0", IpClass::Public),
            ("9.255.255.255", IpClass::Public),
            ("10.0.0.0", IpClass::Private),
            ("11.0.0.0", IpClass::Public),
            ("192.167.255.255", IpClass::Public),
            ("192.169.0.0", IpClass::Public),
            ("127.0.0.1", IpClass::Loopback),
            ("169.254.3.4", IpClass::LinkLocal),
            ("0.0.0.0", IpClass::Unspecified),
        ];
        for (addr, class) in cases {
            assert_eq!(classify_address(ip(addr)), class, "{addr}");
        }
    }

    #[test]
    fn timeout_has_no_responder() {
        let obs = HopObservation::timeout(3, 120, ip("8.8.8.8"), Utc::now());
        assert!(obs.responder().is_none() && obs.rtt_us().is_none());
        assert!(obs.is_valid());
        let bad = HopObservation { probe_size: 40, ..obs };
        assert!(!bad.is_valid());
    }

    #[test]
    fn timestamps_truncate_to_micros() {
        let ts = DateTime::from_timestamp(1_470_000_000, 123_456_789).unwrap();
        assert_eq!(to_micros(ts).timestamp_subsec_nanos(), 123_456_000);
    }

    #[test]
    fn evidence_serializes_with_test_tag() {
        let ev = Evidence::from(Finding::UpnpMatchesGra { address: ip("203.0.113.9") });
        let json = serde_json::to_string(&ev).unwrap();
        assert_eq!(json, r#"{"test":"upnp","finding":"upnp_matches_gra","address":"203.0.113.9"}"#);
        let back: Evidence = serde_json::from_str(&json).unwrap();
        assert_eq!(back, ev);
    }

    #[test]
    fn enum_parsing() {
        assert_eq!("fibre".parse::<AccessTechnology>().unwrap(), AccessTechnology::Fiber);
        assert!("wimax".parse::<AccessTechnology>().is_err());
        assert_eq!("carrier_grade_nat".parse::<VerdictKind>().unwrap(), VerdictKind::CarrierGradeNat);
        assert_eq!("link_local".parse::<IpClass>().unwrap(), IpClass::LinkLocal);
    }
}
