use std::net::Ipv4Addr;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::types::{MAX_PROBE_SIZE, MIN_PROBE_SIZE};

use super::ProbeError;

pub const DEFAULT_STUN_PORT: u16 = 3478;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    /// `host:port` of the STUN server.
    pub stun_server: String,
    pub external_target: Ipv4Addr,
    /// Probe sizes in bytes, strictly increasing.
    pub packet_sizes: Vec<u16>,
    pub repetitions_per_size: u32,
    pub max_ttl: u8,
    pub per_probe_timeout_ms: u64,
    pub inter_probe_gap_ms: u64,
    /// Consecutive unanswered hops after which a traceroute gives up.
    pub max_consecutive_silent: u8,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            stun_server: format!("stun.stunprotocol.org:{DEFAULT_STUN_PORT}"),
            external_target: Ipv4Addr::new(8, 8, 8, 8),
            packet_sizes: even_sizes(120, 1440, 21),
            repetitions_per_size: 5,
            max_ttl: 30,
            per_probe_timeout_ms: 2000,
            inter_probe_gap_ms: 20,
            max_consecutive_silent: 5,
        }
    }
}

/// `count` sizes evenly spaced from `first` to `last` inclusive, rounded to
/// whole bytes.
pub fn even_sizes(first: u16, last: u16, count: usize) -> Vec<u16> {
    match count {
        0 => Vec::new(),
        1 => vec![first],
        _ => {
            let step = f64::from(last - first) / (count - 1) as f64;
            (0..count).map(|i| (f64::from(first) + step * i as f64).round() as u16).collect()
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<(), ProbeError> {
        let invalid = |msg: String| Err(ProbeError::ConfigInvalid(msg));
        if self.packet_sizes.len() < 3 {
            return invalid(format!("need at least 3 packet sizes, got {}", self.packet_sizes.len()));
        }
        if !self.packet_sizes.windows(2).all(|w| w[0] < w[1]) {
            return invalid("packet sizes must be strictly increasing".into());
        }
        if let Some(s) = self
            .packet_sizes
            .iter()
            .find(|s| !(MIN_PROBE_SIZE..=MAX_PROBE_SIZE).contains(*s))
        {
            return invalid(format!("packet size {s} outside {MIN_PROBE_SIZE}..={MAX_PROBE_SIZE}"));
        }
        if self.repetitions_per_size == 0 {
            return invalid("repetitions per size must be at least 1".into());
        }
        if self.max_ttl == 0 {
            return invalid("max ttl must be at least 1".into());
        }
        if self.max_consecutive_silent == 0 {
            return invalid("silent-hop limit must be at least 1".into());
        }
        Ok(())
    }

    pub fn per_probe_timeout(&self) -> Duration {
        Duration::from_millis(self.per_probe_timeout_ms)
    }

    pub fn inter_probe_gap(&self) -> Duration {
        Duration::from_millis(self.inter_probe_gap_ms)
    }

    /// Upper bound on probes sent toward the external target in one session.
    pub fn max_external_probes(&self) -> usize {
        self.packet_sizes.len() * self.repetitions_per_size as usize * usize::from(self.max_ttl)
    }
}
