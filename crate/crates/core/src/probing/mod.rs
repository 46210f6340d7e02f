//! On-the-wire Revelio tests behind a path-responder abstraction so the
//! simulator can stand in for the network.

mod config;
pub mod live;
mod session;
pub mod stun;
mod traceroute;
pub mod upnp;

use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{GraObservation, HopObservation, Timestamp};

pub use config::{even_sizes, ProbeConfig, DEFAULT_STUN_PORT};
pub use live::LiveNetwork;
pub use session::run_revelio_session;
pub use stun::{StunClient, StunError};
pub use traceroute::{hops_to, traceroute, traceroute_to_gra, PathResponder};
pub use upnp::UpnpClient;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProbeError {
    #[error("invalid probe configuration: {0}")]
    ConfigInvalid(String),
    #[error("failed to send probe: {0}")]
    SendFailure(String),
    #[error("every hop was silent")]
    AllHopsSilent,
    #[error("probe size {0} outside 64..=1500 bytes")]
    SizeOutOfRange(u16),
    #[error("raw socket access denied: {0}")]
    PermissionDenied(String),
}

/// Outcome of STUN discovery for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum GraOutcome {
    Observed(GraObservation),
    Failed { reason: String },
}

impl GraOutcome {
    pub fn observation(&self) -> Option<&GraObservation> {
        match self {
            GraOutcome::Observed(o) => Some(o),
            GraOutcome::Failed { .. } => None,
        }
    }
}

/// Everything one Revelio run collected, before any interpretation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRunRecord {
    pub device_id: String,
    pub timestamp: Timestamp,
    pub gra_observation: GraOutcome,
    pub gra_traceroute: Vec<HopObservation>,
    /// All sizes and repetitions toward the external target, in send order.
    pub sized_traceroutes: Vec<HopObservation>,
    pub gra_sized_traceroutes: Vec<HopObservation>,
    pub upnp_wan_ip: Option<Ipv4Addr>,
    /// Non-fatal failures met along the way, in order.
    #[serde(default)]
    pub errors: Vec<String>,
}

impl RawRunRecord {
    pub fn gra(&self) -> Option<Ipv4Addr> {
        self.gra_observation.observation().map(|o| o.gra)
    }

    pub fn local_ip(&self) -> Option<Ipv4Addr> {
        self.gra_observation.observation().map(|o| o.local_address)
    }

    /// Copy with every timestamp zeroed, for replay comparisons.
    pub fn without_timestamps(&self) -> RawRunRecord {
        let epoch = Timestamp::UNIX_EPOCH;
        let strip = |hops: &[HopObservation]| {
            hops.iter().map(|h| HopObservation { timestamp: epoch, ..h.clone() }).collect()
        };
        let gra_observation = match &self.gra_observation {
            GraOutcome::Observed(o) => GraOutcome::Observed(GraObservation { timestamp: epoch, ..*o }),
            failed => failed.clone(),
        };
        RawRunRecord {
            device_id: self.device_id.clone(),
            timestamp: epoch,
            gra_observation,
            gra_traceroute: strip(&self.gra_traceroute),
            sized_traceroutes: strip(&self.sized_traceroutes),
            gra_sized_traceroutes: strip(&self.gra_sized_traceroutes),
            upnp_wan_ip: self.upnp_wan_ip,
            errors: self.errors.clone(),
        }
    }
}

/// A path responder that can also run the STUN and UPnP tests.
pub trait RevelioNetwork: PathResponder {
    fn discover_gra(&mut self, cfg: &ProbeConfig) -> Result<GraObservation, StunError>;

    /// WAN address reported by the CPE, `None` when unavailable.
    fn query_upnp(&mut self) -> Option<Ipv4Addr>;
}
