use std::collections::BTreeSet;
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};

use crate::pathchar::{
    correct_with_expected_range, detect_access_link, AccessLinkLocation, LinkDelay, PathProfile, PathcharConfig,
    TechDelayRanges,
};
use crate::probing::{hops_to, GraOutcome, RawRunRecord};
use crate::types::{classify_address, AccessTechnology, HopObservation, IpClass, RevelioState};

use super::ClassifyError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub pathchar: PathcharConfig,
    pub ranges: TechDelayRanges,
    /// Compare the GRA profile against the external one to drop the
    /// extra hop of CPEs that answer twice.
    pub spurious_purge: bool,
    /// Move the access link to the first link inside the technology's
    /// expected delay range.
    pub expected_range: bool,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            pathchar: PathcharConfig::default(),
            ranges: TechDelayRanges::default(),
            spurious_purge: true,
            expected_range: true,
        }
    }
}

impl ClassifierConfig {
    /// Both corrections off: the original, uncorrected algorithm.
    pub fn naive() -> Self {
        ClassifierConfig { spurious_purge: false, expected_range: false, ..Default::default() }
    }
}

/// Metadata attached to a device from outside the measurements.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DeviceMeta {
    pub isp: String,
    pub country: String,
    pub technology: AccessTechnology,
}

/// Everything the decision needs for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierInput {
    pub state: RevelioState,
    pub external_profile: PathProfile,
    pub gra_profile: PathProfile,
    pub access_link: AccessLinkLocation,
    /// Location before the expected-range correction.
    pub naive_access_link: AccessLinkLocation,
    pub gra_trace: Vec<HopObservation>,
    pub stun_error: Option<String>,
}

/// Private and shared responders from the ISP-side end of the access link
/// onward. The first ISP hop is included: that is where shared space shows
/// up in deployments that number the CPE-facing segment from it.
pub fn detect_special_addresses(
    gra_trace: &[HopObservation],
    access_link: &AccessLinkLocation,
) -> Result<(BTreeSet<Ipv4Addr>, BTreeSet<Ipv4Addr>), ClassifyError> {
    let a = access_link.link_index.ok_or(ClassifyError::AccessLinkUndetermined)?;
    let mut private = BTreeSet::new();
    let mut shared = BTreeSet::new();
    for responder in gra_trace.iter().filter(|h| h.ttl >= a).filter_map(HopObservation::responder) {
        match classify_address(responder) {
            IpClass::Private => {
                private.insert(responder);
            }
            IpClass::Shared => {
                shared.insert(responder);
            }
            _ => {}
        }
    }
    Ok((private, shared))
}

fn distinct_sizes(observations: &[HopObservation]) -> usize {
    observations.iter().map(|h| h.probe_size).collect::<BTreeSet<_>>().len()
}

fn profile(observations: &[HopObservation], cfg: &PathcharConfig, label: &str) -> PathProfile {
    PathProfile::from_observations(observations, distinct_sizes(observations), cfg).unwrap_or_else(|e| {
        log::debug!("{label} profile unavailable: {e}");
        PathProfile { fits: Vec::new(), delays: Vec::new() }
    })
}

/// Locates the access link in `delays`, applying the expected-range
/// correction when enabled. Returns (final, naive).
pub fn locate_access_link(
    delays: &[LinkDelay],
    technology: AccessTechnology,
    cfg: &ClassifierConfig,
) -> (AccessLinkLocation, AccessLinkLocation) {
    let naive = detect_access_link(delays, &cfg.pathchar);
    let located = if cfg.expected_range {
        correct_with_expected_range(naive, delays, technology, &cfg.ranges)
    } else {
        naive
    };
    (located, naive)
}

/// Runs pathchar over both sized traceroute sets and assembles the
/// single-run state.
pub fn analyze_run(record: &RawRunRecord, meta: &DeviceMeta, cfg: &ClassifierConfig) -> ClassifierInput {
    let external_profile = profile(&record.sized_traceroutes, &cfg.pathchar, "external");
    let gra_profile = profile(&record.gra_sized_traceroutes, &cfg.pathchar, "GRA");
    let (access_link, naive_access_link) = locate_access_link(&external_profile.delays, meta.technology, cfg);

    let observation = record.gra_observation.observation();
    let gra = observation.map(|o| o.gra);
    let (private, shared) = detect_special_addresses(&record.gra_traceroute, &access_link).unwrap_or_default();
    let state = RevelioState {
        device_id: record.device_id.clone(),
        isp_name: meta.isp.clone(),
        country: meta.country.clone(),
        technology: meta.technology,
        local_ip: observation.map(|o| o.local_address),
        gra_set: observation.cloned().into_iter().collect(),
        hops_to_gra: gra.and_then(|g| hops_to(&record.gra_traceroute, g)),
        access_link_hop: access_link.link_index,
        private_after_cpe: private,
        shared_after_access: shared,
        upnp_wan_ip: record.upnp_wan_ip,
        run_count: 1,
    };
    let stun_error = match &record.gra_observation {
        GraOutcome::Failed { reason } => Some(reason.clone()),
        GraOutcome::Observed(_) => None,
    };
    ClassifierInput {
        state,
        external_profile,
        gra_profile,
        access_link,
        naive_access_link,
        gra_trace: record.gra_traceroute.clone(),
        stun_error,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pathchar::AccessRule;
    use chrono::Utc;

    fn trace(responders: &[&str]) -> Vec<HopObservation> {
        let target = "203.0.113.9".parse().unwrap();
        responders
            .iter()
            .enumerate()
            .map(|(i, r)| HopObservation::reply(i as u8 + 1, r.parse().unwrap(), 100.0, 120, target, Utc::now()))
            .collect()
    }

    fn at(link: u8) -> AccessLinkLocation {
        AccessLinkLocation { link_index: Some(link), rule_fired: AccessRule::OrderOfMagnitude, delay_us: 9000.0 }
    }

    fn set(v: &[&str]) -> BTreeSet<Ipv4Addr> {
        v.iter().map(|s| s.parse().unwrap()).collect()
    }

    #[test]
    fn first_isp_hop_is_searched() {
        let t = trace(&["192.168.1.1", "100.64.0.9", "10.1.2.3", "203.0.113.9"]);
        let (private, shared) = detect_special_addresses(&t, &at(2)).unwrap();
        assert_eq!(shared, set(&["100.64.0.9"]));
        assert_eq!(private, set(&["10.1.2.3"]));
    }

    #[test]
    fn shared_then_private_path() {
        let t = trace(&["192.168.1.1", "100.64.3.1", "10.0.0.1", "10.0.1.1", "198.51.100.1"]);
        let (private, shared) = detect_special_addresses(&t, &at(2)).unwrap();
        assert!(!private.is_empty() && !shared.is_empty());
        assert!(!private.contains(&"192.168.1.1".parse().unwrap()));
    }

    #[test]
    fn clean_public_isp_segment() {
        let t = trace(&["192.168.1.1", "81.2.3.4", "81.2.9.1"]);
        let (private, shared) = detect_special_addresses(&t, &at(2)).unwrap();
        assert!(private.is_empty() && shared.is_empty());
    }

    #[test]
    fn needs_an_access_link() {
        let t = trace(&["192.168.1.1"]);
        assert_eq!(
            detect_special_addresses(&t, &AccessLinkLocation::undetermined()),
            Err(ClassifyError::AccessLinkUndetermined)
        );
    }
}
