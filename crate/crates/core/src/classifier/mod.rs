//! Fuses the Revelio tests into one verdict per run, and runs into one
//! verdict per device.

mod pipeline;

use std::collections::BTreeSet;

use thiserror::Error;

use crate::pathchar::{detect_spurious_cpe_link, AccessRule};
use crate::probing::RawRunRecord;
use crate::types::{classify_address, Correction, Evidence, Finding, IpClass, Verdict, VerdictKind};

pub use pipeline::{analyze_run, detect_special_addresses, locate_access_link, ClassifierConfig, ClassifierInput, DeviceMeta};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClassifyError {
    #[error("access link undetermined")]
    AccessLinkUndetermined,
}

/// Where the traceroute places the GRA-NAT, after the optional purge.
#[derive(Debug, Clone, PartialEq)]
pub struct GraPlacement {
    pub gra_hop: Option<u8>,
    pub vote: Option<VerdictKind>,
}

struct Builder {
    evidence: Vec<Evidence>,
    corrections: BTreeSet<Correction>,
}

impl Builder {
    fn push(&mut self, f: Finding) {
        self.evidence.push(f.into());
    }

    fn finish(self, kind: VerdictKind) -> Verdict {
        Verdict { kind, evidence: self.evidence, corrections_applied: self.corrections }
    }
}

/// Traceroute-to-GRA test: GRA before or after the access link, or packets
/// routed past it without the GRA answering.
fn place_gra(input: &ClassifierInput, cfg: &ClassifierConfig, b: &mut Builder) -> GraPlacement {
    let none = GraPlacement { gra_hop: input.state.hops_to_gra, vote: None };
    let Some(a) = input.access_link.link_index else {
        b.push(Finding::AccessLinkUndetermined);
        return none;
    };
    let corrected = input.access_link.rule_fired == AccessRule::ExpectedRangeCorrected;
    if corrected {
        b.corrections.insert(Correction::ExpectedDelayCorrection);
    }
    b.push(Finding::AccessLink { link: a, delay_us: input.access_link.delay_us, corrected });
    let present: BTreeSet<u8> = input.external_profile.delays.iter().map(|l| l.link_index).collect();
    if let Some(link) = (1..a).find(|l| !present.contains(l)) {
        b.push(Finding::ProfileGap { link });
        return none;
    }

    let Some(mut g) = input.state.hops_to_gra else {
        let past = input
            .gra_trace
            .iter()
            .filter(|h| h.ttl >= a)
            .find_map(|h| h.topological_responder().map(|r| (h.ttl, r)));
        return match past {
            Some((hop, responder)) => {
                b.push(Finding::RoutedPastAccessLink { hop, responder, access_link: a });
                GraPlacement { gra_hop: None, vote: Some(VerdictKind::CarrierGradeNat) }
            }
            None => {
                b.push(Finding::GraUnreachable);
                none
            }
        };
    };

    if g >= a && cfg.spurious_purge {
        match detect_spurious_cpe_link(
            &input.external_profile.delays,
            &input.gra_profile.delays,
            &input.access_link,
            &cfg.pathchar,
        ) {
            Ok(true) => {
                let delay_at = |p: &crate::pathchar::PathProfile| {
                    p.delays.iter().find(|l| l.link_index == a).map_or(0.0, |l| l.delay_us)
                };
                b.push(Finding::SpuriousLinkPurged {
                    link: a,
                    external_delay_us: delay_at(&input.external_profile),
                    gra_delay_us: delay_at(&input.gra_profile),
                });
                b.corrections.insert(Correction::SpuriousLinkPurge);
                g -= 1;
            }
            Ok(false) => {}
            Err(e) => b.push(Finding::SpuriousCheckSkipped { reason: e.to_string() }),
        }
    }
    if g < a {
        b.push(Finding::GraBeforeAccessLink { gra_hop: g, access_link: a });
        GraPlacement { gra_hop: Some(g), vote: Some(VerdictKind::SimpleHomeNat) }
    } else {
        b.push(Finding::GraAfterAccessLink { gra_hop: g, access_link: a });
        GraPlacement { gra_hop: Some(g), vote: Some(VerdictKind::CarrierGradeNat) }
    }
}

/// UPnP test. A private or shared WAN address only counts when hop 1 is the
/// CPE, i.e. the access link is link 2; otherwise it belongs to an inner router.
fn upnp_vote(input: &ClassifierInput, gra: std::net::Ipv4Addr, b: &mut Builder) -> Option<VerdictKind> {
    let Some(wan) = input.state.upnp_wan_ip else {
        b.push(Finding::UpnpUnavailable);
        return None;
    };
    if wan == gra {
        b.push(Finding::UpnpMatchesGra { address: wan });
        return Some(VerdictKind::SimpleHomeNat);
    }
    match classify_address(wan) {
        IpClass::Public => {
            b.push(Finding::UpnpOtherPublic { address: wan });
            None
        }
        class if input.access_link.link_index == Some(2) => {
            b.push(Finding::UpnpSpecialAddress { address: wan, class });
            Some(VerdictKind::CarrierGradeNat)
        }
        class => {
            b.push(Finding::UpnpNotFromCpe { address: wan, class });
            None
        }
    }
}

/// Corrected GRA placement without building a verdict.
pub fn gra_placement(input: &ClassifierInput, cfg: &ClassifierConfig) -> GraPlacement {
    let mut b = Builder { evidence: Vec::new(), corrections: BTreeSet::new() };
    place_gra(input, cfg, &mut b)
}

/// Four-way verdict for one run. Never fails: anything that cannot be
/// decided is Inconclusive, and the evidence says why.
pub fn classify(input: &ClassifierInput, cfg: &ClassifierConfig) -> Verdict {
    let mut b = Builder { evidence: Vec::new(), corrections: BTreeSet::new() };
    let Some(gra) = input.state.gra_set.first().map(|o| o.gra) else {
        let reason = input.stun_error.clone().unwrap_or_else(|| "no GRA observed".into());
        b.push(Finding::StunFailed { reason });
        return b.finish(VerdictKind::Inconclusive);
    };
    if input.state.local_ip == Some(gra) && classify_address(gra) == IpClass::Public {
        b.push(Finding::LocalIpIsGra { address: gra });
        return b.finish(VerdictKind::NoHomeNat);
    }

    let trace = place_gra(input, cfg, &mut b).vote;
    let upnp = upnp_vote(input, gra, &mut b);
    if !input.state.private_after_cpe.is_empty() {
        b.push(Finding::PrivateAfterAccess { addresses: input.state.private_after_cpe.iter().copied().collect() });
    }
    if !input.state.shared_after_access.is_empty() {
        b.push(Finding::SharedAfterAccess { addresses: input.state.shared_after_access.iter().copied().collect() });
    }

    let kind = match (upnp, trace) {
        (None, None) => VerdictKind::Inconclusive,
        (Some(k), None) | (None, Some(k)) => k,
        (Some(u), Some(t)) if u == t => u,
        (Some(u), Some(t)) => {
            b.push(Finding::TestsDisagree { upnp: u, traceroute: t });
            VerdictKind::Inconclusive
        }
    };
    b.finish(kind)
}

/// One run end to end. The returned state carries the purge-corrected
/// GRA hop count.
pub fn evaluate_run(record: &RawRunRecord, meta: &DeviceMeta, cfg: &ClassifierConfig) -> (ClassifierInput, Verdict) {
    let mut input = analyze_run(record, meta, cfg);
    let verdict = classify(&input, cfg);
    if verdict.corrections_applied.contains(&Correction::SpuriousLinkPurge) {
        input.state.hops_to_gra = input.state.hops_to_gra.map(|g| g - 1);
    }
    (input, verdict)
}

/// Device verdict from per-run verdicts: the definite class when every
/// conclusive run agrees, Inconclusive otherwise. Evidence comes from the
/// first run that carries the winning kind.
pub fn fuse(verdicts: &[Verdict]) -> Verdict {
    let kinds: BTreeSet<VerdictKind> = verdicts.iter().map(|v| v.kind).filter(|k| k.is_definite()).collect();
    let corrections = verdicts.iter().flat_map(|v| v.corrections_applied.iter().copied()).collect();
    match kinds.len() {
        0 => Verdict {
            kind: VerdictKind::Inconclusive,
            evidence: verdicts.first().map(|v| v.evidence.clone()).unwrap_or_default(),
            corrections_applied: corrections,
        },
        1 => {
            let kind = *kinds.first().expect("one kind");
            let first = verdicts.iter().find(|v| v.kind == kind).expect("kind came from a verdict");
            Verdict { kind, evidence: first.evidence.clone(), corrections_applied: corrections }
        }
        _ => Verdict {
            kind: VerdictKind::Inconclusive,
            evidence: vec![Finding::RunsDisagree { kinds: kinds.into_iter().collect() }.into()],
            corrections_applied: corrections,
        },
    }
}

#[cfg(test)]
mod tests {
    use std::net::Ipv4Addr;

    use chrono::Utc;

    use super::*;
    use crate::pathchar::{AccessLinkLocation, Confidence, LinkDelay, PathProfile};
    use crate::types::{AccessTechnology, GraObservation, HopObservation, RevelioState};

    const GRA: Ipv4Addr = Ipv4Addr::new(203, 0, 113, 9);

    fn profile(delays: &[f64]) -> PathProfile {
        PathProfile {
            fits: Vec::new(),
            delays: delays
                .iter()
                .enumerate()
                .map(|(i, &d)| LinkDelay { link_index: i as u8 + 1, delay_us: d, confidence: Confidence::Normal })
                .collect(),
        }
    }

    fn trace(responders: &[Option<Ipv4Addr>]) -> Vec<HopObservation> {
        responders
            .iter()
            .enumerate()
            .map(|(i, r)| match r {
                Some(r) => HopObservation::reply(i as u8 + 1, *r, 100.0, 120, GRA, Utc::now()),
                None => HopObservation::timeout(i as u8 + 1, 120, GRA, Utc::now()),
            })
            .collect()
    }

    fn input(external: &[f64], gra_profile: &[f64], access: Option<u8>, gra_trace: &[Option<Ipv4Addr>]) -> ClassifierInput {
        let local: Ipv4Addr = "192.168.1.5".parse().unwrap();
        let gra_trace = trace(gra_trace);
        let external_profile = profile(external);
        let access_link = match access {
            Some(a) => AccessLinkLocation {
                link_index: Some(a),
                rule_fired: AccessRule::OrderOfMagnitude,
                delay_us: external_profile.delays[usize::from(a) - 1].delay_us,
            },
            None => AccessLinkLocation::undetermined(),
        };
        ClassifierInput {
            state: RevelioState {
                device_id: "d".into(),
                isp_name: "isp".into(),
                country: "US".into(),
                technology: AccessTechnology::Dsl,
                local_ip: Some(local),
                gra_set: vec![GraObservation {
                    gra: GRA,
                    mapped_port: 5000,
                    local_address: local,
                    local_port: 40000,
                    timestamp: Utc::now(),
                }],
                hops_to_gra: crate::probing::hops_to(&gra_trace, GRA),
                access_link_hop: access,
                private_after_cpe: Default::default(),
                shared_after_access: Default::default(),
                upnp_wan_ip: None,
                run_count: 1,
            },
            external_profile,
            gra_profile: profile(gra_profile),
            access_link,
            naive_access_link: access_link,
            gra_trace,
            stun_error: None,
        }
    }

    fn ip(s: &str) -> Ipv4Addr {
        s.parse().unwrap()
    }

    #[test]
    fn upnp_and_trace_agree_on_home_gateway() {
        let mut i = input(&[100.0, 9000.0, 500.0], &[], Some(2), &[Some(GRA)]);
        i.state.upnp_wan_ip = Some(GRA);
        let v = classify(&i, &ClassifierConfig::default());
        assert_eq!(v.kind, VerdictKind::SimpleHomeNat);
        assert!(v.findings().any(|f| matches!(f, Finding::UpnpMatchesGra { .. })));
        assert!(v.check_invariants());
    }

    #[test]
    fn spurious_purge_fixes_two_hop_cpe() {
        let i = input(
            &[100.0, 100.0, 9000.0, 500.0],
            &[100.0, 100.0, 10.0],
            Some(3),
            &[Some(ip("192.168.1.1")), Some(ip("192.168.0.1")), Some(GRA)],
        );
        let naive = classify(&i, &ClassifierConfig::naive());
        assert_eq!(naive.kind, VerdictKind::CarrierGradeNat);
        let fixed = classify(&i, &ClassifierConfig::default());
        assert_eq!(fixed.kind, VerdictKind::SimpleHomeNat);
        assert!(fixed.corrections_applied.contains(&Correction::SpuriousLinkPurge));
        assert_eq!(gra_placement(&i, &ClassifierConfig::default()).gra_hop, Some(2));
    }

    #[test]
    fn genuine_cgn_survives_purge() {
        let i = input(
            &[100.0, 9000.0, 500.0, 400.0],
            &[100.0, 9000.0, 500.0],
            Some(2),
            &[Some(ip("192.168.1.1")), Some(ip("100.64.0.1")), Some(GRA)],
        );
        let v = classify(&i, &ClassifierConfig::default());
        assert_eq!(v.kind, VerdictKind::CarrierGradeNat);
        assert!(v.corrections_applied.is_empty());
        assert!(v.check_invariants());
    }

    #[test]
    fn satellite_cgn_at_first_isp_hop() {
        let mut i = input(&[80.0, 300_000.0, 400.0], &[80.0, 300_000.0], Some(2), &[Some(ip("192.168.1.1")), Some(GRA)]);
        i.state.technology = AccessTechnology::Satellite;
        assert_eq!(classify(&i, &ClassifierConfig::default()).kind, VerdictKind::CarrierGradeNat);
    }

    #[test]
    fn upnp_contradicting_trace_is_inconclusive() {
        let mut i = input(
            &[100.0, 9000.0, 500.0, 400.0, 300.0],
            &[100.0, 9000.0, 500.0, 400.0],
            Some(2),
            &[Some(ip("192.168.1.1")), Some(ip("10.0.0.1")), Some(ip("10.0.1.1")), Some(GRA)],
        );
        i.state.upnp_wan_ip = Some(GRA);
        let v = classify(&i, &ClassifierConfig::default());
        assert_eq!(v.kind, VerdictKind::Inconclusive);
        assert!(v.findings().any(|f| matches!(f, Finding::TestsDisagree { .. })));
    }

    #[test]
    fn routed_past_access_link_without_gra_reply() {
        let i = input(&[100.0, 9000.0, 500.0], &[], Some(2), &[Some(ip("192.168.1.1")), Some(ip("81.2.3.4")), None]);
        let v = classify(&i, &ClassifierConfig::default());
        assert_eq!(v.kind, VerdictKind::CarrierGradeNat);
        assert!(v.check_invariants());
    }

    #[test]
    fn silence_past_cpe_is_inconclusive() {
        let i = input(&[100.0], &[], None, &[Some(ip("192.168.1.1")), None, None]);
        let v = classify(&i, &ClassifierConfig::default());
        assert_eq!(v.kind, VerdictKind::Inconclusive);
        assert!(v.findings().any(|f| matches!(f, Finding::AccessLinkUndetermined)));
    }

    #[test]
    fn gap_before_access_link_is_inconclusive() {
        let mut i = input(&[100.0, 100.0, 9000.0], &[], Some(3), &[Some(ip("192.168.1.1")), Some(GRA)]);
        i.external_profile.delays.remove(1);
        let v = classify(&i, &ClassifierConfig::default());
        assert_eq!(v.kind, VerdictKind::Inconclusive);
        assert!(v.findings().any(|f| matches!(f, Finding::ProfileGap { link: 2 })));
    }

    #[test]
    fn public_local_address_equal_to_gra() {
        let mut i = input(&[100.0, 9000.0], &[], Some(2), &[]);
        i.state.local_ip = Some(GRA);
        let v = classify(&i, &ClassifierConfig::default());
        assert_eq!(v.kind, VerdictKind::NoHomeNat);
        assert!(v.check_invariants());
    }

    #[test]
    fn upnp_shared_address_from_cpe() {
        let mut i = input(&[100.0, 9000.0, 500.0], &[], Some(2), &[Some(ip("192.168.1.1")), None]);
        i.state.upnp_wan_ip = Some(ip("100.64.12.3"));
        i.gra_trace.truncate(1);
        let v = classify(&i, &ClassifierConfig::default());
        assert_eq!(v.kind, VerdictKind::CarrierGradeNat);
        assert!(v.findings().any(|f| matches!(f, Finding::UpnpSpecialAddress { class: IpClass::Shared, .. })));
    }

    #[test]
    fn upnp_from_inner_router_is_ignored() {
        let mut i = input(&[100.0, 100.0, 9000.0], &[], Some(3), &[Some(ip("192.168.1.1")), Some(GRA)]);
        i.state.upnp_wan_ip = Some(ip("192.168.2.7"));
        let v = classify(&i, &ClassifierConfig::default());
        assert_eq!(v.kind, VerdictKind::SimpleHomeNat);
        assert!(v.findings().any(|f| matches!(f, Finding::UpnpNotFromCpe { .. })));
    }

    #[test]
    fn stun_failure() {
        let mut i = input(&[100.0, 9000.0], &[], Some(2), &[]);
        i.state.gra_set.clear();
        i.stun_error = Some("timed out".into());
        let v = classify(&i, &ClassifierConfig::default());
        assert_eq!(v.kind, VerdictKind::Inconclusive);
        assert_eq!(v.findings().next(), Some(&Finding::StunFailed { reason: "timed out".into() }));
    }

    fn verdict(kind: VerdictKind) -> Verdict {
        Verdict { kind, evidence: Vec::new(), corrections_applied: BTreeSet::new() }
    }

    #[test]
    fn fusion_rules() {
        use VerdictKind::*;
        assert_eq!(fuse(&[verdict(CarrierGradeNat), verdict(Inconclusive), verdict(CarrierGradeNat)]).kind, CarrierGradeNat);
        let split = fuse(&[verdict(CarrierGradeNat), verdict(SimpleHomeNat)]);
        assert_eq!(split.kind, Inconclusive);
        assert!(split.findings().any(|f| matches!(f, Finding::RunsDisagree { .. })));
        assert_eq!(fuse(&[verdict(Inconclusive)]).kind, Inconclusive);
        assert_eq!(fuse(&[]).kind, Inconclusive);
    }
}
