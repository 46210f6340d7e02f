//! Per-device folding of runs, and fleet-level reports: verdict counts per
//! ISP, CPE-to-CGN hop distances, addressing realms and GRA stability.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::hash::Hash;
use std::net::Ipv4Addr;

use chrono::TimeDelta;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{evaluate_run, fuse, ClassifierConfig, DeviceMeta};
use crate::par::Exec;
use crate::probing::RawRunRecord;
use crate::types::{AccessTechnology, GraObservation, RevelioState, Timestamp, Verdict, VerdictKind};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AggregateError {
    #[error("records from different devices: {0} and {1}")]
    MixedDevices(String, String),
    #[error("no records to fold")]
    NoRecords,
}

/// Most frequent value; `None` when nothing is known or the top count is tied.
pub fn consensus<T: Copy + Ord + Hash>(values: impl IntoIterator<Item = T>) -> Option<T> {
    let mut counts: HashMap<T, usize> = HashMap::new();
    for v in values {
        *counts.entry(v).or_default() += 1;
    }
    let best = *counts.values().max()?;
    let mut top = counts.into_iter().filter(|&(_, c)| c == best);
    let (value, _) = top.next()?;
    top.next().is_none().then_some(value)
}

/// A device's folded state and its fused verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceResult {
    pub state: RevelioState,
    pub verdict: Verdict,
}

fn check_single_device(records: &[RawRunRecord]) -> Result<&str, AggregateError> {
    let first = records.first().ok_or(AggregateError::NoRecords)?;
    if let Some(other) = records.iter().find(|r| r.device_id != first.device_id) {
        return Err(AggregateError::MixedDevices(first.device_id.clone(), other.device_id.clone()));
    }
    Ok(&first.device_id)
}

/// Folds single-run states: GRA observations unioned (earliest per GRA),
/// scalar fields by consensus, address sets unioned.
pub fn fold_states(device_id: &str, meta: &DeviceMeta, runs: &[RevelioState]) -> RevelioState {
    let mut gras: BTreeMap<Ipv4Addr, GraObservation> = BTreeMap::new();
    for obs in runs.iter().flat_map(|s| &s.gra_set) {
        let slot = gras.entry(obs.gra).or_insert(*obs);
        let key = |o: &GraObservation| (o.timestamp, o.mapped_port, o.local_address, o.local_port);
        if key(obs) < key(slot) {
            *slot = *obs;
        }
    }
    let local_ip = {
        let ips: Vec<Ipv4Addr> = runs.iter().filter_map(|s| s.local_ip).collect();
        let best = ips.iter().map(|ip| ips.iter().filter(|x| *x == ip).count()).max();
        // ties on the local address go to the smallest, it is not a vote
        best.and_then(|b| ips.iter().filter(|ip| ips.iter().filter(|x| x == ip).count() == b).min().copied())
    };
    RevelioState {
        device_id: device_id.to_owned(),
        isp_name: meta.isp.clone(),
        country: meta.country.clone(),
        technology: meta.technology,
        local_ip,
        gra_set: gras.into_values().collect(),
        hops_to_gra: consensus(runs.iter().filter_map(|s| s.hops_to_gra)),
        access_link_hop: consensus(runs.iter().filter_map(|s| s.access_link_hop)),
        private_after_cpe: runs.iter().flat_map(|s| s.private_after_cpe.iter().copied()).collect(),
        shared_after_access: runs.iter().flat_map(|s| s.shared_after_access.iter().copied()).collect(),
        upnp_wan_ip: consensus(runs.iter().filter_map(|s| s.upnp_wan_ip)),
        run_count: runs.len() as u32,
    }
}

/// Classifies every run of one device and fuses the results.
pub fn evaluate_device(
    records: &[RawRunRecord],
    meta: &DeviceMeta,
    cfg: &ClassifierConfig,
) -> Result<DeviceResult, AggregateError> {
    let device_id = check_single_device(records)?;
    let mut ordered: Vec<&RawRunRecord> = records.iter().collect();
    // equal timestamps fall back to the serialized record so input order never matters
    ordered.sort_by(|a, b| {
        a.timestamp.cmp(&b.timestamp).then_with(|| {
            let json = |r: &RawRunRecord| serde_json::to_string(r).unwrap_or_default();
            json(a).cmp(&json(b))
        })
    });
    let (states, verdicts): (Vec<_>, Vec<_>) = ordered
        .into_iter()
        .map(|r| {
            let (input, verdict) = evaluate_run(r, meta, cfg);
            (input.state, verdict)
        })
        .unzip();
    Ok(DeviceResult { state: fold_states(device_id, meta, &states), verdict: fuse(&verdicts) })
}

pub fn build_revelio_state(
    records: &[RawRunRecord],
    meta: &DeviceMeta,
    cfg: &ClassifierConfig,
) -> Result<RevelioState, AggregateError> {
    evaluate_device(records, meta, cfg).map(|r| r.state)
}

pub fn group_by_device(records: Vec<RawRunRecord>) -> BTreeMap<String, Vec<RawRunRecord>> {
    let mut out: BTreeMap<String, Vec<RawRunRecord>> = BTreeMap::new();
    for r in records {
        out.entry(r.device_id.clone()).or_default().push(r);
    }
    out
}

/// Evaluates many devices, one task per device.
pub fn evaluate_fleet(
    devices: &[(DeviceMeta, Vec<RawRunRecord>)],
    cfg: &ClassifierConfig,
    exec: Exec,
) -> Result<Vec<DeviceResult>, AggregateError> {
    exec.map(devices, |(meta, records)| evaluate_device(records, meta, cfg)).into_iter().collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IspReport {
    pub isp_id: String,
    pub country: String,
    pub technology: AccessTechnology,
    pub probes_total: usize,
    pub inconclusive: usize,
    pub no_home_nat: usize,
    pub simple_home_nat: usize,
    pub cgn: usize,
}

/// Verdict counts per (ISP, country, technology). With `table1_compat`
/// no-home-NAT probes are counted as simple home NAT, giving the
/// three-column shape.
pub fn per_isp_report(results: &[DeviceResult], table1_compat: bool) -> Vec<IspReport> {
    let mut rows: BTreeMap<(String, String, AccessTechnology), IspReport> = BTreeMap::new();
    for r in results {
        let s = &r.state;
        let row = rows.entry((s.isp_name.clone(), s.country.clone(), s.technology)).or_insert_with(|| IspReport {
            isp_id: s.isp_name.clone(),
            country: s.country.clone(),
            technology: s.technology,
            probes_total: 0,
            inconclusive: 0,
            no_home_nat: 0,
            simple_home_nat: 0,
            cgn: 0,
        });
        row.probes_total += 1;
        match r.verdict.kind {
            VerdictKind::Inconclusive => row.inconclusive += 1,
            VerdictKind::NoHomeNat if table1_compat => row.simple_home_nat += 1,
            VerdictKind::NoHomeNat => row.no_home_nat += 1,
            VerdictKind::SimpleHomeNat => row.simple_home_nat += 1,
            VerdictKind::CarrierGradeNat => row.cgn += 1,
        }
    }
    rows.into_values().collect()
}

impl IspReport {
    fn cells(&self, table1_compat: bool) -> Vec<String> {
        let mut c = vec![
            self.isp_id.clone(),
            self.country.clone(),
            self.technology.to_string(),
            self.probes_total.to_string(),
            self.inconclusive.to_string(),
            self.simple_home_nat.to_string(),
            self.cgn.to_string(),
        ];
        if !table1_compat {
            c.push(self.no_home_nat.to_string());
        }
        c
    }
}

fn header(table1_compat: bool) -> Vec<&'static str> {
    let mut h = vec!["isp_id", "cc", "tech", "probes", "inconclusive", "simple", "cgn"];
    if !table1_compat {
        h.push("no_nat");
    }
    h
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

pub fn render_csv(reports: &[IspReport], table1_compat: bool) -> String {
    let mut out = header(table1_compat).join(",");
    out.push('\n');
    for r in reports {
        let cells: Vec<String> = r.cells(table1_compat).iter().map(|c| csv_field(c)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Space-aligned table; text columns left-aligned, counts right-aligned.
pub fn render_text(reports: &[IspReport], table1_compat: bool) -> String {
    let head: Vec<String> = header(table1_compat).into_iter().map(str::to_owned).collect();
    let rows: Vec<Vec<String>> = std::iter::once(head).chain(reports.iter().map(|r| r.cells(table1_compat))).collect();
    let widths: Vec<usize> = (0..rows[0].len()).map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for row in &rows {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, cell)| if c < 3 { format!("{cell:<w$}", w = widths[c]) } else { format!("{cell:>w$}", w = widths[c]) })
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
    }
    out
}

/// Histogram of ISP hops between the CPE and the CGN (1 = first ISP hop).
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CgnHopHistogram {
    pub per_isp: BTreeMap<String, BTreeMap<u8, usize>>,
    /// CGN probes without a usable hop count or access link.
    pub skipped: usize,
}

pub fn cgn_hop_distance(results: &[DeviceResult]) -> CgnHopHistogram {
    let mut h = CgnHopHistogram::default();
    for r in results.iter().filter(|r| r.verdict.kind == VerdictKind::CarrierGradeNat) {
        match (r.state.hops_to_gra, r.state.access_link_hop) {
            (Some(g), Some(a)) if g >= a => {
                *h.per_isp.entry(r.state.isp_name.clone()).or_default().entry(g - a + 1).or_default() += 1;
            }
            _ => h.skipped += 1,
        }
    }
    h
}

/// Private/shared address sightings past the access link among CGN probes.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RealmSummary {
    pub cgn_probes: usize,
    pub with_shared: usize,
    pub with_private: usize,
    pub with_both: usize,
}

pub fn addressing_realms(results: &[DeviceResult]) -> BTreeMap<String, RealmSummary> {
    let mut out: BTreeMap<String, RealmSummary> = BTreeMap::new();
    for r in results.iter().filter(|r| r.verdict.kind == VerdictKind::CarrierGradeNat) {
        let s = out.entry(r.state.isp_name.clone()).or_default();
        let shared = !r.state.shared_after_access.is_empty();
        let private = !r.state.private_after_cpe.is_empty();
        s.cgn_probes += 1;
        s.with_shared += usize::from(shared);
        s.with_private += usize::from(private);
        s.with_both += usize::from(shared && private);
    }
    out
}

/// One GRA held by two devices over overlapping periods.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SharedGraEvent {
    pub gra: Ipv4Addr,
    pub devices: (String, String),
    pub overlap_start: Timestamp,
    pub overlap_end: Timestamp,
}

impl SharedGraEvent {
    pub fn overlap(&self) -> TimeDelta {
        self.overlap_end - self.overlap_start
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraStability {
    /// Distinct GRAs seen by each device.
    pub per_probe: BTreeMap<String, usize>,
    pub mean_all: f64,
    /// Mean over CGN-verdict devices; `None` without any.
    pub mean_cgn: Option<f64>,
    pub shared_gra_events: Vec<SharedGraEvent>,
    /// Overlaps dropped because both devices share a first-hop responder,
    /// i.e. probably sit in the same household.
    pub excluded_household: Vec<SharedGraEvent>,
}

fn mean(values: impl Iterator<Item = usize>) -> Option<f64> {
    let (sum, n) = values.fold((0usize, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum as f64 / n as f64)
}

/// First and last sighting.
type Span = (Timestamp, Timestamp);

/// GRA counts per device, and GRAs used by several devices at once.
/// Sharing is judged on `[first_seen, last_seen]` per (device, GRA).
pub fn gra_stability(records: &[RawRunRecord], verdicts: &BTreeMap<String, VerdictKind>) -> GraStability {
    let mut seen: BTreeMap<&str, BTreeMap<Ipv4Addr, Span>> = BTreeMap::new();
    let mut first_hops: BTreeMap<&str, BTreeSet<Ipv4Addr>> = BTreeMap::new();
    for r in records {
        let gras = seen.entry(&r.device_id).or_default();
        if let Some(obs) = r.gra_observation.observation() {
            let span = gras.entry(obs.gra).or_insert((obs.timestamp, obs.timestamp));
            span.0 = span.0.min(obs.timestamp);
            span.1 = span.1.max(obs.timestamp);
        }
        let hops = first_hops.entry(&r.device_id).or_default();
        hops.extend(r.gra_traceroute.iter().chain(&r.sized_traceroutes).filter(|h| h.ttl == 1).filter_map(|h| h.responder()));
    }

    let per_probe: BTreeMap<String, usize> = seen.iter().map(|(d, g)| (d.to_string(), g.len())).collect();
    let mean_all = mean(per_probe.values().copied()).unwrap_or(0.0);
    let mean_cgn = mean(
        per_probe
            .iter()
            .filter(|(d, _)| verdicts.get(*d) == Some(&VerdictKind::CarrierGradeNat))
            .map(|(_, &c)| c),
    );

    let mut holders: BTreeMap<Ipv4Addr, Vec<(&str, Span)>> = BTreeMap::new();
    for (device, gras) in &seen {
        for (gra, span) in gras {
            holders.entry(*gra).or_default().push((device, *span));
        }
    }
    let mut events = Vec::new();
    let mut excluded = Vec::new();
    for (gra, hs) in holders {
        for (i, &(d1, s1)) in hs.iter().enumerate() {
            for &(d2, s2) in &hs[i + 1..] {
                let start = s1.0.max(s2.0);
                let end = s1.1.min(s2.1);
                if start > end {
                    continue;
                }
                let event = SharedGraEvent { gra, devices: (d1.to_owned(), d2.to_owned()), overlap_start: start, overlap_end: end };
                if !first_hops[d1].is_disjoint(&first_hops[d2]) {
                    log::info!("excluding {d1} and {d2} sharing {gra}: same first hop, likely one household");
                    excluded.push(event);
                } else {
                    events.push(event);
                }
            }
        }
    }
    GraStability { per_probe, mean_all, mean_cgn, shared_gra_events: events, excluded_household: excluded }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probing::GraOutcome;
    use crate::types::{Finding, HopObservation};

    fn ip(s: &str) -> Ipv4Addr {
        s.parse().unwrap()
    }

    fn ts(hours: i64) -> Timestamp {
        "2016-05-01T00:00:00Z".parse::<Timestamp>().unwrap() + TimeDelta::hours(hours)
    }

    fn run(device: &str, gra: &str, hour: i64, first_hop: &str) -> RawRunRecord {
        let gra = ip(gra);
        RawRunRecord {
            device_id: device.into(),
            timestamp: ts(hour),
            gra_observation: GraOutcome::Observed(GraObservation {
                gra,
                mapped_port: 1000,
                local_address: ip("192.168.1.5"),
                local_port: 40000,
                timestamp: ts(hour),
            }),
            gra_traceroute: vec![HopObservation::reply(1, ip(first_hop), 300.0, 120, gra, ts(hour))],
            sized_traceroutes: vec![],
            gra_sized_traceroutes: vec![],
            upnp_wan_ip: None,
            errors: vec![],
        }
    }

    fn result(isp: &str, kind: VerdictKind, hops: Option<u8>, access: Option<u8>) -> DeviceResult {
        DeviceResult {
            state: RevelioState {
                device_id: "d".into(),
                isp_name: isp.into(),
                country: "DE".into(),
                technology: AccessTechnology::Cable,
                local_ip: None,
                gra_set: vec![],
                hops_to_gra: hops,
                access_link_hop: access,
                private_after_cpe: Default::default(),
                shared_after_access: Default::default(),
                upnp_wan_ip: None,
                run_count: 1,
            },
            verdict: Verdict { kind, evidence: vec![], corrections_applied: Default::default() },
        }
    }

    #[test]
    fn consensus_is_a_strict_plurality() {
        assert_eq!(consensus([1u8, 1, 2]), Some(1));
        assert_eq!(consensus([1u8, 2]), None);
        assert_eq!(consensus(Vec::<u8>::new()), None);
        assert_eq!(consensus([3u8, 2, 3, 2, 3]), Some(3));
    }

    #[test]
    fn identical_runs_fold_to_one_gra() {
        let records: Vec<_> = (0..20).map(|h| run("p", "203.0.113.9", h, "192.168.1.1")).collect();
        let state = build_revelio_state(&records, &DeviceMeta::default(), &ClassifierConfig::default()).unwrap();
        assert_eq!(state.run_count, 20);
        assert_eq!(state.gra_set.len(), 1);
        assert_eq!(state.gra_set[0].timestamp, ts(0));
    }

    #[test]
    fn alternating_gras_are_unioned() {
        let records: Vec<_> = (0..6)
            .map(|h| run("p", if h % 2 == 0 { "203.0.113.9" } else { "203.0.113.10" }, h, "192.168.1.1"))
            .collect();
        let state = build_revelio_state(&records, &DeviceMeta::default(), &ClassifierConfig::default()).unwrap();
        assert_eq!(state.distinct_gras().len(), 2);
    }

    #[test]
    fn mixed_devices_rejected() {
        let records = vec![run("a", "203.0.113.9", 0, "192.168.1.1"), run("b", "203.0.113.9", 0, "192.168.1.1")];
        assert_eq!(
            evaluate_device(&records, &DeviceMeta::default(), &ClassifierConfig::default()),
            Err(AggregateError::MixedDevices("a".into(), "b".into()))
        );
        assert_eq!(evaluate_device(&[], &DeviceMeta::default(), &ClassifierConfig::default()), Err(AggregateError::NoRecords));
    }

    #[test]
    fn report_counts_and_compat_merge() {
        use VerdictKind::*;
        let results = vec![
            result("isp-2", Inconclusive, None, None),
            result("isp-2", SimpleHomeNat, None, None),
            result("isp-2", NoHomeNat, None, None),
            result("isp-2", CarrierGradeNat, None, None),
        ];
        let plain = per_isp_report(&results, false);
        assert_eq!((plain[0].probes_total, plain[0].simple_home_nat, plain[0].no_home_nat), (4, 1, 1));
        let compat = per_isp_report(&results, true);
        assert_eq!((compat[0].simple_home_nat, compat[0].no_home_nat), (2, 0));
        assert_eq!(render_csv(&compat, true), "isp_id,cc,tech,probes,inconclusive,simple,cgn\nisp-2,DE,cable,4,1,2,1\n");
        let text = render_text(&compat, true);
        assert_eq!(text.lines().nth(1).unwrap(), "isp-2   DE  cable       4             1       2    1");
        assert!(per_isp_report(&[], true).is_empty());
    }

    #[test]
    fn hop_distance_histogram() {
        use VerdictKind::*;
        let results = vec![
            result("a", CarrierGradeNat, Some(2), Some(2)),
            result("a", CarrierGradeNat, Some(7), Some(2)),
            result("a", CarrierGradeNat, None, Some(2)),
            result("a", SimpleHomeNat, Some(1), Some(2)),
        ];
        let h = cgn_hop_distance(&results);
        assert_eq!(h.per_isp["a"], BTreeMap::from([(1, 1), (6, 1)]));
        assert_eq!(h.skipped, 1);
        assert!(cgn_hop_distance(&[]).per_isp.is_empty());
    }

    #[test]
    fn shared_gra_overlap_of_48_hours() {
        let mut records = Vec::new();
        for h in 0..=72 {
            records.push(run("a", "198.51.100.7", h, "192.168.1.1"));
        }
        for h in 24..=120 {
            records.push(run("b", "198.51.100.7", h, "192.168.0.1"));
        }
        let s = gra_stability(&records, &BTreeMap::new());
        assert_eq!(s.shared_gra_events.len(), 1);
        assert_eq!(s.shared_gra_events[0].overlap(), TimeDelta::hours(48));
        assert_eq!(s.mean_all, 1.0);
        assert_eq!(s.mean_cgn, None);
    }

    #[test]
    fn same_first_hop_is_a_household() {
        let records = vec![run("a", "198.51.100.7", 0, "192.168.1.1"), run("b", "198.51.100.7", 0, "192.168.1.1")];
        let s = gra_stability(&records, &BTreeMap::new());
        assert!(s.shared_gra_events.is_empty());
        assert_eq!(s.excluded_household.len(), 1);
    }

    #[test]
    fn single_probe_single_gra() {
        let verdicts = BTreeMap::from([("a".to_owned(), VerdictKind::CarrierGradeNat)]);
        let s = gra_stability(&[run("a", "198.51.100.7", 0, "192.168.1.1")], &verdicts);
        assert_eq!((s.mean_all, s.mean_cgn), (1.0, Some(1.0)));
        assert!(s.shared_gra_events.is_empty());
    }

    #[test]
    fn fused_verdict_keeps_first_run_evidence() {
        let records: Vec<_> = (0..3).map(|h| run("p", "203.0.113.9", h, "192.168.1.1")).collect();
        let r = evaluate_device(&records, &DeviceMeta::default(), &ClassifierConfig::default()).unwrap();
        assert_eq!(r.verdict.kind, VerdictKind::Inconclusive);
        assert!(r.verdict.findings().any(|f| matches!(f, Finding::AccessLinkUndetermined)));
    }
}
