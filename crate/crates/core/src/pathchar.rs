//! Per-link delay estimation from sized traceroutes and access-link location.
//!
//! Every hop is fitted with a line `minRTT(size) = intercept + slope * size`
//! over the per-size minimum RTTs. The one-way propagation delay of link `i`
//! (hop `i - 1` to hop `i`, hop 0 being the probe) is half the difference of
//! consecutive intercepts. The access link is the first link whose delay
//! jumps by an order of magnitude over everything before it, optionally
//! corrected against the delay range expected for the access technology.

use std::collections::BTreeMap;
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{AccessTechnology, HopObservation};

/// Fewest distinct probe sizes a hop needs before a line is fitted.
pub const MIN_FIT_SIZES: usize = 3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PathcharError {
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("observations mix targets {0} and {1}")]
    MixedTargets(Ipv4Addr, Ipv4Addr),
    #[error("profiles cannot be aligned: {0}")]
    ProfileMismatch(String),
    #[error("invalid delay range {min_us}..{max_us} us")]
    InvalidRange { min_us: f64, max_us: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HopFit {
    pub ttl: u8,
    /// Most frequent responder at this TTL.
    pub responder: Option<Ipv4Addr>,
    /// Latency at zero size, microseconds.
    pub intercept_us: f64,
    /// Microseconds per byte. Diagnostic only.
    pub slope_us_per_byte: f64,
    /// Number of sizes with at least one answered probe.
    pub sample_count: usize,
    pub residual_rms_us: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Confidence {
    Normal,
    Clamped,
    Sparse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkDelay {
    /// Link `i` connects hop `i - 1` to hop `i`.
    pub link_index: u8,
    /// One-way propagation delay estimate, microseconds.
    pub delay_us: f64,
    pub confidence: Confidence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessRule {
    OrderOfMagnitude,
    ExpectedRangeCorrected,
    Undetermined,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccessLinkLocation {
    pub link_index: Option<u8>,
    pub rule_fired: AccessRule,
    pub delay_us: f64,
}

impl AccessLinkLocation {
    pub fn undetermined() -> Self {
        AccessLinkLocation { link_index: None, rule_fired: AccessRule::Undetermined, delay_us: 0.0 }
    }

    fn at(link: &LinkDelay, rule: AccessRule) -> Self {
        AccessLinkLocation { link_index: Some(link.link_index), rule_fired: rule, delay_us: link.delay_us }
    }

    pub fn is_determined(&self) -> bool {
        self.link_index.is_some()
    }
}

/// How "one order of magnitude higher" is judged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MagnitudeRule {
    /// The candidate sits in a higher decade than the comparison base
    /// (tens of microseconds vs hundreds). Link 1 is compared against the
    /// LAN floor, later links against the preceding links only.
    Decade,
    /// The candidate is at least `factor` times the comparison base, which is
    /// never below the LAN floor.
    Ratio(f64),
}

/// Aggregate of the preceding link delays used as comparison base.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComparisonBase {
    Max,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathcharConfig {
    /// Link delays are never reported below this, microseconds.
    pub delay_floor_us: f64,
    /// Smallest delay a home link is assumed to have, microseconds.
    pub lan_floor_us: f64,
    pub magnitude_rule: MagnitudeRule,
    pub comparison_base: ComparisonBase,
    /// How much smaller the CPE-to-GRA link must be than the external access
    /// link before it is considered internal to the CPE.
    pub spurious_ratio: f64,
}

impl Default for PathcharConfig {
    fn default() -> Self {
        PathcharConfig {
            delay_floor_us: 10.0,
            lan_floor_us: 100.0,
            magnitude_rule: MagnitudeRule::Decade,
            comparison_base: ComparisonBase::Max,
            spurious_ratio: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelayRange {
    pub min_us: f64,
    pub max_us: f64,
}

impl DelayRange {
    pub fn new(min_us: f64, max_us: f64) -> Result<Self, PathcharError> {
        if !(min_us.is_finite() && max_us.is_finite() && 0.0 <= min_us && min_us < max_us) {
            return Err(PathcharError::InvalidRange { min_us, max_us });
        }
        Ok(DelayRange { min_us, max_us })
    }

    pub fn contains(&self, delay_us: f64) -> bool {
        self.min_us <= delay_us && delay_us <= self.max_us
    }
}

/// Expected access-link delay per technology. `Unknown` always resolves to
/// the union of the known ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TechDelayRanges {
    ranges: BTreeMap<AccessTechnology, DelayRange>,
}

impl Default for TechDelayRanges {
    fn default() -> Self {
        let ranges = [
            (AccessTechnology::Dsl, 2_000.0, 30_000.0),
            (AccessTechnology::Cable, 1_000.0, 30_000.0),
            (AccessTechnology::Fiber, 300.0, 10_000.0),
            (AccessTechnology::Satellite, 200_000.0, 700_000.0),
        ]
        .into_iter()
        .map(|(tech, min_us, max_us)| (tech, DelayRange { min_us, max_us }))
        .collect();
        TechDelayRanges { ranges }
    }
}

impl TechDelayRanges {
    pub fn get(&self, tech: AccessTechnology) -> DelayRange {
        match self.ranges.get(&tech) {
            Some(r) => *r,
            None => {
                let min_us = self.ranges.values().map(|r| r.min_us).fold(f64::INFINITY, f64::min);
                let max_us = self.ranges.values().map(|r| r.max_us).fold(0.0, f64::max);
                DelayRange { min_us, max_us }
            }
        }
    }

    /// Overrides one technology. `Unknown` cannot be set; it follows the others.
    pub fn set(&mut self, tech: AccessTechnology, range: DelayRange) -> Result<(), PathcharError> {
        if tech == AccessTechnology::Unknown {
            return Err(PathcharError::InsufficientData(
                "the unknown-technology range is derived from the others".into(),
            ));
        }
        self.ranges.insert(tech, DelayRange::new(range.min_us, range.max_us)?);
        Ok(())
    }
}

/// Ordinary least squares over `(x, y)` points: `(intercept, slope, rms residual)`.
fn least_squares(points: &[(f64, f64)]) -> (f64, f64, f64) {
    let n = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let (sxy, sxx) = points.iter().fold((0.0, 0.0), |(sxy, sxx), &(x, y)| {
        let dx = x - mean_x;
        (sxy + dx * (y - mean_y), sxx + dx * dx)
    });
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = mean_y - slope * mean_x;
    let sse: f64 = points.iter().map(|&(x, y)| (y - intercept - slope * x).powi(2)).sum();
    (intercept, slope, (sse / n).sqrt())
}

/// Fits one line per hop over the per-size minimum RTTs. Hops answered at
/// fewer than [`MIN_FIT_SIZES`] sizes are omitted; fits come back ordered by TTL.
pub fn fit_hops(observations: &[HopObservation]) -> Result<Vec<HopFit>, PathcharError> {
    if let Some(first) = observations.first() {
        if let Some(other) = observations.iter().find(|o| o.target != first.target) {
            return Err(PathcharError::MixedTargets(first.target, other.target));
        }
    }

    #[derive(Default)]
    struct HopSamples {
        min_rtt: BTreeMap<u16, f64>,
        responders: BTreeMap<Ipv4Addr, usize>,
    }

    let mut hops: BTreeMap<u8, HopSamples> = BTreeMap::new();
    for obs in observations {
        let (Some(responder), Some(rtt)) = (obs.topological_responder(), obs.rtt_us()) else {
            continue;
        };
        let hop = hops.entry(obs.ttl).or_default();
        hop.min_rtt
            .entry(obs.probe_size)
            .and_modify(|m| *m = m.min(rtt))
            .or_insert(rtt);
        *hop.responders.entry(responder).or_default() += 1;
    }

    let fits: Vec<HopFit> = hops
        .into_iter()
        .filter(|(_, h)| h.min_rtt.len() >= MIN_FIT_SIZES)
        .map(|(ttl, h)| {
            let points: Vec<(f64, f64)> =
                h.min_rtt.iter().map(|(&size, &rtt)| (f64::from(size), rtt)).collect();
            let (intercept_us, slope_us_per_byte, residual_rms_us) = least_squares(&points);
            // max_by_key keeps the last maximum; iterate in reverse so ties go to the lowest address
            let responder = h.responders.iter().rev().max_by_key(|(_, &n)| n).map(|(a, _)| *a);
            HopFit {
                ttl,
                responder,
                intercept_us,
                slope_us_per_byte,
                sample_count: points.len(),
                residual_rms_us,
            }
        })
        .collect();

    if fits.is_empty() {
        return Err(PathcharError::InsufficientData(format!(
            "no hop answered at {MIN_FIT_SIZES} or more sizes"
        )));
    }
    Ok(fits)
}

/// Derives one-way link delays from consecutive hop intercepts. Links whose
/// near end was not fitted are skipped. `size_count` is the number of probe
/// sizes used, for the sparse-data flag.
pub fn link_delays(
    fits: &[HopFit],
    size_count: usize,
    cfg: &PathcharConfig,
) -> Result<Vec<LinkDelay>, PathcharError> {
    if fits.len() < 2 {
        return Err(PathcharError::InsufficientData(format!(
            "{} hop fit(s), need at least 2",
            fits.len()
        )));
    }
    let by_ttl: BTreeMap<u8, &HopFit> = fits.iter().map(|f| (f.ttl, f)).collect();
    let sparse = |f: &HopFit| f.sample_count * 2 < size_count;

    let delays = by_ttl
        .values()
        .filter_map(|fit| {
            let (near_intercept, near_sparse) = if fit.ttl == 1 {
                (0.0, false)
            } else {
                let near = by_ttl.get(&(fit.ttl - 1))?;
                (near.intercept_us, sparse(near))
            };
            let raw = (fit.intercept_us - near_intercept) / 2.0;
            let confidence = if raw < cfg.delay_floor_us {
                Confidence::Clamped
            } else if near_sparse || sparse(fit) {
                Confidence::Sparse
            } else {
                Confidence::Normal
            };
            Some(LinkDelay {
                link_index: fit.ttl,
                delay_us: raw.max(cfg.delay_floor_us),
                confidence,
            })
        })
        .collect();
    Ok(delays)
}

/// Index of the decade holding `x`, robust to `log10` rounding.
fn decade(x: f64) -> i32 {
    let mut k = x.log10().floor() as i32;
    if 10f64.powi(k + 1) <= x {
        k += 1;
    } else if 10f64.powi(k) > x {
        k -= 1;
    }
    k
}

/// Locates the access link as the first link an order of magnitude above
/// all links before it.
pub fn detect_access_link(delays: &[LinkDelay], cfg: &PathcharConfig) -> AccessLinkLocation {
    for (i, link) in delays.iter().enumerate() {
        let preceding = &delays[..i];
        let aggregate = match (preceding.is_empty(), cfg.comparison_base) {
            (true, _) => None,
            (false, ComparisonBase::Max) => {
                Some(preceding.iter().map(|l| l.delay_us).fold(0.0, f64::max))
            }
            (false, ComparisonBase::Mean) => {
                Some(preceding.iter().map(|l| l.delay_us).sum::<f64>() / preceding.len() as f64)
            }
        };
        let fires = match cfg.magnitude_rule {
            MagnitudeRule::Decade => {
                let base = aggregate.unwrap_or(cfg.lan_floor_us);
                decade(link.delay_us) > decade(base)
            }
            MagnitudeRule::Ratio(factor) => {
                let base = aggregate.map_or(cfg.lan_floor_us, |a| a.max(cfg.lan_floor_us));
                link.delay_us >= factor * base
            }
        };
        if fires {
            return AccessLinkLocation::at(link, AccessRule::OrderOfMagnitude);
        }
    }
    AccessLinkLocation::undetermined()
}

/// Keeps `loc` when its delay is plausible for `tech`, otherwise moves to the
/// first link whose delay is.
pub fn correct_with_expected_range(
    loc: AccessLinkLocation,
    delays: &[LinkDelay],
    tech: AccessTechnology,
    ranges: &TechDelayRanges,
) -> AccessLinkLocation {
    let range = ranges.get(tech);
    if loc.is_determined() && range.contains(loc.delay_us) {
        return loc;
    }
    delays
        .iter()
        .find(|l| range.contains(l.delay_us))
        .map(|l| AccessLinkLocation::at(l, AccessRule::ExpectedRangeCorrected))
        .unwrap_or_else(AccessLinkLocation::undetermined)
}

/// Whether the link the GRA profile shows at the external access-link
/// position is far shorter than the real access link, i.e. the CPE answered
/// the traceroute to the GRA from two interfaces.
pub fn detect_spurious_cpe_link(
    external_profile: &[LinkDelay],
    gra_profile: &[LinkDelay],
    external_access: &AccessLinkLocation,
    cfg: &PathcharConfig,
) -> Result<bool, PathcharError> {
    let link = external_access
        .link_index
        .ok_or_else(|| PathcharError::ProfileMismatch("external access link undetermined".into()))?;
    let find = |profile: &[LinkDelay], which: &str| {
        profile.iter().find(|l| l.link_index == link).copied().ok_or_else(|| {
            PathcharError::ProfileMismatch(format!("{which} profile has no link {link}"))
        })
    };
    let external = find(external_profile, "external")?;
    let to_gra = find(gra_profile, "GRA")?;
    Ok(to_gra.delay_us * cfg.spurious_ratio <= external.delay_us)
}

/// Fits and link delays for one probing target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathProfile {
    pub fits: Vec<HopFit>,
    pub delays: Vec<LinkDelay>,
}

impl PathProfile {
    pub fn from_observations(
        observations: &[HopObservation],
        size_count: usize,
        cfg: &PathcharConfig,
    ) -> Result<Self, PathcharError> {
        let fits = fit_hops(observations)?;
        let delays = link_delays(&fits, size_count, cfg)?;
        Ok(PathProfile { fits, delays })
    }
}
