use std::net::Ipv4Addr;
use std::time::Duration;

use crate::types::{HopObservation, HopReply, Timestamp, MAX_PROBE_SIZE, MIN_PROBE_SIZE};

use super::{ProbeConfig, ProbeError};

/// Anything that can answer a single TTL-limited probe: the live network or
/// the simulator.
pub trait PathResponder {
    /// Sends one probe of `size` bytes total IP length. `Ok(None)` is a timeout.
    fn probe(
        &mut self,
        target: Ipv4Addr,
        size: u16,
        ttl: u8,
        timeout: Duration,
    ) -> Result<Option<HopReply>, ProbeError>;

    fn now(&self) -> Timestamp;

    /// Waits between consecutive probes.
    fn pause(&mut self, gap: Duration);
}

/// Probes `target` at increasing TTL with packets of exactly `size` bytes.
/// Stops when the target answers, after `max_consecutive_silent` missing
/// hops in a row, or at `max_ttl`.
pub fn traceroute<R: PathResponder + ?Sized>(
    responder: &mut R,
    target: Ipv4Addr,
    size: u16,
    cfg: &ProbeConfig,
) -> Result<Vec<HopObservation>, ProbeError> {
    if !(MIN_PROBE_SIZE..=MAX_PROBE_SIZE).contains(&size) {
        return Err(ProbeError::SizeOutOfRange(size));
    }
    let mut hops = Vec::new();
    let mut silent_run = 0u8;
    for ttl in 1..=cfg.max_ttl {
        if ttl > 1 {
            responder.pause(cfg.inter_probe_gap());
        }
        let timestamp = responder.now();
        let reply = responder.probe(target, size, ttl, cfg.per_probe_timeout())?;
        match reply {
            Some(r) => {
                hops.push(HopObservation::reply(ttl, r.responder, r.rtt_us, size, target, timestamp));
                if r.responder == target {
                    break;
                }
                silent_run = 0;
            }
            None => {
                hops.push(HopObservation::timeout(ttl, size, target, timestamp));
                silent_run += 1;
                if silent_run >= cfg.max_consecutive_silent {
                    break;
                }
            }
        }
    }
    if hops.iter().all(|h| h.reply.is_none()) {
        return Err(ProbeError::AllHopsSilent);
    }
    Ok(hops)
}

/// Smallest TTL at which `gra` itself answered.
pub fn hops_to(hops: &[HopObservation], gra: Ipv4Addr) -> Option<u8> {
    hops.iter().filter(|h| h.responder() == Some(gra)).map(|h| h.ttl).min()
}

/// Traceroute toward the GRA at the smallest configured size. The hop list
/// is kept even when the GRA never answers: replies from past the access
/// link are evidence on their own.
pub fn traceroute_to_gra<R: PathResponder + ?Sized>(
    responder: &mut R,
    gra: Ipv4Addr,
    cfg: &ProbeConfig,
) -> Result<(Vec<HopObservation>, Option<u8>), ProbeError> {
    let size = cfg.packet_sizes.first().copied().unwrap_or(MIN_PROBE_SIZE);
    let hops = traceroute(responder, gra, size, cfg)?;
    let to_gra = hops_to(&hops, gra);
    Ok((hops, to_gra))
}
