use std::collections::HashMap;
use std::net::Ipv4Addr;
use std::time::Duration;

use chrono::TimeDelta;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::probing::{run_revelio_session, PathResponder, ProbeConfig, ProbeError, RawRunRecord, RevelioNetwork, StunError};
use crate::types::{GraObservation, HopReply, Timestamp};

use super::topology::{ReplyBehavior, SyntheticTopology};

/// Default upper bound of the uniform per-probe jitter.
pub const DEFAULT_JITTER_US: f64 = 200.0;
/// Extra round-trip time of the second reply of a two-hop CPE.
pub const TWO_HOP_EPSILON_US: f64 = 2.0;
const PROBE_LOCAL_PORT: u16 = 40000;

#[derive(Debug, Clone, PartialEq)]
pub struct SimOptions {
    pub jitter_max_us: f64,
    /// Simulated wall clock at the start of the session.
    pub start: Timestamp,
    pub device_id: Option<String>,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            jitter_max_us: DEFAULT_JITTER_US,
            start: "2016-03-01T00:00:00Z".parse().expect("valid literal"),
            device_id: None,
        }
    }
}

impl SimOptions {
    pub fn noiseless() -> Self {
        SimOptions { jitter_max_us: 0.0, ..Default::default() }
    }
}

/// Token bucket holding at most one reply.
#[derive(Debug, Clone, Copy)]
struct Bucket {
    tokens: f64,
    last_us: f64,
}

/// A topology answering probes, with its own clock and seeded randomness.
/// One instance serves one session.
pub struct SimulatedPath<'t> {
    topology: &'t SyntheticTopology,
    rng: ChaCha8Rng,
    jitter_max_us: f64,
    start: Timestamp,
    clock_us: f64,
    buckets: HashMap<u8, Bucket>,
}

impl<'t> SimulatedPath<'t> {
    pub fn new(topology: &'t SyntheticTopology, seed: u64, opts: &SimOptions) -> Self {
        SimulatedPath {
            topology,
            rng: ChaCha8Rng::seed_from_u64(seed),
            jitter_max_us: opts.jitter_max_us.max(0.0),
            start: opts.start,
            clock_us: 0.0,
            buckets: HashMap::new(),
        }
    }

    /// Noiseless round trip to hop `hop` for a packet of `size` bytes.
    pub fn base_rtt_us(&self, hop: u8, size: u16) -> f64 {
        let s = f64::from(size);
        2.0 * self.topology.links[..usize::from(hop)]
            .iter()
            .map(|l| l.delay_us + s / l.bandwidth_bytes_per_us)
            .sum::<f64>()
    }

    /// Hop that owns `target`, and whether the answer comes from a virtual
    /// second reply of a two-hop CPE.
    fn destination(&self, target: Ipv4Addr) -> (u8, bool) {
        let t = self.topology;
        if target == t.gra {
            if let Some(k) = t.translator_hop() {
                let two_hop = t.node(k).reply_behavior == ReplyBehavior::TwoHopReply;
                return (if two_hop { k + 1 } else { k }, two_hop);
            }
        }
        (t.hop_count(), false)
    }

    fn bucket_allows(&mut self, hop: u8, rate: f64) -> bool {
        let now = self.clock_us;
        let b = self.buckets.entry(hop).or_insert(Bucket { tokens: 1.0, last_us: now });
        b.tokens = (b.tokens + (now - b.last_us) * rate / 1e6).min(1.0);
        b.last_us = now;
        if b.tokens >= 1.0 {
            b.tokens -= 1.0;
            true
        } else {
            false
        }
    }

    /// Reply to one probe, before any clock bookkeeping.
    fn answer(&mut self, target: Ipv4Addr, size: u16, ttl: u8) -> Option<HopReply> {
        let t = self.topology;
        let (dest, two_hop) = self.destination(target);
        let hop = ttl.min(dest);
        let reached = ttl >= dest;
        // the virtual hop of a two-hop CPE is the CPE itself
        let physical = if two_hop && reached { dest - 1 } else { hop };

        let survive: f64 = t.links[..usize::from(physical)].iter().map(|l| (1.0 - l.loss).powi(2)).product();
        let jitter = if self.jitter_max_us > 0.0 { self.rng.gen_range(0.0..=self.jitter_max_us) } else { 0.0 };
        let lost = survive < 1.0 && self.rng.gen::<f64>() >= survive;

        if t.faults.icmp_past_cpe && physical >= t.access_link {
            return None;
        }
        let node = t.node(physical);
        match node.reply_behavior {
            ReplyBehavior::Silent => return None,
            ReplyBehavior::RateLimited(rate) if !self.bucket_allows(physical, rate) => return None,
            _ => {}
        }
        if lost {
            return None;
        }
        let mut rtt_us = self.base_rtt_us(physical, size) + jitter;
        if two_hop && reached {
            rtt_us += TWO_HOP_EPSILON_US;
        }
        let responder = if reached { target } else { node.address };
        Some(HopReply { responder, rtt_us })
    }

    fn advance(&mut self, us: f64) {
        self.clock_us += us;
    }
}

impl PathResponder for SimulatedPath<'_> {
    fn probe(&mut self, target: Ipv4Addr, size: u16, ttl: u8, timeout: Duration) -> Result<Option<HopReply>, ProbeError> {
        if ttl == 0 {
            return Err(ProbeError::SendFailure("ttl 0".into()));
        }
        let timeout_us = timeout.as_secs_f64() * 1e6;
        let reply = self.answer(target, size, ttl).filter(|r| r.rtt_us <= timeout_us);
        self.advance(reply.map_or(timeout_us, |r| r.rtt_us));
        Ok(reply)
    }

    fn now(&self) -> Timestamp {
        self.start + TimeDelta::microseconds(self.clock_us as i64)
    }

    fn pause(&mut self, gap: Duration) {
        self.advance(gap.as_secs_f64() * 1e6);
    }
}

impl RevelioNetwork for SimulatedPath<'_> {
    fn discover_gra(&mut self, cfg: &ProbeConfig) -> Result<GraObservation, StunError> {
        let t = self.topology;
        if t.faults.stun_blocked {
            self.advance(7.5e6);
            return Err(StunError::Timeout(3));
        }
        log::trace!("simulated STUN toward {}", cfg.stun_server);
        let mapped_port = if t.local == t.gra { PROBE_LOCAL_PORT } else { self.rng.gen_range(1024..=65535) };
        let obs = GraObservation {
            gra: t.gra,
            mapped_port,
            local_address: t.local,
            local_port: PROBE_LOCAL_PORT,
            timestamp: self.now(),
        };
        self.advance(2.0 * t.links.iter().map(|l| l.delay_us).sum::<f64>());
        Ok(obs)
    }

    fn query_upnp(&mut self) -> Option<Ipv4Addr> {
        self.topology.upnp
    }
}

/// One full Revelio run against `topology`. Fully determined by the seed.
pub fn simulate_session(
    topology: &SyntheticTopology,
    cfg: &ProbeConfig,
    seed: u64,
    opts: &SimOptions,
) -> Result<RawRunRecord, ProbeError> {
    let mut path = SimulatedPath::new(topology, seed, opts);
    let device = opts.device_id.clone().unwrap_or_else(|| topology.name.clone());
    run_revelio_session(&mut path, &device, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::topology::{Faults, LinkSpec, NatRole, NodeSpec};
    use crate::types::AccessTechnology;

    fn ip(s: &str) -> Ipv4Addr {
        s.parse().unwrap()
    }

    fn three_link(behaviors: [ReplyBehavior; 2]) -> SyntheticTopology {
        let mut t = SyntheticTopology::new(
            "t",
            AccessTechnology::Dsl,
            2,
            ip("203.0.113.7"),
            ip("192.168.1.20"),
            None,
            Faults::default(),
            vec![
                (LinkSpec::new(100.0, 12.5), NodeSpec::new(ip("192.168.1.1"), NatRole::GraNat)),
                (LinkSpec::new(9000.0, 2.0), NodeSpec::new(ip("81.2.3.1"), NatRole::None)),
                (LinkSpec::new(700.0, 125.0), NodeSpec::new(ip("8.8.8.8"), NatRole::None)),
            ],
        )
        .unwrap();
        t.nodes[0].reply_behavior = behaviors[0];
        t.nodes[1].reply_behavior = behaviors[1];
        t
    }

    const TIMEOUT: Duration = Duration::from_secs(2);

    #[test]
    fn noiseless_rtt_is_closed_form() {
        let t = three_link([ReplyBehavior::Normal; 2]);
        let mut p = SimulatedPath::new(&t, 1, &SimOptions::noiseless());
        let r = p.probe(ip("8.8.8.8"), 120, 2, TIMEOUT).unwrap().unwrap();
        let expected = 2.0 * (100.0 + 9000.0 + 120.0 / 12.5 + 120.0 / 2.0);
        assert_eq!(r.rtt_us, expected);
        assert_eq!(r.responder, ip("81.2.3.1"));
        let last = p.probe(ip("8.8.8.8"), 120, 9, TIMEOUT).unwrap().unwrap();
        assert_eq!(last.responder, ip("8.8.8.8"));
    }

    #[test]
    fn jitter_is_bounded_and_one_sided() {
        let t = three_link([ReplyBehavior::Normal; 2]);
        let mut p = SimulatedPath::new(&t, 9, &SimOptions::default());
        let base = p.base_rtt_us(3, 600);
        for _ in 0..500 {
            let r = p.probe(ip("8.8.8.8"), 600, 3, TIMEOUT).unwrap().unwrap();
            assert!(r.rtt_us >= base && r.rtt_us <= base + DEFAULT_JITTER_US);
        }
    }

    #[test]
    fn two_hop_cpe_answers_twice() {
        let t = three_link([ReplyBehavior::TwoHopReply, ReplyBehavior::Normal]);
        let gra = t.gra;
        let mut p = SimulatedPath::new(&t, 1, &SimOptions::noiseless());
        let first = p.probe(gra, 120, 1, TIMEOUT).unwrap().unwrap();
        let second = p.probe(gra, 120, 2, TIMEOUT).unwrap().unwrap();
        assert_eq!(first.responder, ip("192.168.1.1"));
        assert_eq!(second.responder, gra);
        assert_eq!(second.rtt_us, first.rtt_us + TWO_HOP_EPSILON_US);
        // toward other targets the CPE is an ordinary hop
        let ext = p.probe(ip("8.8.8.8"), 120, 2, TIMEOUT).unwrap().unwrap();
        assert_eq!(ext.responder, ip("81.2.3.1"));
    }

    #[test]
    fn silent_node_is_missing_later_hops_answer() {
        let t = three_link([ReplyBehavior::Normal, ReplyBehavior::Silent]);
        let mut p = SimulatedPath::new(&t, 1, &SimOptions::noiseless());
        assert!(p.probe(ip("8.8.8.8"), 120, 2, TIMEOUT).unwrap().is_none());
        assert!(p.probe(ip("8.8.8.8"), 120, 3, TIMEOUT).unwrap().is_some());
    }

    #[test]
    fn rate_limited_node_drops_fast_probes() {
        let t = three_link([ReplyBehavior::Normal, ReplyBehavior::RateLimited(10.0)]);
        let mut p = SimulatedPath::new(&t, 1, &SimOptions::noiseless());
        assert!(p.probe(ip("8.8.8.8"), 120, 2, TIMEOUT).unwrap().is_some());
        // the first reply used about 18 ms; a 100 ms bucket is still empty
        assert!(p.probe(ip("8.8.8.8"), 120, 2, TIMEOUT).unwrap().is_none());
        p.pause(Duration::from_millis(100));
        assert!(p.probe(ip("8.8.8.8"), 120, 2, TIMEOUT).unwrap().is_some());
    }

    #[test]
    fn icmp_filtering_past_cpe() {
        let mut t = three_link([ReplyBehavior::Normal; 2]);
        t.faults.icmp_past_cpe = true;
        let mut p = SimulatedPath::new(&t, 1, &SimOptions::noiseless());
        assert!(p.probe(ip("8.8.8.8"), 120, 1, TIMEOUT).unwrap().is_some());
        assert!(p.probe(ip("8.8.8.8"), 120, 2, TIMEOUT).unwrap().is_none());
        assert!(p.probe(ip("8.8.8.8"), 120, 3, TIMEOUT).unwrap().is_none());
    }

    #[test]
    fn sessions_replay_exactly() {
        let t = three_link([ReplyBehavior::Normal; 2]);
        let cfg = ProbeConfig::default();
        let a = simulate_session(&t, &cfg, 42, &SimOptions::default()).unwrap();
        let b = simulate_session(&t, &cfg, 42, &SimOptions::default()).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let c = simulate_session(&t, &cfg, 43, &SimOptions::default()).unwrap();
        assert_ne!(a.sized_traceroutes, c.sized_traceroutes);
    }

    #[test]
    fn healthy_session_fills_every_section() {
        let mut t = three_link([ReplyBehavior::Normal; 2]);
        t.upnp = Some(t.gra);
        let cfg = ProbeConfig::default();
        let rec = simulate_session(&t, &cfg, 1, &SimOptions::default()).unwrap();
        assert_eq!(rec.gra(), Some(t.gra));
        assert_eq!(rec.gra_traceroute.len(), 1);
        assert_eq!(rec.sized_traceroutes.len(), 21 * 5 * 3);
        assert!(rec.sized_traceroutes.iter().all(|h| h.target == cfg.external_target));
        assert_eq!(rec.gra_sized_traceroutes.len(), 21 * 5);
        assert_eq!(rec.upnp_wan_ip, Some(t.gra));
        assert!(rec.errors.is_empty(), "{:?}", rec.errors);
    }

    #[test]
    fn stun_blocked_keeps_external_traces() {
        let mut t = three_link([ReplyBehavior::Normal; 2]);
        t.faults.stun_blocked = true;
        let rec = simulate_session(&t, &ProbeConfig::default(), 1, &SimOptions::default()).unwrap();
        assert!(rec.gra().is_none());
        assert!(rec.gra_traceroute.is_empty() && rec.gra_sized_traceroutes.is_empty());
        assert!(!rec.sized_traceroutes.is_empty());
    }

    #[test]
    fn dead_path_abandons_the_sweep() {
        let mut t = three_link([ReplyBehavior::Silent; 2]);
        t.nodes[2].reply_behavior = ReplyBehavior::Silent;
        t.faults.stun_blocked = true;
        let rec = simulate_session(&t, &ProbeConfig::default(), 1, &SimOptions::default()).unwrap();
        assert!(rec.sized_traceroutes.is_empty());
        assert!(rec.errors.iter().any(|e| e.contains("abandoned")), "{:?}", rec.errors);
    }

    #[test]
    fn probe_budget_holds_on_filtered_paths() {
        let mut t = three_link([ReplyBehavior::Normal; 2]);
        t.faults.icmp_past_cpe = true;
        let cfg = ProbeConfig::default();
        let rec = simulate_session(&t, &cfg, 1, &SimOptions::default()).unwrap();
        assert!(rec.sized_traceroutes.len() <= cfg.max_external_probes());
    }
}
