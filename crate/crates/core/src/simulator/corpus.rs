//! Labelled topology corpora for oracle scoring.

use std::collections::BTreeSet;
use std::net::Ipv4Addr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::par::Exec;
use crate::types::{classify_address, AccessTechnology, IpClass};

use super::topology::{Faults, LinkSpec, NatRole, NodeSpec, ReplyBehavior, SyntheticTopology};
use super::SimError;

/// Realm sequence on the ISP side between the CPE and the GRA-NAT (for CGN
/// topologies) or along the ISP path (otherwise).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AddressingPattern {
    SharedThenPrivate,
    SharedThenPublic,
    AllPrivate,
    AllPublic,
    AllShared,
    Mixed,
}

impl AddressingPattern {
    pub const ALL: [AddressingPattern; 6] = [
        AddressingPattern::SharedThenPrivate,
        AddressingPattern::SharedThenPublic,
        AddressingPattern::AllPrivate,
        AddressingPattern::AllPublic,
        AddressingPattern::AllShared,
        AddressingPattern::Mixed,
    ];

    /// The patterns the generator cycles through for CGN paths.
    const CYCLE: [AddressingPattern; 5] = [
        AddressingPattern::SharedThenPrivate,
        AddressingPattern::AllPrivate,
        AddressingPattern::AllPublic,
        AddressingPattern::SharedThenPublic,
        AddressingPattern::Mixed,
    ];

    pub fn classify(realms: &[IpClass]) -> Option<Self> {
        let first = *realms.first()?;
        if realms.iter().all(|&r| r == first) {
            return match first {
                IpClass::Private => Some(AddressingPattern::AllPrivate),
                IpClass::Public => Some(AddressingPattern::AllPublic),
                IpClass::Shared => Some(AddressingPattern::AllShared),
                _ => Some(AddressingPattern::Mixed),
            };
        }
        let shared = realms.iter().take_while(|&&r| r == IpClass::Shared).count();
        let rest = &realms[shared..];
        if shared > 0 && rest.iter().all(|&r| r == rest[0]) {
            match rest[0] {
                IpClass::Private => return Some(AddressingPattern::SharedThenPrivate),
                IpClass::Public => return Some(AddressingPattern::SharedThenPublic),
                _ => {}
            }
        }
        Some(AddressingPattern::Mixed)
    }

    pub fn of(t: &SyntheticTopology) -> Option<Self> {
        let a = t.access_link;
        let last = match t.cgn_distance() {
            Some(_) => t.translator_hop()?,
            None => t.hop_count().checked_sub(1)?,
        };
        let realms: Vec<IpClass> = (a..=last).map(|h| t.node(h).realm).collect();
        Self::classify(&realms)
    }

    /// A realm sequence of length `len` following this pattern.
    fn realms<R: Rng>(self, len: usize, rng: &mut R) -> Vec<IpClass> {
        let split = |rng: &mut R, tail: IpClass| {
            let shared = if len < 2 { len } else { rng.gen_range(1..len) };
            let mut v = vec![IpClass::Shared; shared];
            v.resize(len, tail);
            v
        };
        match self {
            AddressingPattern::SharedThenPrivate => split(rng, IpClass::Private),
            AddressingPattern::SharedThenPublic => split(rng, IpClass::Public),
            AddressingPattern::AllPrivate => vec![IpClass::Private; len],
            AddressingPattern::AllPublic => vec![IpClass::Public; len],
            AddressingPattern::AllShared => vec![IpClass::Shared; len],
            AddressingPattern::Mixed => {
                let pool = [IpClass::Public, IpClass::Private, IpClass::Shared];
                (0..len).map(|_| *pool.choose(rng).expect("non-empty")).collect()
            }
        }
    }

    /// Whether a path of `len` hops can show this pattern.
    fn fits(self, len: usize) -> bool {
        match self {
            AddressingPattern::SharedThenPrivate | AddressingPattern::SharedThenPublic | AddressingPattern::Mixed => len >= 2,
            _ => len >= 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    /// The probe owns the GRA.
    NoHomeNat,
    /// The CPE translates to the GRA.
    HomeGateway,
    /// A CGN at this ISP hop (1 = first hop past the CPE).
    Cgn { isp_hop: u8 },
}

/// Everything needed to lay out one topology; addresses are drawn at build time.
#[derive(Debug, Clone, PartialEq)]
pub struct Blueprint {
    pub name: String,
    pub technology: AccessTechnology,
    /// One delay per home link; the CPE sits at hop `home_delays_us.len()`.
    pub home_delays_us: Vec<f64>,
    pub access_delay_us: f64,
    /// Links past the access link; the last node is the external target.
    pub isp_delays_us: Vec<f64>,
    pub placement: Placement,
    /// Realms of ISP hops from the first ISP hop up to the CGN (or along
    /// the ISP path without one). Missing entries default to Public.
    pub isp_realms: Vec<IpClass>,
    pub two_hop_cpe: bool,
    pub upnp: bool,
    pub faults: Faults,
    /// Overrides reply behaviour per hop.
    pub behaviors: Vec<(u8, ReplyBehavior)>,
}

impl Blueprint {
    /// Plain DSL home with the GRA on the CPE, the base for scripted cases.
    pub fn dsl_home(name: impl Into<String>) -> Self {
        Blueprint {
            name: name.into(),
            technology: AccessTechnology::Dsl,
            home_delays_us: vec![100.0, 100.0],
            access_delay_us: 9000.0,
            isp_delays_us: vec![400.0, 600.0, 800.0],
            placement: Placement::HomeGateway,
            isp_realms: Vec::new(),
            two_hop_cpe: false,
            upnp: false,
            faults: Faults::default(),
            behaviors: Vec::new(),
        }
    }

    pub fn build<R: Rng>(&self, rng: &mut R) -> Result<SyntheticTopology, SimError> {
        let d = self.home_delays_us.len();
        if d == 0 || d > 60 {
            return Err(SimError::SpecInconsistent("home depth must be 1..=60".into()));
        }
        let a = d as u8 + 1;
        let mut used = BTreeSet::new();
        let mut fresh = |rng: &mut R, class: IpClass| loop {
            let addr = random_address(rng, class);
            if used.insert(addr) {
                return addr;
            }
        };
        let gra = fresh(rng, IpClass::Public);
        let no_nat = self.placement == Placement::NoHomeNat;
        let local = if no_nat { gra } else { Ipv4Addr::new(192, 168, 1, rng.gen_range(2..=254)) };

        let home_bw = |rng: &mut R| rng.gen_range(12.5..=125.0);
        let mut hops = Vec::new();
        for (i, &delay) in self.home_delays_us.iter().enumerate() {
            let hop = i as u8 + 1;
            let address = if no_nat { fresh(rng, IpClass::Public) } else { Ipv4Addr::new(192, 168, hop, 1) };
            let role = match self.placement {
                Placement::NoHomeNat => NatRole::None,
                Placement::HomeGateway if usize::from(hop) == d => NatRole::GraNat,
                _ => NatRole::HomeNat,
            };
            hops.push((LinkSpec::new(delay, home_bw(rng)), NodeSpec::new(address, role)));
        }

        let realm_at = |i: usize| self.isp_realms.get(i).copied().unwrap_or(IpClass::Public);
        let access_bw = access_bandwidth(self.technology, rng);
        let cgn_hop = match self.placement {
            Placement::Cgn { isp_hop } => Some(usize::from(isp_hop)),
            _ => None,
        };
        let isp_links = std::iter::once((self.access_delay_us, access_bw))
            .chain(self.isp_delays_us.iter().map(|&d| (d, rng.gen_range(125.0..=1250.0))))
            .collect::<Vec<_>>();
        for (i, &(delay, bw)) in isp_links.iter().enumerate() {
            let role = if cgn_hop == Some(i + 1) { NatRole::CgnNat } else { NatRole::None };
            let realm = if cgn_hop.is_some_and(|k| i + 1 > k) { IpClass::Public } else { realm_at(i) };
            let address = fresh(rng, realm);
            hops.push((LinkSpec::new(delay, bw), NodeSpec::new(address, role)));
        }

        if self.two_hop_cpe {
            hops[d - 1].1.reply_behavior = ReplyBehavior::TwoHopReply;
        }
        for &(hop, behavior) in &self.behaviors {
            if let Some((_, node)) = hops.get_mut(usize::from(hop).wrapping_sub(1)) {
                node.reply_behavior = behavior;
            }
        }

        let upnp = match (self.upnp, self.placement) {
            (false, _) | (true, Placement::NoHomeNat) => None,
            (true, Placement::HomeGateway) if d == 1 => Some(gra),
            // hop 1 is an inner router whose WAN sits on the next LAN
            (true, _) if d > 1 => Some(Ipv4Addr::new(192, 168, 2, rng.gen_range(2..=254))),
            (true, _) => Some(fresh(rng, realm_at(0))),
        };
        SyntheticTopology::new(self.name.clone(), self.technology, a, gra, local, upnp, self.faults, hops)
    }
}

fn access_bandwidth<R: Rng>(tech: AccessTechnology, rng: &mut R) -> f64 {
    match tech {
        AccessTechnology::Dsl => rng.gen_range(1.0..=3.0),
        AccessTechnology::Cable => rng.gen_range(5.0..=25.0),
        AccessTechnology::Fiber => rng.gen_range(12.5..=125.0),
        AccessTechnology::Satellite => rng.gen_range(0.5..=3.0),
        AccessTechnology::Unknown => rng.gen_range(1.0..=25.0),
    }
}

/// One-way access delay drawn well inside the technology's expected range.
pub fn access_delay_us<R: Rng>(tech: AccessTechnology, rng: &mut R) -> f64 {
    let (lo, hi) = match tech {
        AccessTechnology::Dsl => (5_000.0, 25_000.0),
        AccessTechnology::Cable => (2_000.0, 20_000.0),
        AccessTechnology::Fiber => (1_000.0, 8_000.0),
        AccessTechnology::Satellite => (250_000.0, 600_000.0),
        AccessTechnology::Unknown => (1_000.0, 20_000.0),
    };
    rng.gen_range(lo..=hi)
}

pub fn random_address<R: Rng>(rng: &mut R, class: IpClass) -> Ipv4Addr {
    match class {
        IpClass::Private => Ipv4Addr::from(0x0A00_0000 | rng.gen_range(1..0x00FF_FFFF)),
        IpClass::Shared => Ipv4Addr::from(0x6440_0000 | rng.gen_range(1..0x003F_FFFF)),
        IpClass::Loopback => Ipv4Addr::new(127, 0, 0, rng.gen_range(1..=254)),
        IpClass::LinkLocal => Ipv4Addr::new(169, 254, rng.gen(), rng.gen_range(1..=254)),
        IpClass::Unspecified => Ipv4Addr::from(rng.gen_range(0..0x0100_0000)),
        IpClass::Public => loop {
            let a = Ipv4Addr::from(rng.gen_range(0x0100_0000u32..0xE000_0000));
            if classify_address(a) == IpClass::Public && a.octets()[3] != 0 {
                return a;
            }
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CorpusOptions {
    /// Sprinkle ICMP filtering, blocked STUN, silent and rate-limited hops.
    pub faults: bool,
}

fn per_index_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Blueprint for corpus entry `index`. Technology, home depth, placement,
/// CGN distance and addressing pattern cycle so that small corpora already
/// cover every axis; the rest is drawn from the per-index stream.
pub fn corpus_blueprint(index: usize, seed: u64, opts: &CorpusOptions) -> (Blueprint, ChaCha8Rng) {
    let mut rng = per_index_rng(seed, index);
    let technology = AccessTechnology::KNOWN[index % 4];
    let depth = 1 + (index / 4) % 3;
    let slot = index % 10;
    let cgn_index = (index / 10) * 4 + slot.saturating_sub(5);
    let placement = match slot {
        0..=4 => Placement::HomeGateway,
        5..=8 => Placement::Cgn { isp_hop: 1 + ((cgn_index + cgn_index / 6) % 6) as u8 },
        _ => Placement::NoHomeNat,
    };

    let max_home = if technology == AccessTechnology::Fiber { 290.0 } else { 900.0 };
    let mut home: Vec<f64> = (0..depth).map(|_| rng.gen_range(20.0..=250.0)).collect();
    if depth >= 2 && rng.gen_bool(0.3) {
        // an order-of-magnitude jump inside the home
        home[0] = rng.gen_range(20.0..=90.0);
        home[1] = rng.gen_range(100.0..=max_home);
    }

    let (isp_realms, isp_len) = match placement {
        Placement::Cgn { isp_hop } => {
            let len = usize::from(isp_hop);
            let mut pattern = AddressingPattern::CYCLE[cgn_index % 5];
            if !pattern.fits(len) {
                pattern = [AddressingPattern::AllPrivate, AddressingPattern::AllShared, AddressingPattern::AllPublic]
                    [cgn_index % 3];
            }
            (pattern.realms(len, &mut rng), len + rng.gen_range(1..=3))
        }
        _ => {
            let len = rng.gen_range(2..=5);
            let realms = if rng.gen_bool(0.2) {
                AddressingPattern::Mixed.realms(len, &mut rng)
            } else {
                vec![IpClass::Public; len]
            };
            (realms, len)
        }
    };
    let isp_delays = (0..isp_len).map(|_| rng.gen_range(100.0..=900.0)).collect();
    let access_delay = access_delay_us(technology, &mut rng);

    let mut faults = Faults::default();
    let mut behaviors = Vec::new();
    if opts.faults {
        match rng.gen_range(0..6) {
            0 => faults.icmp_past_cpe = true,
            1 => faults.stun_blocked = true,
            2 => behaviors.push((depth as u8 + 1 + rng.gen_range(0..2), ReplyBehavior::Silent)),
            3 => behaviors.push((depth as u8 + 1, ReplyBehavior::RateLimited(10.0))),
            _ => {}
        }
    }
    let blueprint = Blueprint {
        name: format!("corpus-{seed}-{index:05}"),
        technology,
        home_delays_us: home,
        access_delay_us: access_delay,
        isp_delays_us: isp_delays,
        placement,
        isp_realms,
        two_hop_cpe: placement == Placement::HomeGateway && rng.gen_bool(0.25),
        upnp: placement != Placement::NoHomeNat && rng.gen_bool(0.5),
        faults,
        behaviors,
    };
    (blueprint, rng)
}

pub fn generate_corpus(n: usize, seed: u64) -> Vec<SyntheticTopology> {
    generate_corpus_with(n, seed, &CorpusOptions::default(), Exec::default())
}

pub fn generate_corpus_with(n: usize, seed: u64, opts: &CorpusOptions, exec: Exec) -> Vec<SyntheticTopology> {
    exec.map_range(n, |i| {
        let (bp, mut rng) = corpus_blueprint(i, seed, opts);
        bp.build(&mut rng).expect("corpus blueprints are valid by construction")
    })
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;
    use crate::types::VerdictKind;

    #[test]
    fn corpus_covers_every_axis() {
        let corpus = generate_corpus(200, 7);
        assert_eq!(corpus.len(), 200);
        for t in &corpus {
            assert_eq!(t.validate().unwrap(), t.truth, "{}", t.name);
            assert_eq!(t.placement_truth(), t.truth);
        }
        let techs: BTreeSet<_> = corpus.iter().map(|t| t.technology.as_str()).collect();
        assert_eq!(techs.len(), 4);
        let depths: BTreeSet<_> = corpus.iter().map(|t| t.cpe_hop()).collect();
        assert_eq!(depths, [1, 2, 3].into());
        let distances: BTreeSet<_> = corpus.iter().filter_map(|t| t.cgn_distance()).collect();
        assert_eq!(distances, (1..=6).collect());
        let patterns: BTreeSet<_> = corpus.iter().filter(|t| t.cgn_distance().is_some()).filter_map(AddressingPattern::of).collect();
        for p in [AddressingPattern::SharedThenPrivate, AddressingPattern::AllPrivate, AddressingPattern::AllPublic] {
            assert!(patterns.contains(&p), "missing {p:?}");
        }
        let kinds: BTreeSet<_> = corpus.iter().map(|t| t.truth).collect();
        assert_eq!(kinds.len(), 3);
        assert!(!kinds.contains(&VerdictKind::Inconclusive));
        assert!(corpus.iter().any(|t| t.nodes.iter().any(|n| n.reply_behavior == ReplyBehavior::TwoHopReply)));
    }

    #[test]
    fn corpus_is_seeded_and_strategy_independent() {
        let opts = CorpusOptions::default();
        let a = generate_corpus_with(40, 3, &opts, Exec::Sequential);
        let b = generate_corpus_with(40, 3, &opts, Exec::Parallel);
        assert_eq!(a, b);
        assert_ne!(a, generate_corpus(40, 4));
        // prefixes agree: entry i depends only on (seed, i)
        assert_eq!(generate_corpus(10, 3), a[..10]);
    }

    #[test]
    fn faulty_corpus_stays_valid() {
        let corpus = generate_corpus_with(100, 11, &CorpusOptions { faults: true }, Exec::Sequential);
        assert!(corpus.iter().any(|t| t.faults.icmp_past_cpe));
        assert!(corpus.iter().any(|t| t.faults.stun_blocked));
    }

    #[test]
    fn pattern_classification() {
        use IpClass::*;
        assert_eq!(AddressingPattern::classify(&[Shared, Private, Private]), Some(AddressingPattern::SharedThenPrivate));
        assert_eq!(AddressingPattern::classify(&[Shared, Shared, Public]), Some(AddressingPattern::SharedThenPublic));
        assert_eq!(AddressingPattern::classify(&[Private]), Some(AddressingPattern::AllPrivate));
        assert_eq!(AddressingPattern::classify(&[Public, Shared]), Some(AddressingPattern::Mixed));
        assert_eq!(AddressingPattern::classify(&[]), None);
    }

    #[test]
    fn random_addresses_land_in_their_class() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for class in [IpClass::Public, IpClass::Private, IpClass::Shared, IpClass::Loopback, IpClass::LinkLocal] {
            for _ in 0..200 {
                assert_eq!(classify_address(random_address(&mut rng, class)), class);
            }
        }
    }
}
