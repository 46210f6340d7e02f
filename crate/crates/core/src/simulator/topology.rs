//! Synthetic access-network topologies and their text form.
//!
//! Node `k` (1-based) sits at hop `k`, behind link `k`. Link `a`, the access
//! link, joins the CPE at hop `a-1` to the first ISP hop `a`. The last node
//! stands for the external target.

use std::fmt::{self, Write as _};
use std::net::Ipv4Addr;
use std::str::FromStr;

use crate::types::{classify_address, AccessTechnology, IpClass, VerdictKind};

use super::SimError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkSpec {
    /// One-way propagation delay in microseconds.
    pub delay_us: f64,
    pub bandwidth_bytes_per_us: f64,
    /// Probability that a probe crossing this link is lost.
    pub loss: f64,
}

impl LinkSpec {
    pub fn new(delay_us: f64, bandwidth_bytes_per_us: f64) -> Self {
        LinkSpec { delay_us, bandwidth_bytes_per_us, loss: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NatRole {
    None,
    /// A home NAT that is not the last translation (cascades, or the CPE
    /// when a CGN sits upstream).
    HomeNat,
    /// The home gateway translating to the GRA.
    GraNat,
    /// An ISP-side NAT translating to the GRA.
    CgnNat,
}

impl NatRole {
    pub fn is_gra_translator(self) -> bool {
        matches!(self, NatRole::GraNat | NatRole::CgnNat)
    }

    fn as_str(self) -> &'static str {
        match self {
            NatRole::None => "none",
            NatRole::HomeNat => "home_nat",
            NatRole::GraNat => "gra_nat",
            NatRole::CgnNat => "cgn_nat",
        }
    }
}

impl FromStr for NatRole {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "none" => NatRole::None,
            "home_nat" => NatRole::HomeNat,
            "gra_nat" => NatRole::GraNat,
            "cgn_nat" => NatRole::CgnNat,
            _ => return Err(format!("unknown nat role {s:?}")),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ReplyBehavior {
    Normal,
    /// Answers probes toward its own GRA twice: from the LAN side at its
    /// hop and from the GRA one TTL later.
    TwoHopReply,
    Silent,
    /// ICMP replies limited by a token bucket refilled at this many per second.
    RateLimited(f64),
}

impl fmt::Display for ReplyBehavior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReplyBehavior::Normal => f.write_str("normal"),
            ReplyBehavior::TwoHopReply => f.write_str("two_hop_reply"),
            ReplyBehavior::Silent => f.write_str("silent"),
            ReplyBehavior::RateLimited(r) => write!(f, "rate_limited:{r}"),
        }
    }
}

impl FromStr for ReplyBehavior {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "normal" => ReplyBehavior::Normal,
            "two_hop_reply" => ReplyBehavior::TwoHopReply,
            "silent" => ReplyBehavior::Silent,
            _ => match s.strip_prefix("rate_limited:") {
                Some(r) => ReplyBehavior::RateLimited(r.parse().map_err(|_| format!("bad rate {r:?}"))?),
                None => return Err(format!("unknown reply behavior {s:?}")),
            },
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeSpec {
    /// Address the node answers traceroute from.
    pub address: Ipv4Addr,
    pub realm: IpClass,
    pub nat_role: NatRole,
    pub reply_behavior: ReplyBehavior,
}

impl NodeSpec {
    pub fn new(address: Ipv4Addr, nat_role: NatRole) -> Self {
        NodeSpec { address, realm: classify_address(address), nat_role, reply_behavior: ReplyBehavior::Normal }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Faults {
    /// Every node past the CPE drops its ICMP replies.
    pub icmp_past_cpe: bool,
    pub stun_blocked: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTopology {
    pub name: String,
    pub technology: AccessTechnology,
    /// 1-based index of the access link.
    pub access_link: u8,
    pub gra: Ipv4Addr,
    /// The probe's own address.
    pub local: Ipv4Addr,
    /// WAN address the hop-1 device reports over UPnP, if it speaks UPnP.
    pub upnp: Option<Ipv4Addr>,
    pub faults: Faults,
    pub nodes: Vec<NodeSpec>,
    pub links: Vec<LinkSpec>,
    pub truth: VerdictKind,
}

impl SyntheticTopology {
    /// Builds and validates a topology, labelling it from NAT placement.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        technology: AccessTechnology,
        access_link: u8,
        gra: Ipv4Addr,
        local: Ipv4Addr,
        upnp: Option<Ipv4Addr>,
        faults: Faults,
        hops: Vec<(LinkSpec, NodeSpec)>,
    ) -> Result<Self, SimError> {
        let (links, nodes) = hops.into_iter().unzip();
        let mut t = SyntheticTopology {
            name: name.into(),
            technology,
            access_link,
            gra,
            local,
            upnp,
            faults,
            nodes,
            links,
            truth: VerdictKind::Inconclusive,
        };
        t.truth = t.validate()?;
        Ok(t)
    }

    pub fn hop_count(&self) -> u8 {
        self.nodes.len() as u8
    }

    /// Hop of the node translating to the GRA; `None` when the probe owns it.
    pub fn translator_hop(&self) -> Option<u8> {
        self.nodes.iter().position(|n| n.nat_role.is_gra_translator()).map(|i| i as u8 + 1)
    }

    pub fn node(&self, hop: u8) -> &NodeSpec {
        &self.nodes[usize::from(hop) - 1]
    }

    pub fn link(&self, index: u8) -> &LinkSpec {
        &self.links[usize::from(index) - 1]
    }

    pub fn cpe_hop(&self) -> u8 {
        self.access_link - 1
    }

    /// Ground truth from placement alone: GRA on the probe, before the
    /// access link, or past it.
    pub fn placement_truth(&self) -> VerdictKind {
        match self.translator_hop() {
            None => VerdictKind::NoHomeNat,
            Some(k) if k < self.access_link => VerdictKind::SimpleHomeNat,
            Some(_) => VerdictKind::CarrierGradeNat,
        }
    }

    /// ISP hops from the CPE to the CGN (1 = first ISP hop), for CGN topologies.
    pub fn cgn_distance(&self) -> Option<u8> {
        self.translator_hop().filter(|&k| k >= self.access_link).map(|k| k - self.access_link + 1)
    }

    /// Checks every structural invariant and returns the placement label.
    pub fn validate(&self) -> Result<VerdictKind, SimError> {
        let bad = |msg: String| Err(SimError::SpecInconsistent(msg));
        let n = self.nodes.len();
        if n == 0 {
            return bad("topology has no nodes".into());
        }
        if n > 64 {
            return bad(format!("{n} nodes exceed the 64-hop limit"));
        }
        if self.links.len() != n {
            return bad(format!("{} links for {n} nodes", self.links.len()));
        }
        for (i, l) in self.links.iter().enumerate() {
            if !(l.delay_us > 0.0 && l.delay_us.is_finite()) {
                return bad(format!("link {} delay must be positive", i + 1));
            }
            if !(l.bandwidth_bytes_per_us > 0.0 && l.bandwidth_bytes_per_us.is_finite()) {
                return bad(format!("link {} bandwidth must be positive", i + 1));
            }
            if !(0.0..=1.0).contains(&l.loss) {
                return bad(format!("link {} loss outside [0, 1]", i + 1));
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            let actual = classify_address(node.address);
            if node.realm != actual {
                return bad(format!("node {} realm {} but {} is {actual}", i + 1, node.realm, node.address));
            }
            if let ReplyBehavior::RateLimited(r) = node.reply_behavior {
                if !(r > 0.0 && r.is_finite()) {
                    return bad(format!("node {} rate must be positive", i + 1));
                }
            }
        }
        let a = self.access_link;
        if a == 0 || usize::from(a) > n {
            return bad(format!("access link {a} outside 1..={n}"));
        }
        if classify_address(self.gra) != IpClass::Public {
            return bad(format!("GRA {} is not public", self.gra));
        }

        let translators: Vec<u8> = (1..=n as u8).filter(|&h| self.node(h).nat_role.is_gra_translator()).collect();
        let truth = if self.local == self.gra {
            if !translators.is_empty() || self.nodes.iter().any(|x| x.nat_role != NatRole::None) {
                return bad("a probe holding the GRA cannot sit behind a NAT".into());
            }
            VerdictKind::NoHomeNat
        } else {
            if classify_address(self.local) == IpClass::Public {
                return bad(format!("public local address {} differs from the GRA", self.local));
            }
            let &[k] = translators.as_slice() else {
                return bad(format!("expected exactly one GRA translator, found {}", translators.len()));
            };
            match self.node(k).nat_role {
                NatRole::GraNat if k >= a => return bad(format!("home GRA-NAT at hop {k} is past access link {a}")),
                NatRole::CgnNat if k < a => return bad(format!("CGN at hop {k} is before access link {a}")),
                _ => {}
            }
            if usize::from(k) >= n {
                return bad("the external target must lie beyond the GRA translator".into());
            }
            for h in 1..=n as u8 {
                let role = self.node(h).nat_role;
                if role == NatRole::HomeNat && (h >= a || h > k) {
                    return bad(format!("home NAT at hop {h} is not inside the home ahead of the translator"));
                }
            }
            if k < a { VerdictKind::SimpleHomeNat } else { VerdictKind::CarrierGradeNat }
        };

        for (i, node) in self.nodes.iter().enumerate() {
            if node.reply_behavior == ReplyBehavior::TwoHopReply && node.nat_role != NatRole::GraNat {
                return bad(format!("two-hop replies need the home GRA-NAT, node {} is not", i + 1));
            }
        }
        if let Some(w) = self.upnp {
            match self.nodes[0].nat_role {
                NatRole::GraNat if w != self.gra => {
                    return bad(format!("hop-1 GRA-NAT would report the GRA over UPnP, not {w}"))
                }
                NatRole::HomeNat if w == self.gra => {
                    return bad("a home NAT behind another translator cannot own the GRA".into())
                }
                NatRole::None | NatRole::CgnNat => return bad("UPnP needs a home NAT at hop 1".into()),
                _ => {}
            }
        }
        Ok(truth)
    }

    /// Text form: header lines, then alternating `link` and `node` lines.
    pub fn to_spec(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "name {}", self.name);
        let _ = writeln!(s, "technology {}", self.technology);
        let _ = writeln!(s, "access_link {}", self.access_link);
        let _ = writeln!(s, "gra {}", self.gra);
        let _ = writeln!(s, "local {}", self.local);
        match self.upnp {
            Some(a) => writeln!(s, "upnp {a}"),
            None => writeln!(s, "upnp none"),
        }
        .ok();
        let mut faults = Vec::new();
        if self.faults.icmp_past_cpe {
            faults.push("icmp_past_cpe");
        }
        if self.faults.stun_blocked {
            faults.push("stun_blocked");
        }
        let _ = writeln!(s, "faults {}", if faults.is_empty() { "none".to_owned() } else { faults.join(" ") });
        let _ = writeln!(s, "truth {}", self.truth);
        for (l, n) in self.links.iter().zip(&self.nodes) {
            let _ = writeln!(s, "link {} {} {}", l.delay_us, l.bandwidth_bytes_per_us, l.loss);
            let _ = writeln!(s, "node {} {} {} {}", n.address, n.realm, n.nat_role.as_str(), n.reply_behavior);
        }
        s
    }

    /// Parses one topology. A `truth` line, when present, must agree with
    /// the placement label.
    pub fn parse(text: &str) -> Result<Self, SimError> {
        let mut name = String::from("topology");
        let mut technology = None;
        let mut access_link = None;
        let mut gra = None;
        let mut local = None;
        let mut upnp = None;
        let mut faults = Faults::default();
        let mut stated_truth = None;
        let mut links = Vec::new();
        let mut nodes = Vec::new();

        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let err = |msg: String| SimError::SpecParse { line: line_no, msg };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut words = line.split_whitespace();
            let key = words.next().unwrap_or("");
            let args: Vec<&str> = words.collect();
            let one = || match args.as_slice() {
                [v] => Ok(*v),
                _ => Err(err(format!("{key} takes exactly one value"))),
            };
            let addr = |v: &str| v.parse::<Ipv4Addr>().map_err(|_| err(format!("bad address {v:?}")));
            let num = |v: &str| v.parse::<f64>().map_err(|_| err(format!("bad number {v:?}")));
            match key {
                "name" => name = one()?.to_owned(),
                "technology" => technology = Some(one()?.parse::<AccessTechnology>().map_err(|e| err(e.to_string()))?),
                "access_link" => access_link = Some(one()?.parse::<u8>().map_err(|_| err("bad access link".into()))?),
                "gra" => gra = Some(addr(one()?)?),
                "local" => local = Some(addr(one()?)?),
                "upnp" => {
                    upnp = match one()? {
                        "none" => None,
                        v => Some(addr(v)?),
                    }
                }
                "faults" => {
                    for f in &args {
                        match *f {
                            "none" => {}
                            "icmp_past_cpe" => faults.icmp_past_cpe = true,
                            "stun_blocked" => faults.stun_blocked = true,
                            other => return Err(err(format!("unknown fault {other:?}"))),
                        }
                    }
                }
                "truth" => stated_truth = Some(one()?.parse::<VerdictKind>().map_err(|e| err(e.to_string()))?),
                "link" => {
                    if links.len() != nodes.len() {
                        return Err(err("two link lines without a node between them".into()));
                    }
                    let [d, b, l] = args.as_slice() else {
                        return Err(err("link needs delay_us bandwidth_Bpus loss".into()));
                    };
                    links.push(LinkSpec { delay_us: num(d)?, bandwidth_bytes_per_us: num(b)?, loss: num(l)? });
                }
                "node" => {
                    if links.len() != nodes.len() + 1 {
                        return Err(err("node line must follow its link line".into()));
                    }
                    let [a, realm, role, behavior] = args.as_slice() else {
                        return Err(err("node needs address realm nat_role reply_behavior".into()));
                    };
                    nodes.push(NodeSpec {
                        address: addr(a)?,
                        realm: realm.parse().map_err(|e: crate::types::ParseEnumError| err(e.to_string()))?,
                        nat_role: role.parse().map_err(err)?,
                        reply_behavior: behavior.parse().map_err(err)?,
                    });
                }
                other => return Err(err(format!("unknown key {other:?}"))),
            }
        }
        let missing = |what: &str| SimError::SpecParse { line: 0, msg: format!("missing {what} line") };
        let mut t = SyntheticTopology {
            name,
            technology: technology.ok_or_else(|| missing("technology"))?,
            access_link: access_link.ok_or_else(|| missing("access_link"))?,
            gra: gra.ok_or_else(|| missing("gra"))?,
            local: local.ok_or_else(|| missing("local"))?,
            upnp,
            faults,
            nodes,
            links,
            truth: VerdictKind::Inconclusive,
        };
        t.truth = t.validate()?;
        if let Some(stated) = stated_truth {
            if stated != t.truth {
                return Err(SimError::SpecInconsistent(format!("stated truth {stated} but placement gives {}", t.truth)));
            }
        }
        Ok(t)
    }
}

impl fmt::Display for SyntheticTopology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_spec())
    }
}

impl FromStr for SyntheticTopology {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, SimError> {
        SyntheticTopology::parse(s)
    }
}

/// Parses a file of topologies separated by `---` lines.
pub fn parse_topologies(text: &str) -> Result<Vec<SyntheticTopology>, SimError> {
    let mut out = Vec::new();
    let mut chunk = String::new();
    let mut offset = 0;
    let mut flush = |chunk: &mut String, offset: usize| -> Result<(), SimError> {
        if chunk.lines().any(|l| !l.split('#').next().unwrap_or("").trim().is_empty()) {
            out.push(SyntheticTopology::parse(chunk).map_err(|e| match e {
                SimError::SpecParse { line, msg } if line > 0 => SimError::SpecParse { line: line + offset, msg },
                other => other,
            })?);
        }
        chunk.clear();
        Ok(())
    };
    for (i, line) in text.lines().enumerate() {
        if line.trim() == "---" {
            flush(&mut chunk, offset)?;
            offset = i + 1;
        } else {
            chunk.push_str(line);
            chunk.push('\n');
        }
    }
    flush(&mut chunk, offset)?;
    Ok(out)
}

pub fn write_topologies(topologies: &[SyntheticTopology]) -> String {
    topologies.iter().map(SyntheticTopology::to_spec).collect::<Vec<_>>().join("---\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ip(s: &str) -> Ipv4Addr {
        s.parse().unwrap()
    }

    /// Two 100 µs home links, a 9 ms DSL access link, GRA on the CPE.
    fn fig2_like() -> SyntheticTopology {
        SyntheticTopology::new(
            "fig2",
            AccessTechnology::Dsl,
            3,
            ip("203.0.113.7"),
            ip("192.168.1.20"),
            None,
            Faults::default(),
            vec![
                (LinkSpec::new(100.0, 12.5), NodeSpec::new(ip("192.168.1.1"), NatRole::HomeNat)),
                (LinkSpec::new(100.0, 12.5), NodeSpec::new(ip("192.168.0.1"), NatRole::GraNat)),
                (LinkSpec::new(9000.0, 2.0), NodeSpec::new(ip("81.2.3.1"), NatRole::None)),
                (LinkSpec::new(500.0, 125.0), NodeSpec::new(ip("8.8.8.8"), NatRole::None)),
            ],
        )
        .unwrap()
    }

    #[test]
    fn home_gateway_label() {
        let t = fig2_like();
        assert_eq!(t.truth, VerdictKind::SimpleHomeNat);
        assert_eq!(t.translator_hop(), Some(2));
        assert_eq!(t.cgn_distance(), None);
    }

    #[test]
    fn satellite_cgn_at_first_isp_hop() {
        let t = SyntheticTopology::new(
            "sat",
            AccessTechnology::Satellite,
            2,
            ip("198.51.100.4"),
            ip("192.168.1.20"),
            None,
            Faults::default(),
            vec![
                (LinkSpec::new(80.0, 12.5), NodeSpec::new(ip("192.168.1.1"), NatRole::HomeNat)),
                (LinkSpec::new(300_000.0, 1.0), NodeSpec::new(ip("100.64.0.1"), NatRole::CgnNat)),
                (LinkSpec::new(400.0, 125.0), NodeSpec::new(ip("8.8.8.8"), NatRole::None)),
            ],
        )
        .unwrap();
        assert_eq!(t.truth, VerdictKind::CarrierGradeNat);
        assert_eq!(t.cgn_distance(), Some(1));
    }

    #[test]
    fn probe_holding_the_gra() {
        let gra = ip("203.0.113.50");
        let t = SyntheticTopology::new(
            "public",
            AccessTechnology::Fiber,
            2,
            gra,
            gra,
            None,
            Faults::default(),
            vec![
                (LinkSpec::new(60.0, 12.5), NodeSpec::new(ip("203.0.113.1"), NatRole::None)),
                (LinkSpec::new(2000.0, 50.0), NodeSpec::new(ip("81.2.3.1"), NatRole::None)),
                (LinkSpec::new(400.0, 125.0), NodeSpec::new(ip("8.8.8.8"), NatRole::None)),
            ],
        )
        .unwrap();
        assert_eq!(t.truth, VerdictKind::NoHomeNat);
    }

    #[test]
    fn spec_roundtrip_is_exact() {
        let mut t = fig2_like();
        t.links[0].delay_us = 0.1 + 0.2;
        t.links[2].loss = 1e-3;
        t.nodes[1].reply_behavior = ReplyBehavior::TwoHopReply;
        t.nodes[2].reply_behavior = ReplyBehavior::RateLimited(10.0);
        t.faults.icmp_past_cpe = true;
        let text = t.to_spec();
        let back = SyntheticTopology::parse(&text).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.to_spec(), text);
        assert_eq!(back.links[0].delay_us.to_bits(), (0.1f64 + 0.2).to_bits());
    }

    #[test]
    fn multi_document_files() {
        let a = fig2_like();
        let mut b = fig2_like();
        b.name = "second".into();
        let text = write_topologies(&[a.clone(), b.clone()]);
        assert_eq!(parse_topologies(&text).unwrap(), vec![a, b]);
    }

    #[test]
    fn inconsistent_specs() {
        let base = fig2_like().to_spec();
        let two_translators = base.replace("192.168.1.1 private home_nat", "192.168.1.1 private gra_nat");
        assert!(matches!(SyntheticTopology::parse(&two_translators), Err(SimError::SpecInconsistent(_))));
        let wrong_realm = base.replace("192.168.1.1 private", "192.168.1.1 public");
        assert!(matches!(SyntheticTopology::parse(&wrong_realm), Err(SimError::SpecInconsistent(_))));
        let wrong_truth = base.replace("truth simple_home_nat", "truth carrier_grade_nat");
        assert!(matches!(SyntheticTopology::parse(&wrong_truth), Err(SimError::SpecInconsistent(_))));
        let home_nat_past_access = base.replace("access_link 3", "access_link 2");
        assert!(matches!(SyntheticTopology::parse(&home_nat_past_access), Err(SimError::SpecInconsistent(_))));
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let base = fig2_like().to_spec();
        let broken = base.replacen("link 100 12.5 0", "link 100 twelve 0", 1);
        match SyntheticTopology::parse(&broken) {
            Err(SimError::SpecParse { line, .. }) => assert_eq!(line, 9),
            other => panic!("{other:?}"),
        }
        assert!(matches!(SyntheticTopology::parse("technology dsl\n"), Err(SimError::SpecParse { .. })));
        let doubled = base.replacen("node 192.168.1.1", "link 1 1 0\nnode 192.168.1.1", 1);
        assert!(matches!(SyntheticTopology::parse(&doubled), Err(SimError::SpecParse { .. })));
    }
}
