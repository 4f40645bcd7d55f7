//! Deterministic synthetic network answering TTL-limited probes.
//!
//! A [`TopologySpec`] lists routers, links with one-way delays, per-node routing
//! tables, ECMP groups and host LANs. [`Simnet`] compiles it and answers probes by
//! walking the forward path: ECMP branches are chosen by `flow_id mod branch_count`,
//! and each traversed link adds a seeded uniform jitter draw keyed by the probe.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};

use crate::prefix::IpPrefix;
use crate::record::FlowId;
use crate::tracer::{BackendError, Probe, ProbeReply, ProbingBackend};
use crate::util::mix_all;

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Router {
    pub addr: Ipv4Addr,
    #[serde(default)]
    pub labels: Vec<String>,
    /// Whether the router sends TTL-exceeded replies.
    #[serde(default = "default_true")]
    pub responsive: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Link {
    pub a: Ipv4Addr,
    pub b: Ipv4Addr,
    pub one_way_delay_us: u64,
    #[serde(default)]
    pub jitter_us: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EcmpGroup {
    pub name: String,
    pub next_hops: Vec<Ipv4Addr>,
}

/// A routing entry at `node`: traffic for `prefix` goes to `via`, or to one member of
/// ECMP group `group`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Route {
    pub node: Ipv4Addr,
    pub prefix: IpPrefix,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub via: Option<Ipv4Addr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
}

/// End hosts attached behind `gateway`. Host liveness is a seeded draw per address.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HostLan {
    pub prefix: IpPrefix,
    pub gateway: Ipv4Addr,
    pub one_way_delay_us: u64,
    #[serde(default)]
    pub jitter_us: u64,
    /// Share of hosts that answer, in thousandths.
    #[serde(default = "full_permille")]
    pub response_permille: u16,
    /// Extra delay on the destination's own reply (overloaded NAT at the last mile).
    #[serde(default)]
    pub last_hop_penalty_us: u64,
}

fn full_permille() -> u16 {
    1000
}

/// A measurement vantage point; `addr` must be a node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeSite {
    pub id: String,
    pub addr: Ipv4Addr,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopologySpec {
    pub nodes: Vec<Router>,
    pub links: Vec<Link>,
    #[serde(default)]
    pub ecmp_groups: Vec<EcmpGroup>,
    #[serde(default)]
    pub ixp_node: Option<Ipv4Addr>,
    #[serde(default)]
    pub foreign_segment: Option<Vec<Ipv4Addr>>,
    pub routes: Vec<Route>,
    #[serde(default)]
    pub lans: Vec<HostLan>,
    #[serde(default)]
    pub probes: Vec<ProbeSite>,
    /// The address scope the topology was laid out for.
    #[serde(default)]
    pub country_prefixes: Vec<IpPrefix>,
    #[serde(default)]
    pub ixp_prefixes: Vec<IpPrefix>,
    pub seed: u64,
}

impl TopologySpec {
    /// Sets the same last-hop penalty on every LAN.
    pub fn with_last_hop_penalty(mut self, penalty_us: u64) -> Self {
        for lan in &mut self.lans {
            lan.last_hop_penalty_us = penalty_us;
        }
        self
    }

    pub fn probe_site(&self, id: &str) -> Option<&ProbeSite> {
        self.probes.iter().find(|p| p.id == id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SimError {
    #[error("unknown node {0}")]
    UnknownNode(Ipv4Addr),
    #[error("duplicate node {0}")]
    DuplicateNode(Ipv4Addr),
    #[error("route at {node} uses {next} without a link between them")]
    MissingLink { node: Ipv4Addr, next: Ipv4Addr },
    #[error("route at {0} for {1} needs exactly one of `via` or `group`")]
    BadRoute(Ipv4Addr, IpPrefix),
    #[error("unknown or empty ECMP group `{0}`")]
    BadGroup(String),
    #[error("no route from {from} to {dst}")]
    Unroutable { from: Ipv4Addr, dst: Ipv4Addr },
    #[error("forwarding loop towards {0}")]
    Loop(Ipv4Addr),
    #[error("unknown scenario `{0}` (expected one of linear, ecmp, bolivia-like, misbehavior)")]
    UnknownScenario(String),
}

#[derive(Debug, Clone, Copy)]
struct Edge {
    delay_us: u64,
    jitter_us: u64,
}

#[derive(Debug, Clone)]
enum NextHop {
    Via(Ipv4Addr),
    Group(usize),
}

/// One step of a forward path: the node reached and the link used to get there.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PathStep {
    pub addr: Ipv4Addr,
    pub delay_us: u64,
    pub jitter_us: u64,
}

#[derive(Debug, Clone)]
pub struct ForwardPath {
    pub steps: Vec<PathStep>,
    /// Set when the destination is an end host behind a LAN.
    lan: Option<usize>,
}

/// A compiled, immutable topology.
#[derive(Debug, Clone)]
pub struct Simnet {
    spec: TopologySpec,
    responsive: HashMap<Ipv4Addr, bool>,
    edges: HashMap<(Ipv4Addr, Ipv4Addr), Edge>,
    tables: HashMap<Ipv4Addr, Vec<(IpPrefix, NextHop)>>,
    groups: Vec<Vec<Ipv4Addr>>,
}

const MAX_PATH: usize = 64;

impl Simnet {
    pub fn new(spec: TopologySpec) -> Result<Self, SimError> {
        let mut responsive = HashMap::new();
        for n in &spec.nodes {
            if responsive.insert(n.addr, n.responsive).is_some() {
                return Err(SimError::DuplicateNode(n.addr));
            }
        }
        let known = |a: Ipv4Addr| {
            if responsive.contains_key(&a) {
                Ok(())
            } else {
                Err(SimError::UnknownNode(a))
            }
        };
        let mut edges = HashMap::new();
        for l in &spec.links {
            known(l.a)?;
            known(l.b)?;
            let e = Edge {
                delay_us: l.one_way_delay_us,
                jitter_us: l.jitter_us,
            };
            edges.insert((l.a, l.b), e);
            edges.insert((l.b, l.a), e);
        }
        let group_index: HashMap<&str, usize> = spec
            .ecmp_groups
            .iter()
            .enumerate()
            .map(|(i, g)| (g.name.as_str(), i))
            .collect();
        let groups: Vec<Vec<Ipv4Addr>> = spec.ecmp_groups.iter().map(|g| g.next_hops.clone()).collect();
        for (g, hops) in spec.ecmp_groups.iter().zip(&groups) {
            if hops.is_empty() {
                return Err(SimError::BadGroup(g.name.clone()));
            }
        }

        let mut tables: HashMap<Ipv4Addr, Vec<(IpPrefix, NextHop)>> = HashMap::new();
        for r in &spec.routes {
            known(r.node)?;
            let next = match (&r.via, &r.group) {
                (Some(v), None) => {
                    if !edges.contains_key(&(r.node, *v)) {
                        return Err(SimError::MissingLink { node: r.node, next: *v });
                    }
                    NextHop::Via(*v)
                }
                (None, Some(g)) => {
                    let idx = *group_index
                        .get(g.as_str())
                        .ok_or_else(|| SimError::BadGroup(g.clone()))?;
                    for v in &groups[idx] {
                        if !edges.contains_key(&(r.node, *v)) {
                            return Err(SimError::MissingLink { node: r.node, next: *v });
                        }
                    }
                    NextHop::Group(idx)
                }
                _ => return Err(SimError::BadRoute(r.node, r.prefix)),
            };
            tables.entry(r.node).or_default().push((r.prefix, next));
        }
        // longest prefix first; ties keep declaration order
        for t in tables.values_mut() {
            t.sort_by_key(|e| std::cmp::Reverse(e.0.len()));
        }
        for lan in &spec.lans {
            known(lan.gateway)?;
        }
        for p in &spec.probes {
            known(p.addr)?;
        }

        let net = Self {
            spec,
            responsive,
            edges,
            tables,
            groups,
        };
        net.check_loop_free()?;
        Ok(net)
    }

    pub fn spec(&self) -> &TopologySpec {
        &self.spec
    }

    fn lan_for(&self, dst: Ipv4Addr) -> Option<usize> {
        self.spec
            .lans
            .iter()
            .enumerate()
            .filter(|(_, l)| l.prefix.contains(dst))
            .max_by_key(|(i, l)| (l.prefix.len(), std::cmp::Reverse(*i)))
            .map(|(i, _)| i)
    }

    fn lookup(&self, node: Ipv4Addr, dst: Ipv4Addr) -> Option<&NextHop> {
        self.tables
            .get(&node)?
            .iter()
            .find(|(p, _)| p.contains(dst))
            .map(|(_, n)| n)
    }

    /// Routers (and finally the destination) a packet from `src` visits, in order.
    pub fn forward_path(&self, src: Ipv4Addr, dst: Ipv4Addr, flow_id: FlowId) -> Result<ForwardPath, SimError> {
        if !self.responsive.contains_key(&src) {
            return Err(SimError::UnknownNode(src));
        }
        let lan = if self.responsive.contains_key(&dst) {
            None
        } else {
            self.lan_for(dst)
        };
        let mut steps = Vec::new();
        let mut cur = src;
        loop {
            if cur == dst {
                return Ok(ForwardPath { steps, lan: None });
            }
            if let Some(li) = lan {
                let l = &self.spec.lans[li];
                if l.gateway == cur {
                    steps.push(PathStep {
                        addr: dst,
                        delay_us: l.one_way_delay_us,
                        jitter_us: l.jitter_us,
                    });
                    return Ok(ForwardPath { steps, lan: Some(li) });
                }
            }
            let next = match self.lookup(cur, dst) {
                Some(NextHop::Via(v)) => *v,
                Some(NextHop::Group(g)) => {
                    let members = &self.groups[*g];
                    members[flow_id as usize % members.len()]
                }
                None => return Err(SimError::Unroutable { from: cur, dst }),
            };
            let e = self.edges[&(cur, next)];
            steps.push(PathStep {
                addr: next,
                delay_us: e.delay_us,
                jitter_us: e.jitter_us,
            });
            if steps.len() > MAX_PATH {
                return Err(SimError::Loop(dst));
            }
            cur = next;
        }
    }

    fn host_alive(&self, dst: Ipv4Addr, lan: usize) -> bool {
        let permille = self.spec.lans[lan].response_permille as u64;
        mix_all(&[self.spec.seed, 0x686f_7374, u32::from(dst) as u64]) % 1000 < permille
    }

    /// Answers one TTL-limited probe from `src`. Pure in all arguments.
    pub fn answer_probe(&self, src: Ipv4Addr, dst: Ipv4Addr, ttl: u8, flow_id: FlowId) -> Result<ProbeReply, SimError> {
        assert!(ttl >= 1, "ttl starts at 1");
        let path = self.forward_path(src, dst, flow_id)?;
        let k = (ttl as usize).min(path.steps.len());
        if k == 0 {
            return Ok(ProbeReply::Timeout);
        }
        let mut rtt = 0u64;
        for (i, step) in path.steps[..k].iter().enumerate() {
            rtt += 2 * step.delay_us;
            if step.jitter_us > 0 {
                let draw = mix_all(&[
                    self.spec.seed,
                    i as u64,
                    u32::from(step.addr) as u64,
                    u32::from(src) as u64,
                    u32::from(dst) as u64,
                    ttl as u64,
                    flow_id as u64,
                ]);
                rtt += draw % (step.jitter_us + 1);
            }
        }
        let hop = path.steps[k - 1].addr;
        let at_destination = k == path.steps.len();
        if at_destination {
            if let Some(li) = path.lan {
                if !self.host_alive(dst, li) {
                    return Ok(ProbeReply::Timeout);
                }
                rtt += self.spec.lans[li].last_hop_penalty_us;
            } else if !self.responsive[&hop] {
                return Ok(ProbeReply::Timeout);
            }
            Ok(ProbeReply::EchoReply {
                responder: dst,
                rtt_us: rtt,
            })
        } else if self.responsive[&hop] {
            Ok(ProbeReply::TtlExceeded {
                responder: hop,
                rtt_us: rtt,
            })
        } else {
            Ok(ProbeReply::Timeout)
        }
    }

    /// Every probe site must reach every LAN on every ECMP branch without loops.
    /// Router addresses need not be reachable, but must not loop either.
    fn check_loop_free(&self) -> Result<(), SimError> {
        for site in &self.spec.probes {
            for lan in &self.spec.lans {
                let dst = lan.prefix.nth(lan.prefix.size() / 2).expect("prefix has addresses");
                let mut on_stack = BTreeSet::new();
                self.explore(site.addr, dst, &mut on_stack)?;
            }
            for node in &self.spec.nodes {
                let mut on_stack = BTreeSet::new();
                match self.explore(site.addr, node.addr, &mut on_stack) {
                    Ok(()) | Err(SimError::Unroutable { .. }) => {}
                    Err(e) => return Err(e),
                }
            }
        }
        Ok(())
    }

    fn explore(&self, cur: Ipv4Addr, dst: Ipv4Addr, on_stack: &mut BTreeSet<Ipv4Addr>) -> Result<(), SimError> {
        if cur == dst {
            return Ok(());
        }
        let lan = if self.responsive.contains_key(&dst) {
            None
        } else {
            self.lan_for(dst)
        };
        if let Some(li) = lan {
            if self.spec.lans[li].gateway == cur {
                return Ok(());
            }
        }
        if !on_stack.insert(cur) {
            return Err(SimError::Loop(dst));
        }
        let nexts: Vec<Ipv4Addr> = match self.lookup(cur, dst) {
            Some(NextHop::Via(v)) => vec![*v],
            Some(NextHop::Group(g)) => self.groups[*g].clone(),
            None => return Err(SimError::Unroutable { from: cur, dst }),
        };
        for n in nexts {
            self.explore(n, dst, on_stack)?;
        }
        on_stack.remove(&cur);
        Ok(())
    }
}

/// Probing backend bound to one vantage point of a simulated network.
#[derive(Debug, Clone)]
pub struct SimnetBackend {
    net: std::sync::Arc<Simnet>,
    src: Ipv4Addr,
}

impl SimnetBackend {
    pub fn new(net: std::sync::Arc<Simnet>, src: Ipv4Addr) -> Self {
        Self { net, src }
    }

    pub fn for_site(net: std::sync::Arc<Simnet>, probe_id: &str) -> Option<Self> {
        let src = net.spec().probe_site(probe_id)?.addr;
        Some(Self { net, src })
    }

    pub fn src(&self) -> Ipv4Addr {
        self.src
    }
}

impl ProbingBackend for SimnetBackend {
    fn send(&self, probe: &Probe) -> Result<ProbeReply, BackendError> {
        self.net
            .answer_probe(self.src, probe.dst, probe.ttl, probe.flow_id)
            .map_err(|e| match e {
                SimError::Unroutable { .. } | SimError::Loop(_) => BackendError::Unroutable(e.to_string()),
                other => BackendError::Unavailable(other.to_string()),
            })
    }

    fn local_addr(&self) -> Ipv4Addr {
        self.src
    }
}

pub const SCENARIOS: [&str; 4] = ["linear", "ecmp", "bolivia-like", "misbehavior"];

/// Canned topologies.
pub fn scenario(name: &str) -> Result<TopologySpec, SimError> {
    match name {
        "linear" => Ok(scenarios::linear()),
        "ecmp" => Ok(scenarios::ecmp()),
        "bolivia-like" => Ok(scenarios::bolivia_like()),
        "misbehavior" => Ok(scenarios::misbehavior()),
        other => Err(SimError::UnknownScenario(other.to_string())),
    }
}

mod scenarios {
    use super::*;
    use crate::prefix::parse_prefix;

    fn ip(s: &str) -> Ipv4Addr {
        s.parse().expect("static address")
    }

    fn pfx(s: &str) -> IpPrefix {
        parse_prefix(s).expect("static prefix")
    }

    /// Incremental topology construction.
    #[derive(Default)]
    pub(super) struct Builder {
        spec: Option<TopologySpec>,
    }

    impl Builder {
        fn new(seed: u64) -> Self {
            Self {
                spec: Some(TopologySpec {
                    nodes: vec![],
                    links: vec![],
                    ecmp_groups: vec![],
                    ixp_node: None,
                    foreign_segment: None,
                    routes: vec![],
                    lans: vec![],
                    probes: vec![],
                    country_prefixes: vec![],
                    ixp_prefixes: vec![],
                    seed,
                }),
            }
        }

        fn s(&mut self) -> &mut TopologySpec {
            self.spec.as_mut().expect("builder not finished")
        }

        fn node(&mut self, addr: Ipv4Addr, label: &str) -> Ipv4Addr {
            self.s().nodes.push(Router {
                addr,
                labels: vec![label.to_string()],
                responsive: true,
            });
            addr
        }

        fn link(&mut self, a: Ipv4Addr, b: Ipv4Addr, delay_us: u64, jitter_us: u64) {
            self.s().links.push(Link {
                a,
                b,
                one_way_delay_us: delay_us,
                jitter_us,
            });
        }

        fn route(&mut self, node: Ipv4Addr, prefix: IpPrefix, via: Ipv4Addr) {
            self.s().routes.push(Route {
                node,
                prefix,
                via: Some(via),
                group: None,
            });
        }

        fn route_group(&mut self, node: Ipv4Addr, prefix: IpPrefix, group: &str) {
            self.s().routes.push(Route {
                node,
                prefix,
                via: None,
                group: Some(group.to_string()),
            });
        }

        fn group(&mut self, name: &str, next_hops: Vec<Ipv4Addr>) {
            self.s().ecmp_groups.push(EcmpGroup {
                name: name.to_string(),
                next_hops,
            });
        }

        fn lan(&mut self, prefix: IpPrefix, gateway: Ipv4Addr, delay_us: u64, jitter_us: u64, permille: u16) {
            self.s().lans.push(HostLan {
                prefix,
                gateway,
                one_way_delay_us: delay_us,
                jitter_us,
                response_permille: permille,
                last_hop_penalty_us: 0,
            });
        }

        fn probe(&mut self, id: &str, addr: Ipv4Addr) {
            self.s().probes.push(ProbeSite {
                id: id.to_string(),
                addr,
            });
        }

        fn finish(&mut self) -> TopologySpec {
            self.spec.take().expect("finish called once")
        }
    }

    fn default_route() -> IpPrefix {
        pfx("0.0.0.0/0")
    }

    /// probe -> r1 -> r2 -> r3, hosts of 200.87.3.0/24 behind r3. 1 ms per link, no jitter.
    pub(super) fn linear() -> TopologySpec {
        let mut b = Builder::new(1);
        let probe = b.node(ip("200.87.0.2"), "probe");
        let r1 = b.node(ip("200.87.0.1"), "router");
        let r2 = b.node(ip("200.87.1.1"), "router");
        let r3 = b.node(ip("200.87.2.1"), "router");
        b.link(probe, r1, 1000, 0);
        b.link(r1, r2, 1000, 0);
        b.link(r2, r3, 1000, 0);
        b.route(probe, default_route(), r1);
        b.route(r1, default_route(), r2);
        b.route(r2, default_route(), r3);
        b.lan(pfx("200.87.3.0/24"), r3, 1000, 0, 1000);
        b.probe("linear", probe);
        let s = b.s();
        s.country_prefixes = vec![pfx("200.87.0.0/16")];
        s.ixp_prefixes = vec![pfx("190.94.0.0/24")];
        b.finish()
    }

    /// Two ECMP stages (3 and 2 branches) between the probe and the destination LAN.
    pub(super) fn ecmp() -> TopologySpec {
        let mut b = Builder::new(2);
        let probe = b.node(ip("200.87.0.2"), "probe");
        let r1 = b.node(ip("200.87.0.1"), "router");
        let mids: Vec<Ipv4Addr> = (1..=3)
            .map(|i| b.node(Ipv4Addr::new(200, 87, 1, i), "ecmp-a"))
            .collect();
        let joins: Vec<Ipv4Addr> = (1..=2)
            .map(|i| b.node(Ipv4Addr::new(200, 87, 2, i), "ecmp-b"))
            .collect();
        let gw = b.node(ip("200.87.3.1"), "router");
        b.link(probe, r1, 800, 100);
        b.route(probe, default_route(), r1);
        for &m in &mids {
            b.link(r1, m, 1000, 200);
            for &j in &joins {
                b.link(m, j, 1500, 200);
            }
        }
        b.group("stage-a", mids.clone());
        b.group("stage-b", joins.clone());
        b.route_group(r1, default_route(), "stage-a");
        for &m in &mids {
            b.route_group(m, default_route(), "stage-b");
        }
        for &j in &joins {
            b.link(j, gw, 700, 100);
            b.route(j, default_route(), gw);
        }
        b.lan(pfx("200.87.4.0/22"), gw, 500, 100, 1000);
        b.probe("ecmp", probe);
        let s = b.s();
        s.country_prefixes = vec![pfx("200.87.0.0/16")];
        s.ixp_prefixes = vec![pfx("190.94.0.0/24")];
        b.finish()
    }

    /// Two domestic ASes at an IXP; AS B hands part of its space to foreign transit
    /// after the IXP, which yields Misbehavior routes.
    pub(super) fn misbehavior() -> TopologySpec {
        let mut b = Builder::new(3);
        let probe = b.node(ip("200.87.0.10"), "probe");
        let a_border = b.node(ip("200.87.0.1"), "border");
        let ixp = b.node(ip("190.94.0.1"), "ixp");
        let b_border = b.node(ip("181.114.0.1"), "border");
        let b_edge = b.node(ip("181.114.0.4"), "edge");
        let f1 = b.node(ip("4.68.110.1"), "foreign");
        let f2 = b.node(ip("4.69.140.1"), "foreign");
        let b_edge2 = b.node(ip("181.114.0.5"), "edge");
        b.link(probe, a_border, 2000, 300);
        b.link(a_border, ixp, 300, 50);
        b.link(ixp, b_border, 300, 50);
        b.link(b_border, b_edge, 1000, 200);
        b.link(b_border, f1, 25_000, 2000);
        b.link(f1, f2, 20_000, 2000);
        b.link(f2, b_edge2, 5_000, 1000);
        b.route(probe, default_route(), a_border);
        b.route(a_border, default_route(), ixp);
        b.route(ixp, pfx("181.114.0.0/16"), b_border);
        b.route(b_border, pfx("181.114.0.0/17"), b_edge);
        b.route(b_border, pfx("181.114.128.0/17"), f1);
        b.route(f1, default_route(), f2);
        b.route(f2, default_route(), b_edge2);
        b.lan(pfx("181.114.0.0/17"), b_edge, 1000, 200, 1000);
        b.lan(pfx("181.114.128.0/17"), b_edge2, 1000, 200, 1000);
        b.probe("site-a", probe);
        let s = b.s();
        s.ixp_node = Some(ixp);
        s.foreign_segment = Some(vec![f1, f2]);
        s.country_prefixes = vec![pfx("200.87.0.0/16"), pfx("181.114.0.0/16")];
        s.ixp_prefixes = vec![pfx("190.94.0.0/24")];
        b.finish()
    }

    /// Per-AS layout inside `bolivia_like`.
    struct As {
        block: IpPrefix,
        border: Ipv4Addr,
        core: Ipv4Addr,
        /// (aggregation router, edge router, lan prefix)
        edges: Vec<(Option<Ipv4Addr>, Ipv4Addr, IpPrefix)>,
    }

    /// Six domestic ASes meshed through one IXP switch, a few private peering links, a
    /// roughly 100 ms foreign transit segment and two probe sites; the second site sits
    /// behind a high-jitter mobile access leg.
    pub(super) fn bolivia_like() -> TopologySpec {
        let mut b = Builder::new(2014);
        let blocks = [
            "200.87.0.0/18",
            "200.87.64.0/18",
            "200.87.128.0/18",
            "200.87.192.0/18",
            "181.114.0.0/18",
            "181.114.64.0/18",
        ];
        let ixp = b.node(ip("190.94.0.1"), "ixp");
        let foreign: Vec<Ipv4Addr> = ["4.68.110.1", "4.69.140.1", "63.245.1.1", "4.68.111.9"]
            .iter()
            .map(|a| b.node(ip(a), "foreign"))
            .collect();
        // foreign chain: about 45 ms one way including the border uplinks
        let fdelays = [13_000u64, 15_000, 10_000];
        for (i, w) in foreign.windows(2).enumerate() {
            b.link(w[0], w[1], fdelays[i], 3_000);
        }
        for w in foreign.windows(2) {
            b.route(w[0], default_route(), w[1]);
        }

        let mut ases = Vec::new();
        for (k, blk) in blocks.iter().enumerate() {
            let block = pfx(blk);
            let base = block.first();
            let at = |host: u32| Ipv4Addr::from(base + host);
            let border = b.node(at(1), "border");
            let core = b.node(at(2), "core");
            // intra-AS backbone is long: routers are spread across the altiplano and lowlands
            b.link(border, core, 1_500 + 300 * k as u64, 300);
            b.link(border, ixp, 300, 100);
            b.link(foreign[3], border, 4_000, 1_000);

            // four edge LANs per AS, /20 each; odd ones sit behind an aggregation router.
            // Edge 0 shares a metro site with the border, the others are a long haul away
            // over the national backbone.
            let mut edges = Vec::new();
            for e in 0..4u32 {
                let lan = IpPrefix::containing(Ipv4Addr::from(base + (e << 12)), 20);
                let edge = b.node(at(10 + e), "edge");
                let agg = if e % 2 == 1 {
                    let agg = b.node(at(20 + e), "aggregation");
                    b.link(core, agg, 2_500, 400);
                    b.link(agg, edge, 1_500, 300);
                    b.route(agg, default_route(), core);
                    b.route(agg, lan, edge);
                    Some(agg)
                } else {
                    b.link(core, edge, 4_000, 500);
                    None
                };
                if e == 0 {
                    b.link(edge, border, 500, 100);
                    b.route(edge, block, core);
                    b.route(edge, default_route(), border);
                } else {
                    b.route(edge, default_route(), agg.unwrap_or(core));
                }
                b.lan(lan, edge, 1_200, 1_500, 520);
                edges.push((agg, edge, lan));
            }
            ases.push(As {
                block,
                border,
                core,
                edges,
            });
        }

        // inside each AS: core fans out to edges, everything else goes to the border.
        // Router loopbacks sit inside the first /20, so they get host routes.
        for a in &ases {
            b.route(a.core, IpPrefix::containing(a.border, 32), a.border);
            for (agg, edge, lan) in &a.edges {
                b.route(a.core, *lan, agg.unwrap_or(*edge));
                b.route(a.core, IpPrefix::containing(*edge, 32), agg.unwrap_or(*edge));
                if let Some(agg) = agg {
                    b.route(a.core, IpPrefix::containing(*agg, 32), *agg);
                    b.route(*agg, IpPrefix::containing(*edge, 32), *edge);
                }
            }
            b.route(a.core, default_route(), a.border);
            b.route(a.border, a.block, a.core);
            b.route(ixp, a.block, a.border);
            b.route(foreign[3], a.block, a.border);
        }

        // private peering: AS0-AS2 and AS1-AS3, older and slower than the IXP ports
        b.link(ases[0].border, ases[2].border, 15_000, 1_500);
        b.link(ases[1].border, ases[3].border, 15_000, 1_500);

        let blk = |i: usize| ases[i].block;
        let (b0, b1) = (ases[0].border, ases[1].border);
        // AS0 (La Paz probe)
        b.route(b0, blk(1), ixp);
        b.route(b0, blk(2), ases[2].border);
        b.route(b0, blk(3), ixp);
        b.group("as0-to-as4", vec![ixp, foreign[0]]);
        b.link(b0, foreign[0], 3_000, 800);
        b.link(b1, foreign[0], 3_500, 800);
        b.route_group(b0, blk(4), "as0-to-as4");
        b.route(b0, blk(5), foreign[0]);
        // AS1 (Santa Cruz probe)
        b.route(b1, blk(0), ixp);
        b.route(b1, blk(2), ixp);
        b.route(b1, blk(3), ases[3].border);
        b.route(b1, blk(4), ixp);
        b.route(b1, blk(5), foreign[0]);
        // return/transit defaults for the remaining borders
        for (i, a) in ases.iter().enumerate().skip(2) {
            let _ = i;
            b.route(a.border, default_route(), ixp);
        }
        // AS3 leaks one /20 to foreign transit after the IXP
        let leaked = ases[3].edges[3].2;
        let leak_edge = ases[3].edges[3].1;
        b.link(ases[3].border, foreign[1], 9_000, 1_000);
        b.link(foreign[2], leak_edge, 3_000, 800);
        b.route(ases[3].border, leaked, foreign[1]);
        b.route(foreign[2], leaked, leak_edge);

        // probes: La Paz on DSL, Santa Cruz on a mobile leg
        let lapaz = b.node(Ipv4Addr::from(ases[0].block.first() + 100), "probe");
        let scz = b.node(Ipv4Addr::from(ases[1].block.first() + 100), "probe");
        let lapaz_gw = ases[0].edges[0].1;
        let scz_gw = ases[1].edges[0].1;
        b.link(lapaz, lapaz_gw, 3_000, 1_500);
        b.link(scz, scz_gw, 6_000, 10_000);
        b.route(lapaz, default_route(), lapaz_gw);
        b.route(scz, default_route(), scz_gw);
        b.route(lapaz_gw, IpPrefix::containing(lapaz, 32), lapaz);
        b.route(scz_gw, IpPrefix::containing(scz, 32), scz);
        b.probe("lapaz", lapaz);
        b.probe("santacruz", scz);

        let s = b.s();
        s.ixp_node = Some(ixp);
        s.foreign_segment = Some(foreign.clone());
        s.country_prefixes = vec![pfx("200.87.0.0/16"), pfx("181.114.0.0/17")];
        s.ixp_prefixes = vec![pfx("190.94.0.0/24")];
        b.finish()
    }
}

/// Distinct forward paths (as router address sequences) over a set of flow ids.
pub fn distinct_paths(
    net: &Simnet,
    src: Ipv4Addr,
    dst: Ipv4Addr,
    flows: impl IntoIterator<Item = FlowId>,
) -> Result<usize, SimError> {
    let mut seen: BTreeMap<Vec<Ipv4Addr>, ()> = BTreeMap::new();
    for f in flows {
        let path = net.forward_path(src, dst, f)?;
        seen.insert(path.steps.iter().map(|s| s.addr).collect(), ());
    }
    Ok(seen.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ip(s: &str) -> Ipv4Addr {
        s.parse().unwrap()
    }

    #[test]
    fn linear_ttl_expiry() {
        let net = Simnet::new(scenario("linear").unwrap()).unwrap();
        let src = ip("200.87.0.2");
        let dst = ip("200.87.3.7");
        assert_eq!(
            net.answer_probe(src, dst, 2, 0).unwrap(),
            ProbeReply::TtlExceeded {
                responder: ip("200.87.1.1"),
                rtt_us: 4000
            }
        );
        assert_eq!(
            net.answer_probe(src, dst, 4, 0).unwrap(),
            ProbeReply::EchoReply {
                responder: dst,
                rtt_us: 8000
            }
        );
        assert_eq!(
            net.answer_probe(src, dst, 30, 0).unwrap(),
            net.answer_probe(src, dst, 4, 0).unwrap()
        );
        // a router address as destination
        assert_eq!(
            net.answer_probe(src, ip("200.87.2.1"), 3, 0).unwrap(),
            ProbeReply::EchoReply {
                responder: ip("200.87.2.1"),
                rtt_us: 6000
            }
        );
    }

    #[test]
    fn unroutable_and_unknown() {
        let net = Simnet::new(scenario("linear").unwrap()).unwrap();
        assert!(matches!(
            net.answer_probe(ip("200.87.0.2"), ip("8.8.8.8"), 5, 0),
            Err(SimError::Unroutable { .. })
        ));
        assert!(matches!(scenario("nope"), Err(SimError::UnknownScenario(_))));
    }

    #[test]
    fn loops_are_rejected() {
        // move the LAN behind an unconnected gateway and bounce r3 back to r2
        let mut spec = scenario("linear").unwrap();
        spec.nodes.push(Router {
            addr: ip("200.87.9.1"),
            labels: vec![],
            responsive: true,
        });
        spec.lans[0].gateway = ip("200.87.9.1");
        spec.routes.push(Route {
            node: ip("200.87.2.1"),
            prefix: "200.87.3.0/24".parse().unwrap(),
            via: Some(ip("200.87.1.1")),
            group: None,
        });
        assert!(matches!(Simnet::new(spec), Err(SimError::Loop(_))));
    }

    #[test]
    fn route_without_link_rejected() {
        let mut spec = scenario("linear").unwrap();
        spec.routes.push(Route {
            node: ip("200.87.0.2"),
            prefix: "200.87.9.0/24".parse().unwrap(),
            via: Some(ip("200.87.2.1")),
            group: None,
        });
        assert!(matches!(Simnet::new(spec), Err(SimError::MissingLink { .. })));
    }

    #[test]
    fn deterministic_and_monotone_without_jitter() {
        let net = Simnet::new(scenario("linear").unwrap()).unwrap();
        let mut prev = 0;
        for ttl in 1..=4 {
            let r = net.answer_probe(ip("200.87.0.2"), ip("200.87.3.9"), ttl, 5).unwrap();
            let rtt = r.rtt_us().unwrap();
            assert!(rtt >= prev);
            prev = rtt;
        }
        let net2 = Simnet::new(scenario("bolivia-like").unwrap()).unwrap();
        let src = net2.spec().probes[1].addr;
        for ttl in 1..15 {
            let a = net2.answer_probe(src, ip("200.87.200.77"), ttl, 9).unwrap();
            let b = net2.answer_probe(src, ip("200.87.200.77"), ttl, 9).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn ecmp_has_branches() {
        let net = Simnet::new(scenario("ecmp").unwrap()).unwrap();
        let n = distinct_paths(&net, ip("200.87.0.2"), ip("200.87.5.5"), 0..64).unwrap();
        assert_eq!(n, 6);
        assert_eq!(
            distinct_paths(&net, ip("200.87.0.2"), ip("200.87.5.5"), [7; 100]).unwrap(),
            1
        );
    }

    #[test]
    fn scenarios_compile_and_roundtrip_json() {
        for name in SCENARIOS {
            let spec = scenario(name).unwrap();
            Simnet::new(spec.clone()).unwrap_or_else(|e| panic!("{name}: {e}"));
            let text = serde_json::to_string_pretty(&spec).unwrap();
            let back: TopologySpec = serde_json::from_str(&text).unwrap();
            assert_eq!(back, spec);
        }
    }

    #[test]
    fn bolivia_like_every_country_address_routable() {
        let spec = scenario("bolivia-like").unwrap();
        let net = Simnet::new(spec.clone()).unwrap();
        for site in &spec.probes {
            for p in &spec.country_prefixes {
                for i in (0..p.size()).step_by(97) {
                    let dst = p.nth(i).unwrap();
                    for flow in 0..4 {
                        net.forward_path(site.addr, dst, flow).unwrap();
                    }
                }
            }
        }
    }

    #[test]
    fn silent_host_and_router() {
        let mut spec = scenario("linear").unwrap();
        spec.nodes[2].responsive = false; // r2
        spec.lans[0].response_permille = 0;
        let net = Simnet::new(spec).unwrap();
        assert_eq!(
            net.answer_probe(ip("200.87.0.2"), ip("200.87.3.3"), 2, 0).unwrap(),
            ProbeReply::Timeout
        );
        assert_eq!(
            net.answer_probe(ip("200.87.0.2"), ip("200.87.3.3"), 4, 0).unwrap(),
            ProbeReply::Timeout
        );
        assert!(matches!(
            net.answer_probe(ip("200.87.0.2"), ip("200.87.3.3"), 3, 0).unwrap(),
            ProbeReply::TtlExceeded { .. }
        ));
    }

    #[test]
    fn penalty_only_on_destination_reply() {
        let spec = scenario("linear").unwrap().with_last_hop_penalty(40_000);
        let net = Simnet::new(spec).unwrap();
        let src = ip("200.87.0.2");
        let dst = ip("200.87.3.3");
        assert_eq!(net.answer_probe(src, dst, 3, 0).unwrap().rtt_us(), Some(6000));
        assert_eq!(net.answer_probe(src, dst, 4, 0).unwrap().rtt_us(), Some(48_000));
    }
}
