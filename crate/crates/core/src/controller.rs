//! Controller application: accepts switch connections, answers probes and
//! keepalives, and turns packet-ins into per-hop forwarding rules along the
//! shortest path in its topology view.
//!
//! The view is pulled from the WMR the controller is attached to. Paths are
//! built one hop at a time with the same tie-break OLSR uses, so controller
//! paths coincide with the mesh routes whenever the view is current.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::addr::{Address, Prefix};
use crate::flow::{FlowAction, FlowMatch, FlowRule, OriginFilter, Packet, RuleOrigin};
use crate::olsr::{shortest_next_hops, HnaDb, HnaEntry, OlsrNode};
use crate::time::SimTime;
use crate::topology::NodeId;

pub const CONTROLLER_RULE_PRIORITY: u16 = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    /// Send a flush of all controller rules right after accepting a switch.
    pub flush_on_connect: bool,
    /// Idle timeout (s) of installed forwarding rules.
    pub rule_idle_timeout: f64,
    /// Hard timeout (s) of drop rules for unknown or unreachable destinations.
    pub drop_hard_timeout: f64,
    /// Seconds between periodic topology refreshes.
    pub refresh_interval: f64,
    /// A controller that refuses probes and connections.
    pub accepting: bool,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            flush_on_connect: true,
            rule_idle_timeout: 30.0,
            drop_hard_timeout: 5.0,
            refresh_interval: 5.0,
            accepting: true,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("rule_idle_timeout", self.rule_idle_timeout),
            ("drop_hard_timeout", self.drop_hard_timeout),
            ("refresh_interval", self.refresh_interval),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("{name} must be positive, got {v}"));
            }
        }
        Ok(())
    }
}

/// Forces the path for one destination prefix. The path lists WMRs from
/// the first hop to the one delivering locally.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PathOverride {
    pub dst: Prefix,
    pub path: Vec<NodeId>,
}

/// Messages from a controller to a switch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CtrlMsg {
    ProbeAck { nonce: u64 },
    ConnectAccept { nonce: u64 },
    KeepaliveReply { seq: u64 },
    Flush(OriginFilter),
    FlowMod(FlowRule),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum ControllerAction {
    SwitchConnected { wmr: NodeId },
    SwitchLost { wmr: NodeId },
    Flush { wmr: NodeId },
    InstallPath { dst: Prefix, path: Vec<NodeId> },
    SkipHop { wmr: NodeId, dst: Prefix },
    InstallDrop { wmr: NodeId, dst: Prefix },
    TopologyRefresh { nodes: usize },
    TopologyStale { age_us: u64 },
}

impl fmt::Display for ControllerAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ControllerAction::SwitchConnected { wmr } => write!(f, "switch_connected n{}", wmr.0),
            ControllerAction::SwitchLost { wmr } => write!(f, "switch_lost n{}", wmr.0),
            ControllerAction::Flush { wmr } => write!(f, "flush n{}", wmr.0),
            ControllerAction::InstallPath { dst, path } => {
                write!(f, "install_path {dst} via")?;
                for n in path {
                    write!(f, " n{}", n.0)?;
                }
                Ok(())
            }
            ControllerAction::SkipHop { wmr, dst } => write!(f, "skip_hop n{} {dst}", wmr.0),
            ControllerAction::InstallDrop { wmr, dst } => write!(f, "install_drop n{} {dst}", wmr.0),
            ControllerAction::TopologyRefresh { nodes } => write!(f, "topology_refresh {nodes} nodes"),
            ControllerAction::TopologyStale { age_us } => write!(f, "topology_stale age_us={age_us}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ControllerOutput {
    Send { to: NodeId, msg: CtrlMsg },
    Log(ControllerAction),
}

/// The controller's picture of the mesh.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TopoView {
    pub adjacency: BTreeMap<NodeId, BTreeSet<NodeId>>,
    pub hna: HnaDb,
    pub addrs: BTreeMap<NodeId, Address>,
    pub taken_at: Option<SimTime>,
}

impl TopoView {
    /// Snapshot of a WMR's OLSR state: its own neighbors and announcements
    /// plus everything in its flooded database.
    pub fn from_node(node: &OlsrNode, now: SimTime) -> Self {
        let mut adjacency: BTreeMap<NodeId, BTreeSet<NodeId>> = BTreeMap::new();
        let mut addrs = BTreeMap::from([(node.id, node.addr)]);
        adjacency.insert(node.id, node.neighbors.sym_neighbors());
        for r in node.neighbors.records() {
            addrs.insert(r.neighbor, r.addr);
        }
        for m in node.db.live(now) {
            adjacency.entry(m.origin).or_default().extend(m.neighbors.iter().copied());
            addrs.insert(m.origin, m.origin_addr);
        }
        let mut hna: Vec<HnaEntry> = node.db.hna_db(now).entries().to_vec();
        hna.extend(node.hna.iter().map(|p| HnaEntry {
            origin: node.id,
            origin_addr: node.addr,
            prefix: *p,
            expiry: SimTime::MAX,
        }));
        TopoView {
            adjacency,
            hna: HnaDb::new(hna),
            addrs,
            taken_at: Some(now),
        }
    }

    pub fn addr_of(&self, n: NodeId) -> Address {
        self.addrs.get(&n).copied().unwrap_or(Address::UNSPECIFIED)
    }

    pub fn node_count(&self) -> usize {
        let mut all: BTreeSet<NodeId> = self.adjacency.keys().copied().collect();
        all.extend(self.adjacency.values().flatten().copied());
        all.len()
    }

    /// Path from `from` to `to`, chosen hop by hop with the OLSR tie-break.
    pub fn path(&self, from: NodeId, to: NodeId) -> Option<Vec<NodeId>> {
        let mut path = vec![from];
        let mut at = from;
        let limit = self.node_count() + 1;
        while at != to {
            let hops = shortest_next_hops(at, &self.adjacency, |n| self.addr_of(n));
            let (next, _) = hops.get(&to)?;
            at = *next;
            if path.contains(&at) || path.len() > limit {
                return None;
            }
            path.push(at);
        }
        Some(path)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SwitchSession {
    pub connected_at: SimTime,
    pub last_heard: SimTime,
}

#[derive(Clone, Debug)]
pub struct ControllerLogic {
    pub addr: Address,
    pub attached_wmr: NodeId,
    pub cfg: ControllerConfig,
    pub overrides: Vec<PathOverride>,
    /// Silence after which a switch is considered gone; `None` disables the
    /// check.
    pub liveness: Option<SimTime>,
    switches: BTreeMap<NodeId, SwitchSession>,
    view: TopoView,
}

impl ControllerLogic {
    pub fn new(addr: Address, attached_wmr: NodeId, cfg: ControllerConfig) -> Self {
        ControllerLogic {
            addr,
            attached_wmr,
            cfg,
            overrides: Vec::new(),
            liveness: None,
            switches: BTreeMap::new(),
            view: TopoView::default(),
        }
    }

    pub fn view(&self) -> &TopoView {
        &self.view
    }

    pub fn is_connected(&self, wmr: NodeId) -> bool {
        self.switches.contains_key(&wmr)
    }

    pub fn connected_switches(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.switches.keys().copied()
    }

    /// Replaces the view, or records that it could not be refreshed.
    pub fn refresh(&mut self, view: Option<TopoView>, now: SimTime) -> Vec<ControllerOutput> {
        match view {
            Some(v) => {
                let changed = v.adjacency != self.view.adjacency || v.hna != self.view.hna;
                self.view = v;
                if changed {
                    vec![ControllerOutput::Log(ControllerAction::TopologyRefresh {
                        nodes: self.view.node_count(),
                    })]
                } else {
                    Vec::new()
                }
            }
            None => {
                let age = self.view.taken_at.map_or(now, |t| now.saturating_sub(t));
                vec![ControllerOutput::Log(ControllerAction::TopologyStale {
                    age_us: age.as_micros(),
                })]
            }
        }
    }

    pub fn on_probe(&mut self, wmr: NodeId, nonce: u64) -> Vec<ControllerOutput> {
        if !self.cfg.accepting {
            return Vec::new();
        }
        vec![ControllerOutput::Send {
            to: wmr,
            msg: CtrlMsg::ProbeAck { nonce },
        }]
    }

    pub fn on_connect(&mut self, wmr: NodeId, nonce: u64, now: SimTime) -> Vec<ControllerOutput> {
        if !self.cfg.accepting {
            return Vec::new();
        }
        let mut out = vec![ControllerOutput::Send {
            to: wmr,
            msg: CtrlMsg::ConnectAccept { nonce },
        }];
        let fresh = self
            .switches
            .insert(
                wmr,
                SwitchSession {
                    connected_at: now,
                    last_heard: now,
                },
            )
            .is_none();
        if fresh {
            out.push(ControllerOutput::Log(ControllerAction::SwitchConnected { wmr }));
        }
        if self.cfg.flush_on_connect {
            out.push(ControllerOutput::Send {
                to: wmr,
                msg: CtrlMsg::Flush(OriginFilter::AnyController),
            });
            out.push(ControllerOutput::Log(ControllerAction::Flush { wmr }));
        }
        out
    }

    pub fn on_close(&mut self, wmr: NodeId) -> Vec<ControllerOutput> {
        match self.switches.remove(&wmr) {
            Some(_) => vec![ControllerOutput::Log(ControllerAction::SwitchLost { wmr })],
            None => Vec::new(),
        }
    }

    pub fn on_keepalive(&mut self, wmr: NodeId, seq: u64, now: SimTime) -> Vec<ControllerOutput> {
        match self.switches.get_mut(&wmr) {
            Some(s) => {
                s.last_heard = now;
                vec![ControllerOutput::Send {
                    to: wmr,
                    msg: CtrlMsg::KeepaliveReply { seq },
                }]
            }
            None => Vec::new(),
        }
    }

    /// Any message from a connected switch counts as a sign of life.
    pub fn heard(&mut self, wmr: NodeId, now: SimTime) {
        if let Some(s) = self.switches.get_mut(&wmr) {
            s.last_heard = now;
        }
    }

    pub fn sweep(&mut self, now: SimTime) -> Vec<ControllerOutput> {
        let Some(limit) = self.liveness else {
            return Vec::new();
        };
        let dead: Vec<NodeId> = self
            .switches
            .iter()
            .filter(|(_, s)| now.saturating_sub(s.last_heard) > limit)
            .map(|(n, _)| *n)
            .collect();
        dead.into_iter().flat_map(|n| self.on_close(n)).collect()
    }

    fn rule(&self, dst: Prefix, action: FlowAction) -> FlowRule {
        FlowRule::new(
            CONTROLLER_RULE_PRIORITY,
            FlowMatch::dst(dst),
            action,
            RuleOrigin::Controller(self.addr),
        )
        .with_idle_timeout(SimTime::from_secs_f64(self.cfg.rule_idle_timeout))
    }

    fn drop_rule(&self, wmr: NodeId, dst: Prefix) -> Vec<ControllerOutput> {
        let rule = FlowRule::new(
            CONTROLLER_RULE_PRIORITY,
            FlowMatch::dst(dst),
            FlowAction::Drop,
            RuleOrigin::Controller(self.addr),
        )
        .with_hard_timeout(SimTime::from_secs_f64(self.cfg.drop_hard_timeout));
        vec![
            ControllerOutput::Send {
                to: wmr,
                msg: CtrlMsg::FlowMod(rule),
            },
            ControllerOutput::Log(ControllerAction::InstallDrop { wmr, dst }),
        ]
    }

    /// Destination prefix and the WMR announcing it, nearest origin first.
    fn resolve(&self, from: NodeId, dst: Address, now: SimTime) -> Option<(Prefix, NodeId, bool)> {
        let best_len = self
            .view
            .hna
            .live(now)
            .filter(|e| e.prefix.contains(dst))
            .map(|e| e.prefix.len())
            .max()?;
        let hops = shortest_next_hops(from, &self.view.adjacency, |n| self.view.addr_of(n));
        let mut best: Option<(u32, Address, Prefix, NodeId)> = None;
        let mut any = None;
        for e in self.view.hna.live(now) {
            if e.prefix.len() != best_len || !e.prefix.contains(dst) {
                continue;
            }
            any.get_or_insert((e.prefix, e.origin));
            let dist = if e.origin == from {
                0
            } else if let Some((_, d)) = hops.get(&e.origin) {
                *d
            } else {
                continue;
            };
            let cand = (dist, e.origin_addr, e.prefix, e.origin);
            if best.is_none_or(|b| (cand.0, cand.1) < (b.0, b.1)) {
                best = Some(cand);
            }
        }
        match best {
            Some((_, _, p, o)) => Some((p, o, true)),
            None => any.map(|(p, o)| (p, o, false)),
        }
    }

    pub fn on_packet_in(&mut self, wmr: NodeId, pkt: &Packet, now: SimTime) -> Vec<ControllerOutput> {
        self.heard(wmr, now);
        let Some((prefix, origin, reachable)) = self.resolve(wmr, pkt.dst, now) else {
            return self.drop_rule(wmr, pkt.dst.host_prefix());
        };
        if !reachable {
            return self.drop_rule(wmr, prefix);
        }
        let overridden = self.overrides.iter().find(|o| o.dst == prefix).and_then(|o| {
            let k = o.path.iter().position(|n| *n == wmr)?;
            Some(o.path[k..].to_vec())
        });
        let Some(path) = overridden.or_else(|| self.view.path(wmr, origin)) else {
            return self.drop_rule(wmr, prefix);
        };
        let mut out = vec![ControllerOutput::Log(ControllerAction::InstallPath {
            dst: prefix,
            path: path.clone(),
        })];
        // Farthest hop first so downstream rules tend to land before traffic.
        for (i, &hop) in path.iter().enumerate().rev() {
            let action = match path.get(i + 1) {
                Some(next) => FlowAction::ForwardTo(*next),
                None => FlowAction::DeliverLocal,
            };
            if self.is_connected(hop) {
                out.push(ControllerOutput::Send {
                    to: hop,
                    msg: CtrlMsg::FlowMod(self.rule(prefix, action)),
                });
            } else {
                out.push(ControllerOutput::Log(ControllerAction::SkipHop { wmr: hop, dst: prefix }));
            }
        }
        out
    }
}
