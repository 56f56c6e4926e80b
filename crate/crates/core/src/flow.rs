//! The OpenFlow-like switch inside each WMR.
//!
//! Packets whose destination lies in the control subnet are *Basic* class
//! and follow the OLSR routing table; the flow table is never consulted for
//! them. Everything else is *SDN* class and must match a flow rule or be
//! punted to the controller. Rewriting the destination MAC to the next hop
//! is modelled as [`FlowAction::ForwardTo`].

use std::cmp::Reverse;
use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::addr::{AddrError, Address, Prefix};
use crate::olsr::{NextHop, RoutingTable};
use crate::time::SimTime;
use crate::topology::NodeId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrafficClass {
    Basic,
    Sdn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PacketKind {
    OlsrMsg,
    ControlChannel,
    Ping,
    Data,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Packet {
    pub src: Address,
    pub dst: Address,
    pub size: u32,
    pub kind: PacketKind,
    /// Metrics tag for data packets belonging to a bulk flow.
    pub flow_id: Option<u32>,
}

pub fn classify(dst: Address, control_subnet: Prefix) -> TrafficClass {
    if control_subnet.contains(dst) {
        TrafficClass::Basic
    } else {
        TrafficClass::Sdn
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FlowMatch {
    pub dst: Prefix,
    pub src: Option<Prefix>,
}

impl FlowMatch {
    pub fn dst(dst: Prefix) -> Self {
        FlowMatch { dst, src: None }
    }

    /// Builds a match from textual prefixes, rejecting malformed ones.
    pub fn parse(dst: &str, src: Option<&str>) -> Result<Self, AddrError> {
        Ok(FlowMatch {
            dst: dst.parse()?,
            src: src.map(str::parse).transpose()?,
        })
    }

    pub fn matches(&self, p: &Packet) -> bool {
        self.dst.contains(p.dst) && self.src.is_none_or(|s| s.contains(p.src))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FlowAction {
    ForwardTo(NodeId),
    DeliverLocal,
    Drop,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RuleOrigin {
    Controller(Address),
    Eftm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OriginFilter {
    AnyController,
    Controller(Address),
    Eftm,
    All,
}

impl OriginFilter {
    pub fn accepts(self, origin: RuleOrigin) -> bool {
        match (self, origin) {
            (OriginFilter::All, _) => true,
            (OriginFilter::AnyController, RuleOrigin::Controller(_)) => true,
            (OriginFilter::Controller(a), RuleOrigin::Controller(b)) => a == b,
            (OriginFilter::Eftm, RuleOrigin::Eftm) => true,
            _ => false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowRule {
    pub priority: u16,
    pub matcher: FlowMatch,
    pub action: FlowAction,
    pub origin: RuleOrigin,
    /// Zero means no idle timeout.
    pub idle_timeout: SimTime,
    /// Zero means no hard timeout.
    pub hard_timeout: SimTime,
    pub installed_at: SimTime,
    pub last_hit: SimTime,
}

impl FlowRule {
    pub fn new(priority: u16, matcher: FlowMatch, action: FlowAction, origin: RuleOrigin) -> Self {
        FlowRule {
            priority,
            matcher,
            action,
            origin,
            idle_timeout: SimTime::ZERO,
            hard_timeout: SimTime::ZERO,
            installed_at: SimTime::ZERO,
            last_hit: SimTime::ZERO,
        }
    }

    pub fn with_idle_timeout(mut self, t: SimTime) -> Self {
        self.idle_timeout = t;
        self
    }

    pub fn with_hard_timeout(mut self, t: SimTime) -> Self {
        self.hard_timeout = t;
        self
    }

    pub fn is_expired(&self, now: SimTime) -> bool {
        let idle = self.idle_timeout > SimTime::ZERO && now.saturating_sub(self.last_hit) >= self.idle_timeout;
        let hard = self.hard_timeout > SimTime::ZERO && now.saturating_sub(self.installed_at) >= self.hard_timeout;
        idle || hard
    }

    /// Same rule modulo the bookkeeping timestamps.
    pub fn same_rule(&self, other: &FlowRule) -> bool {
        self.priority == other.priority
            && self.matcher == other.matcher
            && self.action == other.action
            && self.origin == other.origin
            && self.idle_timeout == other.idle_timeout
            && self.hard_timeout == other.hard_timeout
    }
}

impl fmt::Display for FlowRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "prio={} dst={}", self.priority, self.matcher.dst)?;
        if let Some(src) = self.matcher.src {
            write!(f, " src={src}")?;
        }
        match self.action {
            FlowAction::ForwardTo(n) => write!(f, " fwd=n{}", n.0)?,
            FlowAction::DeliverLocal => f.write_str(" local")?,
            FlowAction::Drop => f.write_str(" drop")?,
        }
        match self.origin {
            RuleOrigin::Controller(a) => write!(f, " by={a}"),
            RuleOrigin::Eftm => f.write_str(" by=eftm"),
        }
    }
}

/// Ordering key: higher priority first, then longer destination prefix,
/// then longer source prefix.
type RuleKey = (Reverse<u16>, Reverse<u8>, Reverse<u8>, FlowMatch);

fn key_of(priority: u16, m: &FlowMatch) -> RuleKey {
    (
        Reverse(priority),
        Reverse(m.dst.len()),
        Reverse(m.src.map_or(0, |s| s.len() + 1)),
        *m,
    )
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FlowTable {
    rules: BTreeMap<RuleKey, FlowRule>,
}

impl FlowTable {
    /// Installs a rule, replacing any rule with the same (priority, match).
    /// Returns the replaced rule.
    pub fn install(&mut self, mut rule: FlowRule, now: SimTime) -> Option<FlowRule> {
        rule.installed_at = now;
        rule.last_hit = now;
        self.rules.insert(key_of(rule.priority, &rule.matcher), rule)
    }

    /// Removes expired rules and returns them.
    pub fn expire(&mut self, now: SimTime) -> Vec<FlowRule> {
        let mut gone = Vec::new();
        self.rules.retain(|_, r| {
            let keep = !r.is_expired(now);
            if !keep {
                gone.push(*r);
            }
            keep
        });
        gone
    }

    /// Best matching live rule; marks it hit. Call [`FlowTable::expire`]
    /// first to drop stale rules.
    pub fn lookup(&mut self, p: &Packet, now: SimTime) -> Option<FlowRule> {
        let rule = self
            .rules
            .values_mut()
            .find(|r| !r.is_expired(now) && r.matcher.matches(p))?;
        rule.last_hit = now;
        Some(*rule)
    }

    pub fn flush(&mut self, filter: OriginFilter) -> Vec<FlowRule> {
        let mut gone = Vec::new();
        self.rules.retain(|_, r| {
            let keep = !filter.accepts(r.origin);
            if !keep {
                gone.push(*r);
            }
            keep
        });
        gone
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn rules(&self) -> impl Iterator<Item = &FlowRule> {
        self.rules.values()
    }

    pub fn snapshot(&self) -> Vec<FlowRule> {
        self.rules.values().copied().collect()
    }

    pub fn dump(&self) -> Vec<String> {
        self.rules.values().map(|r| r.to_string()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum DropReason {
    NoRoute,
    RuleDrop,
    NoController,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Disposition {
    SentTo(NodeId),
    DeliveredLocal,
    PacketIn,
    Dropped(DropReason),
}

/// A WMR's switching element: one flow table plus the classification rule.
#[derive(Clone, Debug)]
pub struct Switch {
    pub control_subnet: Prefix,
    pub table: FlowTable,
}

impl Switch {
    pub fn new(control_subnet: Prefix) -> Self {
        Switch {
            control_subnet,
            table: FlowTable::default(),
        }
    }

    pub fn classify(&self, p: &Packet) -> TrafficClass {
        classify(p.dst, self.control_subnet)
    }

    /// Decides what to do with a packet at this switch. Expired rules must
    /// have been purged by the caller (so it can log them).
    pub fn forward(&mut self, p: &Packet, routes: &RoutingTable, controller_connected: bool, now: SimTime) -> Disposition {
        match self.classify(p) {
            TrafficClass::Basic => match routes.lookup(p.dst) {
                Some((_, r)) => match r.next_hop {
                    NextHop::Local => Disposition::DeliveredLocal,
                    NextHop::Via(n) => Disposition::SentTo(n),
                },
                None => Disposition::Dropped(DropReason::NoRoute),
            },
            TrafficClass::Sdn => match self.table.lookup(p, now) {
                Some(rule) => match rule.action {
                    FlowAction::ForwardTo(n) => Disposition::SentTo(n),
                    FlowAction::DeliverLocal => Disposition::DeliveredLocal,
                    FlowAction::Drop => Disposition::Dropped(DropReason::RuleDrop),
                },
                None if controller_connected => Disposition::PacketIn,
                None => Disposition::Dropped(DropReason::NoController),
            },
        }
    }
}
