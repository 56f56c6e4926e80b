//! EFTM, the per-router agent that discovers controllers from HNA, keeps a
//! single control connection to the best reachable one and falls back to a
//! local emergency policy when none answers.
//!
//! [`Eftm`] is a pure state machine. Every entry point returns a list of
//! [`EftmOutput`]s (messages to send, timers to arm, log events) and the
//! simulation carries them out. Controller priority is a total order: a
//! static list when configured, otherwise lower address wins.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::addr::{Address, Prefix};
use crate::flow::{FlowAction, FlowMatch, FlowRule, RuleOrigin};
use crate::olsr::{HnaDb, NextHop, RoutingTable};
use crate::time::SimTime;

/// Priority of the per-prefix forwarding rules installed in emergency.
pub const EMERGENCY_FORWARD_PRIORITY: u16 = 2;
/// Priority of the catch-all drop rule installed in emergency.
pub const EMERGENCY_DROP_PRIORITY: u16 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmergencyPolicy {
    /// Only Basic traffic flows; all SDN traffic is dropped.
    ControlOnly,
    /// SDN traffic follows the OLSR routes.
    AllowAll,
    /// SDN traffic to the listed prefixes follows OLSR routes, the rest is
    /// dropped.
    Selective(Vec<Prefix>),
}

impl fmt::Display for EmergencyPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EmergencyPolicy::ControlOnly => f.write_str("control-only"),
            EmergencyPolicy::AllowAll => f.write_str("allow-all"),
            EmergencyPolicy::Selective(ps) => {
                f.write_str("selective(")?;
                for (i, p) in ps.iter().enumerate() {
                    if i > 0 {
                        f.write_str(",")?;
                    }
                    write!(f, "{p}")?;
                }
                f.write_str(")")
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EftmConfig {
    /// Seconds between polls of the discovered controllers.
    pub poll_period: f64,
    /// Seconds to wait for a probe answer, a connection accept or a
    /// keepalive reply.
    pub connect_timeout: f64,
    /// Addresses in this range announced via HNA are controllers.
    pub controller_range: Prefix,
    /// Minimum seconds between two handovers.
    pub hysteresis_hold: f64,
    pub emergency_policy: EmergencyPolicy,
    pub keepalive: bool,
    pub keepalive_interval: f64,
    /// Flush controller-installed rules when entering emergency.
    pub clear_controller_rules: bool,
    /// Explicit priority order, highest first. Unlisted controllers rank
    /// after the listed ones, by address.
    pub static_priority: Option<Vec<Address>>,
}

impl Default for EftmConfig {
    fn default() -> Self {
        EftmConfig {
            poll_period: 3.0,
            connect_timeout: 2.0,
            controller_range: Prefix::new(Address::new(10, 0, 255, 0), 24).expect("valid"),
            hysteresis_hold: 0.0,
            emergency_policy: EmergencyPolicy::ControlOnly,
            keepalive: true,
            keepalive_interval: 1.0,
            clear_controller_rules: true,
            static_priority: None,
        }
    }
}

impl EftmConfig {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("poll_period", self.poll_period),
            ("connect_timeout", self.connect_timeout),
            ("keepalive_interval", self.keepalive_interval),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.hysteresis_hold >= 0.0 && self.hysteresis_hold.is_finite()) {
            return Err(format!("hysteresis_hold must be non-negative, got {}", self.hysteresis_hold));
        }
        if let Some(list) = &self.static_priority {
            for (i, a) in list.iter().enumerate() {
                if list[..i].contains(a) {
                    return Err(format!("static_priority lists {a} twice"));
                }
            }
        }
        Ok(())
    }

    pub fn poll(&self) -> SimTime {
        SimTime::from_secs_f64(self.poll_period)
    }

    pub fn timeout(&self) -> SimTime {
        SimTime::from_secs_f64(self.connect_timeout)
    }

    pub fn keepalive_period(&self) -> SimTime {
        SimTime::from_secs_f64(self.keepalive_interval)
    }

    /// Sort key for controller priority; smaller is better.
    pub fn rank(&self, addr: Address) -> (usize, Address) {
        match &self.static_priority {
            Some(list) => (list.iter().position(|a| *a == addr).unwrap_or(list.len()), addr),
            None => (0, addr),
        }
    }

    pub fn outranks(&self, a: Address, b: Address) -> bool {
        self.rank(a) < self.rank(b)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ControllerEntry {
    pub addr: Address,
    /// 0 is the most preferred.
    pub priority_rank: usize,
    pub discovered_at: SimTime,
}

/// Controllers announced in `hna`, best first. `first_seen` remembers when
/// each address was first discovered and is updated in place.
pub fn discover_controllers(
    hna: &HnaDb,
    now: SimTime,
    cfg: &EftmConfig,
    first_seen: &mut BTreeMap<Address, SimTime>,
) -> Vec<ControllerEntry> {
    let mut addrs: Vec<Address> = hna
        .live(now)
        .filter(|e| e.prefix.len() == 32 && cfg.controller_range.contains(e.prefix.network()))
        .map(|e| e.prefix.network())
        .collect();
    addrs.sort_by_key(|a| cfg.rank(*a));
    addrs.dedup();
    addrs
        .into_iter()
        .enumerate()
        .map(|(i, addr)| ControllerEntry {
            addr,
            priority_rank: i,
            discovered_at: *first_seen.entry(addr).or_insert(now),
        })
        .collect()
}

/// Rules implementing an emergency policy on top of the current routes.
/// Control-subnet routes are skipped since Basic traffic bypasses the table.
pub fn emergency_rules(policy: &EmergencyPolicy, routes: &RoutingTable, control_subnet: Prefix) -> Vec<FlowRule> {
    let drop_all = FlowRule::new(
        EMERGENCY_DROP_PRIORITY,
        FlowMatch::dst(Prefix::DEFAULT_ROUTE),
        FlowAction::Drop,
        RuleOrigin::Eftm,
    );
    let forward = |wanted: &dyn Fn(Prefix) -> bool| -> Vec<FlowRule> {
        routes
            .iter()
            .filter(|(p, _)| !control_subnet.covers(**p) && wanted(**p))
            .map(|(p, r)| {
                let action = match r.next_hop {
                    NextHop::Local => FlowAction::DeliverLocal,
                    NextHop::Via(n) => FlowAction::ForwardTo(n),
                };
                FlowRule::new(EMERGENCY_FORWARD_PRIORITY, FlowMatch::dst(*p), action, RuleOrigin::Eftm)
            })
            .collect()
    };
    match policy {
        EmergencyPolicy::ControlOnly => vec![drop_all],
        EmergencyPolicy::AllowAll => forward(&|_| true),
        EmergencyPolicy::Selective(allowed) => {
            let mut rules = forward(&|p| allowed.iter().any(|a| a.covers(p)));
            rules.push(drop_all);
            rules
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub enum Mode {
    Disconnected,
    Connecting { target: Address, deadline: SimTime },
    Connected { master: Address },
    Emergency(EmergencyPolicy),
}

impl Mode {
    pub fn label(&self) -> &'static str {
        match self {
            Mode::Disconnected => "disconnected",
            Mode::Connecting { .. } => "connecting",
            Mode::Connected { .. } => "connected",
            Mode::Emergency(_) => "emergency",
        }
    }

    pub fn controller(&self) -> Option<Address> {
        match self {
            Mode::Connecting { target, .. } => Some(*target),
            Mode::Connected { master } => Some(*master),
            _ => None,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::Disconnected => f.write_str("disconnected"),
            Mode::Connecting { target, .. } => write!(f, "connecting({target})"),
            Mode::Connected { master } => write!(f, "connected({master})"),
            Mode::Emergency(p) => write!(f, "emergency({p})"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConnStatus {
    Opening,
    Established,
    Closed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ControlConnection {
    pub controller: Address,
    pub status: ConnStatus,
    pub opened_at: SimTime,
    pub last_reply: SimTime,
}

/// Messages from the agent to a controller.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EftmMsg {
    Probe { nonce: u64 },
    Connect { nonce: u64 },
    Close,
    Keepalive { seq: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EftmTimer {
    ProbeTimeout { nonce: u64 },
    ConnectTimeout { nonce: u64 },
    KeepaliveTick { epoch: u64 },
    KeepaliveDeadline { epoch: u64, seq: u64 },
    ImmediatePoll,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EftmOutput {
    Send { to: Address, msg: EftmMsg },
    Timer { after: SimTime, timer: EftmTimer },
    Transition { from: Mode, to: Mode },
    Connection { controller: Address, status: ConnStatus },
    Handover { from: Address, to: Address },
    /// Install the policy's rules (and clear controller rules if configured).
    EnterEmergency(EmergencyPolicy),
    /// Remove the agent's own rules.
    ExitEmergency,
}

#[derive(Clone, Debug)]
struct PollRound {
    candidates: Vec<Address>,
    idx: usize,
    nonce: u64,
    /// The round ends with a liveness check of the current master.
    liveness: bool,
}

#[derive(Clone, Debug)]
pub struct Eftm {
    cfg: EftmConfig,
    mode: Mode,
    conn: Option<ControlConnection>,
    connect_nonce: u64,
    round: Option<PollRound>,
    next_nonce: u64,
    epoch: u64,
    keepalive_seq: u64,
    keepalive_acked: u64,
    last_handover: Option<SimTime>,
    emergency_rules: bool,
    first_seen: BTreeMap<Address, SimTime>,
}

impl Eftm {
    pub fn new(cfg: EftmConfig) -> Self {
        Eftm {
            cfg,
            mode: Mode::Disconnected,
            conn: None,
            connect_nonce: 0,
            round: None,
            next_nonce: 1,
            epoch: 0,
            keepalive_seq: 0,
            keepalive_acked: 0,
            last_handover: None,
            emergency_rules: false,
            first_seen: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &EftmConfig {
        &self.cfg
    }

    pub fn mode(&self) -> &Mode {
        &self.mode
    }

    pub fn connection(&self) -> Option<&ControlConnection> {
        self.conn.as_ref()
    }

    /// The controller with an established connection, if any.
    pub fn master(&self) -> Option<Address> {
        self.conn
            .filter(|c| c.status == ConnStatus::Established)
            .map(|c| c.controller)
    }

    pub fn emergency_rules_active(&self) -> bool {
        self.emergency_rules
    }

    pub fn polling(&self) -> bool {
        self.round.is_some()
    }

    pub fn discover(&mut self, hna: &HnaDb, now: SimTime) -> Vec<ControllerEntry> {
        discover_controllers(hna, now, &self.cfg, &mut self.first_seen)
    }

    fn nonce(&mut self) -> u64 {
        let n = self.next_nonce;
        self.next_nonce += 1;
        n
    }

    fn set_mode(&mut self, to: Mode, out: &mut Vec<EftmOutput>) {
        if self.mode != to {
            let from = std::mem::replace(&mut self.mode, to.clone());
            out.push(EftmOutput::Transition { from, to });
        }
    }

    /// Periodic (or immediate) poll. `candidates` is the current discovery
    /// result, best first.
    pub fn poll_tick(&mut self, _now: SimTime, candidates: &[ControllerEntry]) -> Vec<EftmOutput> {
        let mut out = Vec::new();
        if self.round.is_some() || matches!(self.mode, Mode::Connecting { .. }) {
            return out;
        }
        let master = self.master();
        let mut list: Vec<Address> = candidates
            .iter()
            .map(|c| c.addr)
            .filter(|a| master.is_none_or(|m| self.cfg.outranks(*a, m)))
            .collect();
        let liveness = !self.cfg.keepalive && master.is_some();
        if let (true, Some(m)) = (liveness, master) {
            list.push(m);
        }
        if list.is_empty() {
            if master.is_none() {
                self.enter_emergency(&mut out);
            }
            return out;
        }
        let nonce = self.nonce();
        let first = list[0];
        self.round = Some(PollRound {
            candidates: list,
            idx: 0,
            nonce,
            liveness,
        });
        self.probe(first, nonce, &mut out);
        out
    }

    fn probe(&mut self, to: Address, nonce: u64, out: &mut Vec<EftmOutput>) {
        out.push(EftmOutput::Send {
            to,
            msg: EftmMsg::Probe { nonce },
        });
        out.push(EftmOutput::Timer {
            after: self.cfg.timeout(),
            timer: EftmTimer::ProbeTimeout { nonce },
        });
    }

    pub fn on_probe_ack(&mut self, now: SimTime, from: Address, nonce: u64) -> Vec<EftmOutput> {
        let mut out = Vec::new();
        let Some(round) = &self.round else {
            return out;
        };
        if round.nonce != nonce || round.candidates.get(round.idx) != Some(&from) {
            return out;
        }
        self.round = None;
        match self.master() {
            Some(m) if m == from => {}
            Some(m) => {
                if self.cfg.outranks(from, m) && self.hysteresis_ok(now) {
                    self.handover(now, m, from, &mut out);
                }
            }
            None => self.connect(now, from, &mut out),
        }
        out
    }

    pub fn on_probe_timeout(&mut self, _now: SimTime, nonce: u64) -> Vec<EftmOutput> {
        let mut out = Vec::new();
        let Some(round) = &mut self.round else {
            return out;
        };
        if round.nonce != nonce {
            return out;
        }
        round.idx += 1;
        if round.idx < round.candidates.len() {
            let next = round.candidates[round.idx];
            let fresh = self.nonce();
            let round = self.round.as_mut().expect("checked above");
            round.nonce = fresh;
            self.probe(next, fresh, &mut out);
            return out;
        }
        let liveness = round.liveness;
        self.round = None;
        if liveness {
            self.connection_lost(&mut out);
        } else if self.master().is_none() {
            self.enter_emergency(&mut out);
        }
        out
    }

    fn hysteresis_ok(&self, now: SimTime) -> bool {
        let hold = SimTime::from_secs_f64(self.cfg.hysteresis_hold);
        self.last_handover.is_none_or(|t| now.saturating_sub(t) >= hold)
    }

    fn handover(&mut self, now: SimTime, from: Address, to: Address, out: &mut Vec<EftmOutput>) {
        out.push(EftmOutput::Send {
            to: from,
            msg: EftmMsg::Close,
        });
        self.close_connection(out);
        self.last_handover = Some(now);
        out.push(EftmOutput::Handover { from, to });
        self.connect(now, to, out);
    }

    fn close_connection(&mut self, out: &mut Vec<EftmOutput>) {
        if let Some(c) = self.conn.take() {
            out.push(EftmOutput::Connection {
                controller: c.controller,
                status: ConnStatus::Closed,
            });
        }
        self.epoch += 1;
    }

    fn connect(&mut self, now: SimTime, to: Address, out: &mut Vec<EftmOutput>) {
        let nonce = self.nonce();
        self.connect_nonce = nonce;
        self.conn = Some(ControlConnection {
            controller: to,
            status: ConnStatus::Opening,
            opened_at: now,
            last_reply: now,
        });
        out.push(EftmOutput::Connection {
            controller: to,
            status: ConnStatus::Opening,
        });
        let deadline = now + self.cfg.timeout();
        self.set_mode(Mode::Connecting { target: to, deadline }, out);
        out.push(EftmOutput::Send {
            to,
            msg: EftmMsg::Connect { nonce },
        });
        out.push(EftmOutput::Timer {
            after: self.cfg.timeout(),
            timer: EftmTimer::ConnectTimeout { nonce },
        });
    }

    pub fn on_connect_accept(&mut self, now: SimTime, from: Address, nonce: u64) -> Vec<EftmOutput> {
        let mut out = Vec::new();
        let opening = matches!(
            self.conn,
            Some(ControlConnection { controller, status: ConnStatus::Opening, .. }) if controller == from
        );
        if !opening || nonce != self.connect_nonce {
            return out;
        }
        if let Some(c) = &mut self.conn {
            c.status = ConnStatus::Established;
            c.last_reply = now;
        }
        out.push(EftmOutput::Connection {
            controller: from,
            status: ConnStatus::Established,
        });
        self.set_mode(Mode::Connected { master: from }, &mut out);
        if self.emergency_rules {
            self.emergency_rules = false;
            out.push(EftmOutput::ExitEmergency);
        }
        self.epoch += 1;
        self.keepalive_seq = 0;
        self.keepalive_acked = 0;
        if self.cfg.keepalive {
            out.push(EftmOutput::Timer {
                after: self.cfg.keepalive_period(),
                timer: EftmTimer::KeepaliveTick { epoch: self.epoch },
            });
        }
        out
    }

    pub fn on_connect_timeout(&mut self, _now: SimTime, nonce: u64) -> Vec<EftmOutput> {
        let mut out = Vec::new();
        let opening = matches!(self.conn, Some(ControlConnection { status: ConnStatus::Opening, .. }));
        if !opening || nonce != self.connect_nonce {
            return out;
        }
        self.close_connection(&mut out);
        self.set_mode(Mode::Disconnected, &mut out);
        out.push(EftmOutput::Timer {
            after: SimTime::ZERO,
            timer: EftmTimer::ImmediatePoll,
        });
        out
    }

    pub fn on_keepalive_tick(&mut self, _now: SimTime, epoch: u64) -> Vec<EftmOutput> {
        let mut out = Vec::new();
        let Some(master) = self.master() else {
            return out;
        };
        if epoch != self.epoch {
            return out;
        }
        self.keepalive_seq += 1;
        let seq = self.keepalive_seq;
        out.push(EftmOutput::Send {
            to: master,
            msg: EftmMsg::Keepalive { seq },
        });
        out.push(EftmOutput::Timer {
            after: self.cfg.timeout(),
            timer: EftmTimer::KeepaliveDeadline { epoch, seq },
        });
        out.push(EftmOutput::Timer {
            after: self.cfg.keepalive_period(),
            timer: EftmTimer::KeepaliveTick { epoch },
        });
        out
    }

    pub fn on_keepalive_reply(&mut self, now: SimTime, from: Address, seq: u64) {
        if self.master() == Some(from) {
            self.keepalive_acked = self.keepalive_acked.max(seq);
            if let Some(c) = &mut self.conn {
                c.last_reply = now;
            }
        }
    }

    pub fn on_keepalive_deadline(&mut self, _now: SimTime, epoch: u64, seq: u64) -> Vec<EftmOutput> {
        let mut out = Vec::new();
        if epoch == self.epoch && self.master().is_some() && self.keepalive_acked < seq {
            self.connection_lost(&mut out);
        }
        out
    }

    fn connection_lost(&mut self, out: &mut Vec<EftmOutput>) {
        if let Some(m) = self.master() {
            out.push(EftmOutput::Send {
                to: m,
                msg: EftmMsg::Close,
            });
        }
        self.close_connection(out);
        self.round = None;
        self.set_mode(Mode::Disconnected, out);
        out.push(EftmOutput::Timer {
            after: SimTime::ZERO,
            timer: EftmTimer::ImmediatePoll,
        });
    }

    fn enter_emergency(&mut self, out: &mut Vec<EftmOutput>) {
        if matches!(self.mode, Mode::Emergency(_)) {
            return;
        }
        let policy = self.cfg.emergency_policy.clone();
        self.set_mode(Mode::Emergency(policy.clone()), out);
        self.emergency_rules = true;
        out.push(EftmOutput::EnterEmergency(policy));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::olsr::{HnaEntry, Route};
    use crate::topology::NodeId;

    fn c(i: u8) -> Address {
        Address::new(10, 0, 255, i)
    }

    fn t(s: f64) -> SimTime {
        SimTime::from_secs_f64(s)
    }

    fn entries(addrs: &[Address]) -> Vec<ControllerEntry> {
        addrs
            .iter()
            .enumerate()
            .map(|(i, a)| ControllerEntry {
                addr: *a,
                priority_rank: i,
                discovered_at: SimTime::ZERO,
            })
            .collect()
    }

    fn sent(out: &[EftmOutput]) -> Vec<(Address, EftmMsg)> {
        out.iter()
            .filter_map(|o| match o {
                EftmOutput::Send { to, msg } => Some((*to, *msg)),
                _ => None,
            })
            .collect()
    }

    fn probe_nonce(out: &[EftmOutput], to: Address) -> u64 {
        sent(out)
            .into_iter()
            .find_map(|(a, m)| match m {
                EftmMsg::Probe { nonce } if a == to => Some(nonce),
                _ => None,
            })
            .expect("probe sent")
    }

    fn connect_nonce(out: &[EftmOutput]) -> (Address, u64) {
        sent(out)
            .into_iter()
            .find_map(|(a, m)| match m {
                EftmMsg::Connect { nonce } => Some((a, nonce)),
                _ => None,
            })
            .expect("connect sent")
    }

    /// Drives an agent to Connected(master).
    fn connected_to(master: Address, all: &[Address]) -> Eftm {
        let mut e = Eftm::new(EftmConfig::default());
        let out = e.poll_tick(t(0.0), &entries(all));
        let mut nonce = probe_nonce(&out, all[0]);
        let mut now = 0.0;
        for a in all {
            if *a == master {
                break;
            }
            now += 2.0;
            let out = e.on_probe_timeout(t(now), nonce);
            let next = all.iter().skip_while(|x| *x != a).nth(1).unwrap();
            nonce = probe_nonce(&out, *next);
        }
        let out = e.on_probe_ack(t(now + 0.01), master, nonce);
        let (to, n) = connect_nonce(&out);
        assert_eq!(to, master);
        e.on_connect_accept(t(now + 0.02), master, n);
        assert_eq!(e.mode(), &Mode::Connected { master });
        e
    }

    #[test]
    fn discovery_orders_by_address_within_range() {
        let hna = HnaDb::new(vec![
            HnaEntry { origin: NodeId(12), origin_addr: c(2), prefix: c(2).host_prefix(), expiry: t(100.0) },
            HnaEntry { origin: NodeId(11), origin_addr: c(1), prefix: c(1).host_prefix(), expiry: t(100.0) },
            HnaEntry {
                origin: NodeId(2),
                origin_addr: Address::new(10, 0, 0, 2),
                prefix: "192.168.2.0/24".parse().unwrap(),
                expiry: t(100.0),
            },
            HnaEntry { origin: NodeId(13), origin_addr: c(3), prefix: c(3).host_prefix(), expiry: t(5.0) },
        ]);
        let mut seen = BTreeMap::new();
        let found = discover_controllers(&hna, t(10.0), &EftmConfig::default(), &mut seen);
        let addrs: Vec<_> = found.iter().map(|e| e.addr).collect();
        assert_eq!(addrs, vec![c(1), c(2)]);
        assert_eq!(found[0].priority_rank, 0);
        let later = discover_controllers(&hna, t(20.0), &EftmConfig::default(), &mut seen);
        assert_eq!(later[1].discovered_at, t(10.0));
    }

    #[test]
    fn static_priority_overrides_address_order() {
        let cfg = EftmConfig {
            static_priority: Some(vec![c(2)]),
            ..EftmConfig::default()
        };
        assert!(cfg.outranks(c(2), c(1)));
        assert!(cfg.outranks(c(1), c(3)));
        let dup = EftmConfig {
            static_priority: Some(vec![c(2), c(2)]),
            ..EftmConfig::default()
        };
        assert!(dup.validate().is_err());
    }

    #[test]
    fn first_poll_connects_to_best_accepting() {
        let e = connected_to(c(1), &[c(1), c(2)]);
        assert_eq!(e.master(), Some(c(1)));
    }

    #[test]
    fn unresponsive_best_falls_through_to_next() {
        let e = connected_to(c(2), &[c(1), c(2)]);
        assert_eq!(e.master(), Some(c(2)));
    }

    #[test]
    fn higher_priority_triggers_hard_handover() {
        let mut e = connected_to(c(2), &[c(2)]);
        let out = e.poll_tick(t(3.0), &entries(&[c(1), c(2)]));
        let msgs = sent(&out);
        assert_eq!(msgs.len(), 1, "only the better controller is probed: {msgs:?}");
        let nonce = probe_nonce(&out, c(1));
        let out = e.on_probe_ack(t(3.01), c(1), nonce);
        let msgs = sent(&out);
        assert_eq!(msgs[0], (c(2), EftmMsg::Close));
        assert!(matches!(msgs[1], (a, EftmMsg::Connect { .. }) if a == c(1)));
        assert!(out.contains(&EftmOutput::Handover { from: c(2), to: c(1) }));
        assert!(e.master().is_none(), "old connection closed before the new one opens");
        let (_, n) = connect_nonce(&out);
        e.on_connect_accept(t(3.02), c(1), n);
        assert_eq!(e.master(), Some(c(1)));
    }

    #[test]
    fn connected_to_best_sends_nothing() {
        let mut e = connected_to(c(1), &[c(1), c(2)]);
        assert!(e.poll_tick(t(3.0), &entries(&[c(1), c(2)])).is_empty());
        assert_eq!(e.mode(), &Mode::Connected { master: c(1) });
    }

    #[test]
    fn nothing_discovered_means_emergency() {
        let mut e = Eftm::new(EftmConfig::default());
        let out = e.poll_tick(t(0.0), &[]);
        assert!(out.contains(&EftmOutput::EnterEmergency(EmergencyPolicy::ControlOnly)));
        assert_eq!(e.mode(), &Mode::Emergency(EmergencyPolicy::ControlOnly));
        // staying there produces no repeated entries
        assert!(e.poll_tick(t(3.0), &[]).is_empty());
    }

    #[test]
    fn all_candidates_silent_means_emergency() {
        let mut e = Eftm::new(EftmConfig::default());
        let out = e.poll_tick(t(0.0), &entries(&[c(1), c(2)]));
        let n1 = probe_nonce(&out, c(1));
        let out = e.on_probe_timeout(t(2.0), n1);
        let n2 = probe_nonce(&out, c(2));
        let out = e.on_probe_timeout(t(4.0), n2);
        assert!(matches!(e.mode(), Mode::Emergency(_)));
        assert!(out.iter().any(|o| matches!(o, EftmOutput::EnterEmergency(_))));
    }

    #[test]
    fn emergency_exits_on_connect() {
        let mut e = Eftm::new(EftmConfig::default());
        e.poll_tick(t(0.0), &[]);
        let out = e.poll_tick(t(3.0), &entries(&[c(2)]));
        let n = probe_nonce(&out, c(2));
        let out = e.on_probe_ack(t(3.01), c(2), n);
        let (_, n) = connect_nonce(&out);
        let out = e.on_connect_accept(t(3.02), c(2), n);
        assert!(out.contains(&EftmOutput::ExitEmergency));
        assert!(!e.emergency_rules_active());
    }

    #[test]
    fn missed_keepalive_reply_declares_loss_and_polls_now() {
        let mut e = connected_to(c(1), &[c(1)]);
        let epoch = e.epoch;
        let out = e.on_keepalive_tick(t(1.0), epoch);
        assert_eq!(sent(&out), vec![(c(1), EftmMsg::Keepalive { seq: 1 })]);
        let out = e.on_keepalive_deadline(t(3.0), epoch, 1);
        assert_eq!(e.mode(), &Mode::Disconnected);
        assert!(out.contains(&EftmOutput::Timer {
            after: SimTime::ZERO,
            timer: EftmTimer::ImmediatePoll
        }));
        assert!(out.contains(&EftmOutput::Connection { controller: c(1), status: ConnStatus::Closed }));
    }

    #[test]
    fn late_reply_within_gap_keeps_connection() {
        let mut e = connected_to(c(1), &[c(1)]);
        let epoch = e.epoch;
        e.on_keepalive_tick(t(1.0), epoch);
        e.on_keepalive_tick(t(2.0), epoch);
        // reply to the second keepalive arrives before the first deadline
        e.on_keepalive_reply(t(2.01), c(1), 2);
        assert!(e.on_keepalive_deadline(t(3.0), epoch, 1).is_empty());
        assert_eq!(e.master(), Some(c(1)));
    }

    #[test]
    fn loss_aborts_probe_round_in_progress() {
        let mut e = connected_to(c(2), &[c(2)]);
        let out = e.poll_tick(t(3.0), &entries(&[c(1), c(2)]));
        let n = probe_nonce(&out, c(1));
        let epoch = e.epoch;
        e.on_keepalive_tick(t(3.5), epoch);
        e.on_keepalive_deadline(t(5.5), epoch, 1);
        assert!(!e.polling());
        // the late ack from the aborted round is ignored
        assert!(e.on_probe_ack(t(5.6), c(1), n).is_empty());
    }

    #[test]
    fn connect_timeout_returns_to_disconnected() {
        let mut e = Eftm::new(EftmConfig::default());
        let out = e.poll_tick(t(0.0), &entries(&[c(1)]));
        let n = probe_nonce(&out, c(1));
        let out = e.on_probe_ack(t(0.01), c(1), n);
        let (_, n) = connect_nonce(&out);
        assert!(matches!(e.mode(), Mode::Connecting { .. }));
        // periodic ticks are ignored while connecting
        assert!(e.poll_tick(t(1.0), &entries(&[c(1)])).is_empty());
        let out = e.on_connect_timeout(t(2.01), n);
        assert_eq!(e.mode(), &Mode::Disconnected);
        assert!(out.iter().any(|o| matches!(o, EftmOutput::Timer { timer: EftmTimer::ImmediatePoll, .. })));
    }

    #[test]
    fn hysteresis_blocks_rapid_handover() {
        let cfg = EftmConfig {
            hysteresis_hold: 10.0,
            ..EftmConfig::default()
        };
        let mut e = Eftm::new(cfg);
        e.last_handover = Some(t(0.0));
        let out = e.poll_tick(t(0.0), &entries(&[c(2)]));
        let n = probe_nonce(&out, c(2));
        let out = e.on_probe_ack(t(0.01), c(2), n);
        let (_, n) = connect_nonce(&out);
        e.on_connect_accept(t(0.02), c(2), n);
        let out = e.poll_tick(t(3.0), &entries(&[c(1), c(2)]));
        let n = probe_nonce(&out, c(1));
        assert!(e.on_probe_ack(t(3.01), c(1), n).is_empty());
        assert_eq!(e.master(), Some(c(2)));
    }

    #[test]
    fn without_keepalive_poll_checks_master_liveness() {
        let cfg = EftmConfig {
            keepalive: false,
            ..EftmConfig::default()
        };
        let mut e = Eftm::new(cfg);
        let out = e.poll_tick(t(0.0), &entries(&[c(1)]));
        let n = probe_nonce(&out, c(1));
        let out = e.on_probe_ack(t(0.01), c(1), n);
        let (_, n) = connect_nonce(&out);
        e.on_connect_accept(t(0.02), c(1), n);
        let out = e.poll_tick(t(3.0), &entries(&[c(1)]));
        let n = probe_nonce(&out, c(1));
        e.on_probe_timeout(t(5.0), n);
        assert_eq!(e.mode(), &Mode::Disconnected);
    }

    fn routes() -> RoutingTable {
        let mut rt = RoutingTable::default();
        let via = |n| Route { next_hop: NextHop::Via(NodeId(n)), hop_count: 1 };
        rt.insert("10.0.0.2/32".parse().unwrap(), via(2));
        rt.insert("192.168.1.0/24".parse().unwrap(), Route { next_hop: NextHop::Local, hop_count: 0 });
        rt.insert("192.168.2.0/24".parse().unwrap(), via(2));
        rt.insert("192.168.3.0/24".parse().unwrap(), via(2));
        rt.insert(Prefix::DEFAULT_ROUTE, via(2));
        rt
    }

    #[test]
    fn emergency_policies_build_expected_rules() {
        let ctl: Prefix = "10.0.0.0/16".parse().unwrap();
        let only = emergency_rules(&EmergencyPolicy::ControlOnly, &routes(), ctl);
        assert_eq!(only.len(), 1);
        assert_eq!(only[0].action, FlowAction::Drop);
        assert!(only[0].matcher.dst.is_default());

        let all = emergency_rules(&EmergencyPolicy::AllowAll, &routes(), ctl);
        assert_eq!(all.len(), 4, "control routes excluded");
        assert!(all.iter().all(|r| r.action != FlowAction::Drop));

        let sel = EmergencyPolicy::Selective(vec!["192.168.2.0/23".parse().unwrap()]);
        let sel = emergency_rules(&sel, &routes(), ctl);
        let dsts: Vec<String> = sel.iter().map(|r| r.matcher.dst.to_string()).collect();
        assert_eq!(dsts, vec!["192.168.2.0/24", "192.168.3.0/24", "0.0.0.0/0"]);
        assert!(sel.iter().all(|r| r.origin == RuleOrigin::Eftm));
    }

    #[test]
    fn policy_serde_forms() {
        #[derive(Deserialize)]
        struct W {
            p: EmergencyPolicy,
        }
        let w: W = toml::from_str("p = \"allow-all\"").unwrap();
        assert_eq!(w.p, EmergencyPolicy::AllowAll);
        let w: W = toml::from_str("p = { selective = [\"192.168.0.0/16\"] }").unwrap();
        assert_eq!(w.p, EmergencyPolicy::Selective(vec!["192.168.0.0/16".parse().unwrap()]));
    }
}
