//! The simulated world: one scheduler driving every node of a scenario.
//!
//! Frames travel over links with propagation plus serialization delay and
//! are lost if the link is down at either end of the trip. OLSR messages
//! are link-local; everything else is an IP packet that routers forward
//! through their switch. Each WMR hosts an [`Eftm`] agent and a
//! [`Switch`]; each controller node hosts a [`ControllerLogic`].

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::addr::Address;
use crate::controller::{ControllerLogic, ControllerOutput, CtrlMsg, TopoView};
use crate::eftm::{emergency_rules, ConnStatus, EftmMsg, EftmOutput, EftmTimer, EmergencyPolicy, Mode};
use crate::eftm::Eftm;
use crate::engine::{node_rng, Scheduler, Target};
use crate::flow::{Disposition, FlowRule, FlowTable, OriginFilter, Packet, PacketKind, RuleOrigin, Switch};
use crate::metrics::{Measurements, Metric, MetricLog, OnlineMetrics, RecordBody, SummaryRow};
use crate::olsr::{LsMessage, LsOutcome, NextHop, OlsrNode, RoutingTable};
use crate::scenario::{EventAction, Scenario};
use crate::time::SimTime;
use crate::topology::{LinkId, LinkState, NodeId, NodeKind, Topology};
use crate::traffic::{max_min_fair, FlowDemand, FlowPhase};

const HELLO_BYTES: u32 = 64;
const CONTROL_BYTES: u32 = 128;
const DATA_BYTES: u32 = 1500;
const BROADCAST: Address = Address::from_bits(u32::MAX);

#[derive(Clone, Debug, PartialEq)]
pub enum Body {
    Hello,
    LinkState(LsMessage),
    DbRequest,
    Echo { probe: usize, seq: u64, sent: SimTime },
    EchoReply { probe: usize, seq: u64, sent: SimTime },
    Eftm(EftmMsg),
    PacketIn(Packet),
    Ctrl(CtrlMsg),
    Data,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub header: Packet,
    pub body: Body,
}

#[derive(Debug)]
enum Ev {
    Hello,
    Flood,
    NeighborCheck,
    DbExpiry,
    Deliver { link: LinkId, frame: Frame },
    Poll,
    Eftm(EftmTimer),
    CtrlRefresh,
    CtrlSweep,
    Ping(usize),
    Sample,
    Scripted(EventAction),
    BufferExpiry(u64),
}

struct WmrRt {
    switch: Switch,
    eftm: Eftm,
}

struct NodeRt {
    rng: ChaCha8Rng,
    olsr: Option<OlsrNode>,
    last_own: Option<LsMessage>,
    wmr: Option<WmrRt>,
    ctrl: Option<ControllerLogic>,
    /// Controllers this node currently holds an Established connection to.
    established: BTreeSet<Address>,
}

struct FlowRt {
    active: bool,
    phase: FlowPhase,
    links: Vec<LinkId>,
    last_packet_in: BTreeMap<NodeId, SimTime>,
}

/// Counters for properties checked over a whole run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Stats {
    /// Messages sent from one controller to another. Always zero.
    pub controller_to_controller: u64,
    /// Times a WMR held two Established connections at once.
    pub single_master_violations: u64,
    pub frames_sent: u64,
    pub packets_dropped: u64,
    pub packet_ins: u64,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub log: MetricLog,
    pub summary: SummaryRow,
    /// Measurements computed incrementally during the run.
    pub online: Measurements,
    pub stats: Stats,
}

pub struct World {
    sc: Scenario,
    seed: u64,
    sched: Scheduler<Ev>,
    nodes: Vec<NodeRt>,
    probe_seq: Vec<u64>,
    flows: Vec<FlowRt>,
    buffers: BTreeMap<u64, (NodeId, Frame)>,
    next_buffer: u64,
    log: MetricLog,
    online: Option<OnlineMetrics>,
    stats: Stats,
}

fn no_measure() -> Measurements {
    Measurements {
        connectivity: Metric::NotApplicable,
        selection_delay: None,
        throughput_gap: Metric::NotApplicable,
    }
}

impl World {
    pub fn new(scenario: &Scenario, seed: u64) -> World {
        let sc = scenario.clone();
        let mut nodes = Vec::new();
        for n in sc.topology.nodes() {
            let olsr = n.runs_olsr().then(|| {
                let (hna, local) = sc.announcements(n.id);
                OlsrNode::new(n.id, n.main_address(), hna, local)
            });
            let wmr = (n.kind == NodeKind::Wmr).then(|| WmrRt {
                switch: Switch::new(sc.control_subnet),
                eftm: Eftm::new(sc.eftm.clone()),
            });
            let ctrl = sc.controller_spec(n.id).map(|spec| {
                let mut logic = ControllerLogic::new(n.main_address(), spec.attached_wmr, spec.cfg.clone());
                logic.overrides = spec.overrides.clone();
                let e = &sc.eftm;
                logic.liveness = Some(SimTime::from_secs_f64(if e.keepalive {
                    e.keepalive_interval + e.connect_timeout
                } else {
                    e.poll_period + 2.0 * e.connect_timeout
                }));
                logic
            });
            nodes.push(NodeRt {
                rng: node_rng(seed, &n.name),
                olsr,
                last_own: None,
                wmr,
                ctrl,
                established: BTreeSet::new(),
            });
        }
        let flows = sc
            .flows
            .iter()
            .map(|_| FlowRt {
                active: false,
                phase: FlowPhase::Idle,
                links: Vec::new(),
                last_packet_in: BTreeMap::new(),
            })
            .collect();
        let mut w = World {
            probe_seq: vec![0; sc.probes.len()],
            online: sc.measure.clone().map(OnlineMetrics::new),
            sc,
            seed,
            sched: Scheduler::new(),
            nodes,
            flows,
            buffers: BTreeMap::new(),
            next_buffer: 0,
            log: MetricLog::default(),
            stats: Stats::default(),
        };
        w.boot();
        w
    }

    fn boot(&mut self) {
        let olsr = self.sc.olsr.clone();
        let ids: Vec<NodeId> = self.sc.topology.nodes().iter().map(|n| n.id).collect();
        for id in ids {
            let kind = self.sc.topology.node(id).kind;
            let rt = &mut self.nodes[id.index()];
            if rt.olsr.is_some() {
                let rng = &mut rt.rng;
                let (h, f) = if olsr.random_start_phase {
                    (olsr.hello_period().mul_f64(rng.gen()), olsr.tc_period().mul_f64(rng.gen()))
                } else {
                    (SimTime::ZERO, SimTime::ZERO)
                };
                self.sched.schedule(h, id, Ev::Hello);
                self.sched.schedule(f, id, Ev::Flood);
            }
            if kind == NodeKind::Wmr {
                let rng = &mut self.nodes[id.index()].rng;
                let phase = self.sc.eftm.poll().mul_f64(rng.gen());
                self.sched.schedule(phase, id, Ev::Poll);
            }
            if let Some(spec) = self.sc.controller_spec(id) {
                let refresh = SimTime::from_secs_f64(spec.cfg.refresh_interval);
                self.sched.schedule(SimTime::ZERO, id, Ev::CtrlRefresh);
                self.sched.schedule(refresh.min(SimTime::from_secs(1)), id, Ev::CtrlSweep);
            }
        }
        for (i, p) in self.sc.probes.iter().enumerate() {
            self.sched.schedule(p.start, p.src, Ev::Ping(i));
        }
        for e in self.sc.events.clone() {
            self.sched.schedule(e.at, Target::Global, Ev::Scripted(e.action));
        }
        if !self.sc.flows.is_empty() {
            let dt = SimTime::from_secs_f64(self.sc.sim.sample_interval);
            self.sched.schedule(dt, Target::Global, Ev::Sample);
        }
    }

    pub fn scenario(&self) -> &Scenario {
        &self.sc
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn now(&self) -> SimTime {
        self.sched.now()
    }

    pub fn topology(&self) -> &Topology {
        &self.sc.topology
    }

    pub fn log(&self) -> &MetricLog {
        &self.log
    }

    pub fn stats(&self) -> Stats {
        self.stats
    }

    pub fn eftm(&self, n: NodeId) -> Option<&Eftm> {
        self.nodes[n.index()].wmr.as_ref().map(|w| &w.eftm)
    }

    pub fn flow_table(&self, n: NodeId) -> Option<&FlowTable> {
        self.nodes[n.index()].wmr.as_ref().map(|w| &w.switch.table)
    }

    pub fn routes(&self, n: NodeId) -> Option<&RoutingTable> {
        self.nodes[n.index()].olsr.as_ref().map(|o| &o.routes)
    }

    pub fn olsr(&self, n: NodeId) -> Option<&OlsrNode> {
        self.nodes[n.index()].olsr.as_ref()
    }

    pub fn controller(&self, n: NodeId) -> Option<&ControllerLogic> {
        self.nodes[n.index()].ctrl.as_ref()
    }

    pub fn node(&self, name: &str) -> NodeId {
        self.sc.topology.node_id(name).expect("known node")
    }

    /// Processes the next event if it fires no later than `end`. Returns
    /// false when there is none.
    pub fn step_until(&mut self, end: SimTime) -> bool {
        match self.sched.pop_until(end) {
            Some(ev) => {
                self.dispatch(ev.target, ev.payload);
                true
            }
            None => false,
        }
    }

    /// Processes one event within the scenario duration.
    pub fn step(&mut self) -> bool {
        self.step_until(self.sc.duration)
    }

    pub fn run_until(&mut self, end: SimTime) {
        while self.step_until(end) {}
        if end > self.sched.now() {
            self.sched.advance_to(end).expect("moving forward");
        }
    }

    pub fn run(&mut self) {
        self.run_until(self.sc.duration);
    }

    /// Runs to the end of the scenario and returns the outputs.
    pub fn finish(mut self) -> RunOutput {
        self.run();
        let online = self.online.as_ref().map_or_else(no_measure, |o| o.finish());
        let m = match &self.sc.measure {
            Some(spec) => crate::metrics::analyze(self.log.records(), spec),
            None => no_measure(),
        };
        RunOutput {
            summary: SummaryRow {
                seed: self.seed,
                scenario: self.sc.name.clone(),
                m,
            },
            online,
            log: self.log,
            stats: self.stats,
        }
    }

    /// Changes a link now, as a scripted event would.
    pub fn set_link(&mut self, link: LinkId, state: LinkState) {
        self.apply_link(link, state);
    }

    /// Installs a rule directly into a WMR's table, bypassing any
    /// controller. Meant for tests.
    pub fn install_rule(&mut self, n: NodeId, rule: FlowRule) {
        let now = self.now();
        if let Some(w) = self.nodes[n.index()].wmr.as_mut() {
            w.switch.table.install(rule, now);
        }
        self.rule_event(n, "install", &rule);
    }

    fn emit(&mut self, body: RecordBody) {
        let now = self.sched.now();
        let rec = self.log.push(now, body);
        if let Some(o) = self.online.as_mut() {
            o.observe(rec);
        }
    }

    fn name(&self, n: NodeId) -> String {
        self.sc.topology.name(n).to_string()
    }

    fn dispatch(&mut self, target: Target, ev: Ev) {
        match (target, ev) {
            (Target::Node(n), Ev::Hello) => self.on_hello_timer(n),
            (Target::Node(n), Ev::Flood) => self.on_flood_timer(n),
            (Target::Node(n), Ev::NeighborCheck) => self.on_neighbor_check(n),
            (Target::Node(n), Ev::DbExpiry) => self.on_db_expiry(n),
            (Target::Node(n), Ev::Deliver { link, frame }) => self.on_deliver(n, link, frame),
            (Target::Node(n), Ev::Poll) => {
                self.poll(n);
                self.sched.schedule(self.sc.eftm.poll(), n, Ev::Poll);
            }
            (Target::Node(n), Ev::Eftm(t)) => self.on_eftm_timer(n, t),
            (Target::Node(n), Ev::CtrlRefresh) => {
                self.controller_pull(n);
                let every = self.nodes[n.index()].ctrl.as_ref().map(|c| c.cfg.refresh_interval).unwrap_or(5.0);
                self.sched.schedule(SimTime::from_secs_f64(every), n, Ev::CtrlRefresh);
            }
            (Target::Node(n), Ev::CtrlSweep) => {
                let now = self.now();
                if let Some(c) = self.nodes[n.index()].ctrl.as_mut() {
                    let out = c.sweep(now);
                    self.apply_ctrl(n, out);
                }
                self.sched.schedule(SimTime::from_secs(1), n, Ev::CtrlSweep);
            }
            (Target::Node(n), Ev::Ping(i)) => self.on_ping(n, i),
            (_, Ev::BufferExpiry(id)) => {
                if let Some((n, frame)) = self.buffers.remove(&id) {
                    self.drop_packet(n, &frame, "packet_in_timeout");
                }
            }
            (_, Ev::Sample) => {
                self.sample();
                let dt = SimTime::from_secs_f64(self.sc.sim.sample_interval);
                self.sched.schedule(dt, Target::Global, Ev::Sample);
            }
            (_, Ev::Scripted(a)) => self.on_scripted(a),
            (Target::Global, ev) => debug_assert!(false, "node event {ev:?} sent to global"),
        }
    }

    // ---- links ----------------------------------------------------------

    fn send_on(&mut self, link: LinkId, from: NodeId, frame: Frame) -> bool {
        let l = self.sc.topology.link(link);
        if !l.is_up() {
            return false;
        }
        let to = l.other(from);
        let delay = l.latency(frame.header.size);
        self.stats.frames_sent += 1;
        self.sched.schedule(delay, to, Ev::Deliver { link, frame });
        true
    }

    fn olsr_broadcast(&mut self, n: NodeId, body: Body, except: Option<NodeId>) {
        let size = match &body {
            Body::LinkState(m) => 64 + 4 * m.neighbors.len() as u32 + 8 * m.hna.len() as u32,
            _ => HELLO_BYTES,
        };
        let header = Packet {
            src: self.sc.topology.node(n).main_address(),
            dst: BROADCAST,
            size,
            kind: PacketKind::OlsrMsg,
            flow_id: None,
        };
        let links: Vec<LinkId> = self.sc.topology.incident(n).to_vec();
        for l in links {
            let peer = self.sc.topology.link(l).other(n);
            if Some(peer) == except || !self.sc.topology.node(peer).runs_olsr() {
                continue;
            }
            self.send_on(l, n, Frame { header, body: body.clone() });
        }
    }

    fn olsr_unicast(&mut self, n: NodeId, to: NodeId, body: Body) {
        let Some(l) = self.sc.topology.link_between(n, to) else {
            return;
        };
        let header = Packet {
            src: self.sc.topology.node(n).main_address(),
            dst: BROADCAST,
            size: HELLO_BYTES,
            kind: PacketKind::OlsrMsg,
            flow_id: None,
        };
        self.send_on(l, n, Frame { header, body });
    }

    fn apply_link(&mut self, link: LinkId, state: LinkState) {
        let previous = self.sc.topology.set_link_state(link, state).expect("valid link id");
        let name = self.sc.topology.link(link).name.clone();
        self.emit(RecordBody::LinkEvent { link: name, state, previous });
        self.evaluate_flows();
    }

    fn on_scripted(&mut self, a: EventAction) {
        match a {
            EventAction::LinkUp(l) => self.apply_link(l, LinkState::Up),
            EventAction::LinkDown(l) => self.apply_link(l, LinkState::Down),
            EventAction::StartFlow(i) => {
                let f = &mut self.flows[i];
                if !f.active {
                    f.active = true;
                    f.phase = FlowPhase::Idle;
                    f.last_packet_in.clear();
                }
                self.evaluate_flows();
            }
            EventAction::StopFlow(i) => {
                self.flows[i].active = false;
                self.flows[i].links.clear();
            }
        }
    }

    // ---- OLSR -----------------------------------------------------------

    fn on_hello_timer(&mut self, n: NodeId) {
        self.olsr_broadcast(n, Body::Hello, None);
        let unit: f64 = self.nodes[n.index()].rng.gen();
        let next = self.sc.olsr.jittered(self.sc.olsr.hello_period(), unit);
        self.sched.schedule(next, n, Ev::Hello);
    }

    fn on_flood_timer(&mut self, n: NodeId) {
        self.originate_ls(n);
        let unit: f64 = self.nodes[n.index()].rng.gen();
        let next = self.sc.olsr.jittered(self.sc.olsr.tc_period(), unit);
        self.sched.schedule(next, n, Ev::Flood);
    }

    fn originate_ls(&mut self, n: NodeId) {
        let now = self.now();
        let cfg = self.sc.olsr.clone();
        let rt = &mut self.nodes[n.index()];
        let Some(olsr) = rt.olsr.as_mut() else {
            return;
        };
        let msg = olsr.originate(now, &cfg);
        rt.last_own = Some(msg.clone());
        self.olsr_broadcast(n, Body::LinkState(msg), None);
    }

    fn send_db(&mut self, n: NodeId, to: NodeId) {
        let now = self.now();
        let rt = &self.nodes[n.index()];
        let Some(olsr) = rt.olsr.as_ref() else {
            return;
        };
        let mut msgs: Vec<LsMessage> = olsr.db.live(now).cloned().collect();
        if let Some(own) = rt.last_own.as_ref().filter(|m| m.valid_until > now) {
            msgs.push(own.clone());
        }
        for m in msgs {
            if m.origin != to {
                self.olsr_unicast(n, to, Body::LinkState(m));
            }
        }
    }

    fn topology_changed(&mut self, n: NodeId, new_neighbor: Option<NodeId>) {
        self.originate_ls(n);
        if let Some(p) = new_neighbor {
            self.send_db(n, p);
            self.olsr_unicast(n, p, Body::DbRequest);
        }
        self.recompute(n);
    }

    fn on_neighbor_check(&mut self, n: NodeId) {
        let now = self.now();
        let cfg = self.sc.olsr.clone();
        let lost = match self.nodes[n.index()].olsr.as_mut() {
            Some(o) => o.neighbors.expire(now, &cfg),
            None => return,
        };
        if !lost.is_empty() {
            self.topology_changed(n, None);
        }
    }

    fn on_db_expiry(&mut self, n: NodeId) {
        let now = self.now();
        let purged = match self.nodes[n.index()].olsr.as_mut() {
            Some(o) => o.db.purge(now),
            None => return,
        };
        if !purged.is_empty() {
            self.recompute(n);
        }
    }

    fn recompute(&mut self, n: NodeId) {
        let now = self.now();
        let topo = &self.sc.topology;
        let Some(olsr) = self.nodes[n.index()].olsr.as_mut() else {
            return;
        };
        if !olsr.recompute(now, |id| topo.node(id).main_address()) {
            return;
        }
        let routes = olsr.routes.len();
        let node = self.name(n);
        self.emit(RecordBody::OlsrRouteChange { node, routes });
        self.resync_emergency(n);
    }

    fn on_olsr_frame(&mut self, n: NodeId, link: LinkId, frame: Frame) {
        let now = self.now();
        let from = self.sc.topology.link(link).other(n);
        let cfg = self.sc.olsr.clone();
        let Some(olsr) = self.nodes[n.index()].olsr.as_mut() else {
            return;
        };
        match frame.body {
            Body::Hello => {
                let became = olsr.neighbors.on_hello(from, frame.header.src, now, &cfg);
                let check = cfg.neighbor_hold() + SimTime::from_micros(1);
                self.sched.schedule(check, n, Ev::NeighborCheck);
                if became {
                    self.topology_changed(n, Some(from));
                }
            }
            Body::LinkState(msg) => {
                if let LsOutcome::Stored { changed } = olsr.on_ls(from, &msg, now) {
                    self.sched.schedule_at(msg.valid_until, n, Ev::DbExpiry).expect("future");
                    self.olsr_broadcast(n, Body::LinkState(msg), Some(from));
                    if changed {
                        self.recompute(n);
                    }
                }
            }
            Body::DbRequest => {
                if olsr.neighbors.is_sym(from) {
                    self.send_db(n, from);
                }
            }
            _ => unreachable!("not an OLSR body"),
        }
    }

    // ---- IP forwarding --------------------------------------------------

    fn on_deliver(&mut self, n: NodeId, link: LinkId, frame: Frame) {
        if !self.sc.topology.link(link).is_up() {
            return;
        }
        if frame.header.kind == PacketKind::OlsrMsg {
            self.on_olsr_frame(n, link, frame);
            return;
        }
        let node = self.sc.topology.node(n);
        if node.owns(frame.header.dst) {
            self.local_receive(n, frame);
        } else if node.kind == NodeKind::Wmr {
            self.switch_packet(n, frame);
        } else {
            self.drop_packet(n, &frame, "not_for_me");
        }
    }

    /// Sends a packet created at `n`.
    fn originate(&mut self, n: NodeId, frame: Frame) {
        let topo = &self.sc.topology;
        let src_kind = topo.node(n).kind;
        if src_kind == NodeKind::Controller
            && topo.node_by_address(frame.header.dst).is_some_and(|d| topo.node(d).kind == NodeKind::Controller)
        {
            self.stats.controller_to_controller += 1;
        }
        if topo.node(n).owns(frame.header.dst) {
            self.local_receive(n, frame);
            return;
        }
        match src_kind {
            NodeKind::Wmr => self.switch_packet(n, frame),
            NodeKind::Host => {
                let l = topo.incident(n)[0];
                if !self.send_on(l, n, frame.clone()) {
                    self.drop_packet(n, &frame, "link_down");
                }
            }
            NodeKind::Controller => {
                let hop = self.nodes[n.index()]
                    .olsr
                    .as_ref()
                    .and_then(|o| o.routes.lookup(frame.header.dst))
                    .map(|(_, r)| r.next_hop);
                match hop {
                    Some(NextHop::Via(next)) => self.forward_to(n, next, frame),
                    Some(NextHop::Local) => self.local_receive(n, frame),
                    None => self.drop_packet(n, &frame, "no_route"),
                }
            }
        }
    }

    fn forward_to(&mut self, n: NodeId, next: NodeId, frame: Frame) {
        match self.sc.topology.link_between(n, next) {
            Some(l) => {
                if !self.send_on(l, n, frame.clone()) {
                    self.drop_packet(n, &frame, "link_down");
                }
            }
            None => self.drop_packet(n, &frame, "no_link"),
        }
    }

    fn purge_rules(&mut self, n: NodeId) {
        let now = self.now();
        let gone = match self.nodes[n.index()].wmr.as_mut() {
            Some(w) => w.switch.table.expire(now),
            None => return,
        };
        for r in gone {
            self.rule_event(n, "expire", &r);
        }
    }

    fn switch_packet(&mut self, n: NodeId, frame: Frame) {
        self.purge_rules(n);
        let now = self.now();
        let rt = &mut self.nodes[n.index()];
        let (Some(w), Some(olsr)) = (rt.wmr.as_mut(), rt.olsr.as_ref()) else {
            return;
        };
        let connected = w.eftm.master().is_some();
        match w.switch.forward(&frame.header, &olsr.routes, connected, now) {
            Disposition::SentTo(next) => self.forward_to(n, next, frame),
            Disposition::DeliveredLocal => self.deliver_local(n, frame),
            Disposition::PacketIn => self.packet_in(n, frame),
            Disposition::Dropped(reason) => {
                let reason = format!("{reason:?}");
                self.drop_packet(n, &frame, &reason);
            }
        }
    }

    fn deliver_local(&mut self, n: NodeId, frame: Frame) {
        let topo = &self.sc.topology;
        let dst = frame.header.dst;
        if topo.node(n).owns(dst) {
            self.local_receive(n, frame);
            return;
        }
        let host_link = topo.incident(n).iter().copied().find(|&l| {
            let peer = topo.node(topo.link(l).other(n));
            peer.kind == NodeKind::Host && peer.owns(dst)
        });
        if let Some(l) = host_link {
            if !self.send_on(l, n, frame.clone()) {
                self.drop_packet(n, &frame, "link_down");
            }
        } else if topo.node(n).gateway && !self.sc.control_subnet.contains(dst) {
            // handed to the Internet uplink
        } else {
            self.drop_packet(n, &frame, "no_local_destination");
        }
    }

    fn drop_packet(&mut self, n: NodeId, frame: &Frame, reason: &str) {
        self.stats.packets_dropped += 1;
        let node = self.name(n);
        self.emit(RecordBody::PacketDrop {
            node,
            dst: frame.header.dst,
            reason: reason.to_string(),
        });
    }

    fn control_frame(&self, from: NodeId, to: Address, body: Body) -> Frame {
        Frame {
            header: Packet {
                src: self.sc.topology.node(from).main_address(),
                dst: to,
                size: CONTROL_BYTES,
                kind: PacketKind::ControlChannel,
                flow_id: None,
            },
            body,
        }
    }

    fn packet_in(&mut self, n: NodeId, frame: Frame) {
        let Some(master) = self.eftm(n).and_then(|e| e.master()) else {
            self.drop_packet(n, &frame, "no_controller");
            return;
        };
        self.stats.packet_ins += 1;
        let id = self.next_buffer;
        self.next_buffer += 1;
        let header = frame.header;
        self.buffers.insert(id, (n, frame));
        let hold = SimTime::from_secs_f64(self.sc.sim.packet_in_buffer);
        self.sched.schedule(hold, n, Ev::BufferExpiry(id));
        let msg = self.control_frame(n, master, Body::PacketIn(header));
        self.originate(n, msg);
    }

    fn release_buffered(&mut self, n: NodeId, rule: &FlowRule) {
        let ids: Vec<u64> = self
            .buffers
            .iter()
            .filter(|(_, (at, f))| *at == n && rule.matcher.matches(&f.header))
            .map(|(id, _)| *id)
            .collect();
        for id in ids {
            if let Some((_, frame)) = self.buffers.remove(&id) {
                self.switch_packet(n, frame);
            }
        }
    }

    fn local_receive(&mut self, n: NodeId, frame: Frame) {
        let now = self.now();
        let src = frame.header.src;
        match frame.body {
            Body::Echo { probe, seq, sent } => {
                let reply = Frame {
                    header: Packet {
                        src: frame.header.dst,
                        dst: src,
                        ..frame.header
                    },
                    body: Body::EchoReply { probe, seq, sent },
                };
                self.originate(n, reply);
            }
            Body::EchoReply { probe, seq, sent } => {
                let name = self.sc.probes[probe].name.clone();
                self.emit(RecordBody::PingResult {
                    probe: name,
                    seq,
                    sent,
                    rtt: now - sent,
                });
            }
            Body::Eftm(msg) => self.controller_receive(n, src, msg, None),
            Body::PacketIn(pkt) => self.controller_receive(n, src, EftmMsg::Close, Some(pkt)),
            Body::Ctrl(msg) => self.wmr_receive(n, src, msg),
            Body::Data => {}
            Body::Hello | Body::LinkState(_) | Body::DbRequest => {}
        }
    }

    // ---- controllers ----------------------------------------------------

    fn controller_pull(&mut self, c: NodeId) {
        let now = self.now();
        let Some(attached) = self.nodes[c.index()].ctrl.as_ref().map(|l| l.attached_wmr) else {
            return;
        };
        let up = self
            .sc
            .topology
            .link_between(c, attached)
            .is_some_and(|l| self.sc.topology.link(l).is_up());
        let view = if up {
            self.nodes[attached.index()].olsr.as_ref().map(|o| TopoView::from_node(o, now))
        } else {
            None
        };
        let out = self.nodes[c.index()].ctrl.as_mut().map(|l| l.refresh(view, now)).unwrap_or_default();
        self.apply_ctrl(c, out);
    }

    fn controller_receive(&mut self, c: NodeId, src: Address, msg: EftmMsg, packet_in: Option<Packet>) {
        let now = self.now();
        let Some(wmr) = self
            .sc
            .topology
            .node_by_address(src)
            .filter(|w| self.sc.topology.node(*w).kind == NodeKind::Wmr)
        else {
            return;
        };
        if packet_in.is_some() {
            self.controller_pull(c);
        }
        let Some(logic) = self.nodes[c.index()].ctrl.as_mut() else {
            return;
        };
        logic.heard(wmr, now);
        let out = match (packet_in, msg) {
            (Some(p), _) => {
                if logic.is_connected(wmr) {
                    logic.on_packet_in(wmr, &p, now)
                } else {
                    Vec::new()
                }
            }
            (None, EftmMsg::Probe { nonce }) => logic.on_probe(wmr, nonce),
            (None, EftmMsg::Connect { nonce }) => logic.on_connect(wmr, nonce, now),
            (None, EftmMsg::Close) => logic.on_close(wmr),
            (None, EftmMsg::Keepalive { seq }) => logic.on_keepalive(wmr, seq, now),
        };
        self.apply_ctrl(c, out);
    }

    fn apply_ctrl(&mut self, c: NodeId, out: Vec<ControllerOutput>) {
        for o in out {
            match o {
                ControllerOutput::Send { to, msg } => {
                    let addr = self.sc.topology.node(to).main_address();
                    let frame = self.control_frame(c, addr, Body::Ctrl(msg));
                    self.originate(c, frame);
                }
                ControllerOutput::Log(action) => {
                    let controller = self.name(c);
                    self.emit(RecordBody::ControllerAction {
                        controller,
                        action: action.to_string(),
                    });
                }
            }
        }
    }

    // ---- WMR agent ------------------------------------------------------

    fn wmr_receive(&mut self, n: NodeId, src: Address, msg: CtrlMsg) {
        let now = self.now();
        let Some(w) = self.nodes[n.index()].wmr.as_mut() else {
            return;
        };
        let out = match msg {
            CtrlMsg::ProbeAck { nonce } => w.eftm.on_probe_ack(now, src, nonce),
            CtrlMsg::ConnectAccept { nonce } => w.eftm.on_connect_accept(now, src, nonce),
            CtrlMsg::KeepaliveReply { seq } => {
                w.eftm.on_keepalive_reply(now, src, seq);
                Vec::new()
            }
            CtrlMsg::Flush(filter) => {
                if w.eftm.master() == Some(src) {
                    self.flush(n, filter);
                    self.evaluate_flows();
                }
                Vec::new()
            }
            CtrlMsg::FlowMod(rule) => {
                if w.eftm.master() == Some(src) && rule.origin == RuleOrigin::Controller(src) {
                    w.switch.table.install(rule, now);
                    self.rule_event(n, "install", &rule);
                    self.release_buffered(n, &rule);
                    self.evaluate_flows();
                }
                Vec::new()
            }
        };
        self.apply_eftm(n, out);
    }

    fn candidates(&mut self, n: NodeId) -> Vec<crate::eftm::ControllerEntry> {
        let now = self.now();
        let rt = &mut self.nodes[n.index()];
        let (Some(w), Some(o)) = (rt.wmr.as_mut(), rt.olsr.as_ref()) else {
            return Vec::new();
        };
        w.eftm.discover(&o.hna_db(now), now)
    }

    fn poll(&mut self, n: NodeId) {
        let now = self.now();
        let cands = self.candidates(n);
        let Some(w) = self.nodes[n.index()].wmr.as_mut() else {
            return;
        };
        let out = w.eftm.poll_tick(now, &cands);
        self.apply_eftm(n, out);
    }

    fn on_eftm_timer(&mut self, n: NodeId, t: EftmTimer) {
        let now = self.now();
        if t == EftmTimer::ImmediatePoll {
            self.poll(n);
            return;
        }
        let Some(w) = self.nodes[n.index()].wmr.as_mut() else {
            return;
        };
        let out = match t {
            EftmTimer::ProbeTimeout { nonce } => w.eftm.on_probe_timeout(now, nonce),
            EftmTimer::ConnectTimeout { nonce } => w.eftm.on_connect_timeout(now, nonce),
            EftmTimer::KeepaliveTick { epoch } => w.eftm.on_keepalive_tick(now, epoch),
            EftmTimer::KeepaliveDeadline { epoch, seq } => w.eftm.on_keepalive_deadline(now, epoch, seq),
            EftmTimer::ImmediatePoll => unreachable!(),
        };
        self.apply_eftm(n, out);
    }

    fn apply_eftm(&mut self, n: NodeId, out: Vec<EftmOutput>) {
        for o in out {
            match o {
                EftmOutput::Send { to, msg } => {
                    let frame = self.control_frame(n, to, Body::Eftm(msg));
                    self.originate(n, frame);
                }
                EftmOutput::Timer { after, timer } => {
                    self.sched.schedule(after, n, Ev::Eftm(timer));
                }
                EftmOutput::Transition { from, to } => {
                    let wmr = self.name(n);
                    self.emit(RecordBody::EftmTransition {
                        wmr,
                        from: from.label().to_string(),
                        to: to.label().to_string(),
                        controller: to.controller(),
                    });
                }
                EftmOutput::Connection { controller, status } => self.connection_event(n, controller, status),
                EftmOutput::Handover { .. } => {}
                EftmOutput::EnterEmergency(policy) => self.enter_emergency(n, &policy),
                EftmOutput::ExitEmergency => {
                    self.flush(n, OriginFilter::Eftm);
                    self.evaluate_flows();
                }
            }
        }
    }

    fn connection_event(&mut self, n: NodeId, controller: Address, status: ConnStatus) {
        let set = &mut self.nodes[n.index()].established;
        let violation = match status {
            ConnStatus::Established => {
                set.insert(controller);
                set.len() > 1
            }
            ConnStatus::Closed => {
                set.remove(&controller);
                false
            }
            ConnStatus::Opening => false,
        };
        let wmr = self.name(n);
        self.emit(RecordBody::Connection {
            wmr: wmr.clone(),
            controller,
            status,
        });
        if violation {
            self.stats.single_master_violations += 1;
            self.emit(RecordBody::Violation {
                what: format!("{wmr} holds more than one established connection"),
            });
        }
    }

    fn flush(&mut self, n: NodeId, filter: OriginFilter) {
        let gone = match self.nodes[n.index()].wmr.as_mut() {
            Some(w) => w.switch.table.flush(filter),
            None => return,
        };
        for r in gone {
            self.rule_event(n, "flush", &r);
        }
    }

    fn desired_emergency_rules(&self, n: NodeId, policy: &EmergencyPolicy) -> Vec<FlowRule> {
        match self.nodes[n.index()].olsr.as_ref() {
            Some(o) => emergency_rules(policy, &o.routes, self.sc.control_subnet),
            None => Vec::new(),
        }
    }

    fn enter_emergency(&mut self, n: NodeId, policy: &EmergencyPolicy) {
        if self.sc.eftm.clear_controller_rules {
            self.flush(n, OriginFilter::AnyController);
        }
        self.flush(n, OriginFilter::Eftm);
        self.install_eftm_rules(n, policy);
        self.evaluate_flows();
    }

    fn install_eftm_rules(&mut self, n: NodeId, policy: &EmergencyPolicy) {
        let now = self.now();
        for rule in self.desired_emergency_rules(n, policy) {
            if let Some(w) = self.nodes[n.index()].wmr.as_mut() {
                w.switch.table.install(rule, now);
            }
            self.rule_event(n, "install", &rule);
        }
    }

    /// Keeps route-derived emergency rules in step with the routing table.
    fn resync_emergency(&mut self, n: NodeId) {
        let Some(w) = self.nodes[n.index()].wmr.as_ref() else {
            return;
        };
        if !w.eftm.emergency_rules_active() {
            return;
        }
        let policy = match w.eftm.mode() {
            Mode::Emergency(p) => p.clone(),
            _ => self.sc.eftm.emergency_policy.clone(),
        };
        if policy == EmergencyPolicy::ControlOnly {
            return;
        }
        let desired = self.desired_emergency_rules(n, &policy);
        let current: Vec<FlowRule> = w.switch.table.rules().filter(|r| r.origin == RuleOrigin::Eftm).copied().collect();
        let same = desired.len() == current.len() && desired.iter().all(|d| current.iter().any(|c| c.same_rule(d)));
        if !same {
            self.flush(n, OriginFilter::Eftm);
            self.install_eftm_rules(n, &policy);
            self.evaluate_flows();
        }
    }

    fn rule_event(&mut self, n: NodeId, event: &str, rule: &FlowRule) {
        let table = self.flow_table(n).map(|t| t.dump()).unwrap_or_default();
        let wmr = self.name(n);
        self.emit(RecordBody::RuleEvent {
            wmr,
            event: event.to_string(),
            rule: rule.to_string(),
            table,
        });
    }

    // ---- traffic --------------------------------------------------------

    fn on_ping(&mut self, n: NodeId, i: usize) {
        let now = self.now();
        let p = self.sc.probes[i].clone();
        self.probe_seq[i] += 1;
        let frame = Frame {
            header: Packet {
                src: p.src_addr,
                dst: p.dst,
                size: p.size,
                kind: PacketKind::Ping,
                flow_id: None,
            },
            body: Body::Echo {
                probe: i,
                seq: self.probe_seq[i],
                sent: now,
            },
        };
        self.originate(n, frame);
        self.sched.schedule(p.interval, n, Ev::Ping(i));
    }

    /// Follows flow `i` through the switches. Returns the links of a
    /// complete path, or `None` if it dead-ends.
    fn walk(&mut self, i: usize) -> Option<Vec<LinkId>> {
        let now = self.now();
        let f = self.sc.flows[i].clone();
        let pkt = Packet {
            src: f.src_addr,
            dst: f.dst_addr,
            size: DATA_BYTES,
            kind: PacketKind::Data,
            flow_id: Some(i as u32),
        };
        let (first, l0) = self.sc.attachment(f.src)?;
        if !self.sc.topology.link(l0).is_up() {
            return None;
        }
        let mut links = vec![l0];
        let mut at = first;
        let mut visited = BTreeSet::new();
        loop {
            if !visited.insert(at) {
                return None;
            }
            self.purge_rules(at);
            let rt = &mut self.nodes[at.index()];
            let (w, olsr) = (rt.wmr.as_mut()?, rt.olsr.as_ref()?);
            let connected = w.eftm.master().is_some();
            match w.switch.forward(&pkt, &olsr.routes, connected, now) {
                Disposition::SentTo(next) => {
                    let l = self.sc.topology.link_between(at, next)?;
                    if !self.sc.topology.link(l).is_up() || self.sc.topology.node(next).kind != NodeKind::Wmr {
                        return None;
                    }
                    links.push(l);
                    at = next;
                }
                Disposition::DeliveredLocal => {
                    let l = self.sc.topology.link_between(at, f.dst)?;
                    return self.sc.topology.link(l).is_up().then(|| {
                        links.push(l);
                        links
                    });
                }
                Disposition::PacketIn => {
                    let gap = SimTime::from_secs_f64(self.sc.sim.packet_in_min_gap);
                    let last = self.flows[i].last_packet_in.get(&at).copied();
                    if last.is_none_or(|t| now.saturating_sub(t) >= gap) {
                        self.flows[i].last_packet_in.insert(at, now);
                        self.packet_in(at, Frame { header: pkt, body: Body::Data });
                    }
                    return None;
                }
                Disposition::Dropped(_) => return None,
            }
        }
    }

    fn evaluate_flows(&mut self) {
        let now = self.now();
        for i in 0..self.flows.len() {
            if !self.flows[i].active {
                continue;
            }
            let path = self.walk(i);
            let recovery = self.sc.flows[i].loss_recovery_delay;
            let f = &mut self.flows[i];
            f.phase = f.phase.step(path.is_some(), now, recovery);
            f.links = path.unwrap_or_default();
        }
    }

    fn sample(&mut self) {
        self.evaluate_flows();
        let now = self.now();
        let active: Vec<usize> = (0..self.flows.len()).filter(|&i| self.flows[i].active).collect();
        let topo = &self.sc.topology;
        let demands: Vec<FlowDemand> = active
            .iter()
            .map(|&i| {
                let f = &self.flows[i];
                let factor = f.phase.rate_factor(now, self.sc.flows[i].loss_recovery_delay);
                let bottleneck = f
                    .links
                    .iter()
                    .map(|l| topo.link(*l).capacity_bps)
                    .fold(f64::INFINITY, f64::min);
                let cap = self.sc.flows[i].demand_bps.unwrap_or(f64::INFINITY).min(bottleneck);
                FlowDemand {
                    links: f.links.clone(),
                    demand: if factor > 0.0 && cap.is_finite() { factor * cap } else { 0.0 },
                }
            })
            .collect();
        let rates = max_min_fair(&demands, |l| topo.link(l).capacity_bps);
        for (k, &i) in active.iter().enumerate() {
            let flow = self.sc.flows[i].name.clone();
            self.emit(RecordBody::ThroughputSample { flow, rate_bps: rates[k] });
        }
    }
}

/// Runs one (scenario, seed) to completion.
pub fn run(scenario: &Scenario, seed: u64) -> RunOutput {
    World::new(scenario, seed).finish()
}
