//! Scenario files: TOML description of the mesh, its configuration, the
//! traffic and the scripted events of a run.
//!
//! Loading is two-step. The text is parsed into raw serde structs, then
//! checked and resolved into a [`Scenario`] where every name has become an
//! id. Errors carry the line/column for syntax problems and the field path
//! (`links[3].b`) for semantic ones.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use crate::addr::{parse_interface, Address, Prefix};
use crate::controller::{ControllerConfig, PathOverride};
use crate::eftm::EftmConfig;
use crate::metrics::{MeasureKind, MeasureSpec};
use crate::olsr::OlsrConfig;
use crate::time::SimTime;
use crate::topology::{Interface, InterfaceRole, LinkId, LinkState, NodeId, NodeKind, Topology};
use crate::traffic::{BulkFlow, PingProbe};

pub const MERGE_TOML: &str = include_str!("../../../scenarios/merge.toml");
pub const PARTITION_TOML: &str = include_str!("../../../scenarios/partition.toml");

/// Defaults for links between two WMRs.
pub const MESH_CAPACITY_BPS: f64 = 10e6;
pub const MESH_DELAY_S: f64 = 0.002;
/// Defaults for links attaching a host or controller to a WMR.
pub const ATTACH_CAPACITY_BPS: f64 = 100e6;
pub const ATTACH_DELAY_S: f64 = 0.0005;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
    #[error("cannot read {path}")]
    Io { path: String, source: std::io::Error },
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimParams {
    /// Seconds between throughput samples.
    pub sample_interval: f64,
    /// Seconds a packet waits at a switch for the controller's answer.
    pub packet_in_buffer: f64,
    /// Minimum seconds between packet-ins for the same flow at one switch.
    pub packet_in_min_gap: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            sample_interval: 0.1,
            packet_in_buffer: 1.0,
            packet_in_min_gap: 1.0,
        }
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum SeedSpec {
    List(Vec<u64>),
    Range(String),
}

/// Parses `a..=b` (inclusive) or `a..b` (exclusive).
pub fn parse_seed_range(s: &str) -> Result<Vec<u64>, String> {
    let bad = || format!("expected `a..=b` or `a..b`, got `{s}`");
    let (lo, hi, inclusive) = if let Some((a, b)) = s.split_once("..=") {
        (a, b, true)
    } else if let Some((a, b)) = s.split_once("..") {
        (a, b, false)
    } else {
        let one: u64 = s.trim().parse().map_err(|_| bad())?;
        return Ok(vec![one]);
    };
    let lo: u64 = lo.trim().parse().map_err(|_| bad())?;
    let hi: u64 = hi.trim().parse().map_err(|_| bad())?;
    let seeds: Vec<u64> = if inclusive { (lo..=hi).collect() } else { (lo..hi).collect() };
    if seeds.is_empty() {
        return Err(format!("seed range `{s}` is empty"));
    }
    Ok(seeds)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    name: String,
    duration: f64,
    seeds: Option<SeedSpec>,
    control_subnet: Option<Prefix>,
    #[serde(default)]
    olsr: OlsrConfig,
    #[serde(default)]
    eftm: EftmConfig,
    #[serde(default)]
    sim: SimParams,
    #[serde(default)]
    nodes: Vec<RawNode>,
    #[serde(default)]
    links: Vec<RawLink>,
    #[serde(default)]
    controllers: Vec<RawController>,
    #[serde(default)]
    probes: Vec<RawProbe>,
    #[serde(default)]
    flows: Vec<RawFlow>,
    #[serde(default)]
    events: Vec<RawEvent>,
    measure: Option<RawMeasure>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNode {
    name: String,
    kind: NodeKind,
    #[serde(default)]
    gateway: bool,
    #[serde(default)]
    addresses: Vec<RawIface>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawIface {
    addr: String,
    role: InterfaceRole,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLink {
    name: Option<String>,
    a: String,
    b: String,
    capacity: Option<f64>,
    delay: Option<f64>,
    state: Option<LinkState>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawController {
    node: String,
    flush_on_connect: Option<bool>,
    rule_idle_timeout: Option<f64>,
    drop_hard_timeout: Option<f64>,
    refresh_interval: Option<f64>,
    accepting: Option<bool>,
    #[serde(default)]
    path_overrides: Vec<RawOverride>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOverride {
    dst: Prefix,
    path: Vec<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProbe {
    name: String,
    src: String,
    dst: Address,
    interval: Option<f64>,
    start: Option<f64>,
    size: Option<u32>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFlow {
    name: String,
    src: String,
    dst: String,
    demand: Option<f64>,
    start: Option<f64>,
    stop: Option<f64>,
    loss_recovery_delay: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum RawAction {
    LinkUp,
    LinkDown,
    StartFlow,
    StopFlow,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEvent {
    at: f64,
    action: RawAction,
    link: Option<String>,
    flow: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMeasure {
    kind: MeasureKind,
    event_at: f64,
    probe: Option<String>,
    flow: Option<String>,
    #[serde(default)]
    wmrs: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EventAction {
    LinkUp(LinkId),
    LinkDown(LinkId),
    StartFlow(usize),
    StopFlow(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScenarioEvent {
    pub at: SimTime,
    pub action: EventAction,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControllerSpec {
    pub node: NodeId,
    pub attached_wmr: NodeId,
    pub cfg: ControllerConfig,
    pub overrides: Vec<PathOverride>,
}

/// A validated scenario. Names have been resolved to ids.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub name: String,
    pub duration: SimTime,
    pub seeds: Vec<u64>,
    pub control_subnet: Prefix,
    pub olsr: OlsrConfig,
    pub eftm: EftmConfig,
    pub sim: SimParams,
    pub topology: Topology,
    pub controllers: Vec<ControllerSpec>,
    pub probes: Vec<PingProbe>,
    pub flows: Vec<BulkFlow>,
    pub events: Vec<ScenarioEvent>,
    pub measure: Option<MeasureSpec>,
}

fn secs(field: &str, v: f64) -> Result<SimTime, ScenarioError> {
    if !(v.is_finite() && v >= 0.0) {
        return Err(invalid(field, format!("must be a non-negative number of seconds, got {v}")));
    }
    Ok(SimTime::from_secs_f64(v))
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rfind('\n').map_or(before.len(), |i| before.len() - i - 1) + 1;
    (line, column)
}

fn parse_error(text: &str, e: &toml::de::Error) -> ScenarioError {
    let (line, column) = e.span().map_or((0, 0), |s| line_col(text, s.start));
    ScenarioError::Parse {
        line,
        column,
        message: e.message().to_string(),
    }
}

/// Sets `key` (dotted path, e.g. `eftm.poll_period`) in a parsed document.
/// The value is read as TOML, falling back to a plain string.
pub fn apply_override(doc: &mut toml::Table, key: &str, value: &str) -> Result<(), ScenarioError> {
    let parsed: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {value}")) {
        Ok(mut t) => t.remove("v").expect("just parsed"),
        Err(_) => toml::Value::String(value.to_string()),
    };
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| invalid(key, "empty override key"))?;
    let mut table = doc;
    for p in parts {
        table = table
            .entry(p)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| invalid(key, format!("`{p}` is not a table")))?;
    }
    table.insert(last.to_string(), parsed);
    Ok(())
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Scenario, ScenarioError> {
        Self::from_toml_with(text, &[])
    }

    /// Parses and applies `key=value` overrides before validation.
    pub fn from_toml_with(text: &str, overrides: &[(String, String)]) -> Result<Scenario, ScenarioError> {
        if overrides.is_empty() {
            let raw: RawScenario = toml::from_str(text).map_err(|e| parse_error(text, &e))?;
            return Self::build(raw);
        }
        let mut doc: toml::Table = toml::from_str(text).map_err(|e| parse_error(text, &e))?;
        for (k, v) in overrides {
            apply_override(&mut doc, k, v)?;
        }
        let raw = RawScenario::deserialize(doc).map_err(|e| ScenarioError::Parse {
            line: 0,
            column: 0,
            message: e.message().to_string(),
        })?;
        Self::build(raw)
    }

    pub fn load(path: &Path) -> Result<Scenario, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    /// One of the bundled scenarios, by name.
    pub fn builtin(name: &str) -> Option<Scenario> {
        let text = match name {
            "merge" => MERGE_TOML,
            "partition" => PARTITION_TOML,
            _ => return None,
        };
        Some(Self::from_toml(text).expect("bundled scenario is valid"))
    }

    fn build(raw: RawScenario) -> Result<Scenario, ScenarioError> {
        if raw.name.trim().is_empty() || raw.name.contains(',') {
            return Err(invalid("name", "must be non-empty and contain no commas"));
        }
        let duration = secs("duration", raw.duration)?;
        if duration == SimTime::ZERO {
            return Err(invalid("duration", "must be positive"));
        }
        let seeds = match raw.seeds {
            None => vec![1],
            Some(SeedSpec::List(v)) if v.is_empty() => return Err(invalid("seeds", "empty list")),
            Some(SeedSpec::List(v)) => v,
            Some(SeedSpec::Range(s)) => parse_seed_range(&s).map_err(|m| invalid("seeds", m))?,
        };
        let control_subnet = raw
            .control_subnet
            .unwrap_or(Prefix::new(Address::new(10, 0, 0, 0), 16).expect("valid"));
        raw.olsr.validate().map_err(|m| invalid("olsr", m))?;
        raw.eftm.validate().map_err(|m| invalid("eftm", m))?;
        if !control_subnet.covers(raw.eftm.controller_range) {
            return Err(invalid(
                "eftm.controller_range",
                format!("{} is not inside control_subnet {control_subnet}", raw.eftm.controller_range),
            ));
        }
        for (name, v) in [
            ("sim.sample_interval", raw.sim.sample_interval),
            ("sim.packet_in_buffer", raw.sim.packet_in_buffer),
            ("sim.packet_in_min_gap", raw.sim.packet_in_min_gap),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(invalid(name, format!("must be positive, got {v}")));
            }
        }

        let mut topo = Topology::new();
        let mut owners: BTreeMap<Address, String> = BTreeMap::new();
        for (i, n) in raw.nodes.iter().enumerate() {
            let field = format!("nodes[{i}]");
            let mut ifaces = Vec::new();
            for (j, a) in n.addresses.iter().enumerate() {
                let f = format!("{field}.addresses[{j}]");
                let (addr, subnet) = parse_interface(&a.addr).map_err(|e| invalid(&f, e.to_string()))?;
                if let Some(prev) = owners.insert(addr, n.name.clone()) {
                    return Err(invalid(&f, format!("address {addr} already used by {prev}")));
                }
                ifaces.push(Interface { addr, subnet, role: a.role });
            }
            Self::check_interfaces(&field, n, &ifaces, control_subnet, &raw.eftm)?;
            topo.add_node(&n.name, n.kind, n.gateway, ifaces)
                .map_err(|e| invalid(format!("{field}.name"), e.to_string()))?;
        }
        if topo.ids_of(NodeKind::Wmr).next().is_none() {
            return Err(invalid("nodes", "at least one wmr is required"));
        }

        for (i, l) in raw.links.iter().enumerate() {
            let field = format!("links[{i}]");
            let a = topo.node_id(&l.a).map_err(|e| invalid(format!("{field}.a"), e.to_string()))?;
            let b = topo.node_id(&l.b).map_err(|e| invalid(format!("{field}.b"), e.to_string()))?;
            let (ka, kb) = (topo.node(a).kind, topo.node(b).kind);
            let mesh = ka == NodeKind::Wmr && kb == NodeKind::Wmr;
            if !mesh && ka != NodeKind::Wmr && kb != NodeKind::Wmr {
                return Err(invalid(&field, "hosts and controllers can only attach to a wmr"));
            }
            let (cap, delay) = if mesh {
                (MESH_CAPACITY_BPS, MESH_DELAY_S)
            } else {
                (ATTACH_CAPACITY_BPS, ATTACH_DELAY_S)
            };
            let name = l.name.clone().unwrap_or_else(|| format!("{}-{}", l.a, l.b));
            let delay = secs(&format!("{field}.delay"), l.delay.unwrap_or(delay))?;
            topo.add_link(&name, a, b, l.capacity.unwrap_or(cap), delay, l.state.unwrap_or(LinkState::Up))
                .map_err(|e| invalid(&field, e.to_string()))?;
        }

        for n in topo.nodes() {
            let deg = topo.incident(n.id).len();
            if n.kind != NodeKind::Wmr && deg != 1 {
                return Err(invalid(
                    format!("nodes.{}", n.name),
                    format!("a {:?} needs exactly one link to a wmr, has {deg}", n.kind).to_lowercase(),
                ));
            }
        }
        for n in topo.nodes().iter().filter(|n| n.kind == NodeKind::Host) {
            let wmr = topo.link(topo.incident(n.id)[0]).other(n.id);
            let w = topo.node(wmr);
            for i in &n.interfaces {
                let in_access = w.interfaces_with(InterfaceRole::Access).any(|a| a.subnet.contains(i.addr));
                if !in_access && !control_subnet.contains(i.addr) {
                    return Err(invalid(
                        format!("nodes.{}.addresses", n.name),
                        format!("{} is neither in an access subnet of {} nor in the control subnet", i.addr, w.name),
                    ));
                }
            }
        }

        let mut controllers = Vec::new();
        let mut configured: BTreeSet<NodeId> = BTreeSet::new();
        for (i, c) in raw.controllers.iter().enumerate() {
            let field = format!("controllers[{i}]");
            let node = topo.node_id(&c.node).map_err(|e| invalid(format!("{field}.node"), e.to_string()))?;
            if topo.node(node).kind != NodeKind::Controller {
                return Err(invalid(format!("{field}.node"), format!("{} is not a controller", c.node)));
            }
            if !configured.insert(node) {
                return Err(invalid(format!("{field}.node"), format!("{} configured twice", c.node)));
            }
            let d = ControllerConfig::default();
            let cfg = ControllerConfig {
                flush_on_connect: c.flush_on_connect.unwrap_or(d.flush_on_connect),
                rule_idle_timeout: c.rule_idle_timeout.unwrap_or(d.rule_idle_timeout),
                drop_hard_timeout: c.drop_hard_timeout.unwrap_or(d.drop_hard_timeout),
                refresh_interval: c.refresh_interval.unwrap_or(d.refresh_interval),
                accepting: c.accepting.unwrap_or(d.accepting),
            };
            cfg.validate().map_err(|m| invalid(&field, m))?;
            let mut overrides = Vec::new();
            for (j, o) in c.path_overrides.iter().enumerate() {
                let f = format!("{field}.path_overrides[{j}]");
                let mut path = Vec::new();
                for name in &o.path {
                    let id = topo.node_id(name).map_err(|e| invalid(&f, e.to_string()))?;
                    if topo.node(id).kind != NodeKind::Wmr {
                        return Err(invalid(&f, format!("{name} is not a wmr")));
                    }
                    path.push(id);
                }
                if path.is_empty() {
                    return Err(invalid(&f, "empty path"));
                }
                overrides.push(PathOverride { dst: o.dst, path });
            }
            controllers.push(ControllerSpec {
                node,
                attached_wmr: topo.link(topo.incident(node)[0]).other(node),
                cfg,
                overrides,
            });
        }
        for id in topo.ids_of(NodeKind::Controller).collect::<Vec<_>>() {
            if !configured.contains(&id) {
                controllers.push(ControllerSpec {
                    node: id,
                    attached_wmr: topo.link(topo.incident(id)[0]).other(id),
                    cfg: ControllerConfig::default(),
                    overrides: Vec::new(),
                });
            }
        }
        controllers.sort_by_key(|c| c.node);

        let mut probes = Vec::new();
        for (i, p) in raw.probes.iter().enumerate() {
            let field = format!("probes[{i}]");
            if probes.iter().any(|q: &PingProbe| q.name == p.name) {
                return Err(invalid(format!("{field}.name"), format!("duplicate probe `{}`", p.name)));
            }
            let src = topo.node_id(&p.src).map_err(|e| invalid(format!("{field}.src"), e.to_string()))?;
            let node = topo.node(src);
            // prefer a source address of the destination's traffic class
            let same_class = node
                .interfaces
                .iter()
                .find(|i| control_subnet.contains(i.addr) == control_subnet.contains(p.dst));
            let src_addr = same_class.or(node.interfaces.first()).map(|i| i.addr).ok_or_else(|| {
                invalid(format!("{field}.src"), format!("{} has no address", p.src))
            })?;
            let interval = secs(&format!("{field}.interval"), p.interval.unwrap_or(1.0))?;
            if interval == SimTime::ZERO {
                return Err(invalid(format!("{field}.interval"), "must be positive"));
            }
            probes.push(PingProbe {
                name: p.name.clone(),
                src,
                src_addr,
                dst: p.dst,
                interval,
                start: secs(&format!("{field}.start"), p.start.unwrap_or(0.0))?,
                size: p.size.unwrap_or(64),
            });
        }

        let mut flows = Vec::new();
        let mut events = Vec::new();
        for (i, f) in raw.flows.iter().enumerate() {
            let field = format!("flows[{i}]");
            if flows.iter().any(|g: &BulkFlow| g.name == f.name) {
                return Err(invalid(format!("{field}.name"), format!("duplicate flow `{}`", f.name)));
            }
            let host = |name: &str, sub: &str| -> Result<(NodeId, Address), ScenarioError> {
                let id = topo.node_id(name).map_err(|e| invalid(format!("{field}.{sub}"), e.to_string()))?;
                let n = topo.node(id);
                if n.kind != NodeKind::Host {
                    return Err(invalid(format!("{field}.{sub}"), format!("{name} is not a host")));
                }
                let addr = n
                    .interfaces
                    .iter()
                    .find(|i| !control_subnet.contains(i.addr))
                    .map(|i| i.addr)
                    .ok_or_else(|| invalid(format!("{field}.{sub}"), format!("{name} has no data address")))?;
                Ok((id, addr))
            };
            let (src, src_addr) = host(&f.src, "src")?;
            let (dst, dst_addr) = host(&f.dst, "dst")?;
            if let Some(d) = f.demand {
                if d.is_nan() || d <= 0.0 {
                    return Err(invalid(format!("{field}.demand"), "must be positive"));
                }
            }
            if let Some(s) = f.start {
                events.push(ScenarioEvent {
                    at: secs(&format!("{field}.start"), s)?,
                    action: EventAction::StartFlow(i),
                });
            }
            if let Some(s) = f.stop {
                events.push(ScenarioEvent {
                    at: secs(&format!("{field}.stop"), s)?,
                    action: EventAction::StopFlow(i),
                });
            }
            flows.push(BulkFlow {
                name: f.name.clone(),
                src,
                dst,
                src_addr,
                dst_addr,
                demand_bps: f.demand,
                loss_recovery_delay: secs(&format!("{field}.loss_recovery_delay"), f.loss_recovery_delay.unwrap_or(1.0))?,
            });
        }

        let mut last = SimTime::ZERO;
        for (i, e) in raw.events.iter().enumerate() {
            let field = format!("events[{i}]");
            let at = secs(&format!("{field}.at"), e.at)?;
            if at < last {
                return Err(invalid(format!("{field}.at"), "events must be listed in time order"));
            }
            last = at;
            if at > duration {
                return Err(invalid(format!("{field}.at"), "after the end of the run"));
            }
            let link = || -> Result<LinkId, ScenarioError> {
                let name = e.link.as_deref().ok_or_else(|| invalid(format!("{field}.link"), "missing"))?;
                topo.link_id(name).map_err(|err| invalid(format!("{field}.link"), err.to_string()))
            };
            let flow = || -> Result<usize, ScenarioError> {
                let name = e.flow.as_deref().ok_or_else(|| invalid(format!("{field}.flow"), "missing"))?;
                flows
                    .iter()
                    .position(|f| f.name == name)
                    .ok_or_else(|| invalid(format!("{field}.flow"), format!("unknown flow `{name}`")))
            };
            let action = match e.action {
                RawAction::LinkUp => EventAction::LinkUp(link()?),
                RawAction::LinkDown => EventAction::LinkDown(link()?),
                RawAction::StartFlow => EventAction::StartFlow(flow()?),
                RawAction::StopFlow => EventAction::StopFlow(flow()?),
            };
            events.push(ScenarioEvent { at, action });
        }
        events.sort_by_key(|e| e.at);

        let measure = match raw.measure {
            None => None,
            Some(m) => {
                if let Some(p) = &m.probe {
                    if !probes.iter().any(|q| &q.name == p) {
                        return Err(invalid("measure.probe", format!("unknown probe `{p}`")));
                    }
                }
                if let Some(f) = &m.flow {
                    if !flows.iter().any(|q| &q.name == f) {
                        return Err(invalid("measure.flow", format!("unknown flow `{f}`")));
                    }
                }
                for (i, w) in m.wmrs.iter().enumerate() {
                    let id = topo.node_id(w).map_err(|e| invalid(format!("measure.wmrs[{i}]"), e.to_string()))?;
                    if topo.node(id).kind != NodeKind::Wmr {
                        return Err(invalid(format!("measure.wmrs[{i}]"), format!("{w} is not a wmr")));
                    }
                }
                Some(MeasureSpec {
                    kind: m.kind,
                    event_at: secs("measure.event_at", m.event_at)?,
                    probe: m.probe,
                    flow: m.flow,
                    wmrs: m.wmrs,
                })
            }
        };

        Ok(Scenario {
            name: raw.name,
            duration,
            seeds,
            control_subnet,
            olsr: raw.olsr,
            eftm: raw.eftm,
            sim: raw.sim,
            topology: topo,
            controllers,
            probes,
            flows,
            events,
            measure,
        })
    }

    fn check_interfaces(
        field: &str,
        n: &RawNode,
        ifaces: &[Interface],
        control_subnet: Prefix,
        eftm: &EftmConfig,
    ) -> Result<(), ScenarioError> {
        let err = |m: String| Err(invalid(format!("{field}.addresses"), m));
        if ifaces.is_empty() {
            return err(format!("{} has no addresses", n.name));
        }
        if n.gateway && n.kind != NodeKind::Wmr {
            return Err(invalid(format!("{field}.gateway"), "only a wmr can be a gateway"));
        }
        match n.kind {
            NodeKind::Wmr => {
                let mesh: Vec<_> = ifaces.iter().filter(|i| i.role == InterfaceRole::Mesh).collect();
                if mesh.len() != 1 {
                    return err(format!("a wmr needs exactly one mesh address, {} has {}", n.name, mesh.len()));
                }
                for i in ifaces {
                    let in_ctl = control_subnet.contains(i.addr);
                    if (i.role == InterfaceRole::Mesh) != in_ctl {
                        return err(format!("{} ({:?}) must be inside the control subnet iff it is the mesh address", i.addr, i.role).to_lowercase());
                    }
                    if eftm.controller_range.contains(i.addr) {
                        return err(format!("{} is inside the controller range", i.addr));
                    }
                }
            }
            NodeKind::Controller => {
                if ifaces.len() != 1 || !eftm.controller_range.contains(ifaces[0].addr) {
                    return err(format!("a controller needs one address inside {}", eftm.controller_range));
                }
            }
            NodeKind::Host => {
                for i in ifaces {
                    if eftm.controller_range.contains(i.addr) {
                        return err(format!("{} is inside the controller range", i.addr));
                    }
                }
            }
        }
        Ok(())
    }

    /// Prefixes an OLSR node announces via HNA, and those it delivers
    /// locally.
    pub fn announcements(&self, id: NodeId) -> (Vec<Prefix>, Vec<Prefix>) {
        let n = self.topology.node(id);
        let mut hna = Vec::new();
        let mut local = vec![n.main_address().host_prefix()];
        match n.kind {
            NodeKind::Controller => hna.push(n.main_address().host_prefix()),
            NodeKind::Wmr => {
                for i in n.interfaces_with(InterfaceRole::Access) {
                    hna.push(i.subnet);
                }
                for i in n.interfaces_with(InterfaceRole::Internet) {
                    local.push(i.subnet);
                }
                for &l in self.topology.incident(id) {
                    let peer = self.topology.node(self.topology.link(l).other(id));
                    if peer.kind == NodeKind::Host {
                        for i in &peer.interfaces {
                            if self.control_subnet.contains(i.addr) {
                                hna.push(i.addr.host_prefix());
                            }
                        }
                    }
                }
                if n.gateway {
                    hna.push(Prefix::DEFAULT_ROUTE);
                }
            }
            NodeKind::Host => {}
        }
        hna.sort();
        hna.dedup();
        local.extend(hna.iter().copied());
        local.sort();
        local.dedup();
        (hna, local)
    }

    /// The WMR a host or controller hangs off, with the link.
    pub fn attachment(&self, id: NodeId) -> Option<(NodeId, LinkId)> {
        let n = self.topology.node(id);
        if n.kind == NodeKind::Wmr {
            return None;
        }
        let l = *self.topology.incident(id).first()?;
        Some((self.topology.link(l).other(id), l))
    }

    pub fn controller_spec(&self, id: NodeId) -> Option<&ControllerSpec> {
        self.controllers.iter().find(|c| c.node == id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = r#"
name = "small"
duration = 30.0
seeds = "1..=3"

[[nodes]]
name = "wmr1"
kind = "wmr"
addresses = [{ addr = "10.0.0.1/16", role = "mesh" }, { addr = "192.168.1.1/24", role = "access" }]

[[nodes]]
name = "wmr2"
kind = "wmr"
gateway = true
addresses = [{ addr = "10.0.0.2/16", role = "mesh" }]

[[nodes]]
name = "ctrl1"
kind = "controller"
addresses = [{ addr = "10.0.255.1/16", role = "mesh" }]

[[nodes]]
name = "h1"
kind = "host"
addresses = [{ addr = "192.168.1.10/24", role = "access" }, { addr = "10.0.0.101/16", role = "access" }]

[[links]]
a = "wmr1"
b = "wmr2"

[[links]]
a = "ctrl1"
b = "wmr2"

[[links]]
a = "h1"
b = "wmr1"
"#;

    #[test]
    fn small_scenario_loads_with_defaults() {
        let s = Scenario::from_toml(SMALL).unwrap();
        assert_eq!(s.seeds, vec![1, 2, 3]);
        assert_eq!(s.topology.nodes().len(), 4);
        let mesh = s.topology.link(s.topology.link_id("wmr1-wmr2").unwrap());
        assert_eq!(mesh.capacity_bps, MESH_CAPACITY_BPS);
        assert_eq!(mesh.delay, SimTime::from_millis(2));
        let att = s.topology.link(s.topology.link_id("ctrl1-wmr2").unwrap());
        assert_eq!(att.capacity_bps, ATTACH_CAPACITY_BPS);
        assert_eq!(s.controllers.len(), 1);
        assert_eq!(s.controllers[0].attached_wmr, s.topology.node_id("wmr2").unwrap());
        let (hna, local) = s.announcements(s.topology.node_id("wmr1").unwrap());
        let hna: Vec<String> = hna.iter().map(|p| p.to_string()).collect();
        assert_eq!(hna, vec!["10.0.0.101/32", "192.168.1.0/24"]);
        assert!(local.contains(&"10.0.0.1/32".parse().unwrap()));
        let (hna, _) = s.announcements(s.topology.node_id("wmr2").unwrap());
        assert_eq!(hna, vec![Prefix::DEFAULT_ROUTE]);
    }

    #[test]
    fn unknown_link_endpoint_reports_field() {
        let text = SMALL.replace("b = \"wmr2\"\n\n[[links]]\na = \"ctrl1\"", "b = \"wmr9\"\n\n[[links]]\na = \"ctrl1\"");
        let err = Scenario::from_toml(&text).unwrap_err().to_string();
        assert!(err.starts_with("links[0].b:"), "{err}");
        assert!(err.contains("wmr9"), "{err}");
    }

    #[test]
    fn syntax_error_reports_line() {
        let text = format!("{SMALL}\n[[links]\n");
        match Scenario::from_toml(&text).unwrap_err() {
            ScenarioError::Parse { line, .. } => assert_eq!(line, SMALL.lines().count() + 2),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn unknown_key_is_rejected() {
        let text = SMALL.replace("duration = 30.0", "duration = 30.0\nduraton = 3");
        assert!(matches!(Scenario::from_toml(&text), Err(ScenarioError::Parse { .. })));
    }

    #[test]
    fn controller_outside_range_is_rejected() {
        let text = SMALL.replace("10.0.255.1/16", "10.0.7.1/16");
        let err = Scenario::from_toml(&text).unwrap_err().to_string();
        assert!(err.starts_with("nodes[2].addresses"), "{err}");
    }

    #[test]
    fn host_outside_access_subnet_is_rejected() {
        let text = SMALL.replace("192.168.1.10/24", "192.168.7.10/24");
        assert!(Scenario::from_toml(&text).is_err());
    }

    #[test]
    fn overrides_change_parameters() {
        let s = Scenario::from_toml_with(
            SMALL,
            &[
                ("eftm.poll_period".into(), "1.5".into()),
                ("olsr.hello_interval".into(), "2".into()),
                ("name".into(), "tweaked".into()),
            ],
        )
        .unwrap();
        assert_eq!(s.eftm.poll_period, 1.5);
        assert_eq!(s.olsr.hello_interval, 2.0);
        assert_eq!(s.name, "tweaked");
    }

    #[test]
    fn seed_ranges() {
        assert_eq!(parse_seed_range("1..=3").unwrap(), vec![1, 2, 3]);
        assert_eq!(parse_seed_range("1..3").unwrap(), vec![1, 2]);
        assert_eq!(parse_seed_range("7").unwrap(), vec![7]);
        assert!(parse_seed_range("3..1").is_err());
        assert!(parse_seed_range("a..b").is_err());
    }

    #[test]
    fn bundled_scenarios_are_valid() {
        for name in ["merge", "partition"] {
            let s = Scenario::builtin(name).unwrap();
            assert_eq!(s.seeds, (1..=20).collect::<Vec<u64>>());
            assert!(s.measure.is_some());
        }
        assert!(Scenario::builtin("nope").is_none());
    }
}
