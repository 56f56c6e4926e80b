//! OLSR-lite: Hello-based neighbor sensing, full flooding of link-state and
//! HNA announcements, and hop-count route computation.
//!
//! Link sensing is a plain counter: a neighbor becomes symmetric after
//! `hellos_to_up` Hellos with no gap longer than the hold time, and is
//! dropped once nothing has been heard for
//! `hello_loss_intervals_to_down × hello_interval`.
//!
//! The types here do no I/O; the simulation feeds them messages and timer
//! expiries and ships whatever they produce.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::addr::{Address, Prefix};
use crate::time::SimTime;
use crate::topology::NodeId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OlsrConfig {
    /// Seconds between Hellos.
    pub hello_interval: f64,
    pub hellos_to_up: u32,
    pub hello_loss_intervals_to_down: u32,
    /// Seconds between periodic link-state/HNA floods.
    pub tc_interval: f64,
    /// Uniform jitter as a fraction of the interval, applied to every gap.
    pub hello_jitter: f64,
    /// Draw the first Hello/flood time uniformly within one interval
    /// instead of starting every node at t=0.
    pub random_start_phase: bool,
}

impl Default for OlsrConfig {
    fn default() -> Self {
        OlsrConfig {
            hello_interval: 5.0,
            hellos_to_up: 3,
            hello_loss_intervals_to_down: 3,
            tc_interval: 5.0,
            hello_jitter: 0.1,
            random_start_phase: true,
        }
    }
}

impl OlsrConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.hello_interval > 0.0 && self.hello_interval.is_finite()) {
            return Err(format!("hello_interval must be positive, got {}", self.hello_interval));
        }
        if !(self.tc_interval > 0.0 && self.tc_interval.is_finite()) {
            return Err(format!("tc_interval must be positive, got {}", self.tc_interval));
        }
        if self.hellos_to_up == 0 {
            return Err("hellos_to_up must be at least 1".into());
        }
        if self.hello_loss_intervals_to_down == 0 {
            return Err("hello_loss_intervals_to_down must be at least 1".into());
        }
        if !(0.0..0.5).contains(&self.hello_jitter) {
            return Err(format!("hello_jitter must be in [0, 0.5), got {}", self.hello_jitter));
        }
        Ok(())
    }

    pub fn hello_period(&self) -> SimTime {
        SimTime::from_secs_f64(self.hello_interval)
    }

    pub fn tc_period(&self) -> SimTime {
        SimTime::from_secs_f64(self.tc_interval)
    }

    /// Silence after which a neighbor record expires.
    pub fn neighbor_hold(&self) -> SimTime {
        SimTime::from_secs_f64(self.hello_interval * f64::from(self.hello_loss_intervals_to_down))
    }

    /// Validity of flooded link-state and HNA information.
    pub fn validity(&self) -> SimTime {
        SimTime::from_secs_f64(3.0 * self.tc_interval)
    }

    /// `base × (1 + draw)` where `draw` is uniform in `[-jitter, jitter]`
    /// and `unit` is a uniform sample in `[0, 1)`.
    pub fn jittered(&self, base: SimTime, unit: f64) -> SimTime {
        let draw = (2.0 * unit - 1.0) * self.hello_jitter;
        base.mul_f64(1.0 + draw)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NeighborStatus {
    Heard,
    Sym,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeighborRecord {
    pub neighbor: NodeId,
    pub addr: Address,
    pub consecutive_hellos: u32,
    pub last_hello_at: SimTime,
    pub status: NeighborStatus,
}

#[derive(Clone, Debug, Default)]
pub struct NeighborTable {
    records: BTreeMap<NodeId, NeighborRecord>,
}

impl NeighborTable {
    /// Counts a Hello from `from`. Returns true when this Hello made the
    /// neighbor symmetric.
    pub fn on_hello(&mut self, from: NodeId, addr: Address, now: SimTime, cfg: &OlsrConfig) -> bool {
        let hold = cfg.neighbor_hold();
        let rec = self.records.entry(from).or_insert(NeighborRecord {
            neighbor: from,
            addr,
            consecutive_hellos: 0,
            last_hello_at: now,
            status: NeighborStatus::Heard,
        });
        if rec.consecutive_hellos > 0 && now.saturating_sub(rec.last_hello_at) > hold {
            rec.consecutive_hellos = 0;
            rec.status = NeighborStatus::Heard;
        }
        rec.consecutive_hellos = rec.consecutive_hellos.saturating_add(1);
        rec.last_hello_at = now;
        rec.addr = addr;
        if rec.status == NeighborStatus::Heard && rec.consecutive_hellos >= cfg.hellos_to_up {
            rec.status = NeighborStatus::Sym;
            return true;
        }
        false
    }

    /// Drops records silent for longer than the hold time. Returns the
    /// neighbors that were symmetric and are now gone.
    pub fn expire(&mut self, now: SimTime, cfg: &OlsrConfig) -> Vec<NodeId> {
        let hold = cfg.neighbor_hold();
        let mut lost = Vec::new();
        self.records.retain(|id, rec| {
            let alive = now.saturating_sub(rec.last_hello_at) <= hold;
            if !alive && rec.status == NeighborStatus::Sym {
                lost.push(*id);
            }
            alive
        });
        lost
    }

    pub fn get(&self, n: NodeId) -> Option<&NeighborRecord> {
        self.records.get(&n)
    }

    pub fn is_sym(&self, n: NodeId) -> bool {
        self.records.get(&n).is_some_and(|r| r.status == NeighborStatus::Sym)
    }

    pub fn sym_neighbors(&self) -> BTreeSet<NodeId> {
        self.records
            .values()
            .filter(|r| r.status == NeighborStatus::Sym)
            .map(|r| r.neighbor)
            .collect()
    }

    pub fn records(&self) -> impl Iterator<Item = &NeighborRecord> {
        self.records.values()
    }
}

/// One flooded announcement: the origin's symmetric neighbors plus the
/// prefixes it announces (access subnets, its own /32 for controllers, the
/// default route for gateways).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LsMessage {
    pub origin: NodeId,
    pub origin_addr: Address,
    pub seq: u32,
    pub valid_until: SimTime,
    pub neighbors: Vec<NodeId>,
    pub hna: Vec<Prefix>,
}

impl LsMessage {
    fn same_content(&self, other: &LsMessage) -> bool {
        self.neighbors == other.neighbors && self.hna == other.hna
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LsAccept {
    /// Stored; `changed` says whether the neighbor/HNA content differs from
    /// what was held before (new origins count as changed).
    Stored { changed: bool },
    Duplicate,
    Expired,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct HnaEntry {
    pub origin: NodeId,
    pub origin_addr: Address,
    pub prefix: Prefix,
    pub expiry: SimTime,
}

/// Live HNA announcements known to a node.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HnaDb {
    entries: Vec<HnaEntry>,
}

impl HnaDb {
    pub fn new(mut entries: Vec<HnaEntry>) -> Self {
        entries.sort_by_key(|e| (e.prefix, e.origin));
        HnaDb { entries }
    }

    pub fn entries(&self) -> &[HnaEntry] {
        &self.entries
    }

    pub fn live(&self, now: SimTime) -> impl Iterator<Item = &HnaEntry> {
        self.entries.iter().filter(move |e| e.expiry > now)
    }
}

/// Flooded topology and HNA state, one entry per origin.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TopologyDb {
    entries: BTreeMap<NodeId, LsMessage>,
}

impl TopologyDb {
    pub fn accept(&mut self, msg: &LsMessage, now: SimTime) -> LsAccept {
        if msg.valid_until <= now {
            return LsAccept::Expired;
        }
        match self.entries.get(&msg.origin) {
            Some(old) if old.seq >= msg.seq && old.valid_until > now => LsAccept::Duplicate,
            Some(old) => {
                let changed = old.valid_until <= now || !old.same_content(msg);
                self.entries.insert(msg.origin, msg.clone());
                LsAccept::Stored { changed }
            }
            None => {
                self.entries.insert(msg.origin, msg.clone());
                LsAccept::Stored { changed: true }
            }
        }
    }

    /// Removes expired entries and returns their origins.
    pub fn purge(&mut self, now: SimTime) -> Vec<NodeId> {
        let mut gone = Vec::new();
        self.entries.retain(|o, m| {
            let keep = m.valid_until > now;
            if !keep {
                gone.push(*o);
            }
            keep
        });
        gone
    }

    pub fn get(&self, origin: NodeId) -> Option<&LsMessage> {
        self.entries.get(&origin)
    }

    pub fn messages(&self) -> impl Iterator<Item = &LsMessage> {
        self.entries.values()
    }

    pub fn live(&self, now: SimTime) -> impl Iterator<Item = &LsMessage> {
        self.entries.values().filter(move |m| m.valid_until > now)
    }

    pub fn hna_db(&self, now: SimTime) -> HnaDb {
        HnaDb::new(
            self.live(now)
                .flat_map(|m| {
                    m.hna.iter().map(|p| HnaEntry {
                        origin: m.origin,
                        origin_addr: m.origin_addr,
                        prefix: *p,
                        expiry: m.valid_until,
                    })
                })
                .collect(),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum NextHop {
    Local,
    Via(NodeId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Route {
    pub next_hop: NextHop,
    pub hop_count: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RoutingTable {
    entries: BTreeMap<Prefix, Route>,
}

impl RoutingTable {
    pub fn insert(&mut self, prefix: Prefix, route: Route) {
        self.entries.insert(prefix, route);
    }

    /// Longest-prefix match.
    pub fn lookup(&self, dst: Address) -> Option<(Prefix, Route)> {
        (0..=32u8).rev().find_map(|len| {
            let p = Prefix::new(dst, len).expect("len <= 32");
            self.entries.get(&p).map(|r| (p, *r))
        })
    }

    pub fn get(&self, prefix: &Prefix) -> Option<&Route> {
        self.entries.get(prefix)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Prefix, &Route)> {
        self.entries.iter()
    }
}

/// Breadth-first next hops over a directed adjacency, preferring the
/// lowest-address first hop among equal-cost paths. Returns
/// `node -> (first hop, hops)` for every reachable node except `root`.
pub fn shortest_next_hops<F>(
    root: NodeId,
    adjacency: &BTreeMap<NodeId, BTreeSet<NodeId>>,
    addr_of: F,
) -> BTreeMap<NodeId, (NodeId, u32)>
where
    F: Fn(NodeId) -> Address,
{
    let mut best: BTreeMap<NodeId, (NodeId, u32)> = BTreeMap::new();
    let mut layer = vec![root];
    let mut depth = 0u32;
    let mut seen = BTreeSet::from([root]);
    while !layer.is_empty() {
        depth += 1;
        let mut next: BTreeMap<NodeId, NodeId> = BTreeMap::new();
        for &u in &layer {
            let via_u = if u == root { None } else { Some(best[&u].0) };
            for &v in adjacency.get(&u).into_iter().flatten() {
                if seen.contains(&v) {
                    continue;
                }
                let first = via_u.unwrap_or(v);
                next.entry(v)
                    .and_modify(|cur| {
                        if addr_of(first) < addr_of(*cur) {
                            *cur = first;
                        }
                    })
                    .or_insert(first);
            }
        }
        layer = next.keys().copied().collect();
        for (v, first) in next {
            seen.insert(v);
            best.insert(v, (first, depth));
        }
    }
    best
}

/// Builds a node's routing table from its own symmetric neighbors and the
/// flooded database. `local` lists prefixes delivered at this node.
pub fn compute_routes<F>(
    me: NodeId,
    local: &[Prefix],
    sym: &BTreeSet<NodeId>,
    db: &TopologyDb,
    now: SimTime,
    addr_of: F,
) -> RoutingTable
where
    F: Fn(NodeId) -> Address,
{
    let mut adjacency: BTreeMap<NodeId, BTreeSet<NodeId>> = BTreeMap::new();
    adjacency.insert(me, sym.clone());
    for m in db.live(now) {
        if m.origin == me {
            continue;
        }
        adjacency.entry(m.origin).or_default().extend(m.neighbors.iter().copied());
    }
    let hops = shortest_next_hops(me, &adjacency, &addr_of);

    let mut table = RoutingTable::default();
    for (&node, &(first, count)) in &hops {
        table.insert(
            addr_of(node).host_prefix(),
            Route {
                next_hop: NextHop::Via(first),
                hop_count: count,
            },
        );
    }
    // HNA: nearest origin wins, ties to the lowest origin address.
    let mut hna_best: BTreeMap<Prefix, (u32, Address, NodeId)> = BTreeMap::new();
    for m in db.live(now) {
        let Some(&(first, count)) = hops.get(&m.origin) else {
            continue;
        };
        for p in &m.hna {
            let cand = (count, m.origin_addr, first);
            hna_best
                .entry(*p)
                .and_modify(|cur| {
                    if (cand.0, cand.1) < (cur.0, cur.1) {
                        *cur = cand;
                    }
                })
                .or_insert(cand);
        }
    }
    for (p, (count, _, first)) in hna_best {
        table.insert(
            p,
            Route {
                next_hop: NextHop::Via(first),
                hop_count: count,
            },
        );
    }
    for p in local {
        table.insert(
            *p,
            Route {
                next_hop: NextHop::Local,
                hop_count: 0,
            },
        );
    }
    table
}

/// Per-node OLSR state.
#[derive(Clone, Debug)]
pub struct OlsrNode {
    pub id: NodeId,
    pub addr: Address,
    pub neighbors: NeighborTable,
    pub db: TopologyDb,
    pub routes: RoutingTable,
    /// Prefixes this node announces via HNA.
    pub hna: Vec<Prefix>,
    /// Prefixes delivered locally (own addresses and announced subnets).
    pub local: Vec<Prefix>,
    seq: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LsOutcome {
    /// Sender is not a symmetric neighbor; the message is discarded.
    NotSym,
    Duplicate,
    Stored { changed: bool },
}

impl OlsrNode {
    /// Starts with no neighbors; the table holds only the local prefixes.
    pub fn new(id: NodeId, addr: Address, hna: Vec<Prefix>, local: Vec<Prefix>) -> Self {
        let routes = compute_routes(id, &local, &BTreeSet::new(), &TopologyDb::default(), SimTime::ZERO, |_| addr);
        OlsrNode {
            id,
            addr,
            neighbors: NeighborTable::default(),
            db: TopologyDb::default(),
            routes,
            hna,
            local,
            seq: 0,
        }
    }

    /// Builds this node's next announcement.
    pub fn originate(&mut self, now: SimTime, cfg: &OlsrConfig) -> LsMessage {
        self.seq += 1;
        LsMessage {
            origin: self.id,
            origin_addr: self.addr,
            seq: self.seq,
            valid_until: now + cfg.validity(),
            neighbors: self.neighbors.sym_neighbors().into_iter().collect(),
            hna: self.hna.clone(),
        }
    }

    pub fn on_ls(&mut self, sender: NodeId, msg: &LsMessage, now: SimTime) -> LsOutcome {
        if !self.neighbors.is_sym(sender) {
            return LsOutcome::NotSym;
        }
        if msg.origin == self.id {
            return LsOutcome::Duplicate;
        }
        match self.db.accept(msg, now) {
            LsAccept::Stored { changed } => LsOutcome::Stored { changed },
            LsAccept::Duplicate | LsAccept::Expired => LsOutcome::Duplicate,
        }
    }

    /// Recomputes the routing table; returns true if it changed.
    pub fn recompute<F>(&mut self, now: SimTime, addr_of: F) -> bool
    where
        F: Fn(NodeId) -> Address,
    {
        let table = compute_routes(
            self.id,
            &self.local,
            &self.neighbors.sym_neighbors(),
            &self.db,
            now,
            addr_of,
        );
        if table != self.routes {
            self.routes = table;
            true
        } else {
            false
        }
    }

    pub fn hna_db(&self, now: SimTime) -> HnaDb {
        self.db.hna_db(now)
    }
}

/// Follows next hops from `start` toward `dst` through `tables`. Returns
/// the node list ending at the node that delivers locally, or `None` if a
/// node has no route or the chain exceeds `max_hops` (a loop).
pub fn trace_route<'a, F>(start: NodeId, dst: Address, max_hops: usize, table_of: F) -> Option<Vec<NodeId>>
where
    F: Fn(NodeId) -> Option<&'a RoutingTable>,
{
    let mut path = vec![start];
    let mut at = start;
    let mut visited = VecDeque::new();
    for _ in 0..=max_hops {
        let (_, route) = table_of(at)?.lookup(dst)?;
        match route.next_hop {
            NextHop::Local => return Some(path),
            NextHop::Via(n) => {
                visited.push_back(at);
                if visited.contains(&n) {
                    return None;
                }
                at = n;
                path.push(n);
            }
        }
    }
    None
}
