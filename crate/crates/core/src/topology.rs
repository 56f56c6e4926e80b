//! Ground-truth physical graph: nodes, links and their up/down state.
//!
//! Nothing in here knows about OLSR. [`Topology::reachable`] is the
//! independent oracle the routing and master-selection checks compare
//! against.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::addr::{Address, Prefix};
use crate::time::SimTime;

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
pub struct NodeId(pub u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
pub struct LinkId(pub u32);

impl LinkId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Wmr,
    Controller,
    Host,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InterfaceRole {
    Mesh,
    Access,
    Internet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Interface {
    pub addr: Address,
    pub subnet: Prefix,
    pub role: InterfaceRole,
}

#[derive(Clone, Debug)]
pub struct Node {
    pub id: NodeId,
    pub name: String,
    pub kind: NodeKind,
    pub gateway: bool,
    pub interfaces: Vec<Interface>,
}

impl Node {
    /// The address the node is known by in the control plane: the mesh
    /// address for WMRs and controllers, the first address otherwise.
    pub fn main_address(&self) -> Address {
        self.interfaces
            .iter()
            .find(|i| i.role == InterfaceRole::Mesh)
            .or_else(|| self.interfaces.first())
            .map(|i| i.addr)
            .unwrap_or(Address::UNSPECIFIED)
    }

    pub fn owns(&self, addr: Address) -> bool {
        self.interfaces.iter().any(|i| i.addr == addr)
    }

    pub fn interfaces_with(&self, role: InterfaceRole) -> impl Iterator<Item = &Interface> {
        self.interfaces.iter().filter(move |i| i.role == role)
    }

    /// Participates in link sensing and topology flooding.
    pub fn runs_olsr(&self) -> bool {
        matches!(self.kind, NodeKind::Wmr | NodeKind::Controller)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkState {
    Up,
    Down,
}

impl fmt::Display for LinkState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LinkState::Up => "up",
            LinkState::Down => "down",
        })
    }
}

#[derive(Clone, Debug)]
pub struct Link {
    pub id: LinkId,
    pub name: String,
    pub a: NodeId,
    pub b: NodeId,
    pub capacity_bps: f64,
    pub delay: SimTime,
    pub state: LinkState,
}

impl Link {
    pub fn is_up(&self) -> bool {
        self.state == LinkState::Up
    }

    pub fn other(&self, from: NodeId) -> NodeId {
        if from == self.a {
            self.b
        } else {
            self.a
        }
    }

    pub fn connects(&self, n: NodeId) -> bool {
        self.a == n || self.b == n
    }

    /// Propagation delay plus serialization of `bytes`.
    pub fn latency(&self, bytes: u32) -> SimTime {
        self.delay + SimTime::from_secs_f64(f64::from(bytes) * 8.0 / self.capacity_bps)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TopologyError {
    #[error("duplicate node name `{0}`")]
    DuplicateNode(String),
    #[error("duplicate link name `{0}`")]
    DuplicateLink(String),
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("unknown link `{0}`")]
    UnknownLink(String),
    #[error("link `{0}` connects a node to itself")]
    SelfLoop(String),
    #[error("link `{0}` duplicates an existing link between the same endpoints")]
    ParallelLink(String),
    #[error("link `{name}` has non-positive capacity {capacity}")]
    BadCapacity { name: String, capacity: f64 },
}

#[derive(Clone, Debug, Default)]
pub struct Topology {
    nodes: Vec<Node>,
    links: Vec<Link>,
    node_names: BTreeMap<String, NodeId>,
    link_names: BTreeMap<String, LinkId>,
    adjacency: Vec<Vec<LinkId>>,
    pairs: BTreeMap<(NodeId, NodeId), LinkId>,
}

impl Topology {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_node(
        &mut self,
        name: &str,
        kind: NodeKind,
        gateway: bool,
        interfaces: Vec<Interface>,
    ) -> Result<NodeId, TopologyError> {
        if self.node_names.contains_key(name) {
            return Err(TopologyError::DuplicateNode(name.to_string()));
        }
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(Node {
            id,
            name: name.to_string(),
            kind,
            gateway,
            interfaces,
        });
        self.node_names.insert(name.to_string(), id);
        self.adjacency.push(Vec::new());
        Ok(id)
    }

    pub fn add_link(
        &mut self,
        name: &str,
        a: NodeId,
        b: NodeId,
        capacity_bps: f64,
        delay: SimTime,
        state: LinkState,
    ) -> Result<LinkId, TopologyError> {
        if self.link_names.contains_key(name) {
            return Err(TopologyError::DuplicateLink(name.to_string()));
        }
        if a == b {
            return Err(TopologyError::SelfLoop(name.to_string()));
        }
        if !(capacity_bps.is_finite() && capacity_bps > 0.0) {
            return Err(TopologyError::BadCapacity {
                name: name.to_string(),
                capacity: capacity_bps,
            });
        }
        let key = (a.min(b), a.max(b));
        if self.pairs.contains_key(&key) {
            return Err(TopologyError::ParallelLink(name.to_string()));
        }
        let id = LinkId(self.links.len() as u32);
        self.links.push(Link {
            id,
            name: name.to_string(),
            a,
            b,
            capacity_bps,
            delay,
            state,
        });
        self.link_names.insert(name.to_string(), id);
        self.adjacency[a.index()].push(id);
        self.adjacency[b.index()].push(id);
        self.pairs.insert(key, id);
        Ok(id)
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.index()]
    }

    pub fn link(&self, id: LinkId) -> &Link {
        &self.links[id.index()]
    }

    pub fn node_id(&self, name: &str) -> Result<NodeId, TopologyError> {
        self.node_names
            .get(name)
            .copied()
            .ok_or_else(|| TopologyError::UnknownNode(name.to_string()))
    }

    pub fn link_id(&self, name: &str) -> Result<LinkId, TopologyError> {
        self.link_names
            .get(name)
            .copied()
            .ok_or_else(|| TopologyError::UnknownLink(name.to_string()))
    }

    pub fn name(&self, id: NodeId) -> &str {
        &self.nodes[id.index()].name
    }

    pub fn incident(&self, n: NodeId) -> &[LinkId] {
        &self.adjacency[n.index()]
    }

    pub fn link_between(&self, a: NodeId, b: NodeId) -> Option<LinkId> {
        self.pairs.get(&(a.min(b), a.max(b))).copied()
    }

    pub fn node_by_address(&self, addr: Address) -> Option<NodeId> {
        self.nodes.iter().find(|n| n.owns(addr)).map(|n| n.id)
    }

    pub fn ids_of(&self, kind: NodeKind) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.iter().filter(move |n| n.kind == kind).map(|n| n.id)
    }

    /// Sets the state of a link. Returns the previous state; setting the
    /// same state again is allowed and changes nothing.
    pub fn set_link_state(&mut self, id: LinkId, state: LinkState) -> Result<LinkState, TopologyError> {
        let link = self
            .links
            .get_mut(id.index())
            .ok_or_else(|| TopologyError::UnknownLink(format!("#{}", id.0)))?;
        Ok(std::mem::replace(&mut link.state, state))
    }

    /// True iff a path of Up links connects `src` and `dst`, found by
    /// breadth-first search over the ground-truth graph.
    pub fn reachable(&self, src: NodeId, dst: NodeId) -> bool {
        if src == dst {
            return true;
        }
        let mut seen = vec![false; self.nodes.len()];
        let mut queue = VecDeque::from([src]);
        seen[src.index()] = true;
        while let Some(n) = queue.pop_front() {
            for &l in &self.adjacency[n.index()] {
                let link = &self.links[l.index()];
                if !link.is_up() {
                    continue;
                }
                let m = link.other(n);
                if m == dst {
                    return true;
                }
                if !seen[m.index()] {
                    seen[m.index()] = true;
                    queue.push_back(m);
                }
            }
        }
        false
    }

    /// Connected components over Up links, each sorted, ordered by their
    /// smallest member.
    pub fn components(&self) -> Vec<Vec<NodeId>> {
        let mut label = vec![usize::MAX; self.nodes.len()];
        let mut out = Vec::new();
        for start in 0..self.nodes.len() {
            if label[start] != usize::MAX {
                continue;
            }
            let c = out.len();
            let mut members = vec![NodeId(start as u32)];
            label[start] = c;
            let mut i = 0;
            while i < members.len() {
                let n = members[i];
                i += 1;
                for &l in &self.adjacency[n.index()] {
                    let link = &self.links[l.index()];
                    let m = link.other(n);
                    if link.is_up() && label[m.index()] == usize::MAX {
                        label[m.index()] = c;
                        members.push(m);
                    }
                }
            }
            members.sort();
            out.push(members);
        }
        out
    }
}
