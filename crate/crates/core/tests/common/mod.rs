//! Random scenario generation and oracles shared by integration tests.

#![allow(dead_code)]

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wmsdn::addr::Address;
use wmsdn::eftm::Mode;
use wmsdn::olsr::NextHop;
use wmsdn::scenario::Scenario;
use wmsdn::sim::World;
use wmsdn::topology::{NodeId, NodeKind};

/// A random mesh: `wmrs` routers on a random connected graph with extra
/// chords, controllers on random routers, and bursts of mesh link flips
/// each followed by a quiet period. Returns the TOML and the check times.
pub struct RandomCase {
    pub toml: String,
    pub checkpoints: Vec<f64>,
}

pub const BURST: f64 = 30.0;
pub const TAIL: f64 = 70.0;

pub fn random_case(case: u64) -> RandomCase {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 + case);
    let wmrs = rng.gen_range(4..=10usize);
    let ctrls = rng.gen_range(1..=3usize);
    let mut t = String::new();
    let epochs = 2;
    let duration = epochs as f64 * (BURST + TAIL);
    let _ = writeln!(t, "name = \"random-{case}\"\nduration = {duration}\nseeds = [{case}]\n");
    for i in 0..wmrs {
        let gw = if i == 0 { "gateway = true\n" } else { "" };
        let _ = writeln!(
            t,
            "[[nodes]]\nname = \"wmr{i}\"\nkind = \"wmr\"\n{gw}addresses = [{{ addr = \"10.0.0.{}/16\", role = \"mesh\" }}]\n",
            i + 1
        );
    }
    for c in 0..ctrls {
        let _ = writeln!(
            t,
            "[[nodes]]\nname = \"ctrl{c}\"\nkind = \"controller\"\naddresses = [{{ addr = \"10.0.255.{}/16\", role = \"mesh\" }}]\n",
            c + 1
        );
    }
    let mut edges = Vec::new();
    for i in 1..wmrs {
        edges.push((rng.gen_range(0..i), i));
    }
    for i in 0..wmrs {
        for j in i + 1..wmrs {
            if !edges.contains(&(i, j)) && rng.gen_bool(0.15) {
                edges.push((i, j));
            }
        }
    }
    for &(a, b) in &edges {
        let state = if rng.gen_bool(0.2) { "down" } else { "up" };
        let _ = writeln!(t, "[[links]]\na = \"wmr{a}\"\nb = \"wmr{b}\"\nstate = \"{state}\"\n");
    }
    for c in 0..ctrls {
        let w = rng.gen_range(0..wmrs);
        let _ = writeln!(t, "[[links]]\na = \"ctrl{c}\"\nb = \"wmr{w}\"\n");
    }
    for c in 0..ctrls {
        let _ = writeln!(t, "[[controllers]]\nnode = \"ctrl{c}\"\n");
    }
    let mut checkpoints = Vec::new();
    for e in 0..epochs {
        let start = e as f64 * (BURST + TAIL);
        let n = rng.gen_range(1..=4);
        let mut times: Vec<f64> = (0..n).map(|_| start + 5.0 + rng.gen_range(0.0..BURST - 5.0)).collect();
        times.sort_by(f64::total_cmp);
        for at in times {
            let &(a, b) = edges.choose(&mut rng).expect("at least one edge");
            let action = if rng.gen_bool(0.5) { "link-down" } else { "link-up" };
            let _ = writeln!(t, "[[events]]\nat = {at:.3}\naction = \"{action}\"\nlink = \"wmr{a}-wmr{b}\"\n");
        }
        checkpoints.push(start + BURST + TAIL - 0.001);
    }
    RandomCase { toml: t, checkpoints }
}

pub fn load(case: &RandomCase) -> Scenario {
    Scenario::from_toml(&case.toml).unwrap_or_else(|e| panic!("generated scenario invalid: {e}\n{}", case.toml))
}

/// Problems with controller assignment at the current instant.
pub fn master_violations(w: &World) -> Vec<String> {
    let topo = w.topology();
    let cfg = &w.scenario().eftm;
    let mut bad = Vec::new();
    for n in topo.ids_of(NodeKind::Wmr) {
        let best = topo
            .ids_of(NodeKind::Controller)
            .filter(|c| topo.reachable(n, *c))
            .map(|c| topo.node(c).main_address())
            .min_by_key(|a| cfg.rank(*a));
        let mode = w.eftm(n).expect("wmr").mode().clone();
        let ok = match (&best, &mode) {
            (Some(b), Mode::Connected { master }) => master == b,
            (None, Mode::Emergency(_)) => true,
            _ => false,
        };
        if !ok {
            bad.push(format!("{}: mode {mode}, oracle best {best:?}", topo.name(n)));
        }
    }
    bad
}

enum Walk {
    Reached,
    NoRoute,
    Loop,
}

/// Follows next hops toward `dst`. Ending anywhere but the owner of `dst`
/// (the gateway's default route, say) counts as no route.
fn walk(w: &World, start: NodeId, dst: Address) -> Walk {
    let mut seen = vec![start];
    let mut at = start;
    loop {
        let Some((_, r)) = w.routes(at).and_then(|t| t.lookup(dst)) else {
            return Walk::NoRoute;
        };
        match r.next_hop {
            NextHop::Local if w.topology().node(at).owns(dst) => return Walk::Reached,
            NextHop::Local => return Walk::NoRoute,
            NextHop::Via(n) => {
                if seen.contains(&n) {
                    return Walk::Loop;
                }
                seen.push(n);
                at = n;
            }
        }
    }
}

/// Differences between routed and actual reachability over control
/// addresses, plus any forwarding loops.
pub fn routing_violations(w: &World) -> Vec<String> {
    let topo = w.topology();
    let routers: Vec<NodeId> = topo.nodes().iter().filter(|n| n.runs_olsr()).map(|n| n.id).collect();
    let mut bad = Vec::new();
    for &s in &routers {
        for &d in &routers {
            let dst = topo.node(d).main_address();
            let expect = topo.reachable(s, d);
            match walk(w, s, dst) {
                Walk::Loop => bad.push(format!("{} -> {}: loop", topo.name(s), topo.name(d))),
                Walk::Reached if !expect => bad.push(format!("{} -> {}: routed but unreachable", topo.name(s), topo.name(d))),
                Walk::NoRoute if expect => bad.push(format!("{} -> {}: reachable but unrouted", topo.name(s), topo.name(d))),
                _ => {}
            }
        }
    }
    bad
}
