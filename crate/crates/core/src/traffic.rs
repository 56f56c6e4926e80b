//! Traffic sources: periodic ping probes and fluid bulk flows.
//!
//! A bulk flow is not simulated packet by packet. At each sample its path
//! is walked through the switches; the flow either gets a max-min fair
//! share of every link on that path or is stalled. After a stall the rate
//! stays at zero for half the recovery delay and then ramps back linearly,
//! roughly how a TCP sender comes back after losing a window.

use serde::{Deserialize, Serialize};

use crate::addr::Address;
use crate::time::SimTime;
use crate::topology::{LinkId, NodeId};

#[derive(Clone, Debug, PartialEq)]
pub struct PingProbe {
    pub name: String,
    pub src: NodeId,
    /// Source address used in requests.
    pub src_addr: Address,
    pub dst: Address,
    pub interval: SimTime,
    pub start: SimTime,
    pub size: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BulkFlow {
    pub name: String,
    pub src: NodeId,
    pub dst: NodeId,
    pub src_addr: Address,
    pub dst_addr: Address,
    /// Offered load in bit/s; `None` means as much as the path allows.
    pub demand_bps: Option<f64>,
    pub loss_recovery_delay: SimTime,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "phase", rename_all = "snake_case")]
pub enum FlowPhase {
    Idle,
    Stalled { since: SimTime },
    Recovering { since: SimTime },
    Steady,
}

impl FlowPhase {
    /// Next phase given whether the path is currently complete.
    pub fn step(self, complete: bool, now: SimTime, recovery: SimTime) -> FlowPhase {
        match (self, complete) {
            (FlowPhase::Idle, true) | (FlowPhase::Stalled { .. }, true) => {
                FlowPhase::Recovering { since: now }.step(true, now, recovery)
            }
            (FlowPhase::Idle, false) => FlowPhase::Stalled { since: now },
            (FlowPhase::Stalled { since }, false) => FlowPhase::Stalled { since },
            (FlowPhase::Recovering { since }, true) if now >= since + recovery => FlowPhase::Steady,
            (p @ FlowPhase::Recovering { .. }, true) | (p @ FlowPhase::Steady, true) => p,
            (FlowPhase::Recovering { .. }, false) | (FlowPhase::Steady, false) => FlowPhase::Stalled { since: now },
        }
    }

    /// Fraction of the fair share the flow may use right now.
    pub fn rate_factor(self, now: SimTime, recovery: SimTime) -> f64 {
        match self {
            FlowPhase::Idle | FlowPhase::Stalled { .. } => 0.0,
            FlowPhase::Steady => 1.0,
            FlowPhase::Recovering { since } => {
                let half = recovery.as_secs_f64() / 2.0;
                if half <= 0.0 {
                    return 1.0;
                }
                let elapsed = now.saturating_sub(since).as_secs_f64();
                ((elapsed - half) / half).clamp(0.0, 1.0)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowDemand {
    pub links: Vec<LinkId>,
    /// Upper bound on the flow's rate in bit/s (may be infinite).
    pub demand: f64,
}

/// Max-min fair rates by progressive filling. `capacity` gives each link's
/// capacity in bit/s. Flows without links receive their (finite) demand.
pub fn max_min_fair<F>(flows: &[FlowDemand], capacity: F) -> Vec<f64>
where
    F: Fn(LinkId) -> f64,
{
    let mut rate = vec![0.0; flows.len()];
    let mut frozen: Vec<bool> = flows.iter().map(|f| f.demand <= 0.0).collect();
    for (i, f) in flows.iter().enumerate() {
        if f.links.is_empty() && !frozen[i] {
            rate[i] = if f.demand.is_finite() { f.demand } else { 0.0 };
            frozen[i] = true;
        }
    }
    let mut links: Vec<LinkId> = flows.iter().flat_map(|f| f.links.iter().copied()).collect();
    links.sort();
    links.dedup();
    let mut residual: Vec<f64> = links.iter().map(|l| capacity(*l)).collect();
    let index = |l: LinkId| links.binary_search(&l).expect("collected above");

    const EPS: f64 = 1e-9;
    while frozen.iter().any(|f| !f) {
        let mut active_on = vec![0usize; links.len()];
        for (i, f) in flows.iter().enumerate() {
            if !frozen[i] {
                for l in &f.links {
                    active_on[index(*l)] += 1;
                }
            }
        }
        let mut inc = f64::INFINITY;
        for (j, &n) in active_on.iter().enumerate() {
            if n > 0 {
                inc = inc.min(residual[j] / n as f64);
            }
        }
        for (i, f) in flows.iter().enumerate() {
            if !frozen[i] {
                inc = inc.min(f.demand - rate[i]);
            }
        }
        let inc = inc.max(0.0);
        for (i, f) in flows.iter().enumerate() {
            if !frozen[i] {
                rate[i] += inc;
                for l in &f.links {
                    residual[index(*l)] -= inc;
                }
            }
        }
        let mut progressed = false;
        for (i, f) in flows.iter().enumerate() {
            if frozen[i] {
                continue;
            }
            let saturated = f.links.iter().any(|l| residual[index(*l)] <= EPS * capacity(*l).max(1.0));
            if saturated || rate[i] >= f.demand - EPS {
                frozen[i] = true;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    rate
}
