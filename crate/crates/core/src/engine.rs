//! Discrete-event core: virtual clock, ordered event queue and seeded
//! per-node random streams.
//!
//! Events are ordered by `(fire_at, seq)` where `seq` is a monotone counter
//! assigned at scheduling time, so simultaneous events fire in insertion
//! order. A simulation owns one [`Scheduler`] and drives it from a single
//! thread; independent instances share nothing.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::time::SimTime;
use crate::topology::NodeId;

#[derive(Debug, Error, PartialEq)]
pub enum EngineError {
    #[error("negative or non-finite delay {0}")]
    InvalidDelay(f64),
    #[error("cannot schedule at {at} which is before now ({now})")]
    InPast { at: SimTime, now: SimTime },
    #[error("run_until({end}) is before now ({now})")]
    EndInPast { end: SimTime, now: SimTime },
}

/// Who an event is addressed to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Target {
    Node(NodeId),
    /// Scenario-level actions and global samplers.
    Global,
}

impl From<NodeId> for Target {
    fn from(id: NodeId) -> Self {
        Target::Node(id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EventHandle(u64);

#[derive(Debug)]
pub struct Event<P> {
    pub fire_at: SimTime,
    pub seq: u64,
    pub target: Target,
    pub payload: P,
}

impl<P> Event<P> {
    pub fn handle(&self) -> EventHandle {
        EventHandle(self.seq)
    }
}

struct Entry<P>(Event<P>);

impl<P> PartialEq for Entry<P> {
    fn eq(&self, other: &Self) -> bool {
        self.0.fire_at == other.0.fire_at && self.0.seq == other.0.seq
    }
}

impl<P> Eq for Entry<P> {}

impl<P> PartialOrd for Entry<P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<P> Ord for Entry<P> {
    // BinaryHeap is a max-heap; invert so the earliest (fire_at, seq) pops first.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.0.fire_at, other.0.seq).cmp(&(self.0.fire_at, self.0.seq))
    }
}

pub struct Scheduler<P> {
    now: SimTime,
    next_seq: u64,
    queue: BinaryHeap<Entry<P>>,
    cancelled: BTreeSet<u64>,
    fired: u64,
}

impl<P> Default for Scheduler<P> {
    fn default() -> Self {
        Self::new()
    }
}

impl<P> Scheduler<P> {
    pub fn new() -> Self {
        Scheduler {
            now: SimTime::ZERO,
            next_seq: 0,
            queue: BinaryHeap::new(),
            cancelled: BTreeSet::new(),
            fired: 0,
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    /// Number of events delivered so far (cancelled ones excluded).
    pub fn fired(&self) -> u64 {
        self.fired
    }

    pub fn pending(&self) -> usize {
        self.queue.len() - self.cancelled.len()
    }

    pub fn schedule(&mut self, delay: SimTime, target: impl Into<Target>, payload: P) -> EventHandle {
        let at = self.now + delay;
        self.push(at, target.into(), payload)
    }

    /// Like [`Scheduler::schedule`] but takes a delay in seconds, rejecting
    /// negative or non-finite values.
    pub fn schedule_secs(
        &mut self,
        delay: f64,
        target: impl Into<Target>,
        payload: P,
    ) -> Result<EventHandle, EngineError> {
        if !delay.is_finite() || delay < 0.0 {
            return Err(EngineError::InvalidDelay(delay));
        }
        Ok(self.schedule(SimTime::from_secs_f64(delay), target, payload))
    }

    pub fn schedule_at(
        &mut self,
        at: SimTime,
        target: impl Into<Target>,
        payload: P,
    ) -> Result<EventHandle, EngineError> {
        if at < self.now {
            return Err(EngineError::InPast { at, now: self.now });
        }
        Ok(self.push(at, target.into(), payload))
    }

    fn push(&mut self, fire_at: SimTime, target: Target, payload: P) -> EventHandle {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Entry(Event {
            fire_at,
            seq,
            target,
            payload,
        }));
        EventHandle(seq)
    }

    /// Cancels a pending event. Returns false if it already fired or was
    /// never scheduled.
    pub fn cancel(&mut self, handle: EventHandle) -> bool {
        if handle.0 >= self.next_seq || self.cancelled.contains(&handle.0) {
            return false;
        }
        if !self.queue.iter().any(|e| e.0.seq == handle.0) {
            return false;
        }
        self.cancelled.insert(handle.0)
    }

    /// Pops the next live event with `fire_at <= end`, advancing the clock
    /// to its firing time.
    pub fn pop_until(&mut self, end: SimTime) -> Option<Event<P>> {
        loop {
            let head = self.queue.peek()?;
            if head.0.fire_at > end {
                return None;
            }
            let Entry(event) = self.queue.pop().expect("peeked");
            if self.cancelled.remove(&event.seq) {
                continue;
            }
            debug_assert!(event.fire_at >= self.now, "clock went backwards");
            self.now = event.fire_at;
            self.fired += 1;
            return Some(event);
        }
    }

    /// Moves the clock forward without firing anything. Used after the
    /// last event of a `run_until` window has been processed.
    pub fn advance_to(&mut self, end: SimTime) -> Result<(), EngineError> {
        if end < self.now {
            return Err(EngineError::EndInPast { end, now: self.now });
        }
        self.now = end;
        Ok(())
    }

    /// Fires every event up to and including `end` through `handler`, then
    /// sets the clock to `end`. The handler may schedule further events.
    pub fn run_until<F>(&mut self, end: SimTime, mut handler: F) -> Result<(), EngineError>
    where
        F: FnMut(&mut Self, Event<P>),
    {
        if end < self.now {
            return Err(EngineError::EndInPast { end, now: self.now });
        }
        while let Some(ev) = self.pop_until(end) {
            handler(self, ev);
        }
        self.advance_to(end)
    }
}

/// Stable 64-bit FNV-1a, used to turn node names into stream ids.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Random stream for one node: same global seed, stream chosen by the
/// node's name, so adding or removing nodes leaves other streams intact.
pub fn node_rng(seed: u64, node_name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(node_name.as_bytes()));
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn n(i: u32) -> NodeId {
        NodeId(i)
    }

    fn drain(s: &mut Scheduler<&'static str>, end: SimTime) -> Vec<(SimTime, &'static str)> {
        let mut out = Vec::new();
        s.run_until(end, |s, ev| out.push((s.now(), ev.payload))).unwrap();
        out
    }

    #[test]
    fn zero_delay_fires_at_now_before_later_events() {
        let mut s = Scheduler::new();
        s.advance_to(SimTime::from_secs(10)).unwrap();
        s.schedule(SimTime::from_secs(1), n(1), "later");
        s.schedule(SimTime::ZERO, n(1), "tick");
        let fired = drain(&mut s, SimTime::from_secs(20));
        assert_eq!(fired[0], (SimTime::from_secs(10), "tick"));
        assert_eq!(fired[1].1, "later");
    }

    #[test]
    fn hello_after_five_seconds() {
        let mut s = Scheduler::new();
        s.schedule_secs(5.0, n(1), "hello").unwrap();
        let fired = drain(&mut s, SimTime::from_secs(6));
        assert_eq!(fired, vec![(SimTime::from_secs(5), "hello")]);
    }

    #[test]
    fn equal_times_fire_in_insertion_order() {
        let mut s = Scheduler::new();
        s.schedule_secs(3.0, n(1), "A").unwrap();
        s.schedule_secs(3.0, n(2), "B").unwrap();
        let fired: Vec<_> = drain(&mut s, SimTime::from_secs(3)).into_iter().map(|x| x.1).collect();
        assert_eq!(fired, vec!["A", "B"]);
    }

    #[test]
    fn negative_delay_is_rejected() {
        let mut s: Scheduler<()> = Scheduler::new();
        assert_eq!(s.schedule_secs(-0.5, n(0), ()), Err(EngineError::InvalidDelay(-0.5)));
        assert!(s.schedule_secs(f64::INFINITY, n(0), ()).is_err());
    }

    #[test]
    fn empty_queue_run_until_just_moves_clock() {
        let mut s: Scheduler<()> = Scheduler::new();
        s.run_until(SimTime::from_secs(100), |_, _| panic!("nothing to fire")).unwrap();
        assert_eq!(s.now(), SimTime::from_secs(100));
    }

    #[test]
    fn run_until_leaves_later_events_pending() {
        let mut s = Scheduler::new();
        for (t, p) in [(1, "one"), (2, "two"), (3, "three")] {
            s.schedule(SimTime::from_secs(t), Target::Global, p);
        }
        let fired: Vec<_> = drain(&mut s, SimTime::from_secs(2)).into_iter().map(|x| x.1).collect();
        assert_eq!(fired, vec!["one", "two"]);
        assert_eq!(s.now(), SimTime::from_secs(2));
        assert_eq!(s.pending(), 1);
        assert!(s.run_until(SimTime::from_secs(1), |_, _| {}).is_err());
    }

    #[test]
    fn cancelled_events_never_fire() {
        let mut s = Scheduler::new();
        let h = s.schedule(SimTime::from_secs(1), Target::Global, "x");
        s.schedule(SimTime::from_secs(2), Target::Global, "y");
        assert!(s.cancel(h));
        assert!(!s.cancel(h));
        let fired: Vec<_> = drain(&mut s, SimTime::from_secs(5)).into_iter().map(|x| x.1).collect();
        assert_eq!(fired, vec!["y"]);
        assert!(!s.cancel(h));
    }

    #[test]
    fn handler_scheduled_events_are_processed_in_window() {
        let mut s = Scheduler::new();
        s.schedule(SimTime::from_secs(1), Target::Global, 0u32);
        let mut seen = Vec::new();
        s.run_until(SimTime::from_secs(10), |s, ev| {
            seen.push((s.now(), ev.payload));
            if ev.payload < 3 {
                s.schedule(SimTime::from_secs(2), Target::Global, ev.payload + 1);
            }
        })
        .unwrap();
        let times: Vec<_> = seen.iter().map(|(t, _)| t.as_micros() / 1_000_000).collect();
        assert_eq!(times, vec![1, 3, 5, 7]);
    }

    #[test]
    fn node_streams_are_independent_of_other_nodes() {
        let a1: Vec<u32> = node_rng(7, "wmr1").sample_iter(rand::distributions::Standard).take(4).collect();
        let a2: Vec<u32> = node_rng(7, "wmr1").sample_iter(rand::distributions::Standard).take(4).collect();
        let b: Vec<u32> = node_rng(7, "wmr2").sample_iter(rand::distributions::Standard).take(4).collect();
        let c: Vec<u32> = node_rng(8, "wmr1").sample_iter(rand::distributions::Standard).take(4).collect();
        assert_eq!(a1, a2);
        assert_ne!(a1, b);
        assert_ne!(a1, c);
    }
}
