//! Structured event log and the three headline measurements.
//!
//! Every run appends [`MetricRecord`]s in `(time, seq)` order and writes
//! them as NDJSON. The measurements are computed twice: incrementally while
//! the run is going ([`OnlineMetrics`]) and afterwards from the log alone
//! ([`analyze`]). The two must agree exactly.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::addr::Address;
use crate::eftm::ConnStatus;
use crate::time::SimTime;
use crate::topology::LinkState;

/// Window before the event whose mean throughput counts as steady state.
pub const STEADY_WINDOW: SimTime = SimTime::from_secs(5);
/// Fraction of the steady rate that counts as recovered.
pub const RECOVERED_FRACTION: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum RecordBody {
    LinkEvent {
        link: String,
        state: LinkState,
        previous: LinkState,
    },
    OlsrRouteChange {
        node: String,
        routes: usize,
    },
    EftmTransition {
        wmr: String,
        from: String,
        to: String,
        controller: Option<Address>,
    },
    Connection {
        wmr: String,
        controller: Address,
        status: ConnStatus,
    },
    ControllerAction {
        controller: String,
        action: String,
    },
    PingResult {
        probe: String,
        seq: u64,
        sent: SimTime,
        rtt: SimTime,
    },
    ThroughputSample {
        flow: String,
        rate_bps: f64,
    },
    RuleEvent {
        wmr: String,
        event: String,
        rule: String,
        table: Vec<String>,
    },
    PacketDrop {
        node: String,
        dst: Address,
        reason: String,
    },
    Violation {
        what: String,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    /// Microseconds of simulated time.
    pub time: SimTime,
    pub seq: u64,
    #[serde(flatten)]
    pub body: RecordBody,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricLog {
    records: Vec<MetricRecord>,
}

impl MetricLog {
    pub fn push(&mut self, time: SimTime, body: RecordBody) -> &MetricRecord {
        if let Some(last) = self.records.last() {
            debug_assert!(last.time <= time, "log out of order");
        }
        let seq = self.records.len() as u64;
        self.records.push(MetricRecord { time, seq, body });
        self.records.last().expect("just pushed")
    }

    pub fn records(&self) -> &[MetricRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn write_ndjson<W: Write>(&self, mut w: W) -> io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_ndjson<R: BufRead>(r: R) -> io::Result<Self> {
        let mut records = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: MetricRecord = serde_json::from_str(&line)
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1)))?;
            records.push(rec);
        }
        Ok(MetricLog { records })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeasureKind {
    Merge,
    Partition,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeasureSpec {
    pub kind: MeasureKind,
    pub event_at: SimTime,
    pub probe: Option<String>,
    pub flow: Option<String>,
    pub wmrs: Vec<String>,
}

/// A measured duration, or why there is none.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Metric {
    Value(SimTime),
    /// Applicable but the awaited event never happened in the run.
    Unresolved,
    NotApplicable,
}

impl Metric {
    pub fn secs(self) -> Option<f64> {
        match self {
            Metric::Value(t) => Some(t.as_secs_f64()),
            _ => None,
        }
    }

    pub fn csv_cell(self) -> String {
        match self {
            Metric::Value(t) => format!("{:.6}", t.as_secs_f64()),
            Metric::Unresolved => "unresolved".into(),
            Metric::NotApplicable => String::new(),
        }
    }

    pub fn parse_cell(s: &str) -> Result<Metric, String> {
        match s.trim() {
            "" => Ok(Metric::NotApplicable),
            "unresolved" => Ok(Metric::Unresolved),
            v => v
                .parse::<f64>()
                .map(|x| Metric::Value(SimTime::from_secs_f64(x)))
                .map_err(|e| format!("bad metric `{v}`: {e}")),
        }
    }
}

/// Signed difference in microseconds, for delays that may come out
/// negative (a WMR can settle before the reference point).
fn signed_secs(a: SimTime, b: SimTime) -> f64 {
    (a.as_micros() as f64 - b.as_micros() as f64) / 1e6
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Measurements {
    pub connectivity: Metric,
    /// Seconds; may be negative, hence not a [`SimTime`].
    pub selection_delay: Option<Result<f64, ()>>,
    pub throughput_gap: Metric,
}

impl Measurements {
    pub fn selection_cell(&self) -> String {
        match self.selection_delay {
            None => String::new(),
            Some(Err(())) => "unresolved".into(),
            Some(Ok(v)) => format!("{v:.6}"),
        }
    }

    pub fn selection_secs(&self) -> Option<f64> {
        self.selection_delay.and_then(|r| r.ok())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub seed: u64,
    pub scenario: String,
    pub m: Measurements,
}

pub const CSV_HEADER: &str = "seed,scenario,connectivity_time_s,selection_delay_s,throughput_gap_s";

impl SummaryRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.seed,
            self.scenario,
            self.m.connectivity.csv_cell(),
            self.m.selection_cell(),
            self.m.throughput_gap.csv_cell()
        )
    }
}

impl fmt::Display for SummaryRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.csv_line())
    }
}

/// Batch computation of all measurements from a finished log.
pub fn analyze(log: &[MetricRecord], spec: &MeasureSpec) -> Measurements {
    let connectivity = match (&spec.kind, &spec.probe) {
        (MeasureKind::Merge, Some(p)) => connectivity_time(log, p, spec.event_at),
        _ => Metric::NotApplicable,
    };
    let selection_delay = if spec.wmrs.is_empty() {
        None
    } else {
        let reference = match spec.kind {
            MeasureKind::Merge => match connectivity {
                Metric::Value(c) => Some(spec.event_at + c),
                _ => None,
            },
            MeasureKind::Partition => Some(spec.event_at),
        };
        let settled = selection_time(log, &spec.wmrs, spec.event_at);
        Some(match (reference, settled) {
            (Some(r), Some(s)) => Ok(signed_secs(s, r)),
            _ => Err(()),
        })
    };
    let throughput_gap = match &spec.flow {
        Some(f) => throughput_gap(log, f, spec.event_at),
        None => Metric::NotApplicable,
    };
    Measurements {
        connectivity,
        selection_delay,
        throughput_gap,
    }
}

/// Time from `event_at` to the first reply of a request sent at or after it.
pub fn connectivity_time(log: &[MetricRecord], probe: &str, event_at: SimTime) -> Metric {
    log.iter()
        .find_map(|r| match &r.body {
            RecordBody::PingResult { probe: p, sent, .. } if p == probe && *sent >= event_at => {
                Some(Metric::Value(r.time - event_at))
            }
            _ => None,
        })
        .unwrap_or(Metric::Unresolved)
}

/// Latest time at which one of `wmrs` first reached a controller other
/// than the one it held at `event_at`.
pub fn selection_time(log: &[MetricRecord], wmrs: &[String], event_at: SimTime) -> Option<SimTime> {
    let mut latest = SimTime::ZERO;
    for w in wmrs {
        let old = log
            .iter()
            .filter(|r| r.time < event_at)
            .filter_map(|r| match &r.body {
                RecordBody::EftmTransition { wmr, to, controller, .. } if wmr == w => {
                    Some(if to == "connected" { *controller } else { None })
                }
                _ => None,
            })
            .next_back()
            .flatten();
        let t = log.iter().filter(|r| r.time >= event_at).find_map(|r| match &r.body {
            RecordBody::EftmTransition { wmr, to, controller, .. }
                if wmr == w && to == "connected" && *controller != old =>
            {
                Some(r.time)
            }
            _ => None,
        })?;
        latest = latest.max(t);
    }
    Some(latest)
}

pub fn throughput_samples<'a>(log: &'a [MetricRecord], flow: &'a str) -> impl Iterator<Item = (SimTime, f64)> + 'a {
    log.iter().filter_map(move |r| match &r.body {
        RecordBody::ThroughputSample { flow: f, rate_bps } if f == flow => Some((r.time, *rate_bps)),
        _ => None,
    })
}

/// From the first zero-rate sample after `event_at` until the rate is back
/// to [`RECOVERED_FRACTION`] of the pre-event mean after the last zero.
pub fn throughput_gap(log: &[MetricRecord], flow: &str, event_at: SimTime) -> Metric {
    let samples: Vec<(SimTime, f64)> = throughput_samples(log, flow).collect();
    let window_start = event_at.saturating_sub(STEADY_WINDOW);
    let steady: Vec<f64> = samples
        .iter()
        .filter(|(t, _)| *t >= window_start && *t < event_at)
        .map(|(_, r)| *r)
        .collect();
    if steady.is_empty() {
        return Metric::Unresolved;
    }
    let mean = steady.iter().sum::<f64>() / steady.len() as f64;
    let after: Vec<&(SimTime, f64)> = samples.iter().filter(|(t, _)| *t >= event_at).collect();
    let Some(first_zero) = after.iter().position(|(_, r)| *r <= 0.0) else {
        return Metric::Value(SimTime::ZERO);
    };
    let last_zero = after.iter().rposition(|(_, r)| *r <= 0.0).expect("one exists");
    match after[last_zero..].iter().find(|(_, r)| *r >= RECOVERED_FRACTION * mean) {
        Some((t, _)) => Metric::Value(*t - after[first_zero].0),
        None => Metric::Unresolved,
    }
}

/// Incremental version of [`analyze`], fed each record as it is logged.
#[derive(Clone, Debug)]
pub struct OnlineMetrics {
    spec: MeasureSpec,
    connectivity_at: Option<SimTime>,
    held_at_event: BTreeMap<String, Option<Address>>,
    settled: BTreeMap<String, SimTime>,
    steady_sum: f64,
    steady_n: usize,
    first_zero: Option<SimTime>,
    recovered: Option<SimTime>,
}

impl OnlineMetrics {
    pub fn new(spec: MeasureSpec) -> Self {
        let held_at_event = spec.wmrs.iter().map(|w| (w.clone(), None)).collect();
        OnlineMetrics {
            spec,
            connectivity_at: None,
            held_at_event,
            settled: BTreeMap::new(),
            steady_sum: 0.0,
            steady_n: 0,
            first_zero: None,
            recovered: None,
        }
    }

    pub fn spec(&self) -> &MeasureSpec {
        &self.spec
    }

    pub fn observe(&mut self, r: &MetricRecord) {
        let ev = self.spec.event_at;
        match &r.body {
            RecordBody::PingResult { probe, sent, .. } => {
                if self.spec.probe.as_deref() == Some(probe.as_str()) && *sent >= ev && self.connectivity_at.is_none() {
                    self.connectivity_at = Some(r.time);
                }
            }
            RecordBody::EftmTransition { wmr, to, controller, .. } => {
                let Some(held) = self.held_at_event.get_mut(wmr) else {
                    return;
                };
                let now_held = if to == "connected" { *controller } else { None };
                if r.time < ev {
                    *held = now_held;
                } else if to == "connected" && now_held != *held && !self.settled.contains_key(wmr) {
                    self.settled.insert(wmr.clone(), r.time);
                }
            }
            RecordBody::ThroughputSample { flow, rate_bps } => {
                if self.spec.flow.as_deref() != Some(flow.as_str()) {
                    return;
                }
                if r.time < ev {
                    if r.time >= ev.saturating_sub(STEADY_WINDOW) {
                        self.steady_sum += rate_bps;
                        self.steady_n += 1;
                    }
                } else if *rate_bps <= 0.0 {
                    self.first_zero.get_or_insert(r.time);
                    self.recovered = None;
                } else if self.first_zero.is_some() && self.recovered.is_none() && self.steady_n > 0 {
                    let mean = self.steady_sum / self.steady_n as f64;
                    if *rate_bps >= RECOVERED_FRACTION * mean {
                        self.recovered = Some(r.time);
                    }
                }
            }
            _ => {}
        }
    }

    pub fn finish(&self) -> Measurements {
        let ev = self.spec.event_at;
        let connectivity = match (&self.spec.kind, &self.spec.probe) {
            (MeasureKind::Merge, Some(_)) => self.connectivity_at.map_or(Metric::Unresolved, |t| Metric::Value(t - ev)),
            _ => Metric::NotApplicable,
        };
        let selection_delay = if self.spec.wmrs.is_empty() {
            None
        } else {
            let reference = match self.spec.kind {
                MeasureKind::Merge => self.connectivity_at,
                MeasureKind::Partition => Some(ev),
            };
            let all = self.settled.len() == self.held_at_event.len();
            Some(match (reference, all) {
                (Some(r), true) => Ok(signed_secs(*self.settled.values().max().expect("non-empty"), r)),
                _ => Err(()),
            })
        };
        let throughput_gap = match &self.spec.flow {
            None => Metric::NotApplicable,
            Some(_) if self.steady_n == 0 => Metric::Unresolved,
            Some(_) => match (self.first_zero, self.recovered) {
                (None, _) => Metric::Value(SimTime::ZERO),
                (Some(z), Some(r)) => Metric::Value(r - z),
                (Some(_), None) => Metric::Unresolved,
            },
        };
        Measurements {
            connectivity,
            selection_delay,
            throughput_gap,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(s: f64) -> SimTime {
        SimTime::from_secs_f64(s)
    }

    fn transition(log: &mut MetricLog, at: f64, wmr: &str, to: &str, c: Option<u8>) {
        log.push(
            t(at),
            RecordBody::EftmTransition {
                wmr: wmr.into(),
                from: "x".into(),
                to: to.into(),
                controller: c.map(|i| Address::new(10, 0, 255, i)),
            },
        );
    }

    fn sample(log: &mut MetricLog, at: f64, rate: f64) {
        log.push(t(at), RecordBody::ThroughputSample { flow: "f".into(), rate_bps: rate });
    }

    fn both(log: &MetricLog, spec: &MeasureSpec) -> Measurements {
        let mut online = OnlineMetrics::new(spec.clone());
        for r in log.records() {
            online.observe(r);
        }
        let offline = analyze(log.records(), spec);
        assert_eq!(online.finish(), offline);
        offline
    }

    #[test]
    fn ndjson_round_trip() {
        let mut log = MetricLog::default();
        log.push(
            t(1.5),
            RecordBody::LinkEvent { link: "l".into(), state: LinkState::Up, previous: LinkState::Down },
        );
        sample(&mut log, 2.0, 9_999_999.5);
        log.push(
            t(3.0),
            RecordBody::Connection {
                wmr: "wmr1".into(),
                controller: Address::new(10, 0, 255, 1),
                status: ConnStatus::Established,
            },
        );
        let mut buf = Vec::new();
        log.write_ndjson(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.lines().next().unwrap().contains("\"kind\":\"LinkEvent\""));
        assert!(text.contains("\"time\":1500000"));
        let back = MetricLog::read_ndjson(&buf[..]).unwrap();
        assert_eq!(back, log);
    }

    #[test]
    fn merge_measurements() {
        let mut log = MetricLog::default();
        transition(&mut log, 10.0, "wmr1", "connected", Some(2));
        transition(&mut log, 10.0, "wmr2", "emergency", None);
        log.push(t(73.0), RecordBody::PingResult { probe: "p".into(), seq: 73, sent: t(72.9), rtt: t(0.1) });
        transition(&mut log, 74.0, "wmr2", "connected", Some(1));
        transition(&mut log, 75.5, "wmr1", "disconnected", None);
        transition(&mut log, 75.5, "wmr1", "connected", Some(1));
        let spec = MeasureSpec {
            kind: MeasureKind::Merge,
            event_at: t(60.0),
            probe: Some("p".into()),
            flow: None,
            wmrs: vec!["wmr1".into(), "wmr2".into()],
        };
        let m = both(&log, &spec);
        assert_eq!(m.connectivity, Metric::Value(t(13.0)));
        assert!((m.selection_secs().unwrap() - 2.5).abs() < 1e-9);
        assert_eq!(m.throughput_gap, Metric::NotApplicable);
    }

    #[test]
    fn unresolved_when_nothing_happens() {
        let mut log = MetricLog::default();
        transition(&mut log, 10.0, "wmr1", "connected", Some(2));
        let spec = MeasureSpec {
            kind: MeasureKind::Merge,
            event_at: t(60.0),
            probe: Some("p".into()),
            flow: None,
            wmrs: vec!["wmr1".into()],
        };
        let m = both(&log, &spec);
        assert_eq!(m.connectivity, Metric::Unresolved);
        assert_eq!(m.selection_cell(), "unresolved");
    }

    #[test]
    fn throughput_gap_from_samples() {
        let mut log = MetricLog::default();
        for i in 0..100 {
            sample(&mut log, 110.0 + 0.1 * f64::from(i), 10e6);
        }
        // dip at 120.2..=124.0, partial back at 124.6, recovered at 125.0
        for i in 0..60 {
            let at = 120.0 + 0.1 * f64::from(i);
            let rate = if at < 120.15 {
                10e6
            } else if at < 124.05 {
                0.0
            } else if at < 124.95 {
                5e6
            } else {
                10e6
            };
            sample(&mut log, at, rate);
        }
        let spec = MeasureSpec {
            kind: MeasureKind::Partition,
            event_at: t(120.0),
            probe: None,
            flow: Some("f".into()),
            wmrs: vec![],
        };
        let m = both(&log, &spec);
        let gap = m.throughput_gap.secs().unwrap();
        assert!((gap - 4.8).abs() < 1e-6, "{gap}");
        assert_eq!(m.connectivity, Metric::NotApplicable);
        assert_eq!(m.selection_delay, None);
    }

    #[test]
    fn no_dip_means_zero_gap() {
        let mut log = MetricLog::default();
        for i in 0..100 {
            sample(&mut log, 110.0 + 0.1 * f64::from(i), 10e6);
        }
        let spec = MeasureSpec {
            kind: MeasureKind::Partition,
            event_at: t(115.0),
            probe: None,
            flow: Some("f".into()),
            wmrs: vec![],
        };
        assert_eq!(both(&log, &spec).throughput_gap, Metric::Value(SimTime::ZERO));
    }

    #[test]
    fn csv_cells() {
        assert_eq!(Metric::Value(t(13.25)).csv_cell(), "13.250000");
        assert_eq!(Metric::Unresolved.csv_cell(), "unresolved");
        assert_eq!(Metric::NotApplicable.csv_cell(), "");
        assert_eq!(Metric::parse_cell("13.250000").unwrap(), Metric::Value(t(13.25)));
        assert_eq!(Metric::parse_cell("unresolved").unwrap(), Metric::Unresolved);
        assert!(Metric::parse_cell("abc").is_err());
        let row = SummaryRow {
            seed: 3,
            scenario: "merge".into(),
            m: Measurements {
                connectivity: Metric::Value(t(13.0)),
                selection_delay: Some(Ok(-0.25)),
                throughput_gap: Metric::NotApplicable,
            },
        };
        assert_eq!(row.csv_line(), "3,merge,13.000000,-0.250000,");
    }
}
