//! End-to-end acceptance checks. Each test prints one PASS/FAIL line.

mod common;

use std::sync::OnceLock;

use wmsdn::addr::Address;
use wmsdn::flow::{FlowAction, FlowMatch, FlowRule, RuleOrigin};
use wmsdn::metrics::{throughput_samples, Metric, RecordBody};
use wmsdn::runner;
use wmsdn::scenario::Scenario;
use wmsdn::sim::{run, RunOutput, World};
use wmsdn::time::SimTime;

/// Allowance for the probe and connect round trips of a handshake.
const SETUP: f64 = 0.1;

fn report(n: u32, ok: bool, detail: &str) {
    println!("criterion {n}: {} - {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {n} failed: {detail}");
}

fn runs(name: &str) -> &'static [RunOutput] {
    static MERGE: OnceLock<Vec<RunOutput>> = OnceLock::new();
    static PARTITION: OnceLock<Vec<RunOutput>> = OnceLock::new();
    let cell = match name {
        "merge" => &MERGE,
        _ => &PARTITION,
    };
    cell.get_or_init(|| {
        let sc = Scenario::builtin(name).unwrap();
        assert!(sc.seeds.len() >= 20);
        sc.seeds.iter().map(|&s| run(&sc, s)).collect()
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn secs(m: Metric) -> f64 {
    match m {
        Metric::Value(t) => t.as_secs_f64(),
        other => panic!("expected a value, got {other:?}"),
    }
}

#[test]
fn criterion_1_merge_connectivity() {
    let sc = Scenario::builtin("merge").unwrap();
    let k = sc.olsr.hellos_to_up as f64;
    let h = sc.olsr.hello_interval;
    let lo = (k - 1.0) * h * (1.0 - sc.olsr.hello_jitter);
    let hi = k * h * (1.0 + sc.olsr.hello_jitter) + 2.0 + 1.0;
    let v: Vec<f64> = runs("merge").iter().map(|r| secs(r.summary.m.connectivity)).collect();
    let m = mean(&v);
    let outside: Vec<f64> = v.iter().copied().filter(|x| *x < lo || *x > hi).collect();
    report(
        1,
        (10.0..=17.0).contains(&m) && outside.is_empty(),
        &format!("mean {m:.3} s over {} seeds, per-run bound [{lo:.2}, {hi:.2}], outside {outside:?}", v.len()),
    );
}

#[test]
fn criterion_2_merge_selection_delay() {
    let sc = Scenario::builtin("merge").unwrap();
    let bound = sc.eftm.poll_period + SETUP;
    let v: Vec<f64> = runs("merge").iter().map(|r| r.summary.m.selection_secs().expect("resolved")).collect();
    let m = mean(&v);
    let worst = v.iter().copied().fold(f64::MIN, f64::max);
    report(
        2,
        (1.4..=2.6).contains(&m) && worst <= bound,
        &format!("mean {m:.3} s, max {worst:.3} s, per-run bound {bound:.2} s"),
    );
}

#[test]
fn criterion_3_partition_selection_delay() {
    let sc = Scenario::builtin("partition").unwrap();
    let e = &sc.eftm;
    let detection = e.keepalive_interval + e.connect_timeout;
    let bound = detection + e.poll_period + e.connect_timeout + SETUP;
    let v: Vec<f64> = runs("partition").iter().map(|r| r.summary.m.selection_secs().expect("resolved")).collect();
    let m = mean(&v);
    let worst = v.iter().copied().fold(f64::MIN, f64::max);
    report(
        3,
        (4.0..=7.0).contains(&m) && worst <= bound,
        &format!("mean {m:.3} s, max {worst:.3} s, per-run bound {bound:.2} s"),
    );
}

#[test]
fn criterion_4_throughput_dip_and_recovery() {
    let sc = Scenario::builtin("partition").unwrap();
    let m = sc.measure.as_ref().unwrap();
    let flow = m.flow.as_deref().unwrap();
    let event = m.event_at.as_secs_f64();
    let recovery = sc.flows[0].loss_recovery_delay.as_secs_f64();
    let mut failures = Vec::new();
    let mut worst_slack = f64::MAX;
    for r in runs("partition") {
        let samples: Vec<(f64, f64)> =
            throughput_samples(r.log.records(), flow).map(|(t, x)| (t.as_secs_f64(), x)).collect();
        let before: Vec<f64> = samples.iter().filter(|(t, _)| *t >= event - 5.0 && *t < event).map(|s| s.1).collect();
        let steady = mean(&before);
        let after: Vec<&(f64, f64)> = samples.iter().filter(|(t, _)| *t >= event).collect();
        let Some(last_zero) = after.iter().rposition(|(_, x)| *x == 0.0) else {
            failures.push(format!("seed {}: no zero sample", r.summary.seed));
            continue;
        };
        let back = after[last_zero + 1..].iter().find(|(_, x)| *x >= 0.9 * steady);
        let sel = r.summary.m.selection_secs().expect("resolved");
        let limit = event + sel + recovery + 1.0;
        match back {
            Some((t, _)) if *t <= limit + 1e-9 => worst_slack = worst_slack.min(limit - t),
            Some((t, _)) => failures.push(format!("seed {}: back at {t:.3}, limit {limit:.3}", r.summary.seed)),
            None => failures.push(format!("seed {}: never recovered", r.summary.seed)),
        }
        assert!(steady > 0.0, "seed {}: no steady-state traffic", r.summary.seed);
    }
    report(
        4,
        failures.is_empty(),
        &format!("{} seeds, smallest slack {worst_slack:.3} s, failures {failures:?}", runs("partition").len()),
    );
}

#[test]
fn criterion_5_single_master() {
    let mut total = 0;
    let mut records = 0;
    let mut runs_checked = 0;
    let random: Vec<RunOutput> = (0..20)
        .map(|c| {
            let case = common::random_case(c);
            run(&common::load(&case), c)
        })
        .collect();
    for r in runs("merge").iter().chain(runs("partition")).chain(&random) {
        // Recount from the log itself rather than trusting the counter.
        let mut held: std::collections::BTreeMap<&str, std::collections::BTreeSet<Address>> = Default::default();
        for rec in r.log.records() {
            records += 1;
            match &rec.body {
                RecordBody::Connection { wmr, controller, status } => {
                    let set = held.entry(wmr.as_str()).or_default();
                    match status {
                        wmsdn::eftm::ConnStatus::Established => {
                            set.insert(*controller);
                            if set.len() > 1 {
                                total += 1;
                            }
                        }
                        wmsdn::eftm::ConnStatus::Closed => {
                            set.remove(controller);
                        }
                        wmsdn::eftm::ConnStatus::Opening => {}
                    }
                }
                RecordBody::Violation { .. } => total += 1,
                _ => {}
            }
        }
        total += r.stats.single_master_violations;
        runs_checked += 1;
    }
    report(5, total == 0, &format!("{total} violations in {runs_checked} runs, {records} records"));
}

#[test]
fn criterion_6_and_7_random_graphs() {
    let cases = 200;
    let mut master_bad = Vec::new();
    let mut routing_bad = Vec::new();
    let mut checks = 0;
    for c in 0..cases {
        let case = common::random_case(c);
        let sc = common::load(&case);
        let mut w = World::new(&sc, c);
        for &at in &case.checkpoints {
            w.run_until(SimTime::from_secs_f64(at));
            checks += 1;
            for v in common::master_violations(&w) {
                master_bad.push(format!("case {c} t={at}: {v}"));
            }
            for v in common::routing_violations(&w) {
                routing_bad.push(format!("case {c} t={at}: {v}"));
            }
        }
    }
    let first = |v: &Vec<String>| v.iter().take(5).cloned().collect::<Vec<_>>();
    println!(
        "criterion 6: {} - {cases} graphs, {checks} quiescent checks, {} problems {:?}",
        if master_bad.is_empty() { "PASS" } else { "FAIL" },
        master_bad.len(),
        first(&master_bad)
    );
    println!(
        "criterion 7: {} - {cases} graphs, {checks} quiescent checks, {} problems {:?}",
        if routing_bad.is_empty() { "PASS" } else { "FAIL" },
        routing_bad.len(),
        first(&routing_bad)
    );
    assert!(master_bad.is_empty() && routing_bad.is_empty());
}

#[test]
fn criterion_8_rules_survive_handover() {
    let sc = Scenario::builtin("merge").unwrap();
    let mut w = World::new(&sc, 1);
    let wmr1 = w.node("wmr1");
    let name = "wmr1".to_string();
    let ctrl2: Address = "10.0.255.2".parse().unwrap();
    let ctrl1: Address = "10.0.255.1".parse().unwrap();
    w.run_until(SimTime::from_secs(59));
    assert_eq!(w.eftm(wmr1).unwrap().master(), Some(ctrl2), "wmr1 should be on ctrl2 before the merge");
    let tagged: Vec<FlowRule> = (0..5)
        .map(|k| {
            FlowRule::new(
                100,
                FlowMatch::parse(&format!("172.16.{k}.0/24"), None).unwrap(),
                FlowAction::Drop,
                RuleOrigin::Controller(ctrl2),
            )
        })
        .collect();
    for r in &tagged {
        w.install_rule(wmr1, *r);
    }
    let matches_tagged = |w: &World| {
        let rules: Vec<&FlowRule> = w.flow_table(wmr1).unwrap().rules().collect();
        rules.len() == tagged.len() && tagged.iter().all(|t| rules.iter().any(|r| r.same_rule(t)))
    };
    assert!(matches_tagged(&w));
    let mark = w.log().len();
    let (mut closed, mut established, mut flushed) = (false, false, false);
    let mut checked_between = 0;
    while !flushed && w.step() {
        for rec in &w.log().records()[mark..] {
            match &rec.body {
                RecordBody::Connection { wmr, controller, status } if *wmr == name => match status {
                    wmsdn::eftm::ConnStatus::Closed if *controller == ctrl2 => closed = true,
                    wmsdn::eftm::ConnStatus::Established if *controller == ctrl1 => established = true,
                    _ => {}
                },
                RecordBody::RuleEvent { wmr, event, .. } if *wmr == name && event == "flush" => flushed = true,
                _ => {}
            }
        }
        if !flushed {
            assert!(matches_tagged(&w), "table changed at {} before the new controller flushed", w.now());
            if closed && established {
                checked_between += 1;
            }
        }
    }
    let gone = flushed && w.flow_table(wmr1).unwrap().is_empty();
    report(
        8,
        closed && established && checked_between > 0 && gone,
        &format!(
            "closed {closed}, established {established}, {checked_between} steps checked between handover and flush, flushed {flushed}"
        ),
    );
}

#[test]
fn criterion_9_determinism() {
    let mut same = true;
    let mut detail = Vec::new();
    for name in ["merge", "partition"] {
        let sc = Scenario::builtin(name).unwrap();
        for seed in [1, 7] {
            let a = run(&sc, seed);
            let b = run(&sc, seed);
            let (mut la, mut lb) = (Vec::new(), Vec::new());
            a.log.write_ndjson(&mut la).unwrap();
            b.log.write_ndjson(&mut lb).unwrap();
            let ok = la == lb && a.summary.csv_line() == b.summary.csv_line() && a.online == b.online;
            let shared = &runs(name)[(seed - 1) as usize];
            let ok = ok && runner::results_csv(std::slice::from_ref(&a.summary)) == runner::results_csv(std::slice::from_ref(&shared.summary));
            same &= ok;
            detail.push(format!("{name}/{seed}: {} bytes", la.len()));
        }
    }
    report(9, same, &detail.join(", "));
}

#[test]
fn online_and_offline_metrics_agree() {
    for r in runs("merge").iter().chain(runs("partition")) {
        assert_eq!(r.online, r.summary.m, "seed {}", r.summary.seed);
    }
}
