//! Batch helpers: per-run output files, the results CSV and summary
//! statistics over many seeds.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::metrics::{Measurements, Metric, SummaryRow, CSV_HEADER};
use crate::scenario::{ScenarioError, MERGE_TOML, PARTITION_TOML};
use crate::sim::RunOutput;

pub const RESULTS_FILE: &str = "results.csv";

/// Scenario source text for a bundled name (`merge`, `partition`) or a
/// path to a TOML file.
pub fn scenario_source(name_or_path: &str) -> Result<String, ScenarioError> {
    match name_or_path {
        "merge" => Ok(MERGE_TOML.to_string()),
        "partition" => Ok(PARTITION_TOML.to_string()),
        path => fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.to_string(),
            source,
        }),
    }
}

pub fn log_path(dir: &Path, scenario: &str, seed: u64) -> PathBuf {
    dir.join(format!("{scenario}-seed{seed}.ndjson"))
}

/// Writes the run's event log as NDJSON into `dir`.
pub fn write_log(dir: &Path, out: &RunOutput) -> io::Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = log_path(dir, &out.summary.scenario, out.summary.seed);
    let mut w = BufWriter::new(fs::File::create(&path)?);
    out.log.write_ndjson(&mut w)?;
    w.flush()?;
    Ok(path)
}

/// Rows sorted by scenario then seed, so output does not depend on the
/// order runs finished in.
pub fn results_csv(rows: &[SummaryRow]) -> String {
    let mut sorted: Vec<&SummaryRow> = rows.iter().collect();
    sorted.sort_by(|a, b| (&a.scenario, a.seed).cmp(&(&b.scenario, b.seed)));
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in sorted {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

pub fn write_results(dir: &Path, rows: &[SummaryRow]) -> io::Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(RESULTS_FILE);
    fs::write(&path, results_csv(rows))?;
    Ok(path)
}

pub fn parse_results(text: &str) -> Result<Vec<SummaryRow>, String> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == CSV_HEADER => {}
        other => return Err(format!("unexpected header {other:?}")),
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let lineno = i + 2;
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 5 {
            return Err(format!("line {lineno}: expected 5 columns, found {}", cells.len()));
        }
        let seed = cells[0].parse().map_err(|e| format!("line {lineno}: seed: {e}"))?;
        let selection_delay = match cells[3].trim() {
            "" => None,
            "unresolved" => Some(Err(())),
            v => Some(Ok(v.parse::<f64>().map_err(|e| format!("line {lineno}: selection delay: {e}"))?)),
        };
        rows.push(SummaryRow {
            seed,
            scenario: cells[1].to_string(),
            m: Measurements {
                connectivity: Metric::parse_cell(cells[2]).map_err(|e| format!("line {lineno}: {e}"))?,
                selection_delay,
                throughput_gap: Metric::parse_cell(cells[4]).map_err(|e| format!("line {lineno}: {e}"))?,
            },
        });
    }
    Ok(rows)
}

pub fn read_results(dir: &Path) -> Result<Vec<SummaryRow>, String> {
    let path = dir.join(RESULTS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    parse_results(&text)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ColumnStats {
    pub count: usize,
    pub unresolved: usize,
    pub mean: f64,
    pub min: f64,
    pub p50: f64,
    pub p90: f64,
    pub max: f64,
}

/// Nearest-rank percentile of sorted data.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

impl ColumnStats {
    /// `None` entries are unresolved values; an all-absent column gives
    /// `None`.
    pub fn from_values(values: &[Option<f64>]) -> Option<ColumnStats> {
        if values.is_empty() {
            return None;
        }
        let mut v: Vec<f64> = values.iter().flatten().copied().collect();
        v.sort_by(f64::total_cmp);
        let unresolved = values.len() - v.len();
        if v.is_empty() {
            return Some(ColumnStats {
                count: 0,
                unresolved,
                mean: f64::NAN,
                min: f64::NAN,
                p50: f64::NAN,
                p90: f64::NAN,
                max: f64::NAN,
            });
        }
        Some(ColumnStats {
            count: v.len(),
            unresolved,
            mean: v.iter().sum::<f64>() / v.len() as f64,
            min: v[0],
            p50: percentile(&v, 50.0),
            p90: percentile(&v, 90.0),
            max: v[v.len() - 1],
        })
    }
}

fn metric_value(m: Metric) -> Option<Option<f64>> {
    match m {
        Metric::NotApplicable => None,
        Metric::Unresolved => Some(None),
        Metric::Value(t) => Some(Some(t.as_secs_f64())),
    }
}

pub const COLUMNS: [&str; 3] = ["connectivity_time_s", "selection_delay_s", "throughput_gap_s"];

/// Statistics per scenario and column.
pub fn summarize(rows: &[SummaryRow]) -> BTreeMap<String, Vec<(&'static str, ColumnStats)>> {
    let mut by: BTreeMap<String, [Vec<Option<f64>>; 3]> = BTreeMap::new();
    for r in rows {
        let cols = by.entry(r.scenario.clone()).or_default();
        if let Some(v) = metric_value(r.m.connectivity) {
            cols[0].push(v);
        }
        if let Some(v) = r.m.selection_delay {
            cols[1].push(v.ok());
        }
        if let Some(v) = metric_value(r.m.throughput_gap) {
            cols[2].push(v);
        }
    }
    by.into_iter()
        .map(|(name, cols)| {
            let stats = COLUMNS
                .iter()
                .zip(cols.iter())
                .filter_map(|(c, v)| ColumnStats::from_values(v).map(|s| (*c, s)))
                .collect();
            (name, stats)
        })
        .collect()
}

pub fn format_report(rows: &[SummaryRow]) -> String {
    let mut out = String::new();
    for (scenario, cols) in summarize(rows) {
        let runs = rows.iter().filter(|r| r.scenario == scenario).count();
        let _ = writeln!(out, "{scenario} ({runs} runs)");
        for (name, s) in cols {
            let _ = writeln!(
                out,
                "  {name:<22} n={:<3} unresolved={:<2} mean={:.3} min={:.3} p50={:.3} p90={:.3} max={:.3}",
                s.count, s.unresolved, s.mean, s.min, s.p50, s.p90, s.max
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::time::SimTime;

    fn row(seed: u64, c: f64, s: Option<f64>) -> SummaryRow {
        SummaryRow {
            seed,
            scenario: "merge".into(),
            m: Measurements {
                connectivity: Metric::Value(SimTime::from_secs_f64(c)),
                selection_delay: Some(s.ok_or(())),
                throughput_gap: Metric::NotApplicable,
            },
        }
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![row(2, 13.5, Some(-0.25)), row(1, 12.0, None)];
        let text = results_csv(&rows);
        assert!(text.starts_with(CSV_HEADER));
        let back = parse_results(&text).unwrap();
        assert_eq!(back[0].seed, 1);
        assert_eq!(back[0].m.selection_delay, Some(Err(())));
        assert_eq!(back[1].m.selection_delay, Some(Ok(-0.25)));
        assert_eq!(back[1].m.connectivity, Metric::Value(SimTime::from_secs_f64(13.5)));
        assert_eq!(back[1].m.throughput_gap, Metric::NotApplicable);
    }

    #[test]
    fn bad_rows_are_reported_with_line() {
        let text = format!("{CSV_HEADER}\n1,merge,1.0,2.0\n");
        assert!(parse_results(&text).unwrap_err().starts_with("line 2"));
        assert!(parse_results("nope\n").is_err());
    }

    #[test]
    fn nearest_rank_percentiles() {
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(percentile(&v, 50.0), 5.0);
        assert_eq!(percentile(&v, 90.0), 9.0);
        assert_eq!(percentile(&v, 100.0), 10.0);
        assert_eq!(percentile(&v, 0.0), 1.0);
    }

    #[test]
    fn summary_counts_unresolved_separately() {
        let rows = vec![row(1, 10.0, Some(1.0)), row(2, 14.0, None), row(3, 12.0, Some(3.0))];
        let s = summarize(&rows);
        let cols = &s["merge"];
        assert_eq!(cols.len(), 2);
        let (_, sel) = &cols[1];
        assert_eq!((sel.count, sel.unresolved), (2, 1));
        assert_eq!(sel.mean, 2.0);
        assert_eq!(cols[0].1.mean, 12.0);
        assert!(format_report(&rows).contains("merge (3 runs)"));
    }
}
