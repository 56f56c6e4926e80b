use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rayon::prelude::*;

use wmsdn::metrics::SummaryRow;
use wmsdn::runner;
use wmsdn::scenario::{parse_seed_range, Scenario};
use wmsdn::sim;

/// Wireless mesh SDN simulator.
#[derive(Parser)]
#[command(name = "wmsdn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario for one or more seeds.
    Run {
        /// Bundled scenario name (merge, partition) or path to a TOML file.
        scenario: String,
        #[arg(long, conflicts_with = "seeds")]
        seed: Option<u64>,
        /// Seed range such as 1..=20 or 1..21.
        #[arg(long)]
        seeds: Option<String>,
        /// Directory for logs and results.csv.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Override a scenario key, e.g. --set eftm.poll_period=2.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Check a scenario file and print what it contains.
    Validate { scenario: String },
    /// Run the scenario once per value of a parameter.
    Sweep {
        scenario: String,
        /// key=v1,v2,...
        #[arg(long)]
        param: String,
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Aggregate results.csv in an output directory.
    Report { dir: PathBuf },
}

fn split_kv(s: &str) -> Result<(String, String)> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => bail!("expected KEY=VALUE, got {s:?}"),
    }
}

fn load(source: &str, overrides: &[(String, String)]) -> Result<Scenario> {
    let text = runner::scenario_source(source)?;
    Scenario::from_toml_with(&text, overrides).with_context(|| format!("loading scenario {source}"))
}

fn pick_seeds(sc: &Scenario, seed: Option<u64>, seeds: Option<&str>) -> Result<Vec<u64>> {
    Ok(match (seed, seeds) {
        (Some(s), _) => vec![s],
        (None, Some(r)) => parse_seed_range(r).map_err(anyhow::Error::msg)?,
        (None, None) => sc.seeds.clone(),
    })
}

fn run_all(jobs: &[(Scenario, u64)], out: &Path) -> Result<Vec<SummaryRow>> {
    let results: Vec<Result<SummaryRow>> = jobs
        .par_iter()
        .map(|(sc, seed)| {
            let output = sim::run(sc, *seed);
            runner::write_log(out, &output).with_context(|| format!("writing log to {}", out.display()))?;
            if output.online != output.summary.m {
                bail!("{} seed {seed}: online and offline metrics disagree", sc.name);
            }
            Ok(output.summary)
        })
        .collect();
    let rows = results.into_iter().collect::<Result<Vec<_>>>()?;
    let mut all = if out.join(runner::RESULTS_FILE).exists() {
        runner::read_results(out).map_err(anyhow::Error::msg)?
    } else {
        Vec::new()
    };
    all.retain(|old| !rows.iter().any(|r| r.scenario == old.scenario && r.seed == old.seed));
    all.extend(rows.iter().cloned());
    let path = runner::write_results(out, &all)?;
    eprintln!("wrote {} rows to {} ({} total)", rows.len(), path.display(), all.len());
    Ok(rows)
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            scenario,
            seed,
            seeds,
            out,
            set,
        } => {
            let overrides = set.iter().map(|s| split_kv(s)).collect::<Result<Vec<_>>>()?;
            let sc = load(&scenario, &overrides)?;
            let jobs: Vec<(Scenario, u64)> = pick_seeds(&sc, seed, seeds.as_deref())?
                .into_iter()
                .map(|s| (sc.clone(), s))
                .collect();
            let rows = run_all(&jobs, &out)?;
            print!("{}", runner::results_csv(&rows));
        }
        Command::Validate { scenario } => {
            let sc = load(&scenario, &[])?;
            let topo = &sc.topology;
            let count = |k| topo.ids_of(k).count();
            println!("{}: valid", sc.name);
            println!(
                "  {} WMRs, {} controllers, {} hosts, {} links",
                count(wmsdn::topology::NodeKind::Wmr),
                count(wmsdn::topology::NodeKind::Controller),
                count(wmsdn::topology::NodeKind::Host),
                topo.links().len()
            );
            println!("  duration {}, {} seeds, {} events", sc.duration, sc.seeds.len(), sc.events.len());
        }
        Command::Sweep {
            scenario,
            param,
            seeds,
            out,
        } => {
            let (key, values) = split_kv(&param)?;
            let values: Vec<&str> = values.split(',').map(str::trim).filter(|v| !v.is_empty()).collect();
            if values.is_empty() {
                bail!("--param {key}= needs at least one value");
            }
            let mut jobs = Vec::new();
            for v in values {
                let base = load(&scenario, &[(key.clone(), v.to_string())])?;
                let name = format!("{}[{key}={v}]", base.name);
                let sc = load(&scenario, &[(key.clone(), v.to_string()), ("name".into(), name)])?;
                for s in pick_seeds(&sc, None, seeds.as_deref())? {
                    jobs.push((sc.clone(), s));
                }
            }
            let rows = run_all(&jobs, &out)?;
            print!("{}", runner::format_report(&rows));
        }
        Command::Report { dir } => {
            let rows = runner::read_results(&dir).map_err(anyhow::Error::msg)?;
            print!("{}", runner::format_report(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
