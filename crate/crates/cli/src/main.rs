use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rlsim_core::experiment::{self, GridAxis};
use rlsim_core::scenario::Scenario;
use rlsim_core::{Error, Result};

/// Disaggregated RL pipeline simulator.
#[derive(Parser, Debug)]
#[command(name = "rlsim", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run every baseline pair of a scenario at one seed.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Workload seed; defaults to the scenario's own.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run all baseline pairs over several seeds and normalize throughput.
    Compare {
        #[arg(long)]
        scenario: PathBuf,
        /// Comma-separated seeds; `a..b` (exclusive) and `a..=b` ranges allowed.
        #[arg(long, default_value = "1")]
        seeds: String,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run the first baseline pair over a cartesian parameter grid.
    Sweep {
        #[arg(long)]
        scenario: PathBuf,
        /// `dotted.path=v1,v2,...`; repeat for more axes.
        #[arg(long)]
        grid: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Print the circuit plan of every fabric epoch as JSON.
    TopoDump {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Write `topo.json` into this directory instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print step time and throughput per mode and batch size as CSV.
    ProfileDump {
        #[arg(long)]
        scenario: PathBuf,
        /// Write `profile.csv` into this directory instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_seeds(spec: &str) -> Result<Vec<u64>> {
    let bad = || Error::config(format!("invalid seed list {spec:?}"));
    let num = |s: &str| s.trim().parse::<u64>().map_err(|_| bad());
    let mut seeds = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((a, b)) = part.split_once("..=") {
            seeds.extend(num(a)?..=num(b)?);
        } else if let Some((a, b)) = part.split_once("..") {
            seeds.extend(num(a)?..num(b)?);
        } else {
            seeds.push(num(part)?);
        }
    }
    if seeds.is_empty() {
        return Err(bad());
    }
    Ok(seeds)
}

fn emit(out: Option<&Path>, file: &str, contents: &str) -> Result<()> {
    match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join(file), contents)?;
            Ok(())
        }
        None => {
            print!("{contents}");
            Ok(())
        }
    }
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run { scenario, seed, out } => {
            let scn = Scenario::load(&scenario)?;
            let seed = seed.unwrap_or(scn.workload.seed);
            let runs = experiment::run(&scn, seed, &out)?;
            println!("pair,seed,samples_per_s,tokens_per_s,total_time,reconfigs");
            for r in runs {
                let s = &r.metrics.summary;
                println!("{},{},{:.4},{:.1},{:.2},{}", r.pair, r.seed, s.samples_per_s, s.tokens_per_s, s.total_time, s.reconfigs);
            }
        }
        Command::Compare { scenario, seeds, out } => {
            let seeds = parse_seeds(&seeds)?;
            let scn = Scenario::load(&scenario)?;
            let rows = experiment::compare(&scn, &seeds, &out)?;
            println!("pair,seed,samples_per_s,normalized,cost_efficiency");
            for r in rows {
                println!("{},{},{:.4},{:.4},{:.4}", r.pair, r.seed, r.samples_per_s, r.normalized, r.cost_efficiency);
            }
        }
        Command::Sweep { scenario, grid, seed, out } => {
            let grid: Vec<GridAxis> = grid.iter().map(|g| experiment::parse_grid_axis(g)).collect::<Result<_>>()?;
            let scn = Scenario::load(&scenario)?;
            let seed = seed.unwrap_or(scn.workload.seed);
            let rows = experiment::sweep(&scn, &grid, seed, &out)?;
            println!("wrote {} rows to {}", rows.len(), out.join("sweep.csv").display());
        }
        Command::TopoDump { scenario, seed, out } => {
            let scn = Scenario::load(&scenario)?;
            let seed = seed.unwrap_or(scn.workload.seed);
            emit(out.as_deref(), "topo.json", &experiment::topo_dump(&scn, seed)?)?;
        }
        Command::ProfileDump { scenario, out } => {
            let scn = Scenario::load(&scenario)?;
            emit(out.as_deref(), "profile.csv", &experiment::profile_dump(&scn))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("RLSIM_LOG", "warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("rlsim: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 1 })
        }
    }
}
