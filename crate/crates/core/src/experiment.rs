//! Experiment drivers behind the command line: single runs, baseline
//! comparisons, parameter sweeps and the topology/profile dumps.
//!
//! Every file written carries the scenario hash and the seed.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::fabric::{network_cost, CostBreakdown, TopologyKind};
use crate::perfmodel::profile_csv;
use crate::scenario::{set_path, Pair, Scenario, SchedulerKind};
use crate::simengine::{run_pipeline, Metrics, Summary};

/// One finished pipeline run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub pair: Pair,
    pub seed: u64,
    pub scenario_hash: String,
    pub metrics: Metrics,
    pub network_cost: CostBreakdown,
}

/// Switch and transceiver cost of the scenario's cluster built as `kind`.
pub fn fabric_cost(scn: &Scenario, kind: TopologyKind) -> Result<CostBreakdown> {
    let f = &scn.fabric;
    let endpoints: u64 = f.pods.iter().map(|p| p.servers as u64 * f.nics_per_server as u64).sum();
    network_cost(kind, endpoints, f.switch_radix, f.profile()?.radix, &f.prices)
}

pub fn run_one(scn: &Scenario, pair: Pair, seed: u64) -> Result<RunOutput> {
    log::info!("running {pair} seed {seed}");
    let metrics = run_pipeline(&scn.setup(pair, seed))?;
    Ok(RunOutput { pair, seed, scenario_hash: scn.hash(), metrics, network_cost: fabric_cost(scn, pair.fabric)? })
}

/// Runs every `(pair, seed)` combination in parallel; results keep input order.
pub fn run_many(scn: &Scenario, jobs: &[(Pair, u64)]) -> Result<Vec<RunOutput>> {
    jobs.par_iter().map(|&(pair, seed)| run_one(scn, pair, seed)).collect()
}

fn tag_csv(csv: &str, hash: &str, seed: u64) -> String {
    let mut lines = csv.lines();
    let mut out = match lines.next() {
        Some(h) => format!("scenario_hash,seed,{h}\n"),
        None => return String::new(),
    };
    for l in lines {
        out += &format!("{hash},{seed},{l}\n");
    }
    out
}

fn tagged<T: Serialize>(item: &T, hash: &str, seed: u64) -> Map<String, Value> {
    let mut m = match serde_json::to_value(item).expect("record serializes") {
        Value::Object(m) => m,
        other => {
            let mut m = Map::new();
            m.insert("value".into(), other);
            m
        }
    };
    m.insert("scenario_hash".into(), hash.into());
    m.insert("seed".into(), seed.into());
    m
}

fn tag_jsonl<T: Serialize>(items: &[T], hash: &str, seed: u64) -> String {
    items.iter().map(|x| serde_json::to_string(&tagged(x, hash, seed)).unwrap() + "\n").collect()
}

fn write(path: PathBuf, contents: &str) -> Result<()> {
    fs::write(&path, contents).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

/// Directory of one run: `out/{scheduler}/{fabric}/{seed}`.
pub fn run_dir(out: &Path, pair: Pair, seed: u64) -> PathBuf {
    out.join(pair.scheduler.name()).join(pair.fabric.name()).join(seed.to_string())
}

/// Writes metrics, summary, decision and fabric logs, remaining-request
/// curve, communication records and the per-epoch circuit plans.
pub fn write_run(out: &Path, scn: &Scenario, run: &RunOutput) -> Result<PathBuf> {
    let dir = run_dir(out, run.pair, run.seed);
    fs::create_dir_all(&dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
    let (h, s) = (run.scenario_hash.as_str(), run.seed);
    let m = &run.metrics;
    write(dir.join("metrics.csv"), &tag_csv(&m.steps_csv(), h, s))?;
    write(dir.join("remaining.csv"), &tag_csv(&m.remaining_csv(), h, s))?;
    write(dir.join("comm.csv"), &tag_csv(&m.comm_csv(), h, s))?;
    write(dir.join("decisions.jsonl"), &tag_jsonl(&m.decisions, h, s))?;
    write(dir.join("fabric.jsonl"), &tag_jsonl(&m.fabric, h, s))?;
    let topo = serde_json::json!({ "scenario_hash": h, "seed": s, "epochs": m.circuit_plans });
    write(dir.join("topo.json"), &(serde_json::to_string_pretty(&topo).unwrap() + "\n"))?;
    let mut summary = tagged(&m.summary, h, s);
    summary.insert("scenario".into(), scn.name.clone().into());
    summary.insert("pair".into(), run.pair.to_string().into());
    summary.insert("network_cost".into(), serde_json::to_value(run.network_cost).unwrap());
    write(dir.join("summary.json"), &(serde_json::to_string_pretty(&summary).unwrap() + "\n"))?;
    Ok(dir)
}

/// Runs every baseline pair of the scenario at `seed` and writes the outputs.
pub fn run(scn: &Scenario, seed: u64, out: &Path) -> Result<Vec<RunOutput>> {
    let jobs: Vec<(Pair, u64)> = scn.pairs()?.into_iter().map(|p| (p, seed)).collect();
    let runs = run_many(scn, &jobs)?;
    for r in &runs {
        write_run(out, scn, r)?;
    }
    Ok(runs)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub pair: String,
    pub seed: u64,
    pub samples_per_s: f64,
    pub tokens_per_s: f64,
    /// Throughput over the reference pair's at the same seed.
    pub normalized: f64,
    pub network_cost: f64,
    /// Normalized throughput over network cost relative to the reference.
    pub cost_efficiency: f64,
}

fn default_reference(pairs: &[Pair]) -> Pair {
    let preferred = Pair { scheduler: SchedulerKind::Orchestrrl, fabric: TopologyKind::FatTree };
    if pairs.contains(&preferred) {
        preferred
    } else {
        pairs[0]
    }
}

/// Runs all pairs over `seeds`, writes each run plus `comparison.csv`.
pub fn compare(scn: &Scenario, seeds: &[u64], out: &Path) -> Result<Vec<CompareRow>> {
    let pairs = scn.pairs()?;
    if pairs.len() < 2 {
        return Err(Error::config("compare needs at least two baseline pairs"));
    }
    if seeds.is_empty() {
        return Err(Error::config("compare needs at least one seed"));
    }
    let reference = scn.reference_pair()?.unwrap_or_else(|| default_reference(&pairs));
    let mut all = pairs.clone();
    if !all.contains(&reference) {
        all.push(reference);
    }
    let jobs: Vec<(Pair, u64)> = all.iter().flat_map(|&p| seeds.iter().map(move |&s| (p, s))).collect();
    let runs = run_many(scn, &jobs)?;
    for r in &runs {
        write_run(out, scn, r)?;
    }
    let find = |p: Pair, s: u64| runs.iter().find(|r| r.pair == p && r.seed == s).expect("run exists");
    let mut rows = Vec::new();
    for &pair in &pairs {
        for &seed in seeds {
            let r = find(pair, seed);
            let base = find(reference, seed);
            let thr = r.metrics.summary.samples_per_s;
            let ref_thr = base.metrics.summary.samples_per_s;
            let normalized = if ref_thr > 0.0 { thr / ref_thr } else { 0.0 };
            let cost = r.network_cost.total;
            let rel_cost = if base.network_cost.total > 0.0 { cost / base.network_cost.total } else { 1.0 };
            rows.push(CompareRow {
                pair: pair.to_string(),
                seed,
                samples_per_s: thr,
                tokens_per_s: r.metrics.summary.tokens_per_s,
                normalized,
                network_cost: cost,
                cost_efficiency: if rel_cost > 0.0 { normalized / rel_cost } else { 0.0 },
            });
        }
    }
    let hash = scn.hash();
    let mut csv = format!(
        "scenario_hash,reference,pair,seed,samples_per_s,tokens_per_s,normalized,network_cost,cost_efficiency\n"
    );
    for r in &rows {
        csv += &format!(
            "{hash},{reference},{},{},{},{},{},{},{}\n",
            r.pair, r.seed, r.samples_per_s, r.tokens_per_s, r.normalized, r.network_cost, r.cost_efficiency
        );
    }
    fs::create_dir_all(out)?;
    write(out.join("comparison.csv"), &csv)?;
    Ok(rows)
}

/// One sweep axis: a dotted scenario path and the values it takes.
pub type GridAxis = (String, Vec<Value>);

/// Parses `path=v1,v2,...`. Values are read as JSON, falling back to strings.
pub fn parse_grid_axis(spec: &str) -> Result<GridAxis> {
    let (path, values) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(format!("grid entry {spec:?} must look like path=v1,v2")))?;
    let path = path.trim();
    if path.is_empty() {
        return Err(Error::config(format!("grid entry {spec:?} has an empty path")));
    }
    let values: Vec<Value> = values
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string())))
        .collect();
    if values.is_empty() {
        return Err(Error::config(format!("grid entry {spec:?} has no values")));
    }
    Ok((path.to_string(), values))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub point: usize,
    pub params: Vec<(String, Value)>,
    pub seed: u64,
    pub scenario_hash: String,
    pub summary: Summary,
}

fn cartesian(grid: &[GridAxis]) -> Vec<Vec<(String, Value)>> {
    let mut points = vec![Vec::new()];
    for (path, values) in grid {
        points = points
            .into_iter()
            .flat_map(|p| {
                values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push((path.clone(), v.clone()));
                    q
                })
            })
            .collect();
    }
    points
}

/// Runs the scenario's first pair at every grid point (an empty grid is a
/// single base run). Writes each run under `point-{i}` plus `sweep.csv`.
pub fn sweep(scn: &Scenario, grid: &[GridAxis], seed: u64, out: &Path) -> Result<Vec<SweepRow>> {
    let base = scn.to_value();
    let pair = scn.pairs()?[0];
    let mut scenarios = Vec::new();
    for point in cartesian(grid) {
        let mut v = base.clone();
        for (path, value) in &point {
            set_path(&mut v, path, value.clone())?;
        }
        let s = Scenario::from_value(v).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("sweep point {point:?}: {m}")),
            other => other,
        })?;
        scenarios.push((point, s));
    }
    let runs: Vec<RunOutput> = scenarios.par_iter().map(|(_, s)| run_one(s, pair, seed)).collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for (i, ((point, s), r)) in scenarios.iter().zip(&runs).enumerate() {
        write_run(&out.join(format!("point-{i}")), s, r)?;
        rows.push(SweepRow {
            point: i,
            params: point.clone(),
            seed,
            scenario_hash: r.scenario_hash.clone(),
            summary: r.metrics.summary.clone(),
        });
    }
    let mut csv = String::from("point,scenario_hash,seed,pair");
    for (path, _) in grid {
        csv += &format!(",{path}");
    }
    csv += ",samples_per_s,tokens_per_s,total_time,mean_gen_makespan,mean_train_time,mean_weight_sync,\
            reconfigs,reconfig_overhead,plan_migrations,rebalance_migrations,mean_busy_ratio\n";
    for r in &rows {
        csv += &format!("{},{},{},{pair}", r.point, r.scenario_hash, r.seed);
        for (_, v) in &r.params {
            csv += &format!(",{}", v.to_string().replace(',', ";"));
        }
        let s = &r.summary;
        csv += &format!(
            ",{},{},{},{},{},{},{},{},{},{},{}\n",
            s.samples_per_s,
            s.tokens_per_s,
            s.total_time,
            s.mean_gen_makespan,
            s.mean_train_time,
            s.mean_weight_sync,
            s.reconfigs,
            s.reconfig_overhead,
            s.plan_migrations,
            s.rebalance_migrations,
            s.mean_busy_ratio
        );
    }
    fs::create_dir_all(out)?;
    write(out.join("sweep.csv"), &csv)?;
    Ok(rows)
}

/// Circuit plans per epoch as JSON, from the first hybrid-fabric pair (or
/// the first pair moved onto the hybrid fabric).
pub fn topo_dump(scn: &Scenario, seed: u64) -> Result<String> {
    let pairs = scn.pairs()?;
    let pair = pairs.iter().copied().find(|p| p.fabric == TopologyKind::RFabric).unwrap_or(Pair {
        scheduler: pairs[0].scheduler,
        fabric: TopologyKind::RFabric,
    });
    let mut hybrid = scn.clone();
    hybrid.fabric.kind = TopologyKind::RFabric;
    hybrid.fabric.validate()?;
    let run = run_one(&hybrid, pair, seed)?;
    let doc = serde_json::json!({
        "scenario_hash": scn.hash(),
        "seed": seed,
        "pair": pair.to_string(),
        "epochs": run.metrics.circuit_plans,
    });
    Ok(serde_json::to_string_pretty(&doc).unwrap() + "\n")
}

/// Step time and throughput per mode and batch size, as CSV.
pub fn profile_dump(scn: &Scenario) -> String {
    tag_csv(&profile_csv(&scn.modes), &scn.hash(), scn.workload.seed)
}
