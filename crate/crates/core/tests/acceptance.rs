//! End-to-end acceptance checks. Prints one `[PASS]`/`[FAIL]` line per
//! criterion and exits non-zero if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rlsim_core::experiment::{self, run_many, run_one};
use rlsim_core::fabric::{
    aggregate_prune_quantize, allocate_circuits, apply_plan, validate_and_repair, validate_plan as validate_circuits,
    Circuit, CircuitPlan, DemandSummary, FabricController, FabricState, Granularity, OcsLayer, Phase, PhaseIntent,
    PodRole, PodSpec, Primitive, Schedule, TemplateKind, TopologyKind,
};
use rlsim_core::netmodel::{
    collective_time, max_min_rates, simulate_flows, weight_sync_time, Algorithm, CollectivePrimitive, CollectiveSpec,
    Flow, Topology,
};
use rlsim_core::perfmodel::{
    instance_completion_estimate_at, kv_capacity, mean_footprint, migration_cost, switch_cost, CostModel,
    ParallelMode,
};
use rlsim_core::scenario::{Pair, Scenario};
use rlsim_core::scheduler::{solve_plan, validate_plan, KvPolicy, SchedulerConfig, SolveError};
use rlsim_core::workload::{fit_predictor, sample_trace, ArimaOrder, Bucket, BucketMember, LengthDistribution, LengthModel, WorkloadConfig};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn scenario(name: &str) -> Scenario {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(format!("{name}.json"));
    Scenario::load(&path).unwrap_or_else(|e| panic!("{e}"))
}

fn pair(s: &str) -> Pair {
    Pair::parse(s).unwrap()
}

// ---------------------------------------------------------------- planner

const POOL: [(&str, u32); 3] = [("tp1", 1), ("tp2", 2), ("tp4", 4)];

fn pool_mode(i: usize, kv_per_gpu: u64) -> ParallelMode {
    let (name, g) = POOL[i];
    let mut m = ParallelMode::tp(name, g, 0.01 + 0.004 * g as f64, 0.0004 / g as f64, kv_per_gpu);
    m.max_batch = 64;
    m
}

fn random_costs(rng: &mut ChaCha8Rng) -> CostModel {
    let mut reshard = BTreeMap::new();
    let names: Vec<&str> = std::iter::once("none").chain(POOL.iter().map(|p| p.0)).collect();
    for a in &names {
        for b in &names {
            if a != b {
                let t = if *b == "none" { rng.random_range(0.05..0.5) } else { rng.random_range(0.5..6.0) };
                reshard.insert(format!("{a}->{b}"), t);
            }
        }
    }
    CostModel {
        kv_bytes_per_token: rng.random_range(2e4..2e5),
        link_bw: rng.random_range(5e9..5e10),
        weight_reshard_time: reshard,
        recompute_rate: rng.random_range(1e4..1e5),
    }
}

struct Instance {
    buckets: Vec<Bucket>,
    prev: Vec<Option<ParallelMode>>,
    cands: Vec<ParallelMode>,
    costs: CostModel,
    cfg: SchedulerConfig,
}

fn random_instance(rng: &mut ChaCha8Rng, max_slots: usize, max_buckets: usize) -> Instance {
    let slots = rng.random_range(1..=max_slots);
    let kv = rng.random_range(4_000..30_000u64);
    let mut idx: Vec<usize> = (0..POOL.len()).collect();
    let n_modes = rng.random_range(1..=POOL.len());
    while idx.len() > n_modes {
        idx.remove(rng.random_range(0..idx.len()));
    }
    let cands: Vec<ParallelMode> = idx.iter().map(|&i| pool_mode(i, kv)).collect();
    let prev: Vec<Option<ParallelMode>> = (0..slots)
        .map(|_| {
            let c = rng.random_range(0..=POOL.len());
            (c > 0).then(|| pool_mode(c - 1, kv))
        })
        .collect();
    let n_buckets = rng.random_range(1..=max_buckets);
    let mut next_id = 0u64;
    let buckets = (0..n_buckets)
        .map(|i| {
            let index = rng.random_range(0..40u32);
            let members = (0..rng.random_range(1..=6))
                .map(|_| {
                    let generated_len = if rng.random_bool(0.5) { 0 } else { rng.random_range(1..800) };
                    let home = if rng.random_bool(0.3) { None } else { Some(rng.random_range(0..slots)) };
                    next_id += 1;
                    BucketMember {
                        id: next_id,
                        home,
                        prompt_len: rng.random_range(50..1500),
                        generated_len,
                        resident: home.is_some() && (generated_len > 0 || rng.random_bool(0.3)),
                    }
                })
                .collect();
            let _ = i;
            Bucket { index: index as usize, lower: index * 256, upper: (index + 1) * 256, representative: (index + 1) * 256, members }
        })
        .collect();
    let mut cfg = SchedulerConfig::new(rng.random_range(1..=8), cands.clone());
    let rho: f64 = rng.random_range(0.3..0.9);
    let delta = rng.random_range(0.0..(1.0 / rho - 1.0).min(0.9));
    cfg.kv_policy = KvPolicy { rho, delta, hard: rng.random_bool(0.25) };
    Instance { buckets, prev, cands, costs: random_costs(rng), cfg }
}

/// Exhaustive enumeration of every (mode per slot, bucket -> slot) pair,
/// assembled from the per-instance estimate and the cost primitives.
fn enumerate_optimum(inst: &Instance) -> Option<f64> {
    let (k, nb) = (inst.prev.len(), inst.buckets.len());
    let choices: Vec<Option<&ParallelMode>> = std::iter::once(None).chain(inst.cands.iter().map(Some)).collect();
    let masks = 1usize << nb;
    let fp = mean_footprint(&inst.buckets);
    let subset = |mask: usize| -> Vec<Bucket> {
        (0..nb).filter(|b| mask & (1 << b) != 0).map(|b| inst.buckets[b].clone()).collect()
    };
    let mut completion = vec![vec![0.0; masks]; choices.len()];
    let mut kv_demand = vec![0u64; masks];
    for mask in 0..masks {
        let sub = subset(mask);
        kv_demand[mask] = sub.iter().map(Bucket::kv_tokens).sum();
        for (c, m) in choices.iter().enumerate() {
            if let Some(m) = m {
                completion[c][mask] = instance_completion_estimate_at(&sub, m, fp);
            }
        }
    }
    // migration seconds for bucket b landing on slot s
    let mut mig = vec![vec![0.0; k]; nb];
    for (b, bucket) in inst.buckets.iter().enumerate() {
        for (s, row) in mig[b].iter_mut().enumerate() {
            *row = bucket
                .members
                .iter()
                .filter(|m| m.resident && m.home.is_some_and(|h| h != s))
                .map(|m| migration_cost(m.kv_tokens(), true, &inst.costs).seconds)
                .sum();
        }
    }
    // switch seconds for slot s taking choice c with the buckets in mask staying
    let mut sw = vec![vec![vec![0.0; masks]; choices.len()]; k];
    for s in 0..k {
        for (c, m) in choices.iter().enumerate() {
            for mask in 0..masks {
                let staying: Vec<u64> = subset(mask)
                    .iter()
                    .flat_map(|b| b.members.iter())
                    .filter(|mm| mm.resident && mm.home == Some(s))
                    .map(|mm| mm.kv_tokens())
                    .collect();
                sw[s][c][mask] = switch_cost(inst.prev[s].as_ref(), *m, &staying, &inst.costs).unwrap();
            }
        }
    }
    let pol = &inst.cfg.kv_policy;
    let mut best: Option<f64> = None;
    let mut y = vec![0usize; k];
    for yc in 0..choices.len().pow(k as u32) {
        let mut c = yc;
        for v in y.iter_mut() {
            *v = c % choices.len();
            c /= choices.len();
        }
        let gpus: u32 = y.iter().filter_map(|&c| choices[c].map(|m| m.gpus_required)).sum();
        if gpus > inst.cfg.g_total {
            continue;
        }
        'x: for xc in 0..k.pow(nb as u32) {
            let mut c = xc;
            let mut mask = vec![0usize; k];
            let mut migration = 0.0;
            for b in 0..nb {
                let s = c % k;
                c /= k;
                if choices[y[s]].is_none() {
                    continue 'x;
                }
                mask[s] |= 1 << b;
                migration += mig[b][s];
            }
            let mut z: f64 = 0.0;
            let mut switching = 0.0;
            for s in 0..k {
                switching += sw[s][y[s]][mask[s]];
                let Some(m) = choices[y[s]] else { continue };
                let cap = kv_capacity(m);
                let d = kv_demand[mask[s]] as f64;
                if d > pol.upper(cap) || (pol.hard && d < pol.lower(cap)) {
                    continue 'x;
                }
                z = z.max(completion[y[s]][mask[s]]);
            }
            let obj = z + migration + switching;
            if best.is_none_or(|b| obj < b) {
                best = Some(obj);
            }
        }
    }
    best
}

fn solver_exactness() -> Verdict {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut solved, mut infeasible, mut bad) = (0, 0, Vec::new());
    for i in 0..200 {
        let inst = random_instance(&mut rng, 3, 8);
        let oracle = enumerate_optimum(&inst);
        match (solve_plan(&inst.buckets, &inst.prev, &inst.cands, &inst.costs, &inst.cfg), oracle) {
            (Ok(plan), Some(o)) => {
                solved += 1;
                if !plan.exact || (plan.objective - o).abs() > 1e-9 * o.abs().max(1.0) {
                    bad.push(format!("#{i}: solver {} oracle {o}", plan.objective));
                }
            }
            (Err(SolveError::Infeasible { .. }), None) => infeasible += 1,
            (r, o) => bad.push(format!("#{i}: solver {:?} oracle {o:?}", r.map(|p| p.objective))),
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        bad.is_empty() && secs < 60.0,
        format!("{solved} optimal + {infeasible} infeasible of 200 agree, {} mismatches {:?}, {secs:.1}s", bad.len(), bad.first()),
    )
}

fn plan_feasibility_fuzz() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut plans, mut violations) = (0, Vec::new());
    for i in 0..10_000 {
        let mut inst = random_instance(&mut rng, 6, 12);
        inst.cfg.exact_threshold = if rng.random_bool(0.5) { 0.0 } else { 5e4 };
        match solve_plan(&inst.buckets, &inst.prev, &inst.cands, &inst.costs, &inst.cfg) {
            Ok(plan) => {
                plans += 1;
                let mut v = validate_plan(&plan, &inst.buckets, &inst.cfg);
                let gpus: u32 = plan.y.iter().flatten().map(|m| m.gpus_required).sum();
                if gpus > inst.cfg.g_total {
                    v.push(format!("{gpus} GPUs over budget"));
                }
                if plan.x.len() != inst.buckets.len() || plan.x.iter().any(|&k| plan.y.get(k).is_none_or(Option::is_none)) {
                    v.push("bucket on an idle or missing slot".into());
                }
                if !v.is_empty() {
                    violations.push(format!("#{i}: {}", v.join("; ")));
                }
            }
            Err(SolveError::Infeasible { .. }) => {}
            Err(e) => violations.push(format!("#{i}: {e:?}")),
        }
    }
    verdict(violations.is_empty(), format!("{plans} plans of 10000 calls, {} violations {:?}", violations.len(), violations.first()))
}

// ---------------------------------------------------------------- end-to-end

fn orchestrator_dominance() -> Verdict {
    let scn = scenario("heavy-tailed");
    assert!(scn.costs.is_free() && scn.scheduler.oracle_lengths, "scenario must be zero-cost with oracle lengths");
    let mut wins = 0;
    let mut worst = f64::INFINITY;
    for seed in 1..=100 {
        let jobs: Vec<(Pair, u64)> =
            ["verl-to/fat-tree", "verl-lo/fat-tree", "orchestrrl/fat-tree"].iter().map(|p| (pair(p), seed)).collect();
        let r = run_many(&scn, &jobs).unwrap();
        let ok = (0..r[2].metrics.steps.len()).all(|s| {
            let mk = |i: usize| r[i].metrics.steps[s].gen_makespan;
            let best = mk(0).min(mk(1));
            worst = worst.min(best / mk(2));
            mk(2) <= best + 1e-9
        });
        wins += ok as u32;
    }
    verdict(wins == 100, format!("{wins}/100 seeds, min static/orchestrated makespan ratio {worst:.3}"))
}

fn directional_speedup() -> Verdict {
    let t0 = Instant::now();
    let scn = scenario("tail-25k");
    assert!(!scn.costs.is_free());
    let pairs = [pair("verl-to/fat-tree"), pair("verl-lo/fat-tree"), pair("orchestrrl/fat-tree")];
    let jobs: Vec<(Pair, u64)> = (1..=50).flat_map(|s| pairs.iter().map(move |&p| (p, s))).collect();
    let runs = run_many(&scn, &jobs).unwrap();
    let ratios: Vec<f64> = runs
        .chunks(3)
        .map(|c| c[2].metrics.summary.samples_per_s / c[0].metrics.summary.samples_per_s.max(c[1].metrics.summary.samples_per_s))
        .collect();
    let hits = ratios.iter().filter(|&&r| r >= 1.10).count();
    let min = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        hits >= 45 && secs < 600.0,
        format!("{hits}/50 seeds >= 1.10x (mean {mean:.3}x, min {min:.3}x), {secs:.1}s"),
    )
}

fn remaining_at(curve: &[(f64, usize)], t: f64) -> usize {
    curve.iter().take_while(|p| p.0 <= t).last().map_or(curve[0].1, |p| p.1)
}

fn case_study_shape() -> Verdict {
    let scn = scenario("case-study");
    let mut bad = Vec::new();
    let mut overheads = Vec::new();
    for seed in 1..=5 {
        let runs: Vec<_> = ["verl-to/fat-tree", "verl-lo/fat-tree", "orchestrrl/fat-tree"]
            .iter()
            .map(|p| run_one(&scn, pair(p), seed).unwrap())
            .collect();
        let curves: Vec<Vec<(f64, usize)>> = runs
            .iter()
            .map(|r| r.metrics.remaining.iter().filter(|x| x.step == 0).map(|x| (x.time, x.remaining)).collect())
            .collect();
        let makespan: Vec<f64> = runs.iter().map(|r| r.metrics.steps[0].gen_makespan).collect();
        let n = curves[0][0].1;
        let t25 = 0.25 * makespan[0];
        let rem: Vec<usize> = curves.iter().map(|c| remaining_at(c, t25)).collect();
        // seconds from the last 10% of requests to completion
        let tail: Vec<f64> = curves
            .iter()
            .zip(&makespan)
            .map(|(c, mk)| mk - c.iter().find(|x| x.1 * 10 <= n).unwrap().0)
            .collect();
        if !(rem[1] > rem[0] && rem[1] > rem[2]) {
            bad.push(format!("seed {seed}: remaining at 25% TO {} LO {} orch {}", rem[0], rem[1], rem[2]));
        }
        if !(tail[0] > tail[1]) {
            bad.push(format!("seed {seed}: tail TO {:.0}s LO {:.0}s", tail[0], tail[1]));
        }
        if !(makespan[2] < makespan[0].min(makespan[1])) {
            bad.push(format!("seed {seed}: makespans {makespan:?}"));
        }
        let consolidation = runs[2].metrics.decisions.iter().find(|d| {
            d.record.accepted == Some(true) && d.record.modes.iter().filter(|m| *m == "tp8").count() == 2
        });
        match consolidation {
            Some(d) => {
                let o = d.record.overhead.unwrap_or(0.0);
                overheads.push(o);
                if !(7.0..=21.0).contains(&o) {
                    bad.push(format!("seed {seed}: consolidation overhead {o:.1}s"));
                }
            }
            None => bad.push(format!("seed {seed}: no switch to 2 x tp8")),
        }
    }
    verdict(bad.is_empty(), format!("5 seeds, consolidation overheads {overheads:.1?}s, issues {bad:?}"))
}

fn balancing_effect() -> Verdict {
    let scn = scenario("skewed");
    let mut off = scn.clone();
    off.scheduler.enable_balancing = false;
    assert!(scn.scheduler.enable_balancing);
    let p = pair("orchestrrl/fat-tree");
    let (mut wins, mut sum_on, mut sum_off) = (0, 0.0, 0.0);
    for seed in 1..=50 {
        let on = run_one(&scn, p, seed).unwrap().metrics.summary.mean_busy_ratio;
        let no = run_one(&off, p, seed).unwrap().metrics.summary.mean_busy_ratio;
        wins += (on < no) as u32;
        sum_on += on;
        sum_off += no;
    }
    verdict(
        wins >= 45,
        format!("{wins}/50 seeds, mean max/min busy ratio {:.3} balanced vs {:.3} unbalanced", sum_on / 50.0, sum_off / 50.0),
    )
}

// ---------------------------------------------------------------- fabric

const PHASES: [Phase; 11] = [
    Phase::TrainDP,
    Phase::TrainTP,
    Phase::TrainPP,
    Phase::TrainCP,
    Phase::TrainEP,
    Phase::GenTP,
    Phase::GenEP,
    Phase::GenPD,
    Phase::GenAF,
    Phase::WeightSync,
    Phase::ResponseStream,
];

fn random_fabric(rng: &mut ChaCha8Rng) -> FabricState {
    let n_pods = rng.random_range(2..=6);
    let mut cfg = rlsim_core::fabric::FabricConfig::uniform(TopologyKind::RFabric, 0, 0, 1);
    cfg.pods = (0..n_pods)
        .map(|i| PodSpec {
            role: if i == 0 || rng.random_bool(0.5) { PodRole::Train } else { PodRole::Gen },
            servers: rng.random_range(1..=4),
        })
        .collect();
    cfg.servers_per_tor = rng.random_range(1..=2);
    cfg.agg_ports_per_tor = rng.random_range(1..=4);
    cfg.core_ports_per_tor = rng.random_range(1..=4);
    let tors: u32 = (0..n_pods).map(|p| cfg.tors_of(p)).sum();
    let need = tors * cfg.agg_ports_per_tor.max(cfg.core_ports_per_tor);
    cfg.ocs_radix = Some(rng.random_range(need..=need + 16));
    cfg.response_stream_circuits = rng.random_range(0..=1);
    FabricState::new(cfg).unwrap()
}

/// Port exclusivity and radix bounds checked directly on the cross-connects.
fn audit_ports(state: &FabricState) -> Vec<String> {
    let mut v = Vec::new();
    let mut used = BTreeSet::new();
    for c in &state.current.circuits {
        let dev = state.device(c.device);
        for p in [c.a, c.b] {
            if p >= dev.radix || p as usize >= dev.owner.len() {
                v.push(format!("{:?} port {p} beyond radix {}", c.device, dev.radix));
            }
            if !used.insert((c.device, p)) {
                v.push(format!("{:?} port {p} in two circuits", c.device));
            }
        }
    }
    for layer in [OcsLayer::Agg, OcsLayer::Core] {
        let dev = state.device(layer);
        if 2 * dev.circuits() > dev.radix as usize {
            v.push(format!("{layer} holds {} circuits over radix {}", dev.circuits(), dev.radix));
        }
    }
    v
}

fn fabric_safety_fuzz() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut commits, mut gated, mut events) = (0, 0, 0);
    let mut bad: Vec<String> = Vec::new();
    for seq in 0..10_000 {
        let state = random_fabric(&mut rng);
        let n_pods = state.config.pods.len();
        let n_tors = state.tor_pod.len();
        let mut ctl = FabricController::new(state);
        let mut now = 0.0;
        for _ in 0..rng.random_range(1..=6) {
            let phase = PHASES[rng.random_range(0..PHASES.len())];
            let tor_level = matches!(phase, Phase::GenEP | Phase::GenAF | Phase::GenPD);
            let ends = if tor_level { n_tors } else { n_pods };
            let mut group: Vec<usize> = (0..n_pods).filter(|_| rng.random_bool(0.6)).collect();
            if group.is_empty() {
                group.push(rng.random_range(0..n_pods));
            }
            let entries = (0..rng.random_range(0..8))
                .map(|_| (rng.random_range(0..ends), rng.random_range(0..ends), rng.random_range(0.0..5e11)))
                .collect();
            let gran = if tor_level { Granularity::TorLevel } else { Granularity::PodLevel };
            let slack = if rng.random_bool(0.3) { rng.random_range(0.0..0.01) } else { rng.random_range(0.0..0.5) };
            let intent = PhaseIntent { phase, primitive: Primitive::AllReduce, group, volume: 1e9, slack };
            let demand = DemandSummary { granularity: gran, entries, interval: 1.0 };
            events += 1;
            match ctl.materialize(&intent, &demand, now) {
                Ok(Schedule::Commit { start, end }) => {
                    commits += 1;
                    if slack < ctl.state.t_ocs || ctl.state.t_ocs < 0.010 || (end - start - ctl.state.t_ocs).abs() > 1e-12 {
                        bad.push(format!("seq {seq}: commit with slack {slack} and T_ocs {}", ctl.state.t_ocs));
                    }
                }
                Ok(_) => gated += (slack < ctl.state.t_ocs) as u32,
                Err(e) => bad.push(format!("seq {seq}: {e}")),
            }
            let mut v = audit_ports(&ctl.state);
            v.extend(validate_circuits(&ctl.state.current, &ctl.state));
            if let Err(e) = ctl.state.check_invariants() {
                v.push(e);
            }
            bad.extend(v.into_iter().map(|e| format!("seq {seq}: {e}")));
            now += rng.random_range(0.0..2.0);
        }
        // arbitrary, possibly conflicting cross-connects must repair into a valid plan
        let st = &ctl.state;
        let circuits = (0..rng.random_range(0..24))
            .map(|_| {
                let device = if rng.random_bool(0.5) { OcsLayer::Agg } else { OcsLayer::Core };
                let ports = st.device(device).owner.len() as u32;
                let a = rng.random_range(0..ports);
                let b = rng.random_range(0..ports);
                Circuit { device, a: a.min(b), b: a.max(b), bandwidth: st.b_link, demand: rng.random_range(0.0..1e12) }
            })
            .collect();
        let raw = CircuitPlan { circuits, template: Some(TemplateKind::InterPodMesh), epoch: 0, feasible: true, demanded: Vec::new() };
        let (repaired, _) = validate_and_repair(&raw, st);
        let v = validate_circuits(&repaired, st);
        if !v.is_empty() {
            bad.push(format!("seq {seq}: repaired plan invalid: {}", v.join("; ")));
        }
    }
    verdict(
        bad.is_empty(),
        format!("10000 sequences, {events} intents, {commits} commits, {gated} gated by slack, {} violations {:?}", bad.len(), bad.first()),
    )
}

// ---------------------------------------------------------------- network

/// Max-min rates by repeated bisection on a common level.
fn oracle_rates(paths: &[Vec<usize>], cap: &[f64]) -> Vec<f64> {
    let n = paths.len();
    let mut rate = vec![0.0; n];
    let mut fixed = vec![false; n];
    while fixed.iter().any(|f| !f) {
        let feasible = |level: f64| {
            cap.iter().enumerate().all(|(l, &c)| {
                let load: f64 = (0..n).filter(|&i| paths[i].contains(&l)).map(|i| if fixed[i] { rate[i] } else { level }).sum();
                load <= c * (1.0 + 1e-12)
            })
        };
        let (mut lo, mut hi) = (0.0, cap.iter().copied().fold(0.0, f64::max));
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if feasible(mid) {
                lo = mid
            } else {
                hi = mid
            }
        }
        for i in 0..n {
            if !fixed[i] {
                rate[i] = lo;
            }
        }
        let mut any = false;
        for l in 0..cap.len() {
            let load: f64 = (0..n).filter(|&i| paths[i].contains(&l)).map(|i| rate[i]).sum();
            if load >= cap[l] * (1.0 - 1e-9) {
                for i in 0..n {
                    if !fixed[i] && paths[i].contains(&l) {
                        fixed[i] = true;
                        any = true;
                    }
                }
            }
        }
        if !any {
            break;
        }
    }
    rate
}

/// Fluid replay with oracle rates, all flows starting at zero.
fn oracle_makespan(cap: &[f64], flows: &[Flow]) -> f64 {
    let mut left: Vec<f64> = flows.iter().map(|f| f.bytes * 8.0).collect();
    let mut t = 0.0;
    loop {
        let active: Vec<usize> = (0..flows.len()).filter(|&i| left[i] > 1e-6).collect();
        if active.is_empty() {
            return t;
        }
        let paths: Vec<Vec<usize>> = active.iter().map(|&i| flows[i].path.clone()).collect();
        let r = oracle_rates(&paths, cap);
        let dt = active.iter().zip(&r).map(|(&i, &x)| left[i] / x).fold(f64::INFINITY, f64::min);
        for (&i, &x) in active.iter().zip(&r) {
            left[i] -= x * dt;
        }
        t += dt;
    }
}

fn network_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    let mut bad = Vec::new();
    let primitives = [
        CollectivePrimitive::AllReduce,
        CollectivePrimitive::AllToAll,
        CollectivePrimitive::P2P,
        CollectivePrimitive::M2N { senders: 2 },
        CollectivePrimitive::Broadcast,
    ];
    for i in 0..100 {
        let pods = rng.random_range(1..=4);
        let servers = rng.random_range(1..=4);
        let mut cfg = rlsim_core::fabric::FabricConfig::uniform(TopologyKind::FatTreeOs3, pods, 0, servers);
        cfg.servers_per_tor = rng.random_range(1..=servers);
        cfg.nics_per_server = rng.random_range(1..=2);
        let os = if rng.random_bool(0.5) { 3.0 } else { 1.0 };
        let topo = Topology::fat_tree(&cfg, os);
        let hosts = topo.hosts();
        assert!(hosts <= 16);
        let cap: Vec<f64> = topo.links.iter().map(|l| l.capacity).collect();
        let flows: Vec<Flow> = (0..rng.random_range(1..12))
            .map(|_| (rng.random_range(0..hosts), rng.random_range(0..hosts), rng.random_range(1e6..1e9)))
            .filter(|f| f.0 != f.1)
            .map(|(s, d, b)| Flow::routed(&topo, s, d, b, 0.0).unwrap())
            .collect();
        if !flows.is_empty() {
            let paths: Vec<&[usize]> = flows.iter().map(|f| f.path.as_slice()).collect();
            let owned: Vec<Vec<usize>> = flows.iter().map(|f| f.path.clone()).collect();
            let got = max_min_rates(&paths, &cap);
            for (a, b) in got.iter().zip(oracle_rates(&owned, &cap)) {
                let e = (a - b).abs() / b;
                worst = worst.max(e);
                if e > 0.01 {
                    bad.push(format!("#{i}: rate {a} vs {b}"));
                }
            }
            let sim = simulate_flows(&topo, &flows).into_iter().fold(0.0, f64::max);
            let o = oracle_makespan(&cap, &flows);
            worst = worst.max((sim - o).abs() / o);
            if (sim - o).abs() > 0.01 * o {
                bad.push(format!("#{i}: flow makespan {sim} vs {o}"));
            }
        }
        let n = rng.random_range(2..=hosts.max(2));
        let mut participants: Vec<usize> = (0..hosts).collect();
        while participants.len() > n {
            participants.remove(rng.random_range(0..participants.len()));
        }
        if participants.len() >= 2 {
            let spec = CollectiveSpec {
                primitive: primitives[rng.random_range(0..primitives.len())],
                participants,
                volume_per_rank: rng.random_range(1e6..1e9),
                algorithm: if rng.random_bool(0.5) { Algorithm::Ring } else { Algorithm::Direct },
            };
            let got = collective_time(&spec, &topo, 0.0, &[]).unwrap();
            let flows: Vec<Flow> = spec.flows().into_iter().map(|(s, d, b)| Flow::routed(&topo, s, d, b, 0.0).unwrap()).collect();
            let o = oracle_makespan(&cap, &flows);
            let e = (got - o).abs() / o;
            worst = worst.max(e);
            if e > 0.01 {
                bad.push(format!("#{i}: {:?} {got} vs {o}", spec.primitive));
            }
        }
    }
    // ring all-reduce on a non-blocking fabric against 2(n-1)/n * V / B
    let mut ring_err: f64 = 0.0;
    for n in 2..=16usize {
        let mut cfg = rlsim_core::fabric::FabricConfig::uniform(TopologyKind::FatTree, 4, 0, 4);
        cfg.nics_per_server = 1;
        let topo = Topology::fat_tree(&cfg, 1.0);
        let v = 1e9 * n as f64;
        let spec = CollectiveSpec {
            primitive: CollectivePrimitive::AllReduce,
            participants: (0..n).collect(),
            volume_per_rank: v,
            algorithm: Algorithm::Ring,
        };
        let t = collective_time(&spec, &topo, 0.0, &[]).unwrap();
        let closed = 2.0 * (n - 1) as f64 / n as f64 * v * 8.0 / cfg.server_bw();
        ring_err = ring_err.max((t - closed).abs() / closed);
    }
    if ring_err > 1e-12 {
        bad.push(format!("ring all-reduce off the closed form by {ring_err:e}"));
    }
    verdict(
        bad.is_empty(),
        format!("100 instances, worst relative error {worst:.2e}, ring closed-form error {ring_err:.1e}, issues {:?}", bad.first()),
    )
}

fn weight_sync_advantage() -> Verdict {
    let scn = scenario("four-pod");
    let v = scn.train.model.weight_bytes();
    let roles: Vec<PodRole> = scn.fabric.pods.iter().map(|p| p.role).collect();
    assert_eq!(roles.len(), 4);

    let mut cfg = scn.fabric.clone();
    cfg.kind = TopologyKind::RFabric;
    let mut state = FabricState::new(cfg.clone()).unwrap();
    // rooted at the first train pod, spanning every gen pod
    let source = roles.iter().position(|&r| r == PodRole::Train).unwrap();
    let group: Vec<usize> =
        std::iter::once(source).chain((0..roles.len()).filter(|&p| roles[p] == PodRole::Gen)).collect();
    let g = aggregate_prune_quantize(&DemandSummary::new(Granularity::PodLevel, 1.0), state.b_link, 0.05);
    let tree = allocate_circuits(TemplateKind::MulticastTree, &g, &state, &group);
    apply_plan(&mut state, &tree, -1.0).unwrap();
    let plan = state.current.clone();
    let rf = weight_sync_time(v, &Topology::rfabric(&state), &roles, Some((&plan, &state)), scn.weight_sync_chunk, &[]).unwrap();

    cfg.kind = TopologyKind::FatTreeOs3;
    let os3 = Topology::for_fabric(&cfg, None).unwrap();
    let train_hosts: Vec<usize> =
        (0..roles.len()).filter(|&p| roles[p] == PodRole::Train).flat_map(|p| os3.hosts_in_pod(p)).collect();
    let n = train_hosts.len();
    let ring = 2.0 * (n - 1) as f64 / n as f64 * v;
    let dp: Vec<Flow> =
        (0..n).map(|i| Flow::routed(&os3, train_hosts[i], train_hosts[(i + 1) % n], ring, 0.0).unwrap()).collect();
    let ft = weight_sync_time(v, &os3, &roles, None, scn.weight_sync_chunk, &dp).unwrap();

    let gap = (rf.stage1 - rf.bound).abs() / rf.bound;
    verdict(
        rf.total < ft.total && gap <= 0.10,
        format!(
            "tree {:.3}s (broadcast {:.3}s, bound {:.3}s, gap {:.1}%) vs 3:1 fat-tree with DP traffic {:.3}s",
            rf.total,
            rf.stage1,
            rf.bound,
            100.0 * gap,
            ft.total
        ),
    )
}

fn rfabric_direction() -> Verdict {
    let scn = scenario("eight-pod");
    assert_eq!(scn.fabric.pods.len(), 8);
    let (ft, rf) = (pair("orchestrrl/fat-tree"), pair("orchestrrl/rfabric"));
    let jobs: Vec<(Pair, u64)> = (1..=3).flat_map(|s| [(ft, s), (rf, s)]).collect();
    let runs = run_many(&scn, &jobs).unwrap();
    let ratios: Vec<f64> =
        runs.chunks(2).map(|c| c[1].metrics.summary.samples_per_s / c[0].metrics.summary.samples_per_s).collect();
    let min = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let (cf, cr) = (runs[0].network_cost.total, runs[1].network_cost.total);
    verdict(
        min >= 0.9 && cr < cf,
        format!("throughput ratio min {min:.4} over 3 seeds, network cost {cr:.0} vs {cf:.0} ({:.2}x cheaper)", cf / cr),
    )
}

fn files_under(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn determinism() -> Verdict {
    let mut bad = Vec::new();
    let mut files = 0;
    for (name, seed) in [("four-pod", 2), ("case-study", 4), ("skewed", 9)] {
        let scn = scenario(name);
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        experiment::run(&scn, seed, a.path()).unwrap();
        experiment::run(&scn, seed, b.path()).unwrap();
        let (fa, fb) = (files_under(a.path()), files_under(b.path()));
        files += fa.len();
        let logs = ["metrics.csv", "decisions.jsonl", "fabric.jsonl"];
        for l in logs {
            if !fa.keys().any(|k| k.ends_with(l)) {
                bad.push(format!("{name}: no {l}"));
            }
        }
        if fa != fb {
            bad.push(format!("{name}: outputs differ"));
        }
    }
    verdict(bad.is_empty(), format!("{files} files compared across 3 scenarios, issues {bad:?}"))
}

fn quantile(d: &LengthDistribution, q: f64) -> f64 {
    let target = q * d.total as f64;
    let mut acc = 0.0;
    for (b, &c) in d.counts.iter().enumerate() {
        if c > 0 && acc + c as f64 >= target {
            let frac = (target - acc) / c as f64;
            return (b as f64 + frac) * d.bucket_width as f64;
        }
        acc += c as f64;
    }
    d.counts.len() as f64 * d.bucket_width as f64
}

fn predictor_quality() -> Verdict {
    let history_len = 8;
    let mut errs: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for seed in 1..=20u64 {
        let cfg = WorkloadConfig {
            n_requests: 1024,
            length_model: LengthModel::LogNormal { mu: 7.0, sigma: 0.8 },
            prompt_len_model: LengthModel::LogNormal { mu: 6.0, sigma: 0.4 },
            drift: 1.0 + 0.01 * (seed % 6) as f64,
            max_response_len: 32_000,
            max_prompt_len: 4096,
            seed,
        };
        let dist = |step| {
            let reqs = sample_trace(&cfg, step).unwrap();
            LengthDistribution::from_lengths(reqs.iter().map(|r| r.response_len()), 256)
        };
        let history: Vec<LengthDistribution> = (0..history_len).map(dist).collect();
        let actual = dist(history_len);
        let p = fit_predictor(&history, ArimaOrder::default());
        let forecast = p.forecast_distribution(actual.total);
        let rel = |a: f64, b: f64| (a - b).abs() / b;
        errs.entry("mean").or_default().push(rel(p.forecast_mean(), actual.mean()));
        errs.entry("p50").or_default().push(rel(quantile(&forecast, 0.5), quantile(&actual, 0.5)));
        errs.entry("p90").or_default().push(rel(quantile(&forecast, 0.9), quantile(&actual, 0.9)));
    }
    let means: Vec<(&str, f64, f64)> = errs
        .iter()
        .map(|(k, v)| (*k, v.iter().sum::<f64>() / v.len() as f64, v.iter().copied().fold(0.0, f64::max)))
        .collect();
    let pass = means.iter().all(|m| m.1 <= 0.15);
    let detail = means.iter().map(|(k, m, x)| format!("{k} {:.1}% (max {:.1}%)", 100.0 * m, 100.0 * x)).collect::<Vec<_>>();
    verdict(pass, format!("20 drifting workloads, mean relative error {}", detail.join(", ")))
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 12] = [
        ("solver exactness", solver_exactness),
        ("plan feasibility fuzz", plan_feasibility_fuzz),
        ("orchestrator dominance", orchestrator_dominance),
        ("directional speedup", directional_speedup),
        ("case-study curve shape", case_study_shape),
        ("reactive balancing effect", balancing_effect),
        ("fabric safety fuzz", fabric_safety_fuzz),
        ("network oracle equivalence", network_oracles),
        ("weight-sync advantage", weight_sync_advantage),
        ("rfabric performance/cost direction", rfabric_direction),
        ("determinism", determinism),
        ("predictor quality", predictor_quality),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|s| s.parse().ok());
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let id = i + 1;
        if only.is_some_and(|o| o != id) {
            continue;
        }
        let t0 = Instant::now();
        let v = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            verdict(false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        failed += !v.pass as u32;
        let tag = if v.pass { "PASS" } else { "FAIL" };
        println!("[{tag}] {id:>2} {name}: {} [{:.1}s]", v.detail, t0.elapsed().as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
