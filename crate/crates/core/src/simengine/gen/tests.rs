use super::*;
use crate::scheduler::SchedulerConfig;

fn mode(name: &str, degree: u32, t0: f64, c: f64, kv_per_gpu: u64, max_batch: u32) -> ParallelMode {
    let mut m = ParallelMode::tp(name, degree, t0, c, kv_per_gpu);
    m.max_batch = max_batch;
    m
}

fn tp2() -> ParallelMode {
    mode("tp2", 2, 0.024, 0.0001, 60_000, 64)
}

fn tp8() -> ParallelMode {
    mode("tp8", 8, 0.012, 0.00006, 60_000, 64)
}

fn batch(lens: &[(u32, u32)]) -> Vec<Request> {
    lens.iter().enumerate().map(|(i, &(p, r))| Request::new(i as u64, p, r)).collect()
}

fn heavy(n: usize, seed: u64) -> Vec<Request> {
    use rand::SeedableRng;
    use rand_distr::{Distribution, LogNormal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let d = LogNormal::new(6.5, 1.0).unwrap();
    (0..n).map(|i| Request::new(i as u64, 200, (d.sample(&mut rng) as u32).clamp(1, 12_000))).collect()
}

fn costs() -> CostModel {
    let mut t = BTreeMap::new();
    for a in ["none", "tp2", "tp8"] {
        for b in ["none", "tp2", "tp8"] {
            if a != b {
                t.insert(format!("{a}->{b}"), if b == "none" { 0.0 } else { 4.0 });
            }
        }
    }
    CostModel { kv_bytes_per_token: 1.0e5, link_bw: 2.5e10, weight_reshard_time: t, recompute_rate: 40_000.0 }
}

fn orchestrator(cm: CostModel) -> Orchestrator {
    let mut cfg = SchedulerConfig::new(16, vec![tp2(), tp8()]);
    cfg.prune.high_watermark = 1_000_000;
    cfg.prune.low_watermark = 0;
    Orchestrator::new(cfg, cm).unwrap()
}

#[test]
fn zero_length_batch_finishes_immediately() {
    let mut c = GenCluster::uniform(&tp2(), 2, 2);
    let out = run_gen_step(batch(&[(10, 0), (20, 0)]), &mut c, None, &GenOptions::default()).unwrap();
    assert_eq!(out.makespan, 0.0);
    assert_eq!(out.tokens, 0);
}

#[test]
fn single_request_closed_form() {
    let m = mode("m", 1, 0.01, 0.001, 10_000, 8);
    let mut c = GenCluster::uniform(&m, 1, 1);
    let out = run_gen_step(batch(&[(100, 50)]), &mut c, None, &GenOptions::default()).unwrap();
    let expect = 100.0 / 40_000.0 + 50.0 * 0.011;
    assert!((out.makespan - expect).abs() < 1e-12, "{}", out.makespan);
    assert_eq!(out.remaining, vec![(0.0, 1), (out.makespan, 0)]);
}

#[test]
fn conservation_and_monotone_remaining_under_kv_pressure() {
    // tiny KV forces preemption and recompute
    let m = mode("m", 1, 0.01, 0.0005, 6_000, 32);
    let reqs = heavy(80, 3).into_iter().map(|mut r| {
        r.true_total_len = r.prompt_len + r.response_len().min(3_000);
        r
    });
    let reqs: Vec<Request> = reqs.collect();
    let want: u64 = reqs.iter().map(|r| r.response_len() as u64).sum();
    let mut c = GenCluster::uniform(&m, 3, 3);
    let out = run_gen_step(reqs, &mut c, None, &GenOptions::default()).unwrap();
    assert_eq!(out.tokens, want);
    assert!(out.remaining.windows(2).all(|w| w[1].1 <= w[0].1 && w[1].0 >= w[0].0));
    assert_eq!(out.remaining.last().unwrap().1, 0);
    let busiest = out.busy.iter().copied().fold(0.0, f64::max);
    assert!(out.makespan >= busiest - 1e-9);
}

#[test]
fn oversized_prompt_is_a_deadlock() {
    let m = mode("m", 1, 0.01, 0.001, 1_000, 8);
    let mut c = GenCluster::uniform(&m, 1, 1);
    let err = run_gen_step(batch(&[(5_000, 10)]), &mut c, None, &GenOptions::default()).unwrap_err();
    match err {
        Error::Deadlock(msg) => assert!(msg.contains("capacity 1000"), "{msg}"),
        e => panic!("{e:?}"),
    }
}

#[test]
fn latency_config_drains_slower_early_but_faster_on_tail() {
    let reqs = heavy(1024, 11);
    let mut to = GenCluster::uniform(&tp2(), 8, 8);
    let mut lo = GenCluster::uniform(&tp8(), 2, 8);
    let a = run_gen_step(reqs.clone(), &mut to, None, &GenOptions::default()).unwrap();
    let b = run_gen_step(reqs, &mut lo, None, &GenOptions::default()).unwrap();
    let at = |r: &[(f64, usize)], t: f64| r.iter().take_while(|p| p.0 <= t).last().unwrap().1;
    let quarter = 0.25 * a.makespan;
    assert!(at(&b.remaining, quarter) > at(&a.remaining, quarter));
    assert!(b.makespan < a.makespan);
}

#[test]
fn reconfiguration_overhead_matches_plan_costs() {
    let reqs = heavy(300, 5);
    let mut c = GenCluster::uniform(&tp2(), 8, 8);
    let mut o = orchestrator(costs());
    let out = run_gen_step(reqs, &mut c, Some(&mut o), &GenOptions::default()).unwrap();
    let accepted: Vec<&DecisionRecord> = out.decisions.iter().filter(|d| d.action == Action::Reconfigure).collect();
    assert_eq!(accepted.len(), out.deployments.len());
    assert!(!accepted.is_empty());
    for (d, dep) in accepted.iter().zip(&out.deployments) {
        let planned = d.overhead.unwrap();
        assert!((planned - dep.overhead).abs() <= 1e-9 * planned.max(1.0), "{planned} vs {}", dep.overhead);
        assert!(d.obj_new.unwrap() + planned < d.obj_cur.unwrap() - o.cfg.epsilon);
    }
    assert!((out.reconfig_overhead - out.deployments.iter().map(|d| d.overhead).sum::<f64>()).abs() < 1e-9);
}

#[test]
fn orchestrated_run_is_deterministic() {
    let run = || {
        let mut c = GenCluster::uniform(&tp2(), 8, 8);
        let mut o = orchestrator(costs());
        run_gen_step(heavy(200, 9), &mut c, Some(&mut o), &GenOptions::default()).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn free_oracle_orchestration_beats_static_configs() {
    for seed in 0..4 {
        let reqs = heavy(400, 100 + seed);
        let stat = |m: &ParallelMode, n| {
            let mut c = GenCluster::uniform(m, n, 8);
            run_gen_step(reqs.clone(), &mut c, None, &GenOptions::default()).unwrap().makespan
        };
        let best = stat(&tp2(), 8).min(stat(&tp8(), 2));
        let mut c = GenCluster::uniform(&tp2(), 8, 8);
        let mut o = orchestrator(CostModel::free());
        let out = run_gen_step(reqs.clone(), &mut c, Some(&mut o), &GenOptions::default()).unwrap();
        assert!(out.makespan <= best, "seed {seed}: {} vs {best}", out.makespan);
    }
}

#[test]
fn balancing_moves_waiting_requests_off_a_hot_instance() {
    let mut reqs = heavy(512, 21);
    // first half long, second half short: chunked dispatch skews instances
    reqs.sort_by_key(|r| std::cmp::Reverse(r.response_len()));
    for (i, r) in reqs.iter_mut().enumerate() {
        r.id = i as u64;
    }
    let opts = GenOptions { dispatch: Dispatch::Chunked, ..GenOptions::default() };
    let mut cfg = SchedulerConfig::new(16, vec![tp2()]);
    cfg.enable_planning = false;
    let mut o = Orchestrator::new(cfg, costs()).unwrap();
    let mut c = GenCluster::uniform(&tp2(), 4, 4);
    let on = run_gen_step(reqs.clone(), &mut c, Some(&mut o), &opts).unwrap();
    let mut c = GenCluster::uniform(&tp2(), 4, 4);
    let off = run_gen_step(reqs, &mut c, None, &opts).unwrap();
    assert!(on.rebalance_migrations > 0);
    assert!(on.makespan < off.makespan, "{} vs {}", on.makespan, off.makespan);
}

