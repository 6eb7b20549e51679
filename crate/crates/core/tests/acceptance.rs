//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria that are known not to hold under this model are listed in
//! `EXPECTED_RED`; the test fails if any other criterion goes red or if an
//! expected-red one turns green without the list being updated.

use std::collections::BTreeMap;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Binomial, DiscreteCDF};

use ensim_core::estimate::estimate_ensemble_accuracy;
use ensim_core::market::{PriceSource, PricingMode};
use ensim_core::metrics::{cents, MetricsReport};
use ensim_core::predictor::{backtest, rmse, LoadPredictor, PredictorConfig, PredictorKind};
use ensim_core::resources::{importance_weights, weighted_autoscale, InstanceType, PoolState};
use ensim_core::scenario::{Overrides, Scenario};
use ensim_core::selector::{full_ensemble, Constraint, Objective, SelectionPolicy};
use ensim_core::sim::{compare_policies, prepare, run_prepared, EventKind, Probe, SimEvent, SimView};
use ensim_core::voting::{weighted_vote, WeightMatrix};
use ensim_core::workload::{generate_trace, MixEntry, TraceConfig, TraceKind};
use ensim_core::zoo::{
    BundledZoo, ClassAccuracyMatrix, ModelId, ModelProfile, PredictionOracle, PredictionOracleConfig, Zoo,
};

/// Criteria that fail honestly; see the project notes for the analysis.
const EXPECTED_RED: &[u32] = &[6];

type Criterion = (u32, &'static str, Duration, fn() -> Outcome);

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn enumerate(p: &[f64]) -> f64 {
    let n = p.len();
    (0u32..1 << n)
        .filter(|mask| mask.count_ones() as usize > n / 2)
        .map(|mask| {
            (0..n)
                .map(|i| if mask & (1 << i) != 0 { p[i] } else { 1.0 - p[i] })
                .product::<f64>()
        })
        .sum()
}

fn c1_estimator_vs_enumeration() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for n in 1..=12 {
        for _ in 0..200 {
            let p: Vec<f64> = (0..n).map(|_| rng.gen_range(0.001..0.999)).collect();
            let e = estimate_ensemble_accuracy(&p).unwrap();
            worst = worst.max((e - enumerate(&p)).abs());
        }
    }
    outcome(worst <= 1e-9, format!("max abs error {worst:.2e} over 2400 vectors"))
}

fn c2_homogeneous_ten() -> Outcome {
    let e = estimate_ensemble_accuracy(&[0.7; 10]).unwrap();
    // P(X >= 6) for X ~ Bin(10, 0.7)
    let tail = Binomial::new(0.7, 10).unwrap().sf(5);
    let printed = format!("{e:.6}");
    outcome(
        e >= 0.82 && printed == "0.849732" && (e - tail).abs() < 1e-12,
        format!("[0.7]x10 -> {printed} (binomial tail {tail:.6}); worked example prints 0.83"),
    )
}

/// Per query: latest sub-request completion minus arrival.
struct ComputeProbe {
    arrivals: Vec<f64>,
    finish: BTreeMap<usize, f64>,
}

impl Probe for ComputeProbe {
    fn on_event(&mut self, event: &SimEvent, _view: &SimView<'_>) {
        if let EventKind::SubRequestComplete { query, .. } = event.kind {
            let e = self.finish.entry(query).or_insert(0.0);
            *e = e.max(event.time_s);
        }
    }
}

fn c3_ensemble_latency() -> Outcome {
    let zoo = Zoo::bundled(BundledZoo::Imagenet);
    let constraint = Constraint::new(311.0, 0.82);
    let members = full_ensemble(&zoo, &constraint, 5.0).unwrap();
    let max_member = members
        .iter()
        .map(|&m| zoo.get(m).service_latency_ms)
        .fold(0.0, f64::max);

    // replay a light stream so nothing queues and read compute time off the events
    let mut s = Scenario::bundled("strict_wiki").unwrap();
    s.policy.policy = SelectionPolicy::FullStatic;
    s.trace.kind = TraceKind::Diurnal;
    s.trace.diurnal_amplitude = 0.0;
    s.trace.mean_rate = 2.0;
    s.trace.duration_s = 300.0;
    s.trace.constraint_mix = vec![MixEntry {
        latency_ms: 311.0,
        accuracy: 0.82,
        objective: Objective::AccuracyFirst,
        probability: 1.0,
    }];
    s.autoscaler.initial_capacity_factor = 4.0;
    let prepared = prepare(&s).unwrap();
    let mut probe = ComputeProbe {
        arrivals: prepared.trace.arrival_times(),
        finish: BTreeMap::new(),
    };
    run_prepared(&prepared, None, &mut probe).unwrap();
    let compute: Vec<f64> = probe
        .finish
        .iter()
        .map(|(&q, &t)| (t - probe.arrivals[q]) * 1000.0)
        .collect();
    let all_equal = compute.iter().all(|&c| (c - max_member).abs() < 1e-6);
    outcome(
        members.len() == 10 && (max_member - 152.0).abs() <= 1.0 && all_equal && !compute.is_empty(),
        format!(
            "{} members, max member {max_member} ms; simulated compute {} queries all at {:.2} ms",
            members.len(),
            compute.len(),
            compute.first().copied().unwrap_or(f64::NAN)
        ),
    )
}

fn c4_ensembling_beats_single() -> Outcome {
    let scenario = Scenario::bundled("strict_wiki").unwrap();
    let (zoo, oracle) = scenario.build_models().unwrap();
    assert_eq!(oracle.config().error_correlation, 0.0);
    let members = full_ensemble(&zoo, &Constraint::new(311.0, 0.82), 5.0).unwrap();
    let best = members
        .iter()
        .map(|&m| zoo.get(m).top1_accuracy)
        .fold(0.0, f64::max);
    let classes = oracle.matrix().num_classes();
    let mut weights = WeightMatrix::new(classes, zoo.len());
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 20_000u64;
    let mut correct = 0;
    for q in 0..n {
        let truth = rng.gen_range(0..classes);
        let votes: Vec<(ModelId, usize)> = members.iter().map(|&m| (m, oracle.predict(m, truth, q))).collect();
        let out = weighted_vote(&votes, &weights).unwrap();
        correct += usize::from(out.winner == truth);
        for &(m, c) in &votes {
            weights.update(m, c, truth);
        }
    }
    let acc = correct as f64 / n as f64;
    outcome(
        acc >= best + 0.01,
        format!("full ensemble {:.4} vs best member {best:.4} ({} members)", acc, members.len()),
    )
}

fn strict_comparison(seed: u64, policies: &[SelectionPolicy]) -> BTreeMap<String, MetricsReport> {
    let mut s = Scenario::bundled("strict_wiki").unwrap();
    s.apply(&Overrides {
        seed: Some(seed),
        ..Overrides::default()
    })
    .unwrap();
    compare_policies(&s, policies).unwrap().runs
}

fn c5_dynamic_shrinks() -> Outcome {
    let runs = strict_comparison(1, &[SelectionPolicy::FullStatic, SelectionPolicy::Dynamic]);
    let full = &runs["full-static"].summary;
    let dynamic = &runs["dynamic"].summary;
    let shrink_ok = dynamic.time_avg_ensemble_size <= 0.7 * full.time_avg_ensemble_size;
    let mut worst_gap = f64::INFINITY;
    for c in &dynamic.per_constraint {
        worst_gap = worst_gap.min(c.cumulative_accuracy - (c.accuracy_target - 0.002));
    }
    outcome(
        shrink_ok && worst_gap >= 0.0,
        format!(
            "time-avg size {:.2} vs full {:.2} (ratio {:.2}); worst accuracy slack over target-0.2% {:+.4}",
            dynamic.time_avg_ensemble_size,
            full.time_avg_ensemble_size,
            dynamic.time_avg_ensemble_size / full.time_avg_ensemble_size,
            worst_gap
        ),
    )
}

fn c6_policy_ordering() -> Outcome {
    let policies = [SelectionPolicy::SingleBest, SelectionPolicy::FullStatic, SelectionPolicy::Dynamic];
    let mut ok = true;
    let mut parts = Vec::new();
    for seed in 1..=3 {
        let runs = strict_comparison(seed, &policies);
        let met = |p: &str| runs[p].summary.accuracy_met_fraction;
        let (d, f, s) = (met("dynamic"), met("full-static"), met("single-best"));
        ok &= d >= f && f >= s;
        parts.push(format!("seed {seed}: dynamic {d:.3} full {f:.3} single {s:.3}"));
    }
    outcome(ok, parts.join("; "))
}

fn c7_spot_economics() -> Outcome {
    let mut base = Scenario::bundled("strict_wiki").unwrap();
    base.trace.duration_s = 1800.0;
    base.market.prices = PriceSource::Constant { fraction: 0.4 };
    base.market.bid_fraction = 0.5;
    let mut spot = base.clone();
    spot.market.pricing_mode = PricingMode::Spot;
    let mut od = base;
    od.market.pricing_mode = PricingMode::OnDemand;
    let run = |s: &Scenario| run_prepared(&prepare(s).unwrap(), None, &mut ()).unwrap();
    let (rs, ro) = (run(&spot), run(&od));
    let lifetimes = |r: &MetricsReport| -> Vec<(String, String, f64, f64)> {
        r.cost_lines
            .iter()
            .map(|l| (l.pool.clone(), l.type_name.clone(), l.ready_at, l.ended_at))
            .collect()
    };
    let matched = lifetimes(&rs) == lifetimes(&ro);
    let reconciled = |r: &MetricsReport| cents(r.cost_lines.iter().map(|l| l.cost).sum()) == cents(r.summary.total_cost);
    let ratio = rs.summary.total_cost / ro.summary.total_cost;
    outcome(
        matched && reconciled(&rs) && reconciled(&ro) && (ratio - 0.4).abs() <= 0.001,
        format!(
            "spot ${:.4} / on-demand ${:.4} = {ratio:.6}; usage matched {matched}; {} instances",
            rs.summary.total_cost,
            ro.summary.total_cost,
            rs.cost_lines.len()
        ),
    )
}

fn c8_importance_sampling() -> Outcome {
    let profile = |i: u16| ModelProfile {
        id: ModelId(i),
        key: format!("pool{i}"),
        name: format!("pool{i}"),
        param_count: 1.0,
        top1_accuracy: 0.8,
        service_latency_ms: 50.0,
        base_packing_factor: 1,
        gpu_packing_factor: None,
    };
    let catalog = vec![InstanceType {
        name: "c5a.xlarge".into(),
        vcpus: 4,
        size_multiplier: 1,
        od_price_per_hour: 0.154,
        is_gpu: false,
    }];
    let pools: Vec<ModelId> = (0..3).map(ModelId).collect();
    let popularity = [0.6, 0.3, 0.1];
    let mut state: Vec<PoolState> = pools.iter().map(|&m| PoolState::new(m)).collect();
    // served history: 60/30/10 split of 100 requests per second over the last minute
    for s in 0..60 {
        for (i, pool) in state.iter_mut().enumerate() {
            for _ in 0..(popularity[i] * 100.0) as usize {
                pool.record_served(240.0 + f64::from(s));
            }
        }
    }
    let served: Vec<(ModelId, usize)> = state
        .iter_mut()
        .map(|p| {
            p.trim_served(300.0);
            (p.model.unwrap(), p.served_recent())
        })
        .collect();
    let weighted = importance_weights(&served);
    let uniform = importance_weights(&pools.iter().map(|&m| (m, 0)).collect::<Vec<_>>());

    let rounds = [(40.0, 20.0), (55.0, 40.0), (90.0, 55.0), (73.0, 61.0), (120.0, 80.0)];
    let mut launched_w = [0u32; 3];
    let mut launched_u = [0u32; 3];
    let mut share_ok = true;
    for &(predicted, current) in &rounds {
        let delta: f64 = predicted - current;
        let plan_w = weighted_autoscale(predicted, current, &weighted, |m| profile(m.0), &catalog, |_, t| t.od_price_per_hour).unwrap();
        let plan_u = weighted_autoscale(predicted, current, &uniform, |m| profile(m.0), &catalog, |_, t| t.od_price_per_hour).unwrap();
        let mut round = [0u32; 3];
        for o in &plan_w {
            round[o.pool.index()] += o.count;
            launched_w[o.pool.index()] += o.count;
        }
        for o in &plan_u {
            launched_u[o.pool.index()] += o.count;
        }
        for i in 0..3 {
            share_ok &= (f64::from(round[i]) - delta * popularity[i]).abs() <= 1.0;
        }
    }
    outcome(
        launched_w[2] <= launched_u[2] && share_ok,
        format!(
            "weighted launches {launched_w:?} vs uniform {launched_u:?}; per-round shares within 1 instance: {share_ok}"
        ),
    )
}

fn c9_failure_resilience() -> Outcome {
    let mut base = Scenario::bundled("strict_wiki").unwrap();
    base.policy.policy = SelectionPolicy::FullStatic;
    base.trace.duration_s = 1800.0;
    let mut failing = base.clone();
    failing.market.failure_probability = 0.2;
    failing.market.failure_window_s = Some((240.0, 800.0));
    let run = |s: &Scenario, p: Option<SelectionPolicy>| run_prepared(&prepare(s).unwrap(), p, &mut ()).unwrap();
    let calm = run(&base, None);
    let hit = run(&failing, None);
    let single = run(&failing, Some(SelectionPolicy::SingleBest));

    let min_size = hit
        .summary
        .per_constraint
        .iter()
        .map(|c| c.mean_ensemble_size)
        .fold(f64::INFINITY, f64::min);
    let calm_window: BTreeMap<u64, f64> = calm.records.iter().map(|r| (r.query_id, r.window_accuracy)).collect();
    let mut dip = 0.0f64;
    for r in &hit.records {
        if let Some(&c) = calm_window.get(&r.query_id) {
            dip = dip.max(c - r.window_accuracy);
        }
    }
    // recovery: replacements are up 100 s after the last failure check
    let late = |r: &MetricsReport| -> (f64, usize) {
        let tail: Vec<_> = r.records.iter().filter(|q| q.arrival_s >= 1000.0).collect();
        let acc = tail.iter().map(|q| q.window_accuracy).sum::<f64>() / tail.len().max(1) as f64;
        let slow = tail.iter().filter(|q| q.slo_violation).count();
        (acc, slow)
    };
    let (calm_late, _) = late(&calm);
    let (hit_late, hit_slow) = late(&hit);
    let recovered = (calm_late - hit_late).abs() <= 0.005 && hit_slow == 0;
    let passed = hit.summary.vms.preempted > 0
        && min_size >= 5.0
        && hit.summary.failed == 0
        && dip <= 0.015
        && recovered
        && single.summary.failed_fraction > 0.0;
    outcome(
        passed,
        format!(
            "{} preemptions, min ensemble {min_size:.1}, failed {}, max window dip {:.2} pt, late accuracy {:.4} vs {:.4} (slow {hit_slow}), single-best failed {:.4}%",
            hit.summary.vms.preempted,
            hit.summary.failed,
            100.0 * dip,
            hit_late,
            calm_late,
            100.0 * single.summary.failed_fraction
        ),
    )
}

fn c10_tie_breaking() -> Outcome {
    // two pairs of experts with complementary class strengths
    let models: Vec<ModelProfile> = (0..4u16)
        .map(|i| ModelProfile {
            id: ModelId(i),
            key: format!("expert{i}"),
            name: format!("expert{i}"),
            param_count: 1.0,
            top1_accuracy: 0.6,
            service_latency_ms: 50.0,
            base_packing_factor: 1,
            gpu_packing_factor: None,
        })
        .collect();
    let zoo = Zoo::new(models).unwrap();
    let strong = 0.9;
    let weak = 0.3;
    let mut entries = Vec::new();
    for i in 0..4 {
        if i < 2 {
            entries.extend([strong, strong, weak, weak]);
        } else {
            entries.extend([weak, weak, strong, strong]);
        }
    }
    let matrix = ClassAccuracyMatrix::new(&zoo, 4, entries).unwrap();
    let oracle = PredictionOracle::new(
        matrix,
        PredictionOracleConfig {
            rng_seed: 10,
            ..Default::default()
        },
    )
    .unwrap();
    let mut weights = WeightMatrix::new(4, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 20_000u64;
    let (mut ties, mut weighted_ok, mut uniform_ok) = (0u32, 0u32, 0u32);
    for q in 0..n {
        let truth = rng.gen_range(0..4);
        let votes: Vec<(ModelId, usize)> = zoo.ids().map(|m| (m, oracle.predict(m, truth, q))).collect();
        let out = weighted_vote(&votes, &weights).unwrap();
        if out.count_tie {
            ties += 1;
            weighted_ok += u32::from(out.winner == truth);
            let mut counts = [0usize; 4];
            for &(_, c) in &votes {
                counts[c] += 1;
            }
            let top = *counts.iter().max().unwrap();
            let tied: Vec<usize> = (0..4).filter(|&c| counts[c] == top).collect();
            uniform_ok += u32::from(tied[rng.gen_range(0..tied.len())] == truth);
        }
        for &(m, c) in &votes {
            weights.update(m, c, truth);
        }
    }
    let tie_rate = f64::from(ties) / n as f64;
    let w = f64::from(weighted_ok) / f64::from(ties.max(1));
    let u = f64::from(uniform_ok) / f64::from(ties.max(1));
    outcome(
        tie_rate >= 0.10 && w > u,
        format!("count ties {:.1}% of queries; correct resolution weighted {:.1}% vs uniform {:.1}%", 100.0 * tie_rate, 100.0 * w, 100.0 * u),
    )
}

fn c11_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_ensim"))
            .args(["run", "strict_twitter", "--seed", "7", "--out-dir"])
            .arg(&out)
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        out
    };
    let (a, b) = (run("a"), run("b"));
    let same = |f: &str| std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap();
    let (s, l) = (same("summary.json"), same("latency.csv"));
    let bytes = std::fs::metadata(a.join("latency.csv")).unwrap().len();
    outcome(s && l, format!("summary.json identical {s}, latency.csv identical {l} ({bytes} bytes)"))
}

fn c12_predictors() -> Outcome {
    let config = TraceConfig {
        kind: TraceKind::Diurnal,
        duration_s: 3.0 * 3600.0,
        diurnal_amplitude: 0.5,
        diurnal_period_s: 3600.0,
        constraint_mix: vec![MixEntry {
            latency_ms: 100.0,
            accuracy: 0.7,
            objective: Objective::AccuracyFirst,
            probability: 1.0,
        }],
        seed: 12,
        ..Default::default()
    };
    let trace = generate_trace(&config).unwrap();
    let arrivals = trace.arrival_times();
    let end = config.duration_s;
    let score = |kind: PredictorKind, step: f64, from: f64| {
        let mut p = LoadPredictor::new(
            PredictorConfig {
                kind,
                ..Default::default()
            },
            trace.profile.clone(),
        )
        .unwrap();
        let preds: Vec<(f64, f64)> = backtest(&mut p, &arrivals, end, step)
            .unwrap()
            .into_iter()
            .filter(|&(t, _)| t >= from)
            .collect();
        let n = preds.iter().filter(|&&(t, _)| t <= end).count();
        (rmse(&preds, &arrivals, 10.0, end).unwrap(), n)
    };
    let (oracle, n) = score(PredictorKind::Oracle, 10.0, 0.0);
    let bound = (config.mean_rate / 10.0).sqrt() * (1.0 + 3.0 * (2.0 / n as f64).sqrt());
    let after_two_seasons = 2.0 * 3600.0 + 600.0;
    let (sn, _) = score(PredictorKind::SeasonalNaive, 60.0, after_two_seasons);
    let (mwa, _) = score(PredictorKind::MovingWindowAverage, 60.0, after_two_seasons);
    outcome(
        oracle <= bound && sn < mwa,
        format!("oracle rmse {oracle:.3} <= bound {bound:.3}; seasonal-naive {sn:.3} vs moving average {mwa:.3}"),
    )
}

// Runs without the libtest harness so the per-criterion lines are always printed.
fn main() {
    let criteria: [Criterion; 12] = [
        (1, "estimator matches enumeration", Duration::from_secs(5), c1_estimator_vs_enumeration),
        (2, "homogeneous 0.7 x 10 ensemble", Duration::from_secs(1), c2_homogeneous_ten),
        (3, "ensemble latency is the slowest member", Duration::from_secs(5), c3_ensemble_latency),
        (4, "ensembling beats the best single model", Duration::from_secs(30), c4_ensembling_beats_single),
        (5, "dynamic selection shrinks ensembles", Duration::from_secs(120), c5_dynamic_shrinks),
        (6, "accuracy-met ordering across policies", Duration::from_secs(300), c6_policy_ordering),
        (7, "spot to on-demand cost ratio", Duration::from_secs(10), c7_spot_economics),
        (8, "importance-sampled autoscaling", Duration::from_secs(120), c8_importance_sampling),
        (9, "failure resilience", Duration::from_secs(180), c9_failure_resilience),
        (10, "class-weighted tie breaking", Duration::from_secs(60), c10_tie_breaking),
        (11, "byte-identical reruns", Duration::from_secs(60), c11_determinism),
        (12, "predictor sanity", Duration::from_secs(60), c12_predictors),
    ];
    let mut red = Vec::new();
    for (id, name, budget, check) in criteria {
        let start = Instant::now();
        let o = check();
        let elapsed = start.elapsed();
        let passed = o.passed && elapsed <= budget;
        println!(
            "criterion {id:>2} {}: {name}: {} [{:.2?}]",
            if passed { "PASS" } else { "FAIL" },
            o.detail,
            elapsed
        );
        if !passed {
            red.push(id);
        }
    }
    if red != EXPECTED_RED {
        eprintln!("red criteria {red:?} differ from the expected set {EXPECTED_RED:?}");
        std::process::exit(1);
    }
    println!("acceptance: {} of 12 green, red set {red:?} as expected", 12 - red.len());
}
