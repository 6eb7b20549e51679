//! Built-in self-checks run by `ensim validate`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::estimate::estimate_ensemble_accuracy;
use crate::metrics::cents;
use crate::predictor::{LoadPredictor, PredictorConfig, PredictorKind};
use crate::resources::InstanceState;
use crate::scenario::{Overrides, Scenario};
use crate::sim::{prepare, run_prepared, Probe, SimEvent, SimView};
use crate::workload::RateProfile;

#[derive(Clone, Copy, Debug, Default)]
pub struct ValidateOptions {
    pub quick: bool,
    /// Added to every estimate; a nonzero value must make the enumeration check fail.
    pub estimator_perturbation: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Exhaustive majority-vote probability over all 2^N outcomes.
pub fn enumerate_majority(probabilities: &[f64]) -> f64 {
    let n = probabilities.len();
    let need = n / 2 + 1;
    (0u32..1 << n)
        .filter(|mask| mask.count_ones() as usize >= need)
        .map(|mask| {
            probabilities
                .iter()
                .enumerate()
                .map(|(i, &p)| if mask & (1 << i) != 0 { p } else { 1.0 - p })
                .product::<f64>()
        })
        .sum()
}

fn check_estimator(opts: &ValidateOptions) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let per_n = if opts.quick { 20 } else { 200 };
    let mut worst = 0.0f64;
    let mut error = None;
    for n in 1..=12 {
        for _ in 0..per_n {
            let p: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..0.99)).collect();
            match estimate_ensemble_accuracy(&p) {
                Ok(e) => worst = worst.max((e + opts.estimator_perturbation - enumerate_majority(&p)).abs()),
                Err(e) => error = Some(e.to_string()),
            }
        }
    }
    let passed = error.is_none() && worst <= 1e-9;
    CheckResult {
        name: "estimator-vs-enumeration",
        passed,
        detail: error.unwrap_or_else(|| format!("max abs error {worst:.3e} over {} vectors", 12 * per_n)),
    }
}

#[derive(Default)]
struct PackingProbe {
    events: u64,
    violations: Vec<String>,
}

impl Probe for PackingProbe {
    fn on_event(&mut self, event: &SimEvent, view: &SimView<'_>) {
        self.events += 1;
        if self.violations.len() >= 5 {
            return;
        }
        for (inst, flight) in view.instances.iter().zip(view.in_flight) {
            let busy = inst.slots_busy as usize;
            let bad = inst.slots_busy > inst.slots_total
                || flight.len() != busy
                || (busy > 0 && inst.state != InstanceState::Running)
                || flight.iter().any(|s| s.model != inst.pool);
            if bad {
                self.violations.push(format!(
                    "t={:.3} after {:?}: instance {} busy {}/{} in flight {} state {:?}",
                    event.time_s,
                    event.kind,
                    inst.instance_id,
                    inst.slots_busy,
                    inst.slots_total,
                    flight.len(),
                    inst.state
                ));
            }
        }
    }
}

fn sim_scenario(opts: &ValidateOptions) -> crate::Result<Scenario> {
    let mut s = Scenario::bundled("strict_wiki")?;
    s.apply(&Overrides {
        duration_s: Some(if opts.quick { 300.0 } else { 1200.0 }),
        failure_prob: Some(0.02),
        ..Overrides::default()
    })?;
    Ok(s)
}

fn check_sim(opts: &ValidateOptions) -> Vec<CheckResult> {
    let outcome = sim_scenario(opts).and_then(|s| {
        let prepared = prepare(&s)?;
        let mut probe = PackingProbe::default();
        let report = run_prepared(&prepared, None, &mut probe)?;
        Ok((probe, report))
    });
    let (probe, report) = match outcome {
        Ok(x) => x,
        Err(e) => {
            return ["packing-invariant", "billing-reconciliation"]
                .into_iter()
                .map(|name| CheckResult {
                    name,
                    passed: false,
                    detail: format!("simulation failed: {e}"),
                })
                .collect()
        }
    };
    let packing = CheckResult {
        name: "packing-invariant",
        passed: probe.violations.is_empty(),
        detail: if probe.violations.is_empty() {
            format!("{} events, {} instances", probe.events, report.cost_lines.len())
        } else {
            probe.violations.join("; ")
        },
    };
    let line_total: f64 = report.cost_lines.iter().map(|l| l.cost).sum();
    let met = report.records.iter().filter(|r| r.accuracy_met).count() as f64;
    let met_fraction = if report.records.is_empty() { 0.0 } else { met / report.records.len() as f64 };
    let billing_ok = cents(line_total) == cents(report.summary.total_cost);
    let met_ok = (met_fraction - report.summary.accuracy_met_fraction).abs() < 1e-12;
    let billing = CheckResult {
        name: "billing-reconciliation",
        passed: billing_ok && met_ok,
        detail: format!(
            "lines ${:.2} vs summary ${:.2}; accuracy-met {:.6} vs {:.6}",
            line_total, report.summary.total_cost, met_fraction, report.summary.accuracy_met_fraction
        ),
    };
    vec![packing, billing]
}

fn check_oracle_predictor(opts: &ValidateOptions) -> CheckResult {
    let profile = RateProfile::Diurnal {
        mean_rate: 50.0,
        amplitude: 0.5,
        period_s: 3600.0,
    };
    let config = PredictorConfig {
        kind: PredictorKind::Oracle,
        ..PredictorConfig::default()
    };
    let horizon = config.horizon_s;
    let end = if opts.quick { 3600.0 } else { 4.0 * 3600.0 };
    let result = LoadPredictor::new(config, Some(profile.clone())).and_then(|p| {
        let mut sq = 0.0;
        let mut n = 0usize;
        let mut t = 0.0;
        while t < end {
            let e = p.predict(t)? - profile.rate_at(t + horizon);
            sq += e * e;
            n += 1;
            t += 60.0;
        }
        Ok((sq / n as f64).sqrt())
    });
    match result {
        Ok(rmse) => CheckResult {
            name: "oracle-predictor-zero-rmse",
            passed: rmse == 0.0,
            detail: format!("rmse {rmse:e} against the generating rate"),
        },
        Err(e) => CheckResult {
            name: "oracle-predictor-zero-rmse",
            passed: false,
            detail: e.to_string(),
        },
    }
}

/// Run every check; `quick` shrinks sample counts and simulated time.
pub fn run_checks(opts: &ValidateOptions) -> Vec<CheckResult> {
    let mut out = vec![check_estimator(opts)];
    out.extend(check_sim(opts));
    out.push(check_oracle_predictor(opts));
    out
}
