//! Per-run accounting and report files.

use std::collections::{BTreeMap, VecDeque};
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::selector::Constraint;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QueryRecord {
    pub query_id: u64,
    pub arrival_s: f64,
    pub completion_s: f64,
    pub constraint_class: usize,
    /// End-to-end latency including network overhead; `None` when no vote arrived.
    pub latency_ms: Option<f64>,
    pub failed: bool,
    pub correct: bool,
    pub ensemble_size: usize,
    pub votes: usize,
    pub count_tie: bool,
    pub slo_violation: bool,
    pub window_accuracy: f64,
    pub accuracy_met: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Percentiles {
    pub min: f64,
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
    pub p95: f64,
    pub p99: f64,
    pub max: f64,
}

/// Exact percentile by linear interpolation between closest ranks.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl Percentiles {
    pub fn of(values: &mut [f64]) -> Self {
        values.sort_by(f64::total_cmp);
        let p = |q| percentile(values, q);
        Self {
            min: p(0.0),
            p25: p(0.25),
            p50: p(0.5),
            p75: p(0.75),
            p95: p(0.95),
            p99: p(0.99),
            max: p(1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScalingAction {
    pub t: f64,
    pub pool: String,
    pub action: &'static str,
    #[serde(rename = "type")]
    pub type_name: String,
    pub count: u32,
    pub reason: &'static str,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SelectorAction {
    pub t: f64,
    pub constraint: String,
    pub old_size: usize,
    pub new_size: usize,
    pub trigger: &'static str,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostLine {
    pub instance_id: u64,
    pub pool: String,
    #[serde(rename = "type")]
    pub type_name: String,
    pub pricing: &'static str,
    pub launched_at: f64,
    pub ready_at: f64,
    pub ended_at: f64,
    pub end_reason: &'static str,
    pub cost: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TimeseriesRow {
    pub t: f64,
    pub series: &'static str,
    pub key: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConstraintSummary {
    pub constraint: String,
    pub latency_target_ms: f64,
    pub accuracy_target: f64,
    pub queries: usize,
    pub failed: usize,
    pub cumulative_accuracy: f64,
    pub accuracy_met_fraction: f64,
    pub mean_ensemble_size: f64,
    pub time_avg_ensemble_size: f64,
    pub latency_ms: Percentiles,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct VmSummary {
    pub launched: u64,
    pub peak_running: usize,
    pub preempted: u64,
    pub launched_by_reason: BTreeMap<&'static str, u64>,
    pub launched_by_pool: BTreeMap<String, u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TieSummary {
    pub count_ties: u64,
    pub resolved_correct: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PredictorSummary {
    pub kind: String,
    pub forecasts: usize,
    pub rmse: Option<f64>,
}

/// Everything `summary.json` holds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub policy: String,
    pub seed: u64,
    pub duration_s: f64,
    pub end_time_s: f64,
    pub queries: usize,
    pub completed: usize,
    pub failed: usize,
    pub failed_fraction: f64,
    pub latency_ms: Percentiles,
    pub slo_violation_fraction: f64,
    pub accuracy_met_fraction: f64,
    pub cumulative_accuracy: f64,
    pub mean_ensemble_size: f64,
    pub time_avg_ensemble_size: f64,
    pub total_cost: f64,
    pub per_constraint: Vec<ConstraintSummary>,
    pub served_per_model: BTreeMap<String, u64>,
    pub vms: VmSummary,
    pub ties: TieSummary,
    pub predictor: PredictorSummary,
    pub scaling_actions: Vec<ScalingAction>,
    pub selector_actions: Vec<SelectorAction>,
    pub config: serde_json::Value,
}

/// A finished run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub summary: Summary,
    pub records: Vec<QueryRecord>,
    pub timeseries: Vec<TimeseriesRow>,
    pub cost_lines: Vec<CostLine>,
    /// Labels for `QueryRecord::constraint_class`.
    pub constraint_labels: Vec<String>,
}

pub fn constraint_label(c: &Constraint) -> String {
    format!("{}ms@{}", c.latency_target_ms, c.accuracy_target)
}

/// Streaming accumulator used during a run.
#[derive(Clone, Debug)]
pub struct MetricsCollector {
    constraints: Vec<Constraint>,
    slo_ms: f64,
    window: usize,
    windows: Vec<VecDeque<bool>>,
    window_correct: Vec<usize>,
    pub records: Vec<QueryRecord>,
    pub timeseries: Vec<TimeseriesRow>,
    pub scaling_actions: Vec<ScalingAction>,
    pub selector_actions: Vec<SelectorAction>,
    pub ties: TieSummary,
    size_samples: Vec<Vec<f64>>,
}

impl MetricsCollector {
    pub fn new(constraints: Vec<Constraint>, slo_ms: f64, window: usize) -> Self {
        let n = constraints.len();
        Self {
            constraints,
            slo_ms,
            window: window.max(1),
            windows: vec![VecDeque::new(); n],
            window_correct: vec![0; n],
            records: Vec::new(),
            timeseries: Vec::new(),
            scaling_actions: Vec::new(),
            selector_actions: Vec::new(),
            ties: TieSummary::default(),
            size_samples: vec![Vec::new(); n],
        }
    }

    pub fn slo_ms(&self) -> f64 {
        self.slo_ms
    }

    /// Mean correctness of the constraint's moving window; 0 before any completion.
    pub fn window_accuracy(&self, class: usize) -> f64 {
        let w = &self.windows[class];
        if w.is_empty() {
            0.0
        } else {
            self.window_correct[class] as f64 / w.len() as f64
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn record_completion(
        &mut self,
        query_id: u64,
        arrival_s: f64,
        completion_s: f64,
        constraint_class: usize,
        latency_ms: Option<f64>,
        correct: bool,
        ensemble_size: usize,
        votes: usize,
        count_tie: bool,
    ) -> &QueryRecord {
        let failed = latency_ms.is_none();
        let correct = correct && !failed;
        let slo_violation = latency_ms.is_none_or(|l| l > self.slo_ms);
        let w = &mut self.windows[constraint_class];
        w.push_back(correct);
        self.window_correct[constraint_class] += usize::from(correct);
        if w.len() > self.window {
            let old = w.pop_front().unwrap();
            self.window_correct[constraint_class] -= usize::from(old);
        }
        let window_accuracy = self.window_accuracy(constraint_class);
        let accuracy_met = window_accuracy >= self.constraints[constraint_class].accuracy_target;
        if count_tie {
            self.ties.count_ties += 1;
            self.ties.resolved_correct += u64::from(correct);
        }
        self.records.push(QueryRecord {
            query_id,
            arrival_s,
            completion_s,
            constraint_class,
            latency_ms,
            failed,
            correct,
            ensemble_size,
            votes,
            count_tie,
            slo_violation,
            window_accuracy,
            accuracy_met,
        });
        self.records.last().unwrap()
    }

    pub fn sample(&mut self, t: f64, series: &'static str, key: impl Into<String>, value: f64) {
        self.timeseries.push(TimeseriesRow {
            t,
            series,
            key: key.into(),
            value,
        });
    }

    pub fn sample_ensemble_size(&mut self, t: f64, class: usize, size: usize) {
        self.size_samples[class].push(size as f64);
        let label = constraint_label(&self.constraints[class]);
        self.sample(t, "ensemble_size", label, size as f64);
    }

    /// Close the run.
    pub fn finish(self, mut summary: SummaryInputs) -> MetricsReport {
        let n = self.records.len();
        let failed = self.records.iter().filter(|r| r.failed).count();
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let mut latencies: Vec<f64> = self.records.iter().filter_map(|r| r.latency_ms).collect();
        let labels: Vec<String> = self.constraints.iter().map(constraint_label).collect();

        let mut per_constraint = Vec::new();
        let mut time_avgs = Vec::new();
        for (k, c) in self.constraints.iter().enumerate() {
            let rs: Vec<&QueryRecord> = self.records.iter().filter(|r| r.constraint_class == k).collect();
            let mut lat: Vec<f64> = rs.iter().filter_map(|r| r.latency_ms).collect();
            let samples = &self.size_samples[k];
            let time_avg = if samples.is_empty() {
                0.0
            } else {
                samples.iter().sum::<f64>() / samples.len() as f64
            };
            if !rs.is_empty() {
                time_avgs.push(time_avg);
            }
            per_constraint.push(ConstraintSummary {
                constraint: labels[k].clone(),
                latency_target_ms: c.latency_target_ms,
                accuracy_target: c.accuracy_target,
                queries: rs.len(),
                failed: rs.iter().filter(|r| r.failed).count(),
                cumulative_accuracy: ratio(rs.iter().filter(|r| r.correct).count(), rs.len()),
                accuracy_met_fraction: ratio(rs.iter().filter(|r| r.accuracy_met).count(), rs.len()),
                mean_ensemble_size: if rs.is_empty() {
                    0.0
                } else {
                    rs.iter().map(|r| r.ensemble_size as f64).sum::<f64>() / rs.len() as f64
                },
                time_avg_ensemble_size: time_avg,
                latency_ms: Percentiles::of(&mut lat),
            });
        }
        let total_cost = sum_costs(&summary.cost_lines);
        let mean_size = if n == 0 {
            0.0
        } else {
            self.records.iter().map(|r| r.ensemble_size as f64).sum::<f64>() / n as f64
        };
        let report_summary = Summary {
            policy: std::mem::take(&mut summary.policy),
            seed: summary.seed,
            duration_s: summary.duration_s,
            end_time_s: summary.end_time_s,
            queries: n,
            completed: n - failed,
            failed,
            failed_fraction: ratio(failed, n),
            latency_ms: Percentiles::of(&mut latencies),
            slo_violation_fraction: ratio(self.records.iter().filter(|r| r.slo_violation).count(), n),
            accuracy_met_fraction: ratio(self.records.iter().filter(|r| r.accuracy_met).count(), n),
            cumulative_accuracy: ratio(self.records.iter().filter(|r| r.correct).count(), n),
            mean_ensemble_size: mean_size,
            time_avg_ensemble_size: if time_avgs.is_empty() {
                0.0
            } else {
                time_avgs.iter().sum::<f64>() / time_avgs.len() as f64
            },
            total_cost,
            per_constraint,
            served_per_model: summary.served_per_model,
            vms: summary.vms,
            ties: self.ties,
            predictor: summary.predictor,
            scaling_actions: self.scaling_actions,
            selector_actions: self.selector_actions,
            config: summary.config,
        };
        MetricsReport {
            summary: report_summary,
            records: self.records,
            timeseries: self.timeseries,
            cost_lines: summary.cost_lines,
            constraint_labels: labels,
        }
    }
}

/// Run-level facts the collector does not see itself.
#[derive(Clone, Debug)]
pub struct SummaryInputs {
    pub policy: String,
    pub seed: u64,
    pub duration_s: f64,
    pub end_time_s: f64,
    pub served_per_model: BTreeMap<String, u64>,
    pub vms: VmSummary,
    pub predictor: PredictorSummary,
    pub cost_lines: Vec<CostLine>,
    pub config: serde_json::Value,
}

/// Round a currency amount to whole cents.
pub fn cents(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Sum of billing lines in line order.
fn sum_costs(lines: &[CostLine]) -> f64 {
    lines.iter().map(|l| l.cost).sum()
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

impl MetricsReport {
    pub fn write_summary<W: Write>(&self, mut out: W) -> Result<()> {
        serde_json::to_writer_pretty(&mut out, &self.summary)?;
        out.write_all(b"\n").map_err(io_err(Path::new("<summary>")))?;
        Ok(())
    }

    pub fn write_latency_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "query_id",
            "arrival_s",
            "completion_s",
            "constraint",
            "latency_ms",
            "failed",
            "correct",
            "ensemble_size",
            "votes",
            "count_tie",
            "slo_violation",
            "window_accuracy",
            "accuracy_met",
        ])?;
        for r in &self.records {
            w.write_record([
                r.query_id.to_string(),
                format!("{:.6}", r.arrival_s),
                format!("{:.6}", r.completion_s),
                self.constraint_labels[r.constraint_class].clone(),
                r.latency_ms.map(|l| format!("{l:.3}")).unwrap_or_default(),
                u8::from(r.failed).to_string(),
                u8::from(r.correct).to_string(),
                r.ensemble_size.to_string(),
                r.votes.to_string(),
                u8::from(r.count_tie).to_string(),
                u8::from(r.slo_violation).to_string(),
                format!("{:.6}", r.window_accuracy),
                u8::from(r.accuracy_met).to_string(),
            ])?;
        }
        w.flush().map_err(io_err(Path::new("<latency>")))?;
        Ok(())
    }

    pub fn write_timeseries_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t_s", "series", "key", "value"])?;
        for row in &self.timeseries {
            w.write_record([row.t.to_string(), row.series.to_string(), row.key.clone(), row.value.to_string()])?;
        }
        w.flush().map_err(io_err(Path::new("<timeseries>")))?;
        Ok(())
    }

    pub fn write_cost_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for line in &self.cost_lines {
            w.serialize(line)?;
        }
        if self.cost_lines.is_empty() {
            w.write_record([
                "instance_id",
                "pool",
                "type",
                "pricing",
                "launched_at",
                "ready_at",
                "ended_at",
                "end_reason",
                "cost",
            ])?;
        }
        w.flush().map_err(io_err(Path::new("<cost>")))?;
        Ok(())
    }

    /// Write `summary.json`, `latency.csv`, `timeseries.csv` and `cost.csv` into `dir`.
    pub fn emit(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let open = |name: &str| -> Result<std::io::BufWriter<std::fs::File>> {
            let path = dir.join(name);
            let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            Ok(std::io::BufWriter::new(f))
        };
        self.write_summary(open("summary.json")?)?;
        self.write_latency_csv(open("latency.csv")?)?;
        self.write_timeseries_csv(open("timeseries.csv")?)?;
        self.write_cost_csv(open("cost.csv")?)?;
        Ok(())
    }

    /// One-line digest: p50/p99 latency, accuracy met, cost.
    pub fn one_line(&self) -> String {
        let s = &self.summary;
        format!(
            "{}: queries {} p50 {:.1} ms p99 {:.1} ms accuracy-met {:.2}% cost ${:.2}",
            s.policy,
            s.queries,
            s.latency_ms.p50,
            s.latency_ms.p99,
            100.0 * s.accuracy_met_fraction,
            s.total_cost
        )
    }
}
