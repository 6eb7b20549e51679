//! Query arrival streams.
//!
//! Generated traces are non-homogeneous Poisson processes sampled by thinning
//! a homogeneous process at the peak rate. Replayed traces come from a CSV of
//! `arrival_s,true_class,lat_ms,acc,objective`.

use std::f64::consts::TAU;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::selector::{Constraint, Objective};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Query {
    pub query_id: u64,
    pub arrival_time_s: f64,
    pub true_class: usize,
    pub constraint: Constraint,
    /// Position of `constraint` in [`Trace::constraints`].
    pub constraint_class: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TraceKind {
    Diurnal,
    Bursty,
    Csv { path: PathBuf },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum ClassPopularity {
    #[default]
    Uniform,
    /// `P(c) ∝ 1 / (c + 1)^exponent`.
    Zipf { exponent: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixEntry {
    pub latency_ms: f64,
    pub accuracy: f64,
    #[serde(default)]
    pub objective: Objective,
    pub probability: f64,
}

impl MixEntry {
    pub fn constraint(&self) -> Constraint {
        Constraint {
            latency_target_ms: self.latency_ms,
            accuracy_target: self.accuracy,
            primary_objective: self.objective,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceConfig {
    pub kind: TraceKind,
    pub mean_rate: f64,
    pub duration_s: f64,
    pub diurnal_amplitude: f64,
    pub diurnal_period_s: f64,
    pub burst_multiplier: f64,
    pub burst_duration_s: f64,
    /// Mean gap between the end of one burst and the start of the next.
    pub burst_interarrival_s: f64,
    pub class_popularity: ClassPopularity,
    pub constraint_mix: Vec<MixEntry>,
    /// Filled from the zoo when a scenario is loaded.
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self {
            kind: TraceKind::Diurnal,
            mean_rate: 50.0,
            duration_s: 3600.0,
            diurnal_amplitude: 0.5,
            diurnal_period_s: 3600.0,
            burst_multiplier: 4.0,
            burst_duration_s: 120.0,
            burst_interarrival_s: 1080.0,
            class_popularity: ClassPopularity::Uniform,
            constraint_mix: Vec::new(),
            num_classes: 1000,
            seed: 0,
        }
    }
}

impl TraceConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |key: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(format!("trace.{key}"), format!("{v} is not positive")))
            }
        };
        positive("mean_rate", self.mean_rate)?;
        positive("duration_s", self.duration_s)?;
        if !(0.0..1.0).contains(&self.diurnal_amplitude) {
            return Err(Error::config("trace.diurnal_amplitude", "must be in [0,1)"));
        }
        positive("diurnal_period_s", self.diurnal_period_s)?;
        if !(self.burst_multiplier >= 1.0) {
            return Err(Error::config("trace.burst_multiplier", "must be at least 1"));
        }
        positive("burst_duration_s", self.burst_duration_s)?;
        positive("burst_interarrival_s", self.burst_interarrival_s)?;
        if self.num_classes < 2 {
            return Err(Error::config("trace.num_classes", "need at least 2 classes"));
        }
        if let ClassPopularity::Zipf { exponent } = self.class_popularity {
            if !(exponent >= 0.0 && exponent.is_finite()) {
                return Err(Error::config("trace.class_popularity.exponent", "must be non-negative"));
            }
        }
        if !matches!(self.kind, TraceKind::Csv { .. }) {
            validate_mix(&self.constraint_mix)?;
        }
        Ok(())
    }
}

fn validate_mix(mix: &[MixEntry]) -> Result<()> {
    if mix.is_empty() {
        return Err(Error::config("trace.constraint_mix", "empty"));
    }
    let mut total = 0.0;
    for (i, e) in mix.iter().enumerate() {
        e.constraint()
            .validate()
            .map_err(|err| Error::config(format!("trace.constraint_mix[{i}]"), err.to_string()))?;
        if !(e.probability >= 0.0) {
            return Err(Error::config(
                format!("trace.constraint_mix[{i}].probability"),
                "must be non-negative",
            ));
        }
        total += e.probability;
    }
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::config(
            "trace.constraint_mix",
            format!("probabilities sum to {total}, not 1"),
        ));
    }
    Ok(())
}

/// Arrival-rate function of a generated trace.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum RateProfile {
    Diurnal {
        mean_rate: f64,
        amplitude: f64,
        period_s: f64,
    },
    Bursty {
        base_rate: f64,
        multiplier: f64,
        /// Sorted, disjoint `[start, end)` ON intervals.
        bursts: Vec<(f64, f64)>,
    },
}

impl RateProfile {
    pub fn rate_at(&self, t: f64) -> f64 {
        match self {
            RateProfile::Diurnal {
                mean_rate,
                amplitude,
                period_s,
            } => mean_rate * (1.0 + amplitude * (TAU * t / period_s).sin()),
            RateProfile::Bursty {
                base_rate,
                multiplier,
                bursts,
            } => {
                let i = bursts.partition_point(|&(start, _)| start <= t);
                if i > 0 && t < bursts[i - 1].1 {
                    base_rate * multiplier
                } else {
                    *base_rate
                }
            }
        }
    }

    pub fn peak_rate(&self) -> f64 {
        match self {
            RateProfile::Diurnal {
                mean_rate, amplitude, ..
            } => mean_rate * (1.0 + amplitude),
            RateProfile::Bursty {
                base_rate,
                multiplier,
                bursts,
            } => {
                if bursts.is_empty() {
                    *base_rate
                } else {
                    base_rate * multiplier
                }
            }
        }
    }

    /// Two-state ON/OFF profile whose time-average over `[0, duration)` is
    /// exactly `mean_rate`. Gaps are uniform in `[0.5, 1.5] × interarrival`.
    pub fn bursty(config: &TraceConfig, rng: &mut impl Rng) -> Self {
        let mut bursts = Vec::new();
        let mut t = 0.0;
        loop {
            t += config.burst_interarrival_s * rng.gen_range(0.5..1.5);
            if t >= config.duration_s {
                break;
            }
            let end = (t + config.burst_duration_s).min(config.duration_s);
            bursts.push((t, end));
            t = end;
        }
        let on: f64 = bursts.iter().map(|(s, e)| e - s).sum();
        let on_fraction = on / config.duration_s;
        let base_rate = config.mean_rate / (1.0 + (config.burst_multiplier - 1.0) * on_fraction);
        RateProfile::Bursty {
            base_rate,
            multiplier: config.burst_multiplier,
            bursts,
        }
    }
}

/// A materialized query stream.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Trace {
    pub queries: Vec<Query>,
    /// Distinct constraints, indexed by `Query::constraint_class`.
    pub constraints: Vec<Constraint>,
    /// Fraction of queries expected under each constraint.
    pub shares: Vec<f64>,
    pub duration_s: f64,
    /// Known for generated traces; `None` for replayed files.
    pub profile: Option<RateProfile>,
}

impl Trace {
    pub fn mean_rate(&self) -> f64 {
        self.queries.len() as f64 / self.duration_s
    }

    pub fn arrival_times(&self) -> Vec<f64> {
        self.queries.iter().map(|q| q.arrival_time_s).collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_trace_csv(&self.queries, out)
    }
}

fn class_sampler(config: &TraceConfig) -> Result<WeightedIndex<f64>> {
    let weights: Vec<f64> = match config.class_popularity {
        ClassPopularity::Uniform => vec![1.0; config.num_classes],
        ClassPopularity::Zipf { exponent } => (0..config.num_classes)
            .map(|c| 1.0 / ((c + 1) as f64).powf(exponent))
            .collect(),
    };
    WeightedIndex::new(weights).map_err(|e| Error::config("trace.class_popularity", e.to_string()))
}

/// Generate (or load, for `kind = csv`) the query stream described by `config`.
pub fn generate_trace(config: &TraceConfig) -> Result<Trace> {
    config.validate()?;
    if let TraceKind::Csv { path } = &config.kind {
        let mut trace = load_trace_csv(path)?;
        trace.duration_s = trace.duration_s.max(config.duration_s);
        return Ok(trace);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let profile = match config.kind {
        TraceKind::Diurnal => RateProfile::Diurnal {
            mean_rate: config.mean_rate,
            amplitude: config.diurnal_amplitude,
            period_s: config.diurnal_period_s,
        },
        TraceKind::Bursty => RateProfile::bursty(config, &mut rng),
        TraceKind::Csv { .. } => unreachable!(),
    };
    let classes = class_sampler(config)?;
    let mix = WeightedIndex::new(config.constraint_mix.iter().map(|e| e.probability))
        .map_err(|e| Error::config("trace.constraint_mix", e.to_string()))?;
    let constraints: Vec<Constraint> = config.constraint_mix.iter().map(MixEntry::constraint).collect();

    let peak = profile.peak_rate();
    let gap = Exp::new(peak).map_err(|e| Error::config("trace.mean_rate", e.to_string()))?;
    let mut queries = Vec::new();
    let mut t = 0.0;
    loop {
        t += gap.sample(&mut rng);
        if t >= config.duration_s {
            break;
        }
        let keep = rng.gen::<f64>() * peak < profile.rate_at(t);
        if !keep {
            continue;
        }
        let constraint_class = mix.sample(&mut rng);
        queries.push(Query {
            query_id: queries.len() as u64,
            arrival_time_s: t,
            true_class: classes.sample(&mut rng),
            constraint: constraints[constraint_class],
            constraint_class,
        });
    }
    Ok(Trace {
        queries,
        shares: config.constraint_mix.iter().map(|e| e.probability).collect(),
        constraints,
        duration_s: config.duration_s,
        profile: Some(profile),
    })
}

fn objective_name(o: Objective) -> &'static str {
    match o {
        Objective::AccuracyFirst => "accuracy-first",
        Objective::LatencyFirst => "latency-first",
    }
}

fn parse_objective(s: &str) -> Option<Objective> {
    match s {
        "" | "accuracy-first" | "accuracy" => Some(Objective::AccuracyFirst),
        "latency-first" | "latency" => Some(Objective::LatencyFirst),
        _ => None,
    }
}

pub fn write_trace_csv<W: Write>(queries: &[Query], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["arrival_s", "true_class", "lat_ms", "acc", "objective"])?;
    for q in queries {
        w.write_record([
            format!("{:.6}", q.arrival_time_s),
            q.true_class.to_string(),
            q.constraint.latency_target_ms.to_string(),
            q.constraint.accuracy_target.to_string(),
            objective_name(q.constraint.primary_objective).to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<trace>", e))?;
    Ok(())
}

/// Read a trace CSV. Constraint classes are numbered by first appearance.
pub fn load_trace_csv(path: &Path) -> Result<Trace> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_trace_csv(file, path)
}

pub fn read_trace_csv<R: std::io::Read>(input: R, path: &Path) -> Result<Trace> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = reader
        .headers()
        .map_err(|e| Error::parse(path, 1, "header", e.to_string()))?
        .clone();
    let expected = ["arrival_s", "true_class", "lat_ms", "acc", "objective"];
    for (i, name) in expected.iter().enumerate().take(4) {
        if headers.get(i) != Some(*name) {
            return Err(Error::parse(path, 1, *name, "missing or misplaced column"));
        }
    }
    let mut queries = Vec::new();
    let mut constraints: Vec<Constraint> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    let mut last = f64::NEG_INFINITY;
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| Error::parse(path, line, "row", e.to_string()))?;
        let field = |idx: usize, name: &str| -> Result<&str> {
            record
                .get(idx)
                .ok_or_else(|| Error::parse(path, line, name, "missing"))
        };
        let num = |idx: usize, name: &str| -> Result<f64> {
            let raw = field(idx, name)?;
            raw.parse::<f64>()
                .map_err(|_| Error::parse(path, line, name, format!("`{raw}` is not a number")))
        };
        let arrival = num(0, "arrival_s")?;
        let class_raw = field(1, "true_class")?;
        let true_class: usize = class_raw
            .parse()
            .map_err(|_| Error::parse(path, line, "true_class", format!("`{class_raw}` is not a class index")))?;
        let lat = num(2, "lat_ms")?;
        let acc = num(3, "acc")?;
        let objective_raw = record.get(4).unwrap_or("");
        let objective = parse_objective(objective_raw)
            .ok_or_else(|| Error::parse(path, line, "objective", format!("unknown objective `{objective_raw}`")))?;
        if !(arrival >= 0.0 && arrival.is_finite()) {
            return Err(Error::parse(path, line, "arrival_s", "must be a non-negative time"));
        }
        if arrival < last {
            return Err(Error::parse(
                path,
                line,
                "arrival_s",
                Error::TimeRegression { t: arrival, last }.to_string(),
            ));
        }
        last = arrival;
        let constraint = Constraint {
            latency_target_ms: lat,
            accuracy_target: acc,
            primary_objective: objective,
        };
        if let Err(e) = constraint.validate() {
            let name = if matches!(&e, Error::Config { key, .. } if key.ends_with("accuracy")) {
                "acc"
            } else {
                "lat_ms"
            };
            return Err(Error::parse(path, line, name, e.to_string()));
        }
        let constraint_class = match constraints.iter().position(|c| *c == constraint) {
            Some(k) => k,
            None => {
                constraints.push(constraint);
                counts.push(0);
                constraints.len() - 1
            }
        };
        counts[constraint_class] += 1;
        queries.push(Query {
            query_id: queries.len() as u64,
            arrival_time_s: arrival,
            true_class,
            constraint,
            constraint_class,
        });
    }
    if queries.is_empty() {
        return Err(Error::EmptyInput("trace file"));
    }
    let n = queries.len() as f64;
    Ok(Trace {
        shares: counts.iter().map(|&c| c as f64 / n).collect(),
        constraints,
        duration_s: last.ceil().max(1.0),
        queries,
        profile: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mix() -> Vec<MixEntry> {
        [(311.0, 0.82, 0.5), (152.0, 0.803, 0.3), (120.0, 0.79, 0.2)]
            .iter()
            .map(|&(latency_ms, accuracy, probability)| MixEntry {
                latency_ms,
                accuracy,
                objective: Objective::AccuracyFirst,
                probability,
            })
            .collect()
    }

    fn config(kind: TraceKind) -> TraceConfig {
        TraceConfig {
            kind,
            constraint_mix: mix(),
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn flat_diurnal_is_homogeneous_at_mean_rate() {
        let trace = generate_trace(&TraceConfig {
            diurnal_amplitude: 0.0,
            ..config(TraceKind::Diurnal)
        })
        .unwrap();
        let rate = trace.mean_rate();
        assert!((rate - 50.0).abs() <= 2.5, "{rate}");
    }

    #[test]
    fn diurnal_time_average_matches_mean() {
        let trace = generate_trace(&config(TraceKind::Diurnal)).unwrap();
        assert!((trace.mean_rate() - 50.0).abs() <= 2.5);
        assert!(trace.queries.windows(2).all(|w| w[0].arrival_time_s <= w[1].arrival_time_s));
    }

    #[test]
    fn bursty_has_a_hot_minute() {
        let c = TraceConfig {
            burst_multiplier: 4.0,
            ..config(TraceKind::Bursty)
        };
        let trace = generate_trace(&c).unwrap();
        let Some(RateProfile::Bursty { bursts, .. }) = &trace.profile else { panic!() };
        let on: f64 = bursts.iter().map(|(s, e)| e - s).sum::<f64>() / c.duration_s;
        assert!((0.05..0.2).contains(&on), "ON fraction {on}");
        assert!((trace.mean_rate() - 50.0).abs() <= 2.5);

        let mut per_minute = vec![0u32; 60];
        for q in &trace.queries {
            per_minute[(q.arrival_time_s / 60.0) as usize] += 1;
        }
        let mean = per_minute.iter().sum::<u32>() as f64 / 60.0;
        let peak = *per_minute.iter().max().unwrap() as f64;
        assert!(peak >= 2.0 * mean, "peak {peak} mean {mean}");
    }

    #[test]
    fn same_seed_same_bytes() {
        let c = config(TraceKind::Bursty);
        let mut a = Vec::new();
        let mut b = Vec::new();
        generate_trace(&c).unwrap().write_csv(&mut a).unwrap();
        generate_trace(&c).unwrap().write_csv(&mut b).unwrap();
        assert_eq!(a, b);
        let mut d = Vec::new();
        generate_trace(&TraceConfig { seed: 12, ..c }).unwrap().write_csv(&mut d).unwrap();
        assert_ne!(a, d);
    }

    #[test]
    fn constraint_mix_frequencies() {
        let trace = generate_trace(&TraceConfig {
            mean_rate: 100.0,
            duration_s: 1200.0,
            ..config(TraceKind::Diurnal)
        })
        .unwrap();
        let n = trace.queries.len() as f64;
        assert!(n >= 100_000.0);
        for (k, e) in mix().iter().enumerate() {
            let f = trace.queries.iter().filter(|q| q.constraint_class == k).count() as f64 / n;
            assert!((f - e.probability).abs() <= 0.02, "class {k}: {f}");
        }
        assert!(trace.queries.iter().all(|q| q.constraint.validate().is_ok()));
    }

    #[test]
    fn bad_mix_is_rejected() {
        let mut c = config(TraceKind::Diurnal);
        c.constraint_mix[0].probability = 0.9;
        assert!(matches!(generate_trace(&c), Err(Error::Config { .. })));
    }

    #[test]
    fn csv_roundtrip_and_errors() {
        let text = "arrival_s,true_class,lat_ms,acc,objective\n0.5,3,150,0.78,accuracy-first\n0.7,1,100,0.75,latency-first\n1.25,3,150,0.78,accuracy-first\n";
        let trace = read_trace_csv(text.as_bytes(), Path::new("t.csv")).unwrap();
        assert_eq!(trace.queries.len(), 3);
        assert_eq!(trace.constraints.len(), 2);
        assert_eq!(trace.queries[2].constraint_class, 0);
        assert_eq!(trace.queries[1].constraint.primary_objective, Objective::LatencyFirst);

        let bad = "arrival_s,true_class,lat_ms,acc,objective\n0.5,3,150,0.78,accuracy-first\n0.7,1,100,1.5,accuracy-first\n";
        match read_trace_csv(bad.as_bytes(), Path::new("t.csv")) {
            Err(Error::Parse { line, field, .. }) => {
                assert_eq!(line, 3);
                assert_eq!(field, "acc");
            }
            other => panic!("{other:?}"),
        }
        let backwards = "arrival_s,true_class,lat_ms,acc,objective\n2,3,150,0.78,\n1,1,100,0.7,\n";
        assert!(matches!(
            read_trace_csv(backwards.as_bytes(), Path::new("t.csv")),
            Err(Error::Parse { line: 3, .. })
        ));
    }

    #[test]
    fn hour_long_file_reports_its_rate() {
        let mut text = String::from("arrival_s,true_class,lat_ms,acc,objective\n");
        for i in 0..180_000u32 {
            text.push_str(&format!("{},{},150,0.78,\n", f64::from(i) * 0.02, i % 7));
        }
        let trace = read_trace_csv(text.as_bytes(), Path::new("big.csv")).unwrap();
        assert_eq!(trace.duration_s, 3600.0);
        assert!((trace.mean_rate() - 50.0).abs() < 1e-9);
    }

    #[test]
    fn emitted_csv_reloads() {
        let trace = generate_trace(&TraceConfig {
            duration_s: 60.0,
            ..config(TraceKind::Diurnal)
        })
        .unwrap();
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        let back = read_trace_csv(buf.as_slice(), Path::new("x")).unwrap();
        assert_eq!(back.queries.len(), trace.queries.len());
        for (a, b) in back.queries.iter().zip(&trace.queries) {
            assert_eq!(a.true_class, b.true_class);
            assert_eq!(a.constraint, b.constraint);
            assert!((a.arrival_time_s - b.arrival_time_s).abs() < 1e-6);
        }
    }
}
