//! Scenario files: one JSON document describing a complete run.
//!
//! ```json
//! {
//!   "version": 1,
//!   "seed": 7,
//!   "zoo": { "source": { "bundled": "imagenet" }, "difficulty_spread": 0.03 },
//!   "trace": { "kind": "diurnal", "workload": "strict", "duration_s": 3600 },
//!   "predictor": { "kind": "moving-window-average" },
//!   "autoscaler": {},
//!   "market": { "pricing_mode": "spot", "bid_fraction": 0.4 },
//!   "latency_model": {},
//!   "policy": { "policy": "dynamic", "sampling_interval_s": 30 }
//! }
//! ```
//!
//! Relative paths inside a scenario file resolve against the file's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::{PriceSource, SpotMarketConfig};
use crate::predictor::{PredictorConfig, PredictorKind};
use crate::resources::{bundled_catalog, load_catalog, AutoscalerConfig, InstanceType};
use crate::rng::derive_seed;
use crate::selector::{Objective, SelectionPolicy, SelectionPolicyConfig};
use crate::workload::{MixEntry, TraceConfig, TraceKind};
use crate::zoo::{
    load_class_matrix, load_zoo, synthesize_class_matrix, BundledZoo, ClassAccuracyMatrix, PredictionOracle, PredictionOracleConfig,
    WrongLabelDistribution, Zoo, ZooSource,
};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSection {
    pub wrong_label_distribution: WrongLabelDistribution,
    pub error_correlation: f64,
}

impl Default for OracleSection {
    fn default() -> Self {
        Self {
            wrong_label_distribution: WrongLabelDistribution::UniformOverWrong,
            error_correlation: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ZooSection {
    pub source: ZooSource,
    /// Per-class accuracy CSV; synthesized from `difficulty_spread` when absent.
    pub class_matrix: Option<PathBuf>,
    pub num_classes: Option<usize>,
    pub difficulty_spread: f64,
    pub oracle: OracleSection,
}

impl Default for ZooSection {
    fn default() -> Self {
        Self {
            source: ZooSource::Bundled {
                bundled: BundledZoo::Imagenet,
            },
            class_matrix: None,
            num_classes: None,
            difficulty_spread: 0.03,
            oracle: OracleSection::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Workload {
    /// The three highest-accuracy constraint types, uniformly.
    Strict,
    /// The three lowest-accuracy constraint types, uniformly.
    Relaxed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceSection {
    pub kind: TraceKind,
    pub mean_rate: f64,
    pub duration_s: f64,
    pub diurnal_amplitude: f64,
    pub diurnal_period_s: f64,
    pub burst_multiplier: f64,
    pub burst_duration_s: f64,
    pub burst_interarrival_s: f64,
    pub class_popularity: crate::workload::ClassPopularity,
    /// Named mix; ignored when `constraint_mix` is given.
    pub workload: Option<Workload>,
    pub constraint_mix: Vec<MixEntry>,
}

impl Default for TraceSection {
    fn default() -> Self {
        let t = TraceConfig::default();
        Self {
            kind: t.kind,
            mean_rate: t.mean_rate,
            duration_s: t.duration_s,
            diurnal_amplitude: t.diurnal_amplitude,
            diurnal_period_s: t.diurnal_period_s,
            burst_multiplier: t.burst_multiplier,
            burst_duration_s: t.burst_duration_s,
            burst_interarrival_s: t.burst_interarrival_s,
            class_popularity: t.class_popularity,
            workload: Some(Workload::Strict),
            constraint_mix: Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VotingMode {
    #[default]
    ClassWeighted,
    Uniform,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySection {
    pub policy: SelectionPolicy,
    pub acc_margin: f64,
    pub lat_margin_ms: f64,
    pub sampling_interval_s: f64,
    pub voting: VotingMode,
}

impl Default for PolicySection {
    fn default() -> Self {
        let s = SelectionPolicyConfig::default();
        Self {
            policy: s.policy,
            acc_margin: s.acc_margin,
            lat_margin_ms: s.lat_margin_ms,
            sampling_interval_s: s.sampling_interval_s,
            voting: VotingMode::ClassWeighted,
        }
    }
}

impl PolicySection {
    pub fn selection(&self) -> SelectionPolicyConfig {
        SelectionPolicyConfig {
            acc_margin: self.acc_margin,
            lat_margin_ms: self.lat_margin_ms,
            sampling_interval_s: self.sampling_interval_s,
            policy: self.policy,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatencyModelConfig {
    /// Uniform range of the per-query network and serialization overhead.
    pub network_overhead_ms: (f64, f64),
    pub slo_ms: f64,
    pub launch_delay_s: (f64, f64),
    /// Moving-window length for the accuracy-met rule.
    pub accuracy_window: usize,
}

impl Default for LatencyModelConfig {
    fn default() -> Self {
        Self {
            network_overhead_ms: (200.0, 300.0),
            slo_ms: 700.0,
            launch_delay_s: (60.0, 100.0),
            accuracy_window: 200,
        }
    }
}

impl LatencyModelConfig {
    pub fn validate(&self) -> Result<()> {
        let range = |key: &str, (lo, hi): (f64, f64)| {
            if lo >= 0.0 && hi >= lo && hi.is_finite() {
                Ok(())
            } else {
                Err(Error::config(format!("latency_model.{key}"), format!("bad range [{lo}, {hi}]")))
            }
        };
        range("network_overhead_ms", self.network_overhead_ms)?;
        range("launch_delay_s", self.launch_delay_s)?;
        if !(self.slo_ms > 0.0) {
            return Err(Error::config("latency_model.slo_ms", "must be positive"));
        }
        if self.accuracy_window == 0 {
            return Err(Error::config("latency_model.accuracy_window", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub version: u32,
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub zoo: ZooSection,
    #[serde(default)]
    pub trace: TraceSection,
    #[serde(default)]
    pub predictor: PredictorConfig,
    #[serde(default)]
    pub autoscaler: AutoscalerConfig,
    #[serde(default)]
    pub market: SpotMarketConfig,
    #[serde(default)]
    pub latency_model: LatencyModelConfig,
    #[serde(default)]
    pub policy: PolicySection,
}

/// Command-line overrides applied on top of a scenario.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub duration_s: Option<f64>,
    pub policy: Option<SelectionPolicy>,
    pub failure_prob: Option<f64>,
    pub bid_fraction: Option<f64>,
    pub sampling_interval_s: Option<f64>,
}

const BUNDLED: &[(&str, &str)] = &[
    ("strict_wiki", include_str!("../scenarios/strict_wiki.json")),
    ("strict_twitter", include_str!("../scenarios/strict_twitter.json")),
    ("relaxed_wiki", include_str!("../scenarios/relaxed_wiki.json")),
    ("relaxed_twitter", include_str!("../scenarios/relaxed_twitter.json")),
    ("strict_wiki_sentiment", include_str!("../scenarios/strict_wiki_sentiment.json")),
    ("strict_twitter_sentiment", include_str!("../scenarios/strict_twitter_sentiment.json")),
    ("relaxed_wiki_sentiment", include_str!("../scenarios/relaxed_wiki_sentiment.json")),
    ("relaxed_twitter_sentiment", include_str!("../scenarios/relaxed_twitter_sentiment.json")),
];

pub fn bundled_names() -> impl Iterator<Item = &'static str> {
    BUNDLED.iter().map(|(n, _)| *n)
}

fn json_error(label: &str, e: serde_json::Error) -> Error {
    Error::Config {
        key: label.to_string(),
        message: format!("line {} column {}: {e}", e.line(), e.column()),
    }
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self> {
        let scenario: Scenario = serde_json::from_str(text).map_err(|e| json_error("scenario", e))?;
        scenario.validate()?;
        Ok(scenario)
    }

    /// Load a file; `.json` suffix optional for bundled names like `strict_wiki`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut scenario: Scenario =
            serde_json::from_str(&text).map_err(|e| json_error(&path.display().to_string(), e))?;
        if let Some(dir) = path.parent() {
            scenario.rebase(dir);
        }
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn bundled(name: &str) -> Result<Self> {
        let stem = name.strip_suffix(".json").unwrap_or(name);
        let (_, text) = BUNDLED
            .iter()
            .find(|(n, _)| *n == stem)
            .ok_or_else(|| Error::config("scenario", format!("no bundled scenario `{name}`")))?;
        Self::from_json(text)
    }

    /// A path when it exists on disk, else a bundled name.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        let path = Path::new(name_or_path);
        if path.exists() {
            Self::load(path)
        } else {
            Self::bundled(name_or_path)
        }
    }

    fn rebase(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        if let ZooSource::File { path } = &mut self.zoo.source {
            fix(path);
        }
        if let Some(p) = &mut self.zoo.class_matrix {
            fix(p);
        }
        if let TraceKind::Csv { path } = &mut self.trace.kind {
            fix(path);
        }
        if let PredictorKind::OracleFile { path } = &mut self.predictor.kind {
            fix(path);
        }
        if let PriceSource::File { path } = &mut self.market.prices {
            fix(path);
        }
        if let Some(p) = &mut self.autoscaler.catalog {
            fix(p);
        }
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(d) = o.duration_s {
            self.trace.duration_s = d;
        }
        if let Some(p) = o.policy {
            self.policy.policy = p;
        }
        if let Some(p) = o.failure_prob {
            self.market.failure_probability = p;
        }
        if let Some(b) = o.bid_fraction {
            self.market.bid_fraction = b;
        }
        if let Some(s) = o.sampling_interval_s {
            self.policy.sampling_interval_s = s;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != SCHEMA_VERSION {
            return Err(Error::config(
                "version",
                format!("unsupported schema version {} (expected {SCHEMA_VERSION})", self.version),
            ));
        }
        if !(0.0..=0.05).contains(&self.zoo.difficulty_spread) {
            return Err(Error::config("zoo.difficulty_spread", "must be in [0, 0.05]"));
        }
        if !(0.0..1.0).contains(&self.zoo.oracle.error_correlation) {
            return Err(Error::config("zoo.oracle.error_correlation", "must be in [0,1)"));
        }
        if self.zoo.num_classes.is_some_and(|n| n < 2) {
            return Err(Error::config("zoo.num_classes", "need at least 2 classes"));
        }
        if self.trace.constraint_mix.is_empty()
            && self.trace.workload.is_none()
            && !matches!(self.trace.kind, TraceKind::Csv { .. })
        {
            return Err(Error::config("trace", "needs `workload` or `constraint_mix`"));
        }
        // named workloads resolve against the zoo later; check everything else now
        let mut early = self.generator_config(self.trace.constraint_mix.clone(), self.zoo.num_classes.unwrap_or(2));
        if early.constraint_mix.is_empty() {
            early.kind = TraceKind::Csv { path: PathBuf::new() };
        }
        early.validate()?;
        self.predictor.validate()?;
        self.autoscaler.validate()?;
        self.market.validate()?;
        self.latency_model.validate()?;
        self.policy.selection().validate()?;
        Ok(())
    }

    /// Load the zoo, its class matrix and the oracle.
    pub fn build_models(&self) -> Result<(Zoo, PredictionOracle)> {
        let (zoo, default_classes, file_matrix) = match &self.zoo.source {
            ZooSource::Bundled { bundled } => (Zoo::bundled(*bundled), bundled.default_num_classes(), None),
            ZooSource::File { path } => {
                let classes = self.zoo.num_classes.unwrap_or(1000);
                let (zoo, matrix) = load_zoo(path, self.zoo.class_matrix.as_deref(), classes)?;
                let m = self.zoo.class_matrix.as_ref().map(|_| matrix);
                (zoo, classes, m)
            }
        };
        let num_classes = self.zoo.num_classes.unwrap_or(default_classes);
        let matrix: ClassAccuracyMatrix = match (file_matrix, &self.zoo.class_matrix) {
            (Some(m), _) => m,
            (None, Some(path)) => load_class_matrix(&zoo, path, num_classes)?,
            (None, None) => synthesize_class_matrix(
                &zoo,
                num_classes,
                self.zoo.difficulty_spread,
                derive_seed(self.seed, "class-matrix"),
            )?,
        };
        let oracle = PredictionOracle::new(
            matrix,
            PredictionOracleConfig {
                rng_seed: derive_seed(self.seed, "oracle"),
                wrong_label_distribution: self.zoo.oracle.wrong_label_distribution,
                error_correlation: self.zoo.oracle.error_correlation,
            },
        )?;
        Ok((zoo, oracle))
    }

    pub fn catalog(&self) -> Result<Vec<InstanceType>> {
        match &self.autoscaler.catalog {
            Some(path) => load_catalog(path),
            None => Ok(bundled_catalog()),
        }
    }

    fn generator_config(&self, constraint_mix: Vec<MixEntry>, num_classes: usize) -> TraceConfig {
        let t = &self.trace;
        TraceConfig {
            kind: t.kind.clone(),
            mean_rate: t.mean_rate,
            duration_s: t.duration_s,
            diurnal_amplitude: t.diurnal_amplitude,
            diurnal_period_s: t.diurnal_period_s,
            burst_multiplier: t.burst_multiplier,
            burst_duration_s: t.burst_duration_s,
            burst_interarrival_s: t.burst_interarrival_s,
            class_popularity: t.class_popularity.clone(),
            constraint_mix,
            num_classes,
            seed: derive_seed(self.seed, "trace"),
        }
    }

    /// The generator config for this scenario's trace.
    pub fn trace_config(&self, zoo: &Zoo, num_classes: usize) -> Result<TraceConfig> {
        let t = &self.trace;
        let mix = if !t.constraint_mix.is_empty() {
            t.constraint_mix.clone()
        } else if let Some(w) = t.workload {
            named_mix(&self.zoo.source, zoo, w)
        } else {
            Vec::new()
        };
        let config = self.generator_config(mix, num_classes);
        config.validate()?;
        Ok(config)
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("scenario serializes")
    }
}

/// `(latency ms, accuracy)` of the five default constraint types, most
/// accurate first.
fn constraint_types(source: &ZooSource, zoo: &Zoo) -> Vec<(f64, f64)> {
    match source {
        ZooSource::Bundled {
            bundled: BundledZoo::Imagenet,
        } => vec![(311.0, 0.82), (152.0, 0.803), (120.0, 0.79), (100.0, 0.75), (78.0, 0.744)],
        ZooSource::Bundled {
            bundled: BundledZoo::Sentiment,
        } => vec![(350.0, 0.959), (165.0, 0.946), (120.0, 0.925), (92.0, 0.906), (79.0, 0.89)],
        ZooSource::File { .. } => {
            // single-model operating points spread over the accuracy ranking
            let mut models: Vec<_> = zoo.models().iter().collect();
            models.sort_by(|a, b| b.top1_accuracy.total_cmp(&a.top1_accuracy).then(a.id.cmp(&b.id)));
            let n = models.len();
            let mut picks: Vec<(f64, f64)> = (0..5)
                .map(|i| {
                    let m = models[(i * (n - 1) + 2) / 4];
                    (m.service_latency_ms, m.top1_accuracy)
                })
                .collect();
            picks.dedup();
            picks
        }
    }
}

pub fn named_mix(source: &ZooSource, zoo: &Zoo, workload: Workload) -> Vec<MixEntry> {
    let types = constraint_types(source, zoo);
    let chosen: Vec<(f64, f64)> = match workload {
        Workload::Strict => types.iter().take(3).copied().collect(),
        Workload::Relaxed => types.iter().rev().take(3).rev().copied().collect(),
    };
    let p = 1.0 / chosen.len() as f64;
    chosen
        .into_iter()
        .map(|(latency_ms, accuracy)| MixEntry {
            latency_ms,
            accuracy,
            objective: Objective::AccuracyFirst,
            probability: p,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_bundled_scenario_parses_and_builds() {
        for name in bundled_names() {
            let s = Scenario::bundled(name).unwrap();
            let (zoo, oracle) = s.build_models().unwrap();
            let tc = s.trace_config(&zoo, oracle.matrix().num_classes()).unwrap();
            assert_eq!(tc.constraint_mix.len(), 3, "{name}");
        }
        assert!(Scenario::bundled("strict_wiki.json").is_ok());
        assert!(Scenario::bundled("nope").is_err());
    }

    #[test]
    fn unknown_keys_and_versions_are_rejected() {
        assert!(matches!(Scenario::from_json(r#"{"version": 2}"#), Err(Error::Config { .. })));
        assert!(Scenario::from_json(r#"{"version": 1, "bogus": 3}"#).is_err());
        assert!(Scenario::from_json(r#"{"version": 1, "policy": {"policy": "mystery"}}"#).is_err());
        assert!(Scenario::from_json(r#"{"version": 1}"#).is_ok());
    }

    #[test]
    fn overrides_apply_and_validate() {
        let mut s = Scenario::bundled("strict_wiki").unwrap();
        s.apply(&Overrides {
            seed: Some(9),
            sampling_interval_s: Some(120.0),
            policy: Some(SelectionPolicy::FullStatic),
            ..Default::default()
        })
        .unwrap();
        assert_eq!(s.seed, 9);
        assert_eq!(s.policy.sampling_interval_s, 120.0);
        assert_eq!(s.policy.policy, SelectionPolicy::FullStatic);
        assert!(s
            .apply(&Overrides {
                bid_fraction: Some(1.5),
                ..Default::default()
            })
            .is_err());
    }

    #[test]
    fn named_mixes() {
        let zoo = Zoo::bundled(BundledZoo::Imagenet);
        let src = ZooSource::Bundled {
            bundled: BundledZoo::Imagenet,
        };
        let strict = named_mix(&src, &zoo, Workload::Strict);
        assert_eq!(strict.iter().map(|e| e.accuracy).collect::<Vec<_>>(), vec![0.82, 0.803, 0.79]);
        let relaxed = named_mix(&src, &zoo, Workload::Relaxed);
        assert_eq!(relaxed.iter().map(|e| e.accuracy).collect::<Vec<_>>(), vec![0.79, 0.75, 0.744]);
    }
}
