//! Ensemble construction and interval-driven model scaling.
//!
//! A constraint's ensemble starts from the models that fit its latency budget.
//! The dynamic policy grows it greedily until the independent-error majority
//! estimate reaches the accuracy target, then at every sampling interval
//! prunes members when the votes are more lopsided than a majority needs, or
//! adds back the most accurate unused model when interval accuracy slips.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::{estimate_ensemble_accuracy, majority_threshold};
use crate::zoo::{ModelId, Zoo};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    #[default]
    AccuracyFirst,
    LatencyFirst,
}

/// A `<latency, accuracy>` requirement attached to a query.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Constraint {
    /// Raw model-execution budget, excluding network overhead.
    pub latency_target_ms: f64,
    pub accuracy_target: f64,
    #[serde(default)]
    pub primary_objective: Objective,
}

impl Constraint {
    pub fn new(latency_target_ms: f64, accuracy_target: f64) -> Self {
        Self {
            latency_target_ms,
            accuracy_target,
            primary_objective: Objective::AccuracyFirst,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.latency_target_ms > 0.0 && self.latency_target_ms.is_finite()) {
            return Err(Error::config(
                "constraint.latency_ms",
                format!("{} is not positive", self.latency_target_ms),
            ));
        }
        if !(self.accuracy_target > 0.0 && self.accuracy_target < 1.0) {
            return Err(Error::config(
                "constraint.accuracy",
                format!("{} outside (0,1)", self.accuracy_target),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionPolicy {
    /// One model per constraint, never changed.
    SingleBest,
    /// Every latency-feasible model, never changed.
    FullStatic,
    /// Starts from the full set and drops one model per qualifying interval.
    DropOne,
    /// Greedy construction plus mode-driven pruning and one-at-a-time growth.
    #[default]
    Dynamic,
}

impl SelectionPolicy {
    pub const ALL: [SelectionPolicy; 4] = [
        SelectionPolicy::SingleBest,
        SelectionPolicy::FullStatic,
        SelectionPolicy::DropOne,
        SelectionPolicy::Dynamic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SelectionPolicy::SingleBest => "single-best",
            SelectionPolicy::FullStatic => "full-static",
            SelectionPolicy::DropOne => "drop-one",
            SelectionPolicy::Dynamic => "dynamic",
        }
    }
}

impl std::str::FromStr for SelectionPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::config("policy", format!("unknown policy `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionPolicyConfig {
    pub acc_margin: f64,
    pub lat_margin_ms: f64,
    pub sampling_interval_s: f64,
    pub policy: SelectionPolicy,
}

impl Default for SelectionPolicyConfig {
    fn default() -> Self {
        Self {
            acc_margin: 0.002,
            lat_margin_ms: 5.0,
            sampling_interval_s: 30.0,
            policy: SelectionPolicy::Dynamic,
        }
    }
}

impl SelectionPolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.acc_margin >= 0.0) {
            return Err(Error::config("policy.acc_margin", "must be non-negative"));
        }
        if !(self.lat_margin_ms >= 0.0) {
            return Err(Error::config("policy.lat_margin_ms", "must be non-negative"));
        }
        if !(self.sampling_interval_s > 0.0 && self.sampling_interval_s.is_finite()) {
            return Err(Error::config("policy.sampling_interval_s", "must be positive"));
        }
        Ok(())
    }
}

/// Latency-accuracy and cost metrics of a member set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ObjectiveMetrics {
    pub mu_al: f64,
    /// Hourly cost of one fully packed slot per member, scaled by `k`.
    pub mu_c: f64,
    pub k: f64,
}

pub fn objective_metrics(
    zoo: &Zoo,
    constraint: &Constraint,
    members: &[ModelId],
    inst_cost: f64,
    k: f64,
) -> ObjectiveMetrics {
    let mu_c = k * members
        .iter()
        .map(|&m| inst_cost / f64::from(zoo.get(m).base_packing_factor))
        .sum::<f64>();
    ObjectiveMetrics {
        mu_al: constraint.accuracy_target / constraint.latency_target_ms,
        mu_c,
        k,
    }
}

/// Models strictly faster than the latency budget by at least the latency
/// margin: the ensemble candidates for a constraint.
pub fn full_ensemble(zoo: &Zoo, constraint: &Constraint, lat_margin_ms: f64) -> Result<Vec<ModelId>> {
    let bound = constraint.latency_target_ms - lat_margin_ms;
    let set: Vec<ModelId> = zoo
        .models()
        .iter()
        .filter(|m| m.service_latency_ms <= bound)
        .map(|m| m.id)
        .collect();
    if set.is_empty() {
        Err(Error::SelectionInfeasible {
            latency_ms: constraint.latency_target_ms,
        })
    } else {
        Ok(set)
    }
}

/// Models that may serve the constraint on their own: latency within target plus margin.
pub fn latency_admissible(zoo: &Zoo, constraint: &Constraint, lat_margin_ms: f64) -> Vec<ModelId> {
    let bound = constraint.latency_target_ms + lat_margin_ms;
    zoo.models()
        .iter()
        .filter(|m| m.service_latency_ms <= bound)
        .map(|m| m.id)
        .collect()
}

/// Per-interval voting statistics of one ensemble.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct IntervalStats {
    pub total: u32,
    pub correct: u32,
    /// `max_vote_hist[k]` = queries whose most-voted class got `k` votes.
    pub max_vote_hist: Vec<u32>,
    /// Per model: (predictions, correct predictions).
    pub per_model: BTreeMap<ModelId, (u32, u32)>,
}

impl IntervalStats {
    pub fn record(&mut self, correct: bool, max_vote: usize, votes: &[(ModelId, usize)], true_class: usize) {
        self.total += 1;
        self.correct += u32::from(correct);
        if self.max_vote_hist.len() <= max_vote {
            self.max_vote_hist.resize(max_vote + 1, 0);
        }
        self.max_vote_hist[max_vote] += 1;
        for &(model, class) in votes {
            let e = self.per_model.entry(model).or_default();
            e.0 += 1;
            e.1 += u32::from(class == true_class);
        }
    }

    pub fn accuracy(&self) -> Option<f64> {
        (self.total > 0).then(|| f64::from(self.correct) / f64::from(self.total))
    }

    /// Most frequent max-vote count; the smaller count wins a frequency tie.
    pub fn mode_max_vote(&self) -> Option<usize> {
        let mut best: Option<(usize, u32)> = None;
        for (k, &n) in self.max_vote_hist.iter().enumerate() {
            if n > 0 && best.is_none_or(|(_, bn)| n > bn) {
                best = Some((k, n));
            }
        }
        best.map(|(k, _)| k)
    }

    fn model_accuracy(&self, model: ModelId) -> Option<f64> {
        self.per_model
            .get(&model)
            .filter(|(n, _)| *n > 0)
            .map(|&(n, c)| f64::from(c) / f64::from(n))
    }
}

/// Live ensemble for one constraint.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EnsembleState {
    pub constraint: Constraint,
    pub policy: SelectionPolicy,
    pub members: Vec<ModelId>,
    /// Unused candidates available for growth.
    pub dropped: Vec<ModelId>,
    /// The construction could not reach the accuracy target.
    pub best_effort: bool,
    pub interval: IntervalStats,
}

impl EnsembleState {
    pub fn size(&self) -> usize {
        self.members.len()
    }
}

fn cheapest(zoo: &Zoo, ids: &[ModelId]) -> Option<ModelId> {
    ids.iter().copied().min_by(|&a, &b| {
        let (ma, mb) = (zoo.get(a), zoo.get(b));
        mb.base_packing_factor
            .cmp(&ma.base_packing_factor)
            .then(ma.service_latency_ms.total_cmp(&mb.service_latency_ms))
            .then(mb.top1_accuracy.total_cmp(&ma.top1_accuracy))
            .then(a.cmp(&b))
    })
}

fn most_accurate(zoo: &Zoo, ids: &[ModelId]) -> Option<ModelId> {
    ids.iter().copied().min_by(|&a, &b| {
        let (ma, mb) = (zoo.get(a), zoo.get(b));
        mb.top1_accuracy
            .total_cmp(&ma.top1_accuracy)
            .then(ma.service_latency_ms.total_cmp(&mb.service_latency_ms))
            .then(a.cmp(&b))
    })
}

fn max_latency(zoo: &Zoo, ids: &[ModelId]) -> f64 {
    ids.iter()
        .map(|&m| zoo.get(m).service_latency_ms)
        .fold(0.0, f64::max)
}

/// Add candidates in greedy order until the majority estimate reaches `goal`.
/// Returns the members and whether the goal was reached.
fn greedy_ensemble(zoo: &Zoo, candidates: &[ModelId], goal: f64, objective: Objective) -> (Vec<ModelId>, bool) {
    let mut order = candidates.to_vec();
    order.sort_by(|&a, &b| {
        let (ma, mb) = (zoo.get(a), zoo.get(b));
        let primary = match objective {
            Objective::AccuracyFirst => mb.top1_accuracy.total_cmp(&ma.top1_accuracy),
            Objective::LatencyFirst => ma.service_latency_ms.total_cmp(&mb.service_latency_ms),
        };
        primary
            .then(mb.top1_accuracy.total_cmp(&ma.top1_accuracy))
            .then(a.cmp(&b))
    });
    let mut members = Vec::new();
    let mut accuracies = Vec::new();
    for m in order {
        members.push(m);
        accuracies.push(zoo.get(m).top1_accuracy);
        let estimate = estimate_ensemble_accuracy(&accuracies).expect("zoo accuracies are in (0,1)");
        if estimate >= goal {
            return (members, true);
        }
    }
    (members, false)
}

/// Pick the starting members for a constraint under `policy`.
pub fn construct_initial_ensemble(
    zoo: &Zoo,
    constraint: &Constraint,
    config: &SelectionPolicyConfig,
) -> Result<EnsembleState> {
    let goal = constraint.accuracy_target - config.acc_margin;
    let singles = latency_admissible(zoo, constraint, config.lat_margin_ms);
    let candidates = full_ensemble(zoo, constraint, config.lat_margin_ms).unwrap_or_default();
    if singles.is_empty() {
        return Err(Error::SelectionInfeasible {
            latency_ms: constraint.latency_target_ms,
        });
    }
    let qualifying: Vec<ModelId> = singles
        .iter()
        .copied()
        .filter(|&m| zoo.get(m).top1_accuracy >= goal)
        .collect();

    let best_single = || match cheapest(zoo, &qualifying) {
        Some(m) => (vec![m], false),
        None => (vec![most_accurate(zoo, &singles).expect("singles nonempty")], true),
    };

    let (members, best_effort) = match config.policy {
        SelectionPolicy::SingleBest => best_single(),
        SelectionPolicy::FullStatic | SelectionPolicy::DropOne => {
            if candidates.is_empty() {
                best_single()
            } else {
                let reaches = estimate_ensemble_accuracy(
                    &candidates.iter().map(|&m| zoo.get(m).top1_accuracy).collect::<Vec<_>>(),
                )
                .expect("zoo accuracies are in (0,1)")
                    >= goal;
                (candidates.clone(), !reaches)
            }
        }
        SelectionPolicy::Dynamic => {
            let (ensemble, reached) = if candidates.is_empty() {
                (Vec::new(), false)
            } else {
                greedy_ensemble(zoo, &candidates, goal, constraint.primary_objective)
            };
            // a single model wins when it meets the target and the ensemble
            // is either short of it or no faster
            match cheapest(zoo, &qualifying) {
                Some(single)
                    if !reached
                        || zoo.get(single).service_latency_ms <= max_latency(zoo, &ensemble) =>
                {
                    (vec![single], false)
                }
                _ if ensemble.is_empty() => best_single(),
                _ => (ensemble, !reached),
            }
        }
    };

    let dropped = match config.policy {
        SelectionPolicy::Dynamic | SelectionPolicy::DropOne => candidates
            .iter()
            .copied()
            .filter(|m| !members.contains(m))
            .collect(),
        SelectionPolicy::SingleBest | SelectionPolicy::FullStatic => Vec::new(),
    };

    Ok(EnsembleState {
        constraint: *constraint,
        policy: config.policy,
        members,
        dropped,
        best_effort,
        interval: IntervalStats::default(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScalingTrigger {
    Downscale,
    Upscale,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScalingDecision {
    pub old_size: usize,
    pub new_size: usize,
    pub trigger: ScalingTrigger,
    pub dropped: Vec<ModelId>,
    pub added: Vec<ModelId>,
}

/// Close a sampling interval: resize the ensemble per its policy and reset
/// the interval statistics. Returns the change, if any.
pub fn dynamic_model_scaling(
    state: &mut EnsembleState,
    zoo: &Zoo,
    config: &SelectionPolicyConfig,
) -> Option<ScalingDecision> {
    let interval = std::mem::take(&mut state.interval);
    if matches!(state.policy, SelectionPolicy::SingleBest | SelectionPolicy::FullStatic) {
        return None;
    }
    let accuracy = interval.accuracy()?;
    let old_size = state.members.len();
    let threshold = state.constraint.accuracy_target + config.acc_margin;

    if accuracy >= threshold {
        let mode = interval.mode_max_vote()?;
        let need = majority_threshold(old_size);
        if mode <= need {
            return None;
        }
        let excess = match state.policy {
            SelectionPolicy::DropOne => 1,
            _ => mode - need,
        };
        let count = excess.min(old_size.saturating_sub(1));
        if count == 0 {
            return None;
        }
        let mut ranked = state.members.clone();
        ranked.sort_by(|&a, &b| {
            let acc = |m: ModelId| interval.model_accuracy(m).unwrap_or(zoo.get(m).top1_accuracy);
            acc(a)
                .total_cmp(&acc(b))
                .then(zoo.get(a).base_packing_factor.cmp(&zoo.get(b).base_packing_factor))
                .then(b.cmp(&a))
        });
        let drop: Vec<ModelId> = ranked.into_iter().take(count).collect();
        state.members.retain(|m| !drop.contains(m));
        state.dropped.extend(drop.iter().copied());
        Some(ScalingDecision {
            old_size,
            new_size: state.members.len(),
            trigger: ScalingTrigger::Downscale,
            dropped: drop,
            added: Vec::new(),
        })
    } else {
        let add = most_accurate(zoo, &state.dropped)?;
        state.dropped.retain(|&m| m != add);
        state.members.push(add);
        Some(ScalingDecision {
            old_size,
            new_size: state.members.len(),
            trigger: ScalingTrigger::Upscale,
            dropped: Vec::new(),
            added: vec![add],
        })
    }
}

/// Cache key: constraint quantized to the selection margins.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct ConstraintKey {
    pub latency_bucket: i64,
    pub accuracy_bucket: i64,
}

impl ConstraintKey {
    pub fn quantize(constraint: &Constraint, latency_step_ms: f64, accuracy_step: f64) -> Self {
        let bucket = |v: f64, step: f64| if step > 0.0 { (v / step).round() as i64 } else { (v * 1e9).round() as i64 };
        Self {
            latency_bucket: bucket(constraint.latency_target_ms, latency_step_ms),
            accuracy_bucket: bucket(constraint.accuracy_target, accuracy_step),
        }
    }
}

impl std::fmt::Display for ConstraintKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "L{}-A{}", self.latency_bucket, self.accuracy_bucket)
    }
}

/// Constraint-keyed store of live ensembles; queries under one key share state.
#[derive(Clone, Debug)]
pub struct ModelCache {
    latency_step_ms: f64,
    accuracy_step: f64,
    entries: BTreeMap<ConstraintKey, EnsembleState>,
}

impl ModelCache {
    pub fn new(latency_step_ms: f64, accuracy_step: f64) -> Self {
        Self {
            latency_step_ms,
            accuracy_step,
            entries: BTreeMap::new(),
        }
    }

    pub fn for_policy(config: &SelectionPolicyConfig) -> Self {
        let defaults = SelectionPolicyConfig::default();
        let pick = |v: f64, d: f64| if v > 0.0 { v } else { d };
        Self::new(
            pick(config.lat_margin_ms, defaults.lat_margin_ms),
            pick(config.acc_margin, defaults.acc_margin),
        )
    }

    pub fn key(&self, constraint: &Constraint) -> ConstraintKey {
        ConstraintKey::quantize(constraint, self.latency_step_ms, self.accuracy_step)
    }

    pub fn lookup(&self, constraint: &Constraint) -> Option<&EnsembleState> {
        self.entries.get(&self.key(constraint))
    }

    pub fn lookup_mut(&mut self, constraint: &Constraint) -> Option<&mut EnsembleState> {
        let key = self.key(constraint);
        self.entries.get_mut(&key)
    }

    pub fn store(&mut self, state: EnsembleState) -> ConstraintKey {
        let key = self.key(&state.constraint);
        self.entries.insert(key, state);
        key
    }

    pub fn get(&self, key: &ConstraintKey) -> Option<&EnsembleState> {
        self.entries.get(key)
    }

    pub fn get_mut(&mut self, key: &ConstraintKey) -> Option<&mut EnsembleState> {
        self.entries.get_mut(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ConstraintKey, &EnsembleState)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&ConstraintKey, &mut EnsembleState)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo::BundledZoo;

    fn zoo() -> Zoo {
        Zoo::bundled(BundledZoo::Imagenet)
    }

    fn id(zoo: &Zoo, key: &str) -> ModelId {
        zoo.by_key(key).unwrap().id
    }

    fn cfg(policy: SelectionPolicy) -> SelectionPolicyConfig {
        SelectionPolicyConfig {
            policy,
            ..Default::default()
        }
    }

    #[test]
    fn full_ensemble_sizes_match_baseline_comparison() {
        let zoo = zoo();
        // (baseline latency, expected ensemble size, expected slowest member)
        let cases = [
            (311.0, 10, 152.21),
            (152.0, 8, 119.2),
            (120.0, 7, 102.35),
            (100.0, 5, 89.5),
            (78.0, 2, 43.45),
        ];
        for (lat, n, slowest) in cases {
            let set = full_ensemble(&zoo, &Constraint::new(lat, 0.8), 5.0).unwrap();
            assert_eq!(set.len(), n, "latency {lat}");
            assert_eq!(max_latency(&zoo, &set), slowest, "latency {lat}");
        }
        assert!(!full_ensemble(&zoo, &Constraint::new(311.0, 0.8), 5.0)
            .unwrap()
            .contains(&id(&zoo, "naslarge")));
    }

    #[test]
    fn full_ensemble_infeasible_below_every_model() {
        assert!(matches!(
            full_ensemble(&zoo(), &Constraint::new(10.0, 0.7), 5.0),
            Err(Error::SelectionInfeasible { .. })
        ));
        assert!(construct_initial_ensemble(&zoo(), &Constraint::new(10.0, 0.7), &cfg(SelectionPolicy::Dynamic)).is_err());
    }

    #[test]
    fn single_best_meets_exact_target() {
        let zoo = zoo();
        let s = construct_initial_ensemble(&zoo, &Constraint::new(152.0, 0.803), &cfg(SelectionPolicy::SingleBest)).unwrap();
        assert_eq!(s.members, vec![id(&zoo, "irv2")]);
        assert!(!s.best_effort);
    }

    #[test]
    fn greedy_ensemble_reaches_estimate() {
        let zoo = zoo();
        // no single model under 105 ms reaches 0.788
        let c = Constraint::new(100.0, 0.79);
        let s = construct_initial_ensemble(&zoo, &c, &cfg(SelectionPolicy::Dynamic)).unwrap();
        assert!(s.members.len() > 1);
        assert!(!s.best_effort);
        let acc: Vec<f64> = s.members.iter().map(|&m| zoo.get(m).top1_accuracy).collect();
        assert!(estimate_ensemble_accuracy(&acc).unwrap() >= 0.788);
        // one fewer member would not have reached it
        assert!(estimate_ensemble_accuracy(&acc[..acc.len() - 1]).unwrap() < 0.788);
        assert!(s.members.iter().all(|&m| zoo.get(m).service_latency_ms <= 105.0));
        for m in &s.dropped {
            assert!(!s.members.contains(m));
        }
    }

    #[test]
    fn low_target_picks_cheapest_single_model() {
        let zoo = zoo();
        for policy in [SelectionPolicy::Dynamic, SelectionPolicy::SingleBest] {
            let s = construct_initial_ensemble(&zoo, &Constraint::new(311.0, 0.5), &cfg(policy)).unwrap();
            assert_eq!(s.members.len(), 1);
            assert_eq!(zoo.get(s.members[0]).base_packing_factor, 10);
        }
    }

    #[test]
    fn dynamic_prefers_ensemble_when_faster_than_single() {
        let zoo = zoo();
        let s = construct_initial_ensemble(&zoo, &Constraint::new(311.0, 0.82), &cfg(SelectionPolicy::Dynamic)).unwrap();
        assert!(s.members.len() >= 3);
        assert!(!s.members.contains(&id(&zoo, "naslarge")));
    }

    #[test]
    fn static_policies_use_full_set() {
        let zoo = zoo();
        let c = Constraint::new(311.0, 0.82);
        let s = construct_initial_ensemble(&zoo, &c, &cfg(SelectionPolicy::FullStatic)).unwrap();
        assert_eq!(s.members.len(), 10);
        assert!(s.dropped.is_empty());
        let d = construct_initial_ensemble(&zoo, &c, &cfg(SelectionPolicy::DropOne)).unwrap();
        assert_eq!(d.members.len(), 10);
    }

    fn state_with(zoo: &Zoo, n: usize, policy: SelectionPolicy) -> EnsembleState {
        let mut s = construct_initial_ensemble(zoo, &Constraint::new(311.0, 0.80), &cfg(SelectionPolicy::FullStatic)).unwrap();
        s.policy = policy;
        s.dropped = s.members.split_off(n);
        s
    }

    fn feed(s: &mut EnsembleState, queries: u32, correct: u32, max_vote: usize) {
        for q in 0..queries {
            let votes: Vec<(ModelId, usize)> = s.members.iter().map(|&m| (m, 0)).collect();
            s.interval.record(q < correct, max_vote, &votes, 0);
        }
    }

    #[test]
    fn mode_above_majority_drops_excess() {
        let zoo = zoo();
        let mut s = state_with(&zoo, 10, SelectionPolicy::Dynamic);
        feed(&mut s, 100, 95, 8);
        let d = dynamic_model_scaling(&mut s, &zoo, &SelectionPolicyConfig::default()).unwrap();
        assert_eq!((d.old_size, d.new_size), (10, 8));
        assert_eq!(d.trigger, ScalingTrigger::Downscale);
        assert_eq!(s.dropped.len(), 2);
        assert_eq!(s.interval, IntervalStats::default());
    }

    #[test]
    fn low_accuracy_adds_most_accurate_unused_model() {
        let zoo = zoo();
        let mut s = state_with(&zoo, 4, SelectionPolicy::Dynamic);
        let best_unused = most_accurate(&zoo, &s.dropped).unwrap();
        feed(&mut s, 100, 50, 4);
        let d = dynamic_model_scaling(&mut s, &zoo, &SelectionPolicyConfig::default()).unwrap();
        assert_eq!(d.new_size, 5);
        assert_eq!(d.added, vec![best_unused]);

        s.dropped.clear();
        feed(&mut s, 10, 1, 2);
        assert!(dynamic_model_scaling(&mut s, &zoo, &SelectionPolicyConfig::default()).is_none());
    }

    #[test]
    fn drop_one_removes_a_single_model() {
        let zoo = zoo();
        let mut s = state_with(&zoo, 10, SelectionPolicy::DropOne);
        feed(&mut s, 100, 95, 9);
        let d = dynamic_model_scaling(&mut s, &zoo, &SelectionPolicyConfig::default()).unwrap();
        assert_eq!(d.new_size, 9);
    }

    #[test]
    fn static_policies_never_change() {
        let zoo = zoo();
        for policy in [SelectionPolicy::FullStatic, SelectionPolicy::SingleBest] {
            let mut s = state_with(&zoo, 5, policy);
            feed(&mut s, 100, 95, 5);
            assert!(dynamic_model_scaling(&mut s, &zoo, &SelectionPolicyConfig::default()).is_none());
            feed(&mut s, 100, 5, 5);
            assert!(dynamic_model_scaling(&mut s, &zoo, &SelectionPolicyConfig::default()).is_none());
            assert_eq!(s.members.len(), 5);
        }
    }

    #[test]
    fn drop_prefers_worst_interval_model_then_low_packing_factor() {
        let zoo = zoo();
        let mut s = state_with(&zoo, 3, SelectionPolicy::Dynamic);
        let members = s.members.clone();
        for q in 0..10u32 {
            let votes: Vec<(ModelId, usize)> = members
                .iter()
                .enumerate()
                .map(|(i, &m)| (m, if i == 1 && q < 5 { 1 } else { 0 }))
                .collect();
            s.interval.record(true, 3, &votes, 0);
        }
        let d = dynamic_model_scaling(&mut s, &zoo, &SelectionPolicyConfig::default()).unwrap();
        assert_eq!(d.dropped, vec![members[1]]);

        // equal interval accuracy: lowest packing factor goes first
        let mut s = state_with(&zoo, 3, SelectionPolicy::Dynamic);
        feed(&mut s, 10, 10, 3);
        let lowest_pf = s
            .members
            .iter()
            .copied()
            .min_by_key(|&m| (zoo.get(m).base_packing_factor, std::cmp::Reverse(m)))
            .unwrap();
        let d = dynamic_model_scaling(&mut s, &zoo, &SelectionPolicyConfig::default()).unwrap();
        assert_eq!(d.dropped, vec![lowest_pf]);
    }

    #[test]
    fn never_shrinks_below_one() {
        let zoo = zoo();
        let mut s = state_with(&zoo, 1, SelectionPolicy::Dynamic);
        feed(&mut s, 10, 10, 5);
        assert!(dynamic_model_scaling(&mut s, &zoo, &SelectionPolicyConfig::default()).is_none());
        assert_eq!(s.members.len(), 1);
    }

    #[test]
    fn mode_prefers_smaller_count_on_tie() {
        let mut i = IntervalStats::default();
        i.record(true, 3, &[], 0);
        i.record(true, 5, &[], 0);
        assert_eq!(i.mode_max_vote(), Some(3));
        assert_eq!(IntervalStats::default().mode_max_vote(), None);
    }

    #[test]
    fn cache_quantizes_to_margins() {
        let zoo = zoo();
        let config = SelectionPolicyConfig::default();
        let mut cache = ModelCache::for_policy(&config);
        assert!(cache.lookup(&Constraint::new(400.0, 0.81)).is_none());
        let state = construct_initial_ensemble(&zoo, &Constraint::new(150.0, 0.78), &config).unwrap();
        let members = state.members.clone();
        cache.store(state);
        assert_eq!(cache.lookup(&Constraint::new(151.0, 0.7795)).unwrap().members, members);
        assert!(cache.lookup(&Constraint::new(160.0, 0.78)).is_none());
        assert_eq!(cache.key(&Constraint::new(150.0, 0.78)), cache.key(&Constraint::new(151.0, 0.7795)));
        assert_ne!(cache.key(&Constraint::new(150.0, 0.78)), cache.key(&Constraint::new(160.0, 0.78)));
    }

    #[test]
    fn objective_metrics_follow_packing_factors() {
        let zoo = zoo();
        let members = [id(&zoo, "mnet"), id(&zoo, "irv2")];
        let m = objective_metrics(&zoo, &Constraint::new(100.0, 0.8), &members, 0.154, 1.0);
        assert!((m.mu_al - 0.008).abs() < 1e-15);
        assert!((m.mu_c - (0.0154 + 0.154)).abs() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn scaling_keeps_latency_bound_and_partition(
                lat in 45.0f64..320.0,
                acc in 0.70f64..0.85,
                rounds in proptest::collection::vec((0u32..=100, 1usize..=10), 1..30),
            ) {
                let zoo = zoo();
                let c = Constraint::new(lat, acc);
                let config = SelectionPolicyConfig::default();
                let Ok(mut s) = construct_initial_ensemble(&zoo, &c, &config) else { return Ok(()); };
                let mut universe: Vec<ModelId> = s.members.iter().chain(&s.dropped).copied().collect();
                universe.sort();
                for (correct, max_vote) in rounds {
                    let cap = s.members.len();
                    feed(&mut s, 100, correct, max_vote.min(cap));
                    dynamic_model_scaling(&mut s, &zoo, &config);
                    prop_assert!(!s.members.is_empty());
                    for &m in &s.members {
                        prop_assert!(zoo.get(m).service_latency_ms <= lat + 5.0);
                        prop_assert!(!s.dropped.contains(&m));
                    }
                    let mut now: Vec<ModelId> = s.members.iter().chain(&s.dropped).copied().collect();
                    now.sort();
                    prop_assert_eq!(&now, &universe);
                }
            }
        }
    }
}
