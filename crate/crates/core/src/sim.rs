//! The discrete-event engine.
//!
//! Events are processed in `(time, ordinal)` order. A query fans out one
//! sub-request per ensemble member; each occupies one slot of an instance in
//! the member's pool for the model's service latency. When every surviving
//! sub-request has answered, the votes are combined and the query completes.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::market::{billing_accrue, preemption_check, CheckTarget, PreemptionCause, PriceTrace, PricingMode};
use crate::metrics::{
    constraint_label, CostLine, MetricsCollector, MetricsReport, PredictorSummary, ScalingAction, SelectorAction,
    SummaryInputs, VmSummary,
};
use crate::predictor::{rmse, LoadPredictor, PredictorKind};
use crate::resources::{
    dispatch, importance_weights, procure, reactive_check, recycle_idle, weighted_autoscale, Instance, InstanceState,
    InstanceType, LaunchOrder, PoolState, SubRequest,
};
use crate::rng::{derive_seed, KeyedRng};
use crate::scenario::{Scenario, VotingMode};
use crate::selector::{
    construct_initial_ensemble, dynamic_model_scaling, ConstraintKey, ModelCache, ScalingTrigger, SelectionPolicy,
    SelectionPolicyConfig,
};
use crate::voting::{weighted_vote, UniformWeights, WeightMatrix};
use crate::workload::{generate_trace, Trace};
use crate::zoo::{ModelId, PredictionOracle, Zoo};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum EventKind {
    QueryArrival(usize),
    SubRequestComplete { instance: u64, query: usize, model: ModelId },
    EnsembleComplete(usize),
    ScalingTick,
    SamplingTick,
    ReactiveTick,
    ObserveTick,
    FailureCheck,
    VmReady(u64),
    VmPreempted { instance: u64, price: bool },
    IdleCheck,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct SimEvent {
    pub time_s: f64,
    pub ordinal: u64,
    pub kind: EventKind,
}

impl PartialEq for SimEvent {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for SimEvent {}

impl PartialOrd for SimEvent {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for SimEvent {
    // reversed so the max-heap pops the earliest event
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time_s
            .total_cmp(&self.time_s)
            .then(other.ordinal.cmp(&self.ordinal))
    }
}

#[derive(Clone, Debug, Default)]
struct QueryRun {
    ensemble_size: usize,
    pending: usize,
    votes: Vec<(ModelId, usize)>,
    done: bool,
}

const NETWORK_STREAM: u64 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum LaunchReason {
    Predictive,
    Reactive,
    Replacement,
}

impl LaunchReason {
    fn name(self) -> &'static str {
        match self {
            LaunchReason::Predictive => "predictive",
            LaunchReason::Reactive => "reactive",
            LaunchReason::Replacement => "replacement",
        }
    }
}

/// Optional observer for tests: sees every processed event and the pool state.
pub trait Probe {
    fn on_event(&mut self, _event: &SimEvent, _view: &SimView<'_>) {}
}

impl Probe for () {}

/// Read-only view handed to a [`Probe`].
pub struct SimView<'a> {
    pub instances: &'a [Instance],
    pub in_flight: &'a [Vec<SubRequest>],
    pub now: f64,
}

struct Engine<'a> {
    scenario: &'a Scenario,
    zoo: &'a Zoo,
    oracle: &'a PredictionOracle,
    trace: &'a Trace,
    catalog: Vec<InstanceType>,
    prices: PriceTrace,
    selection: SelectionPolicyConfig,

    now: f64,
    ordinal: u64,
    heap: BinaryHeap<SimEvent>,

    cache: ModelCache,
    class_keys: Vec<ConstraintKey>,
    weights: WeightMatrix,
    runs: Vec<QueryRun>,
    finished: usize,
    arrived: usize,

    instances: Vec<Instance>,
    in_flight: Vec<Vec<SubRequest>>,
    end_reason: Vec<&'static str>,
    pools: Vec<PoolState>,

    predictor: LoadPredictor,
    forecasts: Vec<(f64, f64)>,
    window_arrivals: u64,
    completions: VecDeque<(f64, bool)>,

    network: KeyedRng,
    launch_rng: ChaCha8Rng,
    failure_rng: ChaCha8Rng,

    metrics: MetricsCollector,
    vms: VmSummary,
}

impl<'a> Engine<'a> {
    fn push(&mut self, time_s: f64, kind: EventKind) {
        self.ordinal += 1;
        self.heap.push(SimEvent {
            time_s,
            ordinal: self.ordinal,
            kind,
        });
    }

    fn duration(&self) -> f64 {
        self.trace.duration_s
    }

    fn price_of(&self, type_index: usize, t: f64) -> f64 {
        let ty = &self.catalog[type_index];
        match self.scenario.market.pricing_mode {
            PricingMode::OnDemand => ty.od_price_per_hour,
            PricingMode::Spot => self.prices.spot_price(&ty.name, t).unwrap_or(ty.od_price_per_hour),
        }
    }

    fn pool_key(&self, model: ModelId) -> String {
        self.zoo.get(model).key.clone()
    }

    fn launch(&mut self, order: &LaunchOrder, mode: PricingMode, reason: LaunchReason, immediate: bool) {
        let model = self.zoo.get(order.pool);
        let ty = &self.catalog[order.type_index];
        let slots = ty.packing_factor(model).expect("procure only picks eligible types");
        let (lo, hi) = self.scenario.latency_model.launch_delay_s;
        for _ in 0..order.count {
            let id = self.instances.len() as u64;
            let delay = if immediate {
                0.0
            } else if hi > lo {
                self.launch_rng.gen_range(lo..hi)
            } else {
                lo
            };
            let ready_at = self.now + delay;
            self.instances.push(Instance {
                instance_id: id,
                type_index: order.type_index,
                pricing_mode: mode,
                pool: order.pool,
                state: if immediate { InstanceState::Running } else { InstanceState::Launching },
                slots_total: slots,
                slots_busy: 0,
                launched_at: self.now,
                ready_at,
                terminated_at: None,
                idle_since: immediate.then_some(self.now),
                accumulated_cost: 0.0,
            });
            self.in_flight.push(Vec::new());
            self.end_reason.push("end");
            self.pools[order.pool.index()].instances.push(id);
            if !immediate {
                self.push(ready_at, EventKind::VmReady(id));
            }
        }
        self.vms.launched += u64::from(order.count);
        *self.vms.launched_by_reason.entry(reason.name()).or_default() += u64::from(order.count);
        *self.vms.launched_by_pool.entry(self.pool_key(order.pool)).or_default() += u64::from(order.count);
        let running = self.instances.iter().filter(|i| i.is_running()).count();
        self.vms.peak_running = self.vms.peak_running.max(running);
        self.metrics.scaling_actions.push(ScalingAction {
            t: self.now,
            pool: self.pool_key(order.pool),
            action: "launch",
            type_name: self.catalog[order.type_index].name.clone(),
            count: order.count,
            reason: reason.name(),
        });
    }

    fn procure_and_launch(&mut self, model: ModelId, demand: f64, reason: LaunchReason, immediate: bool) -> Result<()> {
        let now = self.now;
        let plan = procure(demand, &self.catalog, self.zoo.get(model), |i, _| self.price_of(i, now))?;
        let mode = self.scenario.market.pricing_mode;
        for (type_index, count) in plan {
            self.launch(
                &LaunchOrder {
                    pool: model,
                    type_index,
                    count,
                    demand,
                },
                mode,
                reason,
                immediate,
            );
        }
        Ok(())
    }

    fn alive_in_pool(&self, model: ModelId) -> usize {
        self.pools[model.index()]
            .instances
            .iter()
            .filter(|&&id| self.instances[id as usize].is_alive())
            .count()
    }

    fn launching_slots(&self, model: ModelId) -> usize {
        self.pools[model.index()]
            .instances
            .iter()
            .map(|&id| &self.instances[id as usize])
            .filter(|i| i.state == InstanceState::Launching)
            .map(|i| i.slots_total as usize)
            .sum()
    }

    /// Models referenced by any live ensemble.
    fn active_models(&self) -> Vec<ModelId> {
        let mut out: Vec<ModelId> = self.cache.iter().flat_map(|(_, s)| s.members.iter().copied()).collect();
        out.sort();
        out.dedup();
        out
    }

    fn start(&mut self, id: u64, sub: SubRequest) {
        let inst = &mut self.instances[id as usize];
        debug_assert!(inst.is_running() && inst.free_slots() > 0);
        inst.slots_busy += 1;
        inst.idle_since = None;
        self.in_flight[id as usize].push(sub);
        let latency = self.zoo.get(sub.model).service_latency_ms / 1000.0;
        self.push(
            self.now + latency,
            EventKind::SubRequestComplete {
                instance: id,
                query: sub.query_index,
                model: sub.model,
            },
        );
    }

    fn pick_instance(&self, model: ModelId) -> Option<u64> {
        dispatch(
            self.pools[model.index()]
                .instances
                .iter()
                .map(|&id| &self.instances[id as usize]),
        )
    }

    fn submit(&mut self, sub: SubRequest) -> Result<()> {
        if self.alive_in_pool(sub.model) == 0 {
            self.procure_and_launch(sub.model, 1.0, LaunchReason::Replacement, false)?;
        }
        if self.pools[sub.model.index()].queue.is_empty() {
            if let Some(id) = self.pick_instance(sub.model) {
                self.start(id, sub);
                return Ok(());
            }
        }
        self.pools[sub.model.index()].queue.push_back(sub);
        Ok(())
    }

    fn drain(&mut self, model: ModelId) {
        while !self.pools[model.index()].queue.is_empty() {
            let Some(id) = self.pick_instance(model) else { break };
            let sub = self.pools[model.index()].queue.pop_front().unwrap();
            self.start(id, sub);
        }
    }

    fn on_arrival(&mut self, i: usize) -> Result<()> {
        if i + 1 < self.trace.queries.len() {
            self.push(self.trace.queries[i + 1].arrival_time_s, EventKind::QueryArrival(i + 1));
        }
        self.arrived += 1;
        self.window_arrivals += 1;
        let q = self.trace.queries[i];
        let key = self.class_keys[q.constraint_class];
        let members = match self.cache.get(&key) {
            Some(state) => state.members.clone(),
            None => Vec::new(),
        };
        self.runs[i] = QueryRun {
            ensemble_size: members.len(),
            pending: members.len(),
            votes: Vec::with_capacity(members.len()),
            done: false,
        };
        if members.is_empty() {
            self.finalize(i);
            return Ok(());
        }
        for model in members {
            self.submit(SubRequest { query_index: i, model })?;
        }
        Ok(())
    }

    fn on_sub_complete(&mut self, id: u64, query: usize, model: ModelId) {
        let flight = &mut self.in_flight[id as usize];
        let Some(pos) = flight.iter().position(|s| s.query_index == query && s.model == model) else {
            // lost to a preemption
            return;
        };
        flight.swap_remove(pos);
        let inst = &mut self.instances[id as usize];
        inst.slots_busy -= 1;
        if inst.slots_busy == 0 {
            inst.idle_since = Some(self.now);
        }
        self.pools[model.index()].record_served(self.now);
        let q = &self.trace.queries[query];
        let predicted = self.oracle.predict(model, q.true_class, q.query_id);
        let run = &mut self.runs[query];
        run.votes.push((model, predicted));
        run.pending -= 1;
        if run.pending == 0 {
            self.push(self.now, EventKind::EnsembleComplete(query));
        }
        self.drain(model);
    }

    fn finalize(&mut self, i: usize) {
        let q = self.trace.queries[i];
        let run = std::mem::take(&mut self.runs[i]);
        if run.done {
            return;
        }
        self.runs[i].done = true;
        self.finished += 1;
        let key = self.class_keys[q.constraint_class];
        let (latency, correct, tie) = if run.votes.is_empty() {
            (None, false, false)
        } else {
            // votes arrive in completion order; vote in member-id order
            let mut votes = run.votes.clone();
            votes.sort();
            let outcome = match self.scenario.policy.voting {
                VotingMode::ClassWeighted => weighted_vote(&votes, &self.weights),
                VotingMode::Uniform => weighted_vote(&votes, &UniformWeights),
            }
            .expect("non-empty votes");
            let correct = outcome.winner == q.true_class;
            for &(m, c) in &votes {
                self.weights.update(m, c, q.true_class);
            }
            if let Some(state) = self.cache.get_mut(&key) {
                state.interval.record(correct, outcome.max_vote, &votes, q.true_class);
            }
            let (lo, hi) = self.scenario.latency_model.network_overhead_ms;
            let net = lo + (hi - lo) * self.network.unit(NETWORK_STREAM, q.query_id, 0);
            let latency = (self.now - q.arrival_time_s) * 1000.0 + net;
            (Some(latency), correct, outcome.count_tie)
        };
        let record = self.metrics.record_completion(
            q.query_id,
            q.arrival_time_s,
            self.now,
            q.constraint_class,
            latency,
            correct,
            run.ensemble_size,
            run.votes.len(),
            tie,
        );
        let violated = record.slo_violation;
        self.completions.push_back((self.now, violated));
    }

    fn trim_completions(&mut self, horizon: f64) {
        while let Some(&(t, _)) = self.completions.front() {
            if t <= self.now - horizon {
                self.completions.pop_front();
            } else {
                break;
            }
        }
    }

    fn in_flight_queries(&self) -> usize {
        self.arrived - self.finished
    }

    fn on_scaling_tick(&mut self) -> Result<()> {
        let ts = self.scenario.autoscaler.scheduling_interval_s;
        if !self.scenario.autoscaler.predictive {
            return Ok(());
        }
        let Ok(predicted) = self.predictor.predict(self.now) else {
            return Ok(());
        };
        self.forecasts.push((self.now + self.predictor.config().horizon_s, predicted));
        let window = self.scenario.autoscaler.scheduling_interval_s.max(self.scenario.autoscaler.reactive_interval_s);
        self.trim_completions(window);
        let current = (self.completions.len() + self.in_flight_queries()) as f64 / ts;
        let active = self.active_models();
        let served: Vec<(ModelId, usize)> = active
            .iter()
            .map(|&m| {
                let pool = &mut self.pools[m.index()];
                pool.trim_served(self.now);
                let n = if self.scenario.autoscaler.uniform_weights { 0 } else { pool.served_recent() };
                (m, n)
            })
            .collect();
        let weights = importance_weights(&served);
        let now = self.now;
        let plan = weighted_autoscale(predicted, current, &weights, |m| self.zoo.get(m).clone(), &self.catalog, |i, _| {
            self.price_of(i, now)
        })?;
        let mode = self.scenario.market.pricing_mode;
        for order in plan {
            self.launch(&order, mode, LaunchReason::Predictive, false);
        }
        Ok(())
    }

    fn on_reactive_tick(&mut self) -> Result<()> {
        if !self.scenario.autoscaler.reactive {
            return Ok(());
        }
        let interval = self.scenario.autoscaler.reactive_interval_s;
        let recent: Vec<bool> = self
            .completions
            .iter()
            .filter(|&&(t, _)| t > self.now - interval)
            .map(|&(_, v)| v)
            .collect();
        let violations = if recent.is_empty() {
            0.0
        } else {
            recent.iter().filter(|&&v| v).count() as f64 / recent.len() as f64
        };
        let (busy, total) = self
            .instances
            .iter()
            .filter(|i| i.is_running())
            .fold((0u64, 0u64), |(b, t), i| (b + u64::from(i.slots_busy), t + u64::from(i.slots_total)));
        let utilization = if total == 0 { 0.0 } else { busy as f64 / total as f64 };
        let backlogs: Vec<(ModelId, usize)> = self
            .zoo
            .ids()
            .map(|m| {
                let queued = self.pools[m.index()].queue.len();
                (m, queued.saturating_sub(self.launching_slots(m)))
            })
            .filter(|&(_, b)| b > 0)
            .collect();
        let now = self.now;
        let plan = reactive_check(
            violations,
            utilization,
            &backlogs,
            &self.scenario.autoscaler,
            |m| self.zoo.get(m).clone(),
            &self.catalog,
            |i, _| self.price_of(i, now),
        )?;
        let mode = self.scenario.market.pricing_mode;
        for order in plan {
            self.launch(&order, mode, LaunchReason::Reactive, false);
        }
        Ok(())
    }

    fn on_idle_check(&mut self) {
        let protected = self.active_models();
        let victims = recycle_idle(self.now, self.instances.iter(), self.scenario.autoscaler.idle_timeout_s, &protected);
        let mut per_pool: BTreeMap<(ModelId, usize), u32> = BTreeMap::new();
        for id in victims {
            let inst = &mut self.instances[id as usize];
            inst.state = InstanceState::Terminated;
            inst.terminated_at = Some(self.now);
            self.end_reason[id as usize] = "idle";
            *per_pool.entry((inst.pool, inst.type_index)).or_default() += 1;
        }
        for ((pool, ty), count) in per_pool {
            self.metrics.scaling_actions.push(ScalingAction {
                t: self.now,
                pool: self.pool_key(pool),
                action: "terminate",
                type_name: self.catalog[ty].name.clone(),
                count,
                reason: "idle",
            });
        }
    }

    fn on_failure_check(&mut self) -> Result<()> {
        let market = &self.scenario.market;
        let random = market
            .failure_window_s
            .is_none_or(|(start, end)| self.now >= start && self.now < end);
        let targets: Vec<CheckTarget> = self
            .instances
            .iter()
            .filter(|i| i.is_running())
            .map(|i| {
                let ty = &self.catalog[i.type_index];
                CheckTarget {
                    instance_id: i.instance_id,
                    mode: i.pricing_mode,
                    type_name: &ty.name,
                    od_price: ty.od_price_per_hour,
                }
            })
            .collect();
        let events = preemption_check(self.now, &targets, market, &self.prices, random, &mut self.failure_rng)?;
        for (id, cause) in events {
            self.push(
                self.now,
                EventKind::VmPreempted {
                    instance: id,
                    price: cause == PreemptionCause::PriceAboveBid,
                },
            );
        }
        Ok(())
    }

    fn on_preempted(&mut self, id: u64, price: bool) -> Result<()> {
        let inst = &mut self.instances[id as usize];
        if !inst.is_alive() {
            return Ok(());
        }
        inst.state = InstanceState::Preempted;
        inst.terminated_at = Some(self.now);
        inst.slots_busy = 0;
        let pool = inst.pool;
        let type_index = inst.type_index;
        let mode = if price { PricingMode::OnDemand } else { inst.pricing_mode };
        self.end_reason[id as usize] = if price { "preempted-price" } else { "preempted-failure" };
        self.vms.preempted += 1;
        for sub in std::mem::take(&mut self.in_flight[id as usize]) {
            let run = &mut self.runs[sub.query_index];
            run.pending -= 1;
            if run.pending == 0 {
                self.push(self.now, EventKind::EnsembleComplete(sub.query_index));
            }
        }
        self.metrics.scaling_actions.push(ScalingAction {
            t: self.now,
            pool: self.pool_key(pool),
            action: "preempted",
            type_name: self.catalog[type_index].name.clone(),
            count: 1,
            reason: if price { "price" } else { "failure" },
        });
        self.launch(
            &LaunchOrder {
                pool,
                type_index,
                count: 1,
                demand: 0.0,
            },
            mode,
            LaunchReason::Replacement,
            false,
        );
        Ok(())
    }

    fn on_vm_ready(&mut self, id: u64) {
        let inst = &mut self.instances[id as usize];
        if inst.state != InstanceState::Launching {
            return;
        }
        inst.state = InstanceState::Running;
        inst.idle_since = Some(self.now);
        let pool = inst.pool;
        let running = self.instances.iter().filter(|i| i.is_running()).count();
        self.vms.peak_running = self.vms.peak_running.max(running);
        self.drain(pool);
    }

    fn on_sampling_tick(&mut self) -> Result<()> {
        let interval = self.selection.sampling_interval_s;
        let keys: Vec<ConstraintKey> = self.cache.iter().map(|(k, _)| *k).collect();
        for key in keys {
            let state = self.cache.get_mut(&key).expect("key listed");
            let queries = state.interval.total;
            let Some(decision) = dynamic_model_scaling(state, self.zoo, &self.selection) else {
                continue;
            };
            let label = constraint_label(&state.constraint);
            self.metrics.selector_actions.push(SelectorAction {
                t: self.now,
                constraint: label,
                old_size: decision.old_size,
                new_size: decision.new_size,
                trigger: match decision.trigger {
                    ScalingTrigger::Downscale => "downscale",
                    ScalingTrigger::Upscale => "upscale",
                },
            });
            for &m in &decision.added {
                if self.alive_in_pool(m) == 0 {
                    let demand = (f64::from(queries) / interval).max(1.0);
                    self.procure_and_launch(m, demand, LaunchReason::Predictive, false)?;
                }
            }
        }
        self.sample_timeseries();
        Ok(())
    }

    fn sample_timeseries(&mut self) {
        let t = self.now;
        for (class, key) in self.class_keys.clone().into_iter().enumerate() {
            let size = self.cache.get(&key).map_or(0, |s| s.members.len());
            self.metrics.sample_ensemble_size(t, class, size);
            let label = constraint_label(&self.trace.constraints[class]);
            let acc = self.metrics.window_accuracy(class);
            self.metrics.sample(t, "window_accuracy", label, acc);
        }
        let mut per_pool: BTreeMap<String, usize> = BTreeMap::new();
        let mut total = 0;
        for inst in self.instances.iter().filter(|i| i.is_running()) {
            *per_pool.entry(self.zoo.get(inst.pool).key.clone()).or_default() += 1;
            total += 1;
        }
        for (pool, n) in per_pool {
            self.metrics.sample(t, "vms", pool, n as f64);
        }
        self.metrics.sample(t, "vms_total", "all", total as f64);
        let done = self.metrics.records.len();
        let correct = self.metrics.records.iter().filter(|r| r.correct).count();
        let cumulative = if done == 0 { 0.0 } else { correct as f64 / done as f64 };
        self.metrics.sample(t, "cumulative_accuracy", "all", cumulative);
    }

    fn schedule_periodic(&mut self, period: f64, kind: EventKind) {
        let next = self.now + period;
        if next < self.duration() {
            self.push(next, kind);
        }
    }

    fn initial_provisioning(&mut self) -> Result<()> {
        let mean_rate = match self.trace.profile {
            Some(_) => self.scenario.trace.mean_rate,
            None => self.trace.mean_rate(),
        };
        let mut demand: BTreeMap<ModelId, f64> = BTreeMap::new();
        for (class, constraint) in self.trace.constraints.iter().enumerate() {
            let key = self.class_keys[class];
            if self.cache.get(&key).is_none() {
                // an infeasible constraint leaves no entry; its queries fail
                if let Ok(state) = construct_initial_ensemble(self.zoo, constraint, &self.selection) {
                    self.cache.store(state);
                }
            }
            if let Some(state) = self.cache.get(&key) {
                for &m in &state.members {
                    *demand.entry(m).or_default() += mean_rate * self.trace.shares[class];
                }
            }
        }
        let factor = self.scenario.autoscaler.initial_capacity_factor;
        for (m, d) in demand {
            self.procure_and_launch(m, (d * factor).max(1.0), LaunchReason::Predictive, true)?;
        }
        Ok(())
    }

    fn run(&mut self, probe: &mut dyn Probe) -> Result<()> {
        self.initial_provisioning()?;
        if !self.trace.queries.is_empty() {
            self.push(self.trace.queries[0].arrival_time_s, EventKind::QueryArrival(0));
        }
        let a = &self.scenario.autoscaler;
        let (ts, tr, w) = (a.scheduling_interval_s, a.reactive_interval_s, self.predictor.config().window_s);
        let si = self.selection.sampling_interval_s;
        let fc = self.scenario.market.failure_check_interval_s;
        self.schedule_periodic(ts, EventKind::ScalingTick);
        self.schedule_periodic(tr, EventKind::ReactiveTick);
        self.schedule_periodic(tr, EventKind::IdleCheck);
        self.schedule_periodic(w, EventKind::ObserveTick);
        self.schedule_periodic(si, EventKind::SamplingTick);
        let needs_checks = self.scenario.market.failure_probability > 0.0
            || self.scenario.market.pricing_mode == PricingMode::Spot;
        if needs_checks {
            self.schedule_periodic(fc, EventKind::FailureCheck);
        }

        while let Some(event) = self.heap.pop() {
            debug_assert!(event.time_s >= self.now);
            self.now = event.time_s;
            match event.kind {
                EventKind::QueryArrival(i) => self.on_arrival(i)?,
                EventKind::SubRequestComplete { instance, query, model } => {
                    self.on_sub_complete(instance, query, model)
                }
                EventKind::EnsembleComplete(i) => self.finalize(i),
                EventKind::ScalingTick => {
                    self.on_scaling_tick()?;
                    self.schedule_periodic(ts, EventKind::ScalingTick);
                }
                EventKind::ReactiveTick => {
                    self.on_reactive_tick()?;
                    self.trim_completions(ts.max(tr));
                    self.schedule_periodic(tr, EventKind::ReactiveTick);
                }
                EventKind::ObserveTick => {
                    let n = std::mem::take(&mut self.window_arrivals);
                    self.predictor.observe(self.now, n)?;
                    self.schedule_periodic(w, EventKind::ObserveTick);
                }
                EventKind::SamplingTick => {
                    self.on_sampling_tick()?;
                    self.schedule_periodic(si, EventKind::SamplingTick);
                }
                EventKind::FailureCheck => {
                    self.on_failure_check()?;
                    self.schedule_periodic(fc, EventKind::FailureCheck);
                }
                EventKind::VmReady(id) => self.on_vm_ready(id),
                EventKind::VmPreempted { instance, price } => self.on_preempted(instance, price)?,
                EventKind::IdleCheck => {
                    self.on_idle_check();
                    self.schedule_periodic(tr, EventKind::IdleCheck);
                }
            }
            let view = SimView {
                instances: &self.instances,
                in_flight: &self.in_flight,
                now: self.now,
            };
            probe.on_event(&event, &view);
        }
        Ok(())
    }

    fn bill(&self, end: f64) -> Result<Vec<CostLine>> {
        let mut lines = Vec::with_capacity(self.instances.len());
        for inst in &self.instances {
            let ty = &self.catalog[inst.type_index];
            let stop = inst.terminated_at.unwrap_or(end);
            let from = inst.ready_at.min(stop);
            let cost = billing_accrue(inst.pricing_mode, &ty.name, ty.od_price_per_hour, &self.prices, from, stop)?;
            lines.push(CostLine {
                instance_id: inst.instance_id,
                pool: self.zoo.get(inst.pool).key.clone(),
                type_name: ty.name.clone(),
                pricing: inst.pricing_mode.name(),
                launched_at: inst.launched_at,
                ready_at: inst.ready_at,
                ended_at: stop,
                end_reason: self.end_reason[inst.instance_id as usize],
                cost,
            });
        }
        Ok(lines)
    }
}

/// Everything `run` needs that does not depend on the policy.
pub struct Prepared {
    pub scenario: Scenario,
    pub zoo: Zoo,
    pub oracle: PredictionOracle,
    pub trace: Trace,
    pub catalog: Vec<InstanceType>,
    pub prices: PriceTrace,
}

/// Validate a scenario and materialize its zoo, oracle, trace and prices.
pub fn prepare(scenario: &Scenario) -> Result<Prepared> {
    scenario.validate()?;
    let (zoo, oracle) = scenario.build_models()?;
    let trace_config = scenario.trace_config(&zoo, oracle.matrix().num_classes())?;
    let trace = generate_trace(&trace_config)?;
    if let Some(bad) = trace.queries.iter().find(|q| q.true_class >= oracle.matrix().num_classes()) {
        return Err(Error::config(
            "trace",
            format!("query {} has class {} outside the zoo's classes", bad.query_id, bad.true_class),
        ));
    }
    let catalog = scenario.catalog()?;
    let types: Vec<(String, f64)> = catalog.iter().map(|t| (t.name.clone(), t.od_price_per_hour)).collect();
    let prices = PriceTrace::build(&scenario.market.prices, &types, trace.duration_s * 2.0 + 3600.0)?;
    if scenario.market.pricing_mode == PricingMode::Spot {
        for (name, _) in &types {
            prices.spot_price(name, 0.0)?;
        }
    }
    Ok(Prepared {
        scenario: scenario.clone(),
        zoo,
        oracle,
        trace,
        catalog,
        prices,
    })
}

/// Run a prepared scenario, optionally under a different policy.
pub fn run_prepared(prepared: &Prepared, policy: Option<SelectionPolicy>, probe: &mut dyn Probe) -> Result<MetricsReport> {
    let mut scenario = prepared.scenario.clone();
    if let Some(p) = policy {
        scenario.policy.policy = p;
    }
    let selection = scenario.policy.selection();
    let trace = &prepared.trace;
    let predictor = LoadPredictor::new(scenario.predictor.clone(), trace.profile.clone())?;
    let cache = ModelCache::for_policy(&selection);
    let class_keys = trace.constraints.iter().map(|c| cache.key(c)).collect();
    let zoo = &prepared.zoo;
    let mut engine = Engine {
        scenario: &scenario,
        zoo,
        oracle: &prepared.oracle,
        trace,
        catalog: prepared.catalog.clone(),
        prices: prepared.prices.clone(),
        selection,
        now: 0.0,
        ordinal: 0,
        heap: BinaryHeap::new(),
        cache,
        class_keys,
        weights: WeightMatrix::new(prepared.oracle.matrix().num_classes(), zoo.len()),
        runs: vec![QueryRun::default(); trace.queries.len()],
        finished: 0,
        arrived: 0,
        instances: Vec::new(),
        in_flight: Vec::new(),
        end_reason: Vec::new(),
        pools: zoo.ids().map(PoolState::new).collect(),
        predictor,
        forecasts: Vec::new(),
        window_arrivals: 0,
        completions: VecDeque::new(),
        network: KeyedRng::new(derive_seed(scenario.seed, "network")),
        launch_rng: ChaCha8Rng::seed_from_u64(derive_seed(scenario.seed, "launch")),
        failure_rng: ChaCha8Rng::seed_from_u64(derive_seed(scenario.seed, "failures")),
        metrics: MetricsCollector::new(
            trace.constraints.clone(),
            scenario.latency_model.slo_ms,
            scenario.latency_model.accuracy_window,
        ),
        vms: VmSummary::default(),
    };
    engine.run(probe)?;

    let end = engine.now.max(trace.duration_s);
    let cost_lines = engine.bill(end)?;
    let served_per_model = zoo
        .models()
        .iter()
        .filter(|m| engine.pools[m.id.index()].served_total > 0)
        .map(|m| (m.key.clone(), engine.pools[m.id.index()].served_total))
        .collect();
    let arrivals = trace.arrival_times();
    let window = engine.predictor.config().window_s;
    let predictor_summary = PredictorSummary {
        kind: match &scenario.predictor.kind {
            PredictorKind::MovingWindowAverage => "moving-window-average",
            PredictorKind::ExponentiallyWeighted => "exponentially-weighted",
            PredictorKind::SeasonalNaive => "seasonal-naive",
            PredictorKind::Oracle => "oracle",
            PredictorKind::OracleFile { .. } => "oracle-file",
        }
        .to_string(),
        forecasts: engine.forecasts.len(),
        rmse: rmse(&engine.forecasts, &arrivals, window, trace.duration_s),
    };
    let inputs = SummaryInputs {
        policy: scenario.policy.policy.name().to_string(),
        seed: scenario.seed,
        duration_s: trace.duration_s,
        end_time_s: end,
        served_per_model,
        vms: std::mem::take(&mut engine.vms),
        predictor: predictor_summary,
        cost_lines,
        config: scenario.to_json_value(),
    };
    let metrics = std::mem::replace(&mut engine.metrics, MetricsCollector::new(Vec::new(), 0.0, 1));
    Ok(metrics.finish(inputs))
}

/// Run one scenario end to end.
pub fn run(scenario: &Scenario) -> Result<MetricsReport> {
    let prepared = prepare(scenario)?;
    run_prepared(&prepared, None, &mut ())
}

/// Side-by-side results of several policies on one trace.
#[derive(Clone, Debug, Serialize)]
pub struct Comparison {
    pub runs: BTreeMap<String, MetricsReport>,
}

impl Comparison {
    /// `comparison.json` body: one summary block per policy.
    pub fn summaries(&self) -> BTreeMap<&str, &crate::metrics::Summary> {
        self.runs.iter().map(|(k, v)| (k.as_str(), &v.summary)).collect()
    }

    pub fn emit(&self, dir: &std::path::Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, report) in &self.runs {
            report.emit(&dir.join(name))?;
        }
        let path = dir.join("comparison.json");
        let mut text = serde_json::to_string_pretty(&self.summaries())?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(())
    }
}

/// Run every policy on the same trace and seeds, in parallel.
pub fn compare_policies(scenario: &Scenario, policies: &[SelectionPolicy]) -> Result<Comparison> {
    let prepared = prepare(scenario)?;
    let results: Vec<Result<MetricsReport>> = std::thread::scope(|s| {
        let handles: Vec<_> = policies
            .iter()
            .map(|&p| {
                let prepared = &prepared;
                s.spawn(move || run_prepared(prepared, Some(p), &mut ()))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("simulation thread panicked")).collect()
    });
    let mut runs = BTreeMap::new();
    for (p, r) in policies.iter().zip(results) {
        runs.insert(p.name().to_string(), r?);
    }
    Ok(Comparison { runs })
}
