//! Instance pools, procurement and autoscaling.
//!
//! Every model has a dedicated pool. Capacity is planned in request units: an
//! instance of size multiplier `k` contributes `k × P_f` to its pool, matching
//! the slot count it exposes to the dispatcher.

use std::collections::{BTreeMap, VecDeque};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::PricingMode;
use crate::zoo::{ModelId, ModelProfile};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceType {
    pub name: String,
    pub vcpus: u32,
    #[serde(rename = "size_mult")]
    pub size_multiplier: u32,
    #[serde(rename = "od_price")]
    pub od_price_per_hour: f64,
    pub is_gpu: bool,
}

impl InstanceType {
    /// Inference slots this type offers `model`, if it may serve it at all.
    pub fn packing_factor(&self, model: &ModelProfile) -> Option<u32> {
        if self.is_gpu {
            model.gpu_packing_factor
        } else {
            Some(model.base_packing_factor * self.size_multiplier)
        }
    }
}

const BUNDLED_CATALOG: &str = include_str!("../data/c5a_catalog.csv");

fn parse_catalog(bytes: &[u8], label: &Path) -> Result<Vec<InstanceType>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(bytes);
    let mut out = Vec::new();
    for (i, row) in reader.deserialize::<InstanceType>().enumerate() {
        let line = i + 2;
        let t = row.map_err(|e| Error::parse(label, line, "row", e.to_string()))?;
        if !(t.od_price_per_hour > 0.0) {
            return Err(Error::parse(label, line, "od_price", "must be positive"));
        }
        if t.size_multiplier == 0 {
            return Err(Error::parse(label, line, "size_mult", "must be at least 1"));
        }
        if out.iter().any(|o: &InstanceType| o.name == t.name) {
            return Err(Error::parse(label, line, "name", format!("duplicate type `{}`", t.name)));
        }
        out.push(t);
    }
    if out.is_empty() {
        return Err(Error::EmptyInput("instance catalog"));
    }
    Ok(out)
}

pub fn bundled_catalog() -> Vec<InstanceType> {
    parse_catalog(BUNDLED_CATALOG.as_bytes(), Path::new("<bundled catalog>")).expect("bundled catalog parses")
}

/// Read an instance catalog CSV `name,vcpus,size_mult,od_price,is_gpu`.
pub fn load_catalog(path: &Path) -> Result<Vec<InstanceType>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_catalog(&bytes, path)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum InstanceState {
    Launching,
    Running,
    Draining,
    Terminated,
    Preempted,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Instance {
    pub instance_id: u64,
    /// Index into the catalog.
    pub type_index: usize,
    pub pricing_mode: PricingMode,
    pub pool: ModelId,
    pub state: InstanceState,
    pub slots_total: u32,
    pub slots_busy: u32,
    pub launched_at: f64,
    pub ready_at: f64,
    pub terminated_at: Option<f64>,
    /// Start of the current all-slots-free stretch.
    pub idle_since: Option<f64>,
    pub accumulated_cost: f64,
}

impl Instance {
    pub fn free_slots(&self) -> u32 {
        self.slots_total - self.slots_busy
    }

    pub fn is_running(&self) -> bool {
        self.state == InstanceState::Running
    }

    pub fn is_alive(&self) -> bool {
        matches!(self.state, InstanceState::Launching | InstanceState::Running)
    }
}

/// A pending unit of work for one pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct SubRequest {
    pub query_index: usize,
    pub model: ModelId,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct PoolState {
    pub model: Option<ModelId>,
    /// Instance ids, in launch order.
    pub instances: Vec<u64>,
    pub queue: VecDeque<SubRequest>,
    /// Completion times within the trailing importance window.
    pub served: VecDeque<f64>,
    pub served_total: u64,
}

/// Span of the served-count window behind importance weights.
pub const IMPORTANCE_WINDOW_S: f64 = 300.0;

impl PoolState {
    pub fn new(model: ModelId) -> Self {
        Self {
            model: Some(model),
            ..Default::default()
        }
    }

    pub fn record_served(&mut self, t: f64) {
        self.served.push_back(t);
        self.served_total += 1;
        self.trim_served(t);
    }

    pub fn trim_served(&mut self, t: f64) {
        while let Some(&first) = self.served.front() {
            if first < t - IMPORTANCE_WINDOW_S {
                self.served.pop_front();
            } else {
                break;
            }
        }
    }

    pub fn served_recent(&self) -> usize {
        self.served.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AutoscalerConfig {
    pub scheduling_interval_s: f64,
    pub reactive_interval_s: f64,
    pub idle_timeout_s: f64,
    pub utilization_trigger: f64,
    pub slo_violation_trigger: f64,
    /// Force uniform pool weights in predictive scaling.
    pub uniform_weights: bool,
    pub predictive: bool,
    pub reactive: bool,
    /// Provisioned capacity at start, as a multiple of the expected per-pool demand.
    pub initial_capacity_factor: f64,
    /// Instance catalog CSV; the bundled c5a family when absent.
    pub catalog: Option<PathBuf>,
}

impl Default for AutoscalerConfig {
    fn default() -> Self {
        Self {
            scheduling_interval_s: 60.0,
            reactive_interval_s: 10.0,
            idle_timeout_s: 600.0,
            utilization_trigger: 0.8,
            slo_violation_trigger: 0.01,
            uniform_weights: false,
            predictive: true,
            reactive: true,
            initial_capacity_factor: 1.0,
            catalog: None,
        }
    }
}

impl AutoscalerConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("scheduling_interval_s", self.scheduling_interval_s),
            ("reactive_interval_s", self.reactive_interval_s),
            ("idle_timeout_s", self.idle_timeout_s),
            ("utilization_trigger", self.utilization_trigger),
            ("slo_violation_trigger", self.slo_violation_trigger),
            ("initial_capacity_factor", self.initial_capacity_factor),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("autoscaler.{key}"), format!("{v} is not positive")));
            }
        }
        Ok(())
    }
}

/// One line of a scaling plan.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LaunchOrder {
    pub pool: ModelId,
    pub type_index: usize,
    pub count: u32,
    /// Requested capacity in request units.
    pub demand: f64,
}

/// Cheapest instance type per unit of capacity for `demand` requests/s, and
/// the count of it covering `⌈demand / P_f⌉`.
///
/// `price` gives the hourly price used for the comparison (on-demand, or the
/// current spot price). Ties go to the smaller type; GPU types are only
/// considered when the demand fills at least one GPU's slots.
pub fn procure(
    demand: f64,
    catalog: &[InstanceType],
    model: &ModelProfile,
    price: impl Fn(usize, &InstanceType) -> f64,
) -> Result<Vec<(usize, u32)>> {
    if catalog.is_empty() {
        return Err(Error::EmptyInput("instance catalog"));
    }
    if !(demand > 0.0) {
        return Ok(Vec::new());
    }
    let mut best: Option<(usize, f64, u32)> = None;
    for (i, t) in catalog.iter().enumerate() {
        let Some(pf) = t.packing_factor(model) else { continue };
        if t.is_gpu && demand < f64::from(pf) {
            continue;
        }
        let unit = price(i, t) / f64::from(pf);
        let better = match best {
            None => true,
            Some((bi, bu, _)) => {
                let tol = 1e-12 * unit.abs().max(bu.abs());
                unit < bu - tol
                    || ((unit - bu).abs() <= tol && t.size_multiplier < catalog[bi].size_multiplier)
            }
        };
        if better {
            best = Some((i, unit, pf));
        }
    }
    let Some((index, _, pf)) = best else {
        return Err(Error::config(
            "autoscaler",
            format!("no instance type can serve model `{}`", model.key),
        ));
    };
    let count = (demand / f64::from(pf) - 1e-9).ceil().max(1.0) as u32;
    Ok(vec![(index, count)])
}

/// Share of recently served sub-requests per pool; uniform when nothing was served.
pub fn importance_weights(served: &[(ModelId, usize)]) -> Vec<(ModelId, f64)> {
    let total: usize = served.iter().map(|&(_, n)| n).sum();
    served
        .iter()
        .map(|&(m, n)| {
            let w = if total == 0 {
                1.0 / served.len() as f64
            } else {
                n as f64 / total as f64
            };
            (m, w)
        })
        .collect()
}

/// Predictive scale-up: each pool receives `(L_p - current) × weight`
/// requests/s of new capacity. Nothing is launched when the forecast does not
/// exceed the current load.
pub fn weighted_autoscale(
    predicted: f64,
    current_load: f64,
    weights: &[(ModelId, f64)],
    profile: impl Fn(ModelId) -> ModelProfile,
    catalog: &[InstanceType],
    price: impl Fn(usize, &InstanceType) -> f64 + Copy,
) -> Result<Vec<LaunchOrder>> {
    let delta = predicted - current_load;
    if !(delta > 0.0) {
        return Ok(Vec::new());
    }
    let mut plan = Vec::new();
    for &(pool, w) in weights {
        let demand = delta * w;
        let model = profile(pool);
        for (type_index, count) in procure(demand, catalog, &model, price)? {
            plan.push(LaunchOrder {
                pool,
                type_index,
                count,
                demand,
            });
        }
    }
    Ok(plan)
}

/// 10-second safety net: when both SLO violations and utilization are high,
/// cover each pool's backlog with new instances.
pub fn reactive_check(
    violation_fraction: f64,
    utilization: f64,
    backlogs: &[(ModelId, usize)],
    config: &AutoscalerConfig,
    profile: impl Fn(ModelId) -> ModelProfile,
    catalog: &[InstanceType],
    price: impl Fn(usize, &InstanceType) -> f64 + Copy,
) -> Result<Vec<LaunchOrder>> {
    if violation_fraction <= config.slo_violation_trigger || utilization <= config.utilization_trigger {
        return Ok(Vec::new());
    }
    let mut plan = Vec::new();
    for &(pool, backlog) in backlogs {
        if backlog == 0 {
            continue;
        }
        let model = profile(pool);
        for (type_index, count) in procure(backlog as f64, catalog, &model, price)? {
            plan.push(LaunchOrder {
                pool,
                type_index,
                count,
                demand: backlog as f64,
            });
        }
    }
    Ok(plan)
}

/// Best-fit placement: the running instance with the fewest free slots that
/// still has one. Ties go to the earliest instance.
pub fn dispatch<'a>(candidates: impl IntoIterator<Item = &'a Instance>) -> Option<u64> {
    candidates
        .into_iter()
        .filter(|i| i.is_running() && i.free_slots() > 0)
        .min_by_key(|i| (i.free_slots(), i.instance_id))
        .map(|i| i.instance_id)
}

/// Running instances idle for at least `timeout_s`, sparing the last running
/// instance of each pool listed in `protected`.
pub fn recycle_idle<'a>(
    t: f64,
    instances: impl IntoIterator<Item = &'a Instance>,
    timeout_s: f64,
    protected: &[ModelId],
) -> Vec<u64> {
    let mut running: BTreeMap<ModelId, Vec<&Instance>> = BTreeMap::new();
    for inst in instances {
        if inst.is_running() {
            running.entry(inst.pool).or_default().push(inst);
        }
    }
    let mut out = Vec::new();
    for (pool, list) in running {
        let mut remaining = list.len();
        // oldest idle first
        let mut idle: Vec<&Instance> = list
            .into_iter()
            .filter(|i| i.slots_busy == 0 && i.idle_since.is_some_and(|s| t - s >= timeout_s))
            .collect();
        idle.sort_by(|a, b| {
            a.idle_since
                .unwrap()
                .total_cmp(&b.idle_since.unwrap())
                .then(a.instance_id.cmp(&b.instance_id))
        });
        for inst in idle {
            if remaining == 1 && protected.contains(&pool) {
                break;
            }
            out.push(inst.instance_id);
            remaining -= 1;
        }
    }
    out.sort_unstable();
    out
}
