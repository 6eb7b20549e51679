//! Spot prices, preemption and billing.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PricingMode {
    OnDemand,
    #[default]
    Spot,
}

impl PricingMode {
    pub fn name(self) -> &'static str {
        match self {
            PricingMode::OnDemand => "on-demand",
            PricingMode::Spot => "spot",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum PriceSource {
    /// Every type at a fixed fraction of its on-demand price.
    Constant { fraction: f64 },
    /// `od × (mean + amplitude × sin(2πt/period + phase))`, stepped every `step_s`;
    /// the phase differs per type.
    Sinusoid {
        mean_fraction: f64,
        amplitude: f64,
        period_s: f64,
        step_s: f64,
    },
    /// CSV `t_s,type,price`.
    File { path: PathBuf },
}

impl Default for PriceSource {
    fn default() -> Self {
        PriceSource::Sinusoid {
            mean_fraction: 0.3,
            amplitude: 0.05,
            period_s: 86_400.0,
            step_s: 300.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpotMarketConfig {
    pub pricing_mode: PricingMode,
    pub prices: PriceSource,
    pub bid_fraction: f64,
    /// Per instance, per check.
    pub failure_probability: f64,
    pub failure_check_interval_s: f64,
    /// Reserved for draining experiments; preemption drops work immediately.
    pub preemption_notice_s: f64,
    /// Random failures are only injected inside `[start, end)` when set.
    pub failure_window_s: Option<(f64, f64)>,
}

impl Default for SpotMarketConfig {
    fn default() -> Self {
        Self {
            pricing_mode: PricingMode::Spot,
            prices: PriceSource::default(),
            bid_fraction: 0.4,
            failure_probability: 0.0,
            failure_check_interval_s: 60.0,
            preemption_notice_s: 120.0,
            failure_window_s: None,
        }
    }
}

impl SpotMarketConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.bid_fraction > 0.0 && self.bid_fraction <= 1.0) {
            return Err(Error::config("market.bid_fraction", "must be in (0,1]"));
        }
        if !(0.0..=1.0).contains(&self.failure_probability) {
            return Err(Error::config("market.failure_probability", "must be in [0,1]"));
        }
        if !(self.failure_check_interval_s > 0.0) {
            return Err(Error::config("market.failure_check_interval_s", "must be positive"));
        }
        if !(self.preemption_notice_s >= 0.0) {
            return Err(Error::config("market.preemption_notice_s", "must be non-negative"));
        }
        match &self.prices {
            PriceSource::Constant { fraction } if !(*fraction > 0.0) => {
                Err(Error::config("market.prices.fraction", "must be positive"))
            }
            PriceSource::Sinusoid {
                mean_fraction,
                amplitude,
                period_s,
                step_s,
            } if !(*mean_fraction > 0.0 && *amplitude >= 0.0 && amplitude < mean_fraction && *period_s > 0.0 && *step_s > 0.0) => {
                Err(Error::config("market.prices", "sinusoid needs 0 <= amplitude < mean and positive period/step"))
            }
            _ => Ok(()),
        }
    }
}

/// Piecewise-constant spot prices per instance type.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct PriceTrace {
    series: BTreeMap<String, Vec<(f64, f64)>>,
}

impl PriceTrace {
    pub fn constant(types: &[(String, f64)], fraction: f64) -> Self {
        Self {
            series: types
                .iter()
                .map(|(name, od)| (name.clone(), vec![(0.0, od * fraction)]))
                .collect(),
        }
    }

    pub fn sinusoid(
        types: &[(String, f64)],
        mean_fraction: f64,
        amplitude: f64,
        period_s: f64,
        step_s: f64,
        until_s: f64,
    ) -> Self {
        let mut series = BTreeMap::new();
        for (k, (name, od)) in types.iter().enumerate() {
            let phase = TAU * k as f64 / types.len().max(1) as f64;
            let mut points = Vec::new();
            let mut t = 0.0;
            while t <= until_s {
                points.push((t, od * (mean_fraction + amplitude * (TAU * t / period_s + phase).sin())));
                t += step_s;
            }
            series.insert(name.clone(), points);
        }
        Self { series }
    }

    pub fn from_points(points: impl IntoIterator<Item = (String, f64, f64)>) -> Result<Self> {
        let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
        for (name, t, price) in points {
            if !(price > 0.0 && price.is_finite()) {
                return Err(Error::config("market.prices", format!("price {price} for {name} is not positive")));
            }
            series.entry(name).or_default().push((t, price));
        }
        for (name, s) in series.iter_mut() {
            s.sort_by(|a, b| a.0.total_cmp(&b.0));
            if s.windows(2).any(|w| w[0].0 == w[1].0) {
                return Err(Error::config("market.prices", format!("duplicate time for {name}")));
            }
        }
        Ok(Self { series })
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            t_s: f64,
            #[serde(rename = "type")]
            type_name: String,
            price: f64,
        }
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| Error::parse(path, 1, "header", e.to_string()))?;
        let mut points = Vec::new();
        for (i, row) in reader.deserialize::<Row>().enumerate() {
            let row = row.map_err(|e| Error::parse(path, i + 2, "row", e.to_string()))?;
            if !(row.price > 0.0) {
                return Err(Error::parse(path, i + 2, "price", "must be positive"));
            }
            points.push((row.type_name, row.t_s, row.price));
        }
        Self::from_points(points)
    }

    pub fn build(source: &PriceSource, types: &[(String, f64)], until_s: f64) -> Result<Self> {
        match source {
            PriceSource::Constant { fraction } => Ok(Self::constant(types, *fraction)),
            PriceSource::Sinusoid {
                mean_fraction,
                amplitude,
                period_s,
                step_s,
            } => Ok(Self::sinusoid(types, *mean_fraction, *amplitude, *period_s, *step_s, until_s)),
            PriceSource::File { path } => Self::load_csv(path),
        }
    }

    fn points(&self, type_name: &str) -> Result<&[(f64, f64)]> {
        match self.series.get(type_name) {
            Some(s) if !s.is_empty() => Ok(s),
            _ => Err(Error::config("market.prices", format!("no price trace for `{type_name}`"))),
        }
    }

    /// Spot price at `t`; before the first point the first value holds.
    pub fn spot_price(&self, type_name: &str, t: f64) -> Result<f64> {
        let s = self.points(type_name)?;
        let i = s.partition_point(|&(ts, _)| ts <= t);
        Ok(s[i.saturating_sub(1)].1)
    }

    /// Exact integral of the spot price over `[from, to]`, in price × hours.
    pub fn integrate(&self, type_name: &str, from: f64, to: f64) -> Result<f64> {
        let s = self.points(type_name)?;
        if to <= from {
            return Ok(0.0);
        }
        let mut total = 0.0;
        let mut t = from;
        let mut i = s.partition_point(|&(ts, _)| ts <= from);
        while t < to {
            let price = s[i.saturating_sub(1)].1;
            let next = if i < s.len() { s[i].0.min(to) } else { to };
            total += price * (next - t);
            t = next;
            i += 1;
        }
        Ok(total / 3600.0)
    }
}

/// Cost of running one instance over `[from, to]`.
pub fn billing_accrue(
    mode: PricingMode,
    type_name: &str,
    od_price: f64,
    prices: &PriceTrace,
    from: f64,
    to: f64,
) -> Result<f64> {
    if to <= from {
        return Ok(0.0);
    }
    match mode {
        PricingMode::OnDemand => Ok(od_price * (to - from) / 3600.0),
        PricingMode::Spot => prices.integrate(type_name, from, to),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PreemptionCause {
    PriceAboveBid,
    RandomFailure,
}

/// Candidate for a preemption check: `(instance id, pricing mode, type name, od price)`.
#[derive(Clone, Debug)]
pub struct CheckTarget<'a> {
    pub instance_id: u64,
    pub mode: PricingMode,
    pub type_name: &'a str,
    pub od_price: f64,
}

/// Decide which instances are lost at `t`. Spot instances go when the price
/// exceeds the bid; any instance fails independently with the configured
/// probability when `random_failures` is set.
pub fn preemption_check<R: Rng>(
    t: f64,
    targets: &[CheckTarget<'_>],
    config: &SpotMarketConfig,
    prices: &PriceTrace,
    random_failures: bool,
    rng: &mut R,
) -> Result<Vec<(u64, PreemptionCause)>> {
    let mut out = Vec::new();
    for target in targets {
        if target.mode == PricingMode::Spot
            && prices.spot_price(target.type_name, t)? > config.bid_fraction * target.od_price
        {
            out.push((target.instance_id, PreemptionCause::PriceAboveBid));
            continue;
        }
        if random_failures && config.failure_probability > 0.0 && rng.gen::<f64>() < config.failure_probability {
            out.push((target.instance_id, PreemptionCause::RandomFailure));
        }
    }
    Ok(out)
}
