//! Arrival-rate forecasting for the autoscaler.
//!
//! The predictor is fed the arrival count of each `W`-second window and asked
//! for the rate expected `T_p` seconds ahead.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::workload::RateProfile;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictorKind {
    #[default]
    MovingWindowAverage,
    ExponentiallyWeighted,
    SeasonalNaive,
    /// Reads the generator's true rate function.
    Oracle,
    /// Reads `t_s,predicted_rate` rows; row `t_s` holds the rate expected at time `t_s`.
    OracleFile { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorConfig {
    pub kind: PredictorKind,
    pub window_s: f64,
    pub history_s: f64,
    pub horizon_s: f64,
    pub smoothing: f64,
    /// Season length for `seasonal-naive`; its history always spans one season.
    pub season_s: f64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            kind: PredictorKind::MovingWindowAverage,
            window_s: 10.0,
            history_s: 600.0,
            horizon_s: 600.0,
            smoothing: 0.2,
            season_s: 3600.0,
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.window_s > 0.0) {
            return Err(Error::config("predictor.window_s", "must be positive"));
        }
        if !(self.history_s >= self.window_s) {
            return Err(Error::config("predictor.history_s", "must be at least window_s"));
        }
        if !(self.horizon_s > 0.0) {
            return Err(Error::config("predictor.horizon_s", "must be positive"));
        }
        if !(self.smoothing > 0.0 && self.smoothing <= 1.0) {
            return Err(Error::config("predictor.smoothing", "must be in (0,1]"));
        }
        if !(self.season_s > 0.0) {
            return Err(Error::config("predictor.season_s", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct LoadPredictor {
    config: PredictorConfig,
    /// `(window end time, rate)`.
    history: VecDeque<(f64, f64)>,
    smoothed: Option<f64>,
    profile: Option<RateProfile>,
    external: Vec<(f64, f64)>,
}

impl LoadPredictor {
    /// `profile` is required by the `oracle` kind and ignored otherwise.
    pub fn new(config: PredictorConfig, profile: Option<RateProfile>) -> Result<Self> {
        config.validate()?;
        let external = match &config.kind {
            PredictorKind::OracleFile { path } => load_prediction_csv(path)?,
            _ => Vec::new(),
        };
        if config.kind == PredictorKind::Oracle && profile.is_none() {
            return Err(Error::config(
                "predictor.kind",
                "oracle needs a generated trace with a known rate function",
            ));
        }
        Ok(Self {
            config,
            history: VecDeque::new(),
            smoothed: None,
            profile,
            external,
        })
    }

    pub fn config(&self) -> &PredictorConfig {
        &self.config
    }

    fn span(&self) -> f64 {
        match self.config.kind {
            PredictorKind::SeasonalNaive => self.config.history_s.max(self.config.season_s),
            _ => self.config.history_s,
        }
    }

    pub fn history_len(&self) -> usize {
        self.history.len()
    }

    pub fn history(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.history.iter().copied()
    }

    /// Record `arrivals` seen in the window ending at `t`.
    pub fn observe(&mut self, t: f64, arrivals: u64) -> Result<()> {
        if let Some(&(last, _)) = self.history.back() {
            if t < last {
                return Err(Error::TimeRegression { t, last });
            }
        }
        let rate = arrivals as f64 / self.config.window_s;
        self.history.push_back((t, rate));
        let span = self.span();
        while let Some(&(first, _)) = self.history.front() {
            // a window ending at `first` covers (first - W, first]
            if t - (first - self.config.window_s) > span + 1e-9 {
                self.history.pop_front();
            } else {
                break;
            }
        }
        let a = self.config.smoothing;
        self.smoothed = Some(match self.smoothed {
            None => rate,
            Some(s) => a * rate + (1.0 - a) * s,
        });
        Ok(())
    }

    /// Rate expected at `t + horizon`.
    pub fn predict(&self, t: f64) -> Result<f64> {
        let target = t + self.config.horizon_s;
        let value = match &self.config.kind {
            PredictorKind::Oracle => self.profile.as_ref().map(|p| p.rate_at(target)).unwrap_or(0.0),
            PredictorKind::OracleFile { .. } => lookup(&self.external, target).unwrap_or(0.0),
            PredictorKind::MovingWindowAverage => {
                if self.history.is_empty() {
                    return Err(Error::EmptyInput("predictor history"));
                }
                self.history.iter().map(|&(_, r)| r).sum::<f64>() / self.history.len() as f64
            }
            PredictorKind::ExponentiallyWeighted => self.smoothed.ok_or(Error::EmptyInput("predictor history"))?,
            PredictorKind::SeasonalNaive => {
                let back = target - self.config.season_s;
                let first = self.history.front().ok_or(Error::EmptyInput("predictor history"))?;
                if back < first.0 - self.config.window_s {
                    self.smoothed.ok_or(Error::EmptyInput("predictor history"))?
                } else {
                    // window containing `back`
                    let i = self.history.partition_point(|&(end, _)| end < back);
                    self.history[i.min(self.history.len() - 1)].1
                }
            }
        };
        Ok(value.max(0.0))
    }
}

fn lookup(series: &[(f64, f64)], t: f64) -> Option<f64> {
    if series.is_empty() {
        return None;
    }
    let i = series.partition_point(|&(ts, _)| ts <= t);
    Some(series[i.saturating_sub(1)].1)
}

pub fn load_prediction_csv(path: &Path) -> Result<Vec<(f64, f64)>> {
    #[derive(Deserialize)]
    struct Row {
        t_s: f64,
        predicted_rate: f64,
    }
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::parse(path, 1, "header", e.to_string()))?;
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (i, row) in reader.deserialize::<Row>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::parse(path, line, "row", e.to_string()))?;
        if !(row.predicted_rate >= 0.0 && row.predicted_rate.is_finite()) {
            return Err(Error::parse(path, line, "predicted_rate", "must be non-negative"));
        }
        if let Some(&(last, _)) = out.last() {
            if row.t_s < last {
                return Err(Error::parse(path, line, "t_s", "time goes backwards"));
            }
        }
        out.push((row.t_s, row.predicted_rate));
    }
    if out.is_empty() {
        return Err(Error::EmptyInput("prediction file"));
    }
    Ok(out)
}

/// Realized arrival rate over `(t - window, t]`; `arrivals` must be sorted.
pub fn realized_rate(arrivals: &[f64], t: f64, window_s: f64) -> f64 {
    let hi = arrivals.partition_point(|&a| a <= t);
    let lo = arrivals.partition_point(|&a| a <= t - window_s);
    (hi - lo) as f64 / window_s
}

/// Root-mean-square error of `(target time, predicted rate)` pairs against
/// realized window rates. Pairs whose window extends past `end_s` are skipped.
pub fn rmse(predictions: &[(f64, f64)], arrivals: &[f64], window_s: f64, end_s: f64) -> Option<f64> {
    let errors: Vec<f64> = predictions
        .iter()
        .filter(|&&(t, _)| t <= end_s && t >= window_s)
        .map(|&(t, p)| p - realized_rate(arrivals, t, window_s))
        .collect();
    if errors.is_empty() {
        return None;
    }
    Some((errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt())
}

/// Replay `arrivals` through a predictor: observe every window and forecast at
/// every `step_s`. Returns `(target time, predicted rate)` pairs.
pub fn backtest(
    predictor: &mut LoadPredictor,
    arrivals: &[f64],
    end_s: f64,
    step_s: f64,
) -> Result<Vec<(f64, f64)>> {
    let w = predictor.config().window_s;
    let horizon = predictor.config().horizon_s;
    let mut out = Vec::new();
    let mut next_forecast = step_s;
    let mut t = w;
    let mut idx = 0;
    while t <= end_s + 1e-9 {
        let start = idx;
        while idx < arrivals.len() && arrivals[idx] <= t {
            idx += 1;
        }
        predictor.observe(t, (idx - start) as u64)?;
        if t + 1e-9 >= next_forecast {
            out.push((t + horizon, predictor.predict(t)?));
            next_forecast += step_s;
        }
        t += w;
    }
    Ok(out)
}
