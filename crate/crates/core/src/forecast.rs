//! One-step conditional volatility forecasts and rolling-origin backtests.

use std::fmt;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{default_h1, h_recursion, GarchParams};
use crate::qmle::{fit, EstimationInput, FitConfig, Mode};
use crate::scalar::Scalar;

/// `h_i(theta)` for 1-based day `i`, using measures of days `1..i-1` only.
/// `i = n + 1` forecasts the day after the sample.
pub fn predict_h<T: Scalar>(theta: &GarchParams<T>, input: &EstimationInput<T>, i: usize) -> Result<T> {
    if i == 0 || i > input.n() + 1 {
        return Err(Error::InvalidInput(format!(
            "forecast day {i} outside 1..={}",
            input.n() + 1
        )));
    }
    let h1 = default_h1(theta, &input.jump_params)?;
    if i == 1 {
        return Ok(h1);
    }
    let path = h_recursion(theta, &input.rv[..i - 1], &input.jv[..i - 1], h1)?;
    let last = i - 2;
    Ok(theta.omega_g
        + theta.gamma * path[last]
        + theta.alpha_g * input.rv[last].max(T::zero())
        + theta.beta_g * input.jv[last].max(T::zero()))
}

/// Mean squared prediction error over 1-based days `origin+1..=n`.
pub fn mspe<T: Scalar>(predictions: &[T], actuals: &[T], origin: usize) -> Result<T> {
    if predictions.len() != actuals.len() {
        return Err(Error::DimensionMismatch {
            what: "predictions vs actuals",
            left: predictions.len(),
            right: actuals.len(),
        });
    }
    if origin >= predictions.len() {
        return Err(Error::InvalidInput(format!(
            "empty evaluation window: origin {origin} with {} days",
            predictions.len()
        )));
    }
    let window = &predictions[origin..];
    let sum: T = window
        .iter()
        .zip(&actuals[origin..])
        .map(|(p, a)| (*p - *a) * (*p - *a))
        .sum();
    Ok(sum / T::from_count(window.len()))
}

/// EWMA of past realized variances: `s_2 = RV_1`,
/// `s_i = lambda s_{i-1} + (1 - lambda) RV_{i-1}`; entry `i-1` holds `s_i`
/// (entry 0 repeats `RV_1`).
pub fn ewma_forecasts<T: Scalar>(rv: &[T], lambda: T) -> Vec<T> {
    let mut out = Vec::with_capacity(rv.len());
    let Some(&first) = rv.first() else {
        return out;
    };
    let mut s = first;
    out.push(first);
    for i in 1..rv.len() {
        if i > 1 {
            s = lambda * s + (T::one() - lambda) * rv[i - 1];
        }
        out.push(s);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Predictor {
    Model(Mode),
    /// Previous day's realized variance.
    RvBaseline,
    Ewma,
}

impl Predictor {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "hl" => Ok(Self::Model(Mode::Hl)),
            "hlo" => Ok(Self::Model(Mode::Hlo)),
            "rv" => Ok(Self::RvBaseline),
            "ewma" => Ok(Self::Ewma),
            other => Err(Error::Config(format!("unknown predictor {other:?} (hl|hlo|rv|ewma)"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Model(Mode::Hl) => "HL",
            Self::Model(Mode::Hlo) => "HLO",
            Self::RvBaseline => "RV",
            Self::Ewma => "EWMA",
        }
    }
}

impl fmt::Display for Predictor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// What forecasts are scored against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Truth {
    /// Simulated conditional volatility.
    Oracle,
    /// Same-day realized variance.
    Proxy,
}

impl Truth {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "oracle" => Ok(Self::Oracle),
            "proxy" => Ok(Self::Proxy),
            other => Err(Error::Config(format!("unknown truth {other:?} (oracle|proxy)"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Oracle => "oracle",
            Self::Proxy => "proxy",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BacktestConfig {
    /// Forecast origins; each scores days `origin+1..=n`.
    pub origins: Vec<usize>,
    pub refit_every: usize,
    pub predictors: Vec<Predictor>,
    pub truth: Truth,
    pub fit: FitConfig,
    /// Start each refit from the previous estimate.
    pub warm_start: bool,
    pub ewma_lambda: f64,
}

impl BacktestConfig {
    /// Single origin `n - 20` scored against the simulated truth.
    pub fn simulation(n: usize) -> Self {
        Self {
            origins: vec![n.saturating_sub(20)],
            refit_every: 1,
            predictors: vec![Predictor::Model(Mode::Hl), Predictor::Model(Mode::Hlo), Predictor::RvBaseline],
            truth: Truth::Oracle,
            fit: FitConfig { compute_se: false, ..FitConfig::default() },
            warm_start: true,
            ewma_lambda: 0.94,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.refit_every == 0 {
            return Err(Error::Config("refit_every must be >= 1".into()));
        }
        if !(self.ewma_lambda > 0.0 && self.ewma_lambda < 1.0) {
            return Err(Error::Config("ewma lambda must lie in (0, 1)".into()));
        }
        if self.origins.is_empty() || self.predictors.is_empty() {
            return Err(Error::Config("backtest needs at least one origin and one predictor".into()));
        }
        for &h in &self.origins {
            if h < 1 || h + 1 > n {
                return Err(Error::InvalidInput(format!(
                    "origin {h} invalid for {n} days (need 1 <= h < n)"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DayPrediction {
    pub origin: usize,
    /// 1-based day.
    pub day: usize,
    pub predictor: Predictor,
    pub predicted: f64,
    pub actual: f64,
    /// The refit failed and the last good estimate was used.
    pub fallback: bool,
    /// No usable estimate; the day is left out of the MSPE.
    pub excluded: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MspeRow {
    pub origin: usize,
    pub predictor: Predictor,
    pub mspe: f64,
    pub scored: usize,
    pub excluded: usize,
    pub fallbacks: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BacktestReport {
    pub truth: Truth,
    pub rows: Vec<MspeRow>,
    pub predictions: Vec<DayPrediction>,
}

impl BacktestReport {
    pub fn mspe(&self, origin: usize, predictor: Predictor) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.origin == origin && r.predictor == predictor)
            .map(|r| r.mspe)
    }
}

fn model_predictions(
    mode: Mode,
    origin: usize,
    input: &EstimationInput<f64>,
    cfg: &BacktestConfig,
) -> Vec<(f64, bool, bool)> {
    let n = input.n();
    let mut last: Option<Vec<f64>> = None;
    let mut current: Option<GarchParams<f64>> = None;
    let mut fell_back = false;
    let mut out = Vec::with_capacity(n - origin);
    for (k, day) in (origin + 1..=n).enumerate() {
        if k % cfg.refit_every == 0 {
            let window = input.slice(0..day - 1);
            let mut fc = cfg.fit.clone();
            if cfg.warm_start {
                if let Some(prev) = &last {
                    fc.starts = vec![prev.clone()];
                }
            }
            match fit(&window, mode, &fc) {
                Ok(r) => {
                    current = Some(r.theta);
                    last = Some(r.params());
                    fell_back = false;
                }
                Err(_) => fell_back = current.is_some(),
            }
        }
        match current.as_ref().map(|t| predict_h(t, input, day)) {
            Some(Ok(p)) if p.is_finite() => out.push((p, fell_back, false)),
            _ => out.push((f64::NAN, fell_back, true)),
        }
    }
    out
}

/// Expanding-window backtest: for every origin `h` and day `i > h`, refit
/// on days `1..i-1`, forecast day `i` and score against the chosen truth.
pub fn rolling_backtest(
    cfg: &BacktestConfig,
    input: &EstimationInput<f64>,
    true_h: Option<&[f64]>,
) -> Result<BacktestReport> {
    let n = input.n();
    cfg.validate(n)?;
    let actual: Vec<f64> = match cfg.truth {
        Truth::Oracle => {
            let t = true_h.ok_or_else(|| {
                Error::MissingInput("oracle scoring needs the simulated conditional volatility".into())
            })?;
            if t.len() != n {
                return Err(Error::DimensionMismatch {
                    what: "true_h vs days",
                    left: t.len(),
                    right: n,
                });
            }
            t.to_vec()
        }
        Truth::Proxy => input.rv.clone(),
    };
    let ewma = ewma_forecasts(&input.rv, cfg.ewma_lambda);

    let jobs: Vec<(usize, Predictor)> = cfg
        .origins
        .iter()
        .flat_map(|&o| cfg.predictors.iter().map(move |&p| (o, p)))
        .collect();
    let per_job: Vec<(usize, Predictor, Vec<(f64, bool, bool)>)> = jobs
        .par_iter()
        .map(|&(origin, pred)| {
            let preds = match pred {
                Predictor::Model(mode) => model_predictions(mode, origin, input, cfg),
                Predictor::RvBaseline => (origin + 1..=n).map(|d| (input.rv[d - 2], false, false)).collect(),
                Predictor::Ewma => (origin + 1..=n).map(|d| (ewma[d - 1], false, false)).collect(),
            };
            (origin, pred, preds)
        })
        .collect();

    let mut rows = Vec::new();
    let mut predictions = Vec::new();
    for (origin, predictor, preds) in per_job {
        let (mut sum, mut scored, mut excluded, mut fallbacks) = (0.0, 0, 0, 0);
        for (k, (p, fb, ex)) in preds.into_iter().enumerate() {
            let day = origin + 1 + k;
            let a = actual[day - 1];
            if ex {
                excluded += 1;
            } else {
                sum += (p - a).powi(2);
                scored += 1;
            }
            fallbacks += fb as usize;
            predictions.push(DayPrediction {
                origin,
                day,
                predictor,
                predicted: p,
                actual: a,
                fallback: fb,
                excluded: ex,
            });
        }
        let mspe = if scored > 0 { sum / scored as f64 } else { f64::NAN };
        rows.push(MspeRow {
            origin,
            predictor,
            mspe,
            scored,
            excluded,
            fallbacks,
        });
    }
    Ok(BacktestReport {
        truth: cfg.truth,
        rows,
        predictions,
    })
}
