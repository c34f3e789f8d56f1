//! Monte-Carlo studies over `(n, m)` grids: jump-parameter recovery,
//! QMLE accuracy and forecast MSPE, aggregated per cell.
//!
//! Replication `r` uses the same seed in every cell, so smaller `n` are
//! prefixes of larger ones and cells are paired.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::forecast::{rolling_backtest, BacktestConfig, Predictor, Truth};
use crate::model::{derive_garch_params, FullParams};
use crate::qmle::{fit, loglik, EstimationInput, FitConfig, Mode};
use crate::realized::{estimate_jump_params, measure_day, MeasureConfig};
use crate::simulator::{default_substeps, replication_seed, SimConfig, Simulator};

#[derive(Debug, Clone, PartialEq)]
pub struct McConfig {
    pub ns: Vec<usize>,
    pub ms: Vec<usize>,
    pub replications: usize,
    pub base_seed: u64,
    /// Design template; `n_days`, `ticks_per_day`, substeps and seed are set per cell.
    pub design: SimConfig,
    pub measure: MeasureConfig,
    pub fit: FitConfig,
    pub estimate_hl: bool,
    pub estimate_hlo: bool,
    pub standard_errors: bool,
    pub backtest: bool,
    /// Forecast window length; the origin is `n - forecast_days`.
    pub forecast_days: usize,
}

impl McConfig {
    pub fn reference(ns: Vec<usize>, ms: Vec<usize>, replications: usize, base_seed: u64) -> Self {
        Self {
            ns,
            ms,
            replications,
            base_seed,
            design: SimConfig::reference(1, 390, base_seed),
            measure: MeasureConfig::default(),
            fit: FitConfig { compute_se: false, ..FitConfig::default() },
            estimate_hl: true,
            estimate_hlo: true,
            standard_errors: false,
            backtest: false,
            forecast_days: 20,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ns.is_empty() || self.ms.is_empty() || self.replications == 0 {
            return Err(Error::Config("mc study needs n values, m values and replications".into()));
        }
        if self.backtest && self.ns.iter().any(|&n| n <= self.forecast_days + 10) {
            return Err(Error::Config(format!(
                "every n must exceed the forecast window ({}) by more than 10 days",
                self.forecast_days
            )));
        }
        self.design.structural.validate()?;
        self.design.jumps.validate()
    }

    /// True `phi`, with `theta` mapped from the structural design.
    pub fn true_params(&self) -> Result<FullParams<f64>> {
        Ok(FullParams {
            theta: derive_garch_params(&self.design.structural, &self.design.jumps)?,
            link: self.design.link,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitSummary {
    pub params: Vec<f64>,
    pub std_errors: Option<Vec<f64>>,
    pub converged: bool,
    pub loglik_hat: f64,
    pub loglik_true: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationOutcome {
    pub n: usize,
    pub m: usize,
    pub rep: usize,
    pub seed: u64,
    pub lambda_hat: f64,
    pub omega_l_hat: f64,
    pub true_jumps: usize,
    pub detected_true_jumps: usize,
    pub spurious_detections: usize,
    /// Sum over days of `(RV_i - IV_i)^2`.
    pub rv_sq_err: f64,
    pub mean_true_h: f64,
    pub hl: Option<FitSummary>,
    pub hlo: Option<FitSummary>,
    pub mspe: Vec<(Predictor, f64)>,
    pub floored_substeps: usize,
}

/// Daily series produced while streaming one simulated panel.
struct Panel {
    rv: Vec<f64>,
    jv: Vec<f64>,
    nv: Vec<f64>,
    true_iv: Vec<f64>,
    true_h: Vec<f64>,
    detections: Vec<Vec<crate::realized::JumpDetection<f64>>>,
    true_jumps: usize,
    detected_true: usize,
    spurious: usize,
    floored: usize,
}

fn stream_panel(sim_cfg: SimConfig, measure: &MeasureConfig) -> Result<Panel> {
    let n = sim_cfg.n_days;
    let m = sim_cfg.ticks_per_day;
    let mut p = Panel {
        rv: Vec::with_capacity(n),
        jv: Vec::with_capacity(n),
        nv: Vec::with_capacity(n),
        true_iv: Vec::with_capacity(n),
        true_h: Vec::with_capacity(n),
        detections: Vec::with_capacity(n),
        true_jumps: 0,
        detected_true: 0,
        spurious: 0,
        floored: 0,
    };
    for day in Simulator::new(sim_cfg)? {
        let day = day?;
        let (meas, det) = measure_day(&day.ticks, measure)?;
        let truth: Vec<usize> = day.jumps.iter().map(|j| j.tick_interval(m)).collect();
        p.true_jumps += truth.len();
        p.detected_true += truth.iter().filter(|t| det.iter().any(|d| d.interval == **t)).count();
        p.spurious += det.iter().filter(|d| !truth.contains(&d.interval)).count();
        p.rv.push(meas.rv);
        p.jv.push(meas.jv);
        p.nv.push(day.nv);
        p.true_iv.push(day.true_iv);
        p.true_h.push(day.true_h);
        p.detections.push(det);
        p.floored += day.floored_substeps;
    }
    Ok(p)
}

fn summarize_fit(
    mode: Mode,
    input: &EstimationInput<f64>,
    truth: &[f64],
    cfg: &FitConfig,
) -> Result<FitSummary> {
    let r = fit(input, mode, cfg)?;
    let loglik_true = loglik(mode, &truth[..mode.dim()], input).unwrap_or(f64::NEG_INFINITY);
    Ok(FitSummary {
        params: r.params(),
        std_errors: r.std_errors().map(|s| s.to_vec()),
        converged: r.converged,
        loglik_hat: r.loglik,
        loglik_true,
    })
}

/// Simulates, measures and estimates one replication of cell `(n, m)`.
pub fn run_replication(cfg: &McConfig, n: usize, m: usize, rep: usize) -> Result<ReplicationOutcome> {
    let seed = replication_seed(cfg.base_seed, rep as u64);
    let sim_cfg = SimConfig {
        n_days: n,
        ticks_per_day: m,
        euler_substeps_per_tick: default_substeps(m),
        seed,
        ..cfg.design.clone()
    };
    let panel = stream_panel(sim_cfg, &cfg.measure)?;
    let jump_params = estimate_jump_params(&panel.detections);
    let nv = Some(panel.nv.iter().map(|v| Some(*v)).collect());
    let input = EstimationInput::new(panel.rv.clone(), panel.jv.clone(), nv, jump_params)?;
    let truth = cfg.true_params()?.to_array();
    let fit_cfg = FitConfig {
        seed,
        compute_se: cfg.standard_errors,
        ..cfg.fit.clone()
    };
    let hl = if cfg.estimate_hl {
        Some(summarize_fit(Mode::Hl, &input, &truth, &fit_cfg)?)
    } else {
        None
    };
    let hlo = if cfg.estimate_hlo {
        Some(summarize_fit(Mode::Hlo, &input, &truth, &fit_cfg)?)
    } else {
        None
    };
    let mspe = if cfg.backtest {
        let mut predictors = Vec::new();
        if cfg.estimate_hl {
            predictors.push(Predictor::Model(Mode::Hl));
        }
        if cfg.estimate_hlo {
            predictors.push(Predictor::Model(Mode::Hlo));
        }
        predictors.push(Predictor::RvBaseline);
        let bt = BacktestConfig {
            origins: vec![n - cfg.forecast_days],
            predictors: predictors.clone(),
            truth: Truth::Oracle,
            fit: FitConfig {
                seed,
                compute_se: false,
                ..cfg.fit.clone()
            },
            ..BacktestConfig::simulation(n)
        };
        let rep = rolling_backtest(&bt, &input, Some(&panel.true_h))?;
        rep.rows.iter().map(|r| (r.predictor, r.mspe)).collect()
    } else {
        Vec::new()
    };
    let rv_sq_err = panel
        .rv
        .iter()
        .zip(&panel.true_iv)
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    Ok(ReplicationOutcome {
        n,
        m,
        rep,
        seed,
        lambda_hat: jump_params.lambda,
        omega_l_hat: jump_params.omega_l,
        true_jumps: panel.true_jumps,
        detected_true_jumps: panel.detected_true,
        spurious_detections: panel.spurious,
        rv_sq_err,
        mean_true_h: panel.true_h.iter().sum::<f64>() / n as f64,
        hl,
        hlo,
        mspe,
        floored_substeps: panel.floored,
    })
}

/// Aggregates of one `(n, m)` cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub n: usize,
    pub m: usize,
    pub replications: usize,
    pub failures: usize,
    pub mse_lambda: f64,
    pub mse_omega_l: f64,
    pub mean_lambda_hat: f64,
    pub rv_rmse: f64,
    pub recall: f64,
    pub spurious_per_day: f64,
    pub mean_true_h: f64,
    /// Per-coordinate MSE of the HL estimates.
    pub mse_hl: Option<Vec<f64>>,
    /// Per-coordinate MSE of the HLO estimates; the last entry is on the
    /// `sigma_e` scale.
    pub mse_hlo: Option<Vec<f64>>,
    pub coverage_gamma_hl: Option<f64>,
    pub converged_share: f64,
    /// Share of fits with `L(theta_hat) >= L(theta_0)`.
    pub likelihood_dominance: f64,
    pub mspe: Vec<(Predictor, f64)>,
}

fn mse_of(fits: &[&FitSummary], truth: &[f64], sigma_scale_last: bool) -> Vec<f64> {
    let d = truth.len();
    let mut out = vec![0.0; d];
    for f in fits {
        for j in 0..d {
            let (est, tru) = if sigma_scale_last && j == 6 {
                (f.params[j].sqrt(), truth[j].sqrt())
            } else {
                (f.params[j], truth[j])
            };
            out[j] += (est - tru).powi(2) / fits.len() as f64;
        }
    }
    out
}

pub fn summarize(cfg: &McConfig, outcomes: &[Result<ReplicationOutcome>]) -> Result<Vec<CellSummary>> {
    let truth = cfg.true_params()?.to_array();
    let mut cells: BTreeMap<(usize, usize), (Vec<&ReplicationOutcome>, usize)> = BTreeMap::new();
    for &n in &cfg.ns {
        for &m in &cfg.ms {
            cells.insert((n, m), (Vec::new(), 0));
        }
    }
    let tasks = tasks(cfg);
    for (task, out) in tasks.iter().zip(outcomes) {
        let entry = cells.entry((task.0, task.1)).or_default();
        match out {
            Ok(o) => entry.0.push(o),
            Err(_) => entry.1 += 1,
        }
    }
    let mut rows = Vec::new();
    for ((n, m), (reps, failures)) in cells {
        let k = reps.len().max(1) as f64;
        let lambda = cfg.design.jumps.lambda;
        let omega_l = cfg.design.jumps.omega_l;
        let days = (reps.len() * n).max(1) as f64;
        let true_jumps: usize = reps.iter().map(|o| o.true_jumps).sum();
        let hl: Vec<&FitSummary> = reps.iter().filter_map(|o| o.hl.as_ref()).collect();
        let hlo: Vec<&FitSummary> = reps.iter().filter_map(|o| o.hlo.as_ref()).collect();
        let all_fits: Vec<&&FitSummary> = hl.iter().chain(hlo.iter()).collect();
        let coverage = {
            let with_se: Vec<_> = hl
                .iter()
                .filter_map(|f| f.std_errors.as_ref().map(|s| (f.params[3], s[3])))
                .collect();
            (!with_se.is_empty()).then(|| {
                with_se
                    .iter()
                    .filter(|(g, se)| (g - truth[3]).abs() <= 1.959_963_984_540_054 * se)
                    .count() as f64
                    / with_se.len() as f64
            })
        };
        let mut mspe: BTreeMap<&'static str, (Predictor, f64, usize)> = BTreeMap::new();
        for o in &reps {
            for (p, v) in &o.mspe {
                if v.is_finite() {
                    let e = mspe.entry(p.name()).or_insert((*p, 0.0, 0));
                    e.1 += v;
                    e.2 += 1;
                }
            }
        }
        rows.push(CellSummary {
            n,
            m,
            replications: reps.len(),
            failures,
            mse_lambda: reps.iter().map(|o| (o.lambda_hat - lambda).powi(2)).sum::<f64>() / k,
            mse_omega_l: reps.iter().map(|o| (o.omega_l_hat - omega_l).powi(2)).sum::<f64>() / k,
            mean_lambda_hat: reps.iter().map(|o| o.lambda_hat).sum::<f64>() / k,
            rv_rmse: (reps.iter().map(|o| o.rv_sq_err).sum::<f64>() / days).sqrt(),
            recall: if true_jumps > 0 {
                reps.iter().map(|o| o.detected_true_jumps).sum::<usize>() as f64 / true_jumps as f64
            } else {
                f64::NAN
            },
            spurious_per_day: reps.iter().map(|o| o.spurious_detections).sum::<usize>() as f64 / days,
            mean_true_h: reps.iter().map(|o| o.mean_true_h).sum::<f64>() / k,
            mse_hl: (!hl.is_empty()).then(|| mse_of(&hl, &truth[..4], false)),
            mse_hlo: (!hlo.is_empty()).then(|| mse_of(&hlo, &truth, true)),
            coverage_gamma_hl: coverage,
            converged_share: if all_fits.is_empty() {
                f64::NAN
            } else {
                all_fits.iter().filter(|f| f.converged).count() as f64 / all_fits.len() as f64
            },
            likelihood_dominance: if all_fits.is_empty() {
                f64::NAN
            } else {
                all_fits
                    .iter()
                    .filter(|f| f.loglik_hat >= f.loglik_true)
                    .count() as f64
                    / all_fits.len() as f64
            },
            mspe: mspe.into_values().map(|(p, s, c)| (p, s / c as f64)).collect(),
        });
    }
    Ok(rows)
}

fn tasks(cfg: &McConfig) -> Vec<(usize, usize, usize)> {
    let mut t = Vec::new();
    for &n in &cfg.ns {
        for &m in &cfg.ms {
            for r in 0..cfg.replications {
                t.push((n, m, r));
            }
        }
    }
    t
}

#[derive(Debug)]
pub struct StudyResult {
    pub outcomes: Vec<Result<ReplicationOutcome>>,
    pub cells: Vec<CellSummary>,
}

/// Runs every `(n, m, replication)` task in parallel and aggregates.
pub fn run_study(cfg: &McConfig) -> Result<StudyResult> {
    cfg.validate()?;
    let outcomes: Vec<Result<ReplicationOutcome>> = tasks(cfg)
        .par_iter()
        .map(|&(n, m, r)| run_replication(cfg, n, m, r))
        .collect();
    let cells = summarize(cfg, &outcomes)?;
    Ok(StudyResult { outcomes, cells })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_study_runs_and_pairs_cells() {
        let mut cfg = McConfig::reference(vec![40, 60], vec![100], 2, 7);
        cfg.backtest = true;
        cfg.forecast_days = 5;
        cfg.fit.n_starts = 2;
        let res = run_study(&cfg).unwrap();
        assert_eq!(res.outcomes.len(), 4);
        assert_eq!(res.cells.len(), 2);
        let o: Vec<_> = res.outcomes.iter().map(|o| o.as_ref().unwrap()).collect();
        // same replication seed across n
        assert_eq!(o[0].seed, o[2].seed);
        for c in &res.cells {
            assert_eq!(c.failures, 0);
            assert_eq!(c.mspe.len(), 3);
            assert_eq!(c.mse_hl.as_ref().unwrap().len(), 4);
            assert_eq!(c.mse_hlo.as_ref().unwrap().len(), 7);
        }
    }

    #[test]
    fn invalid_study_rejected() {
        let mut cfg = McConfig::reference(vec![20], vec![100], 1, 1);
        cfg.backtest = true;
        assert!(run_study(&cfg).is_err());
        let cfg = McConfig::reference(vec![], vec![100], 1, 1);
        assert!(cfg.validate().is_err());
    }
}
