//! Quasi-likelihoods on daily realized measures (and option-implied
//! variances), their maximization and sandwich standard errors.

use std::fmt;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{default_h1, h_recursion_into, FullParams, GarchParams, JumpParams, OptionLinkParams};
use crate::optim::{nelder_mead, NelderMeadConfig};
use crate::scalar::{floor_variance, Scalar};

/// Share of days with an option-implied variance required by HLO fits.
pub const MIN_NV_AVAILABILITY: f64 = 0.9;

/// Daily inputs: `nv[d]` is the option quote paired with `h[d]`, i.e. the
/// one observed at the close of the previous day.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimationInput<T> {
    pub rv: Vec<T>,
    pub jv: Vec<T>,
    pub nv: Option<Vec<Option<T>>>,
    pub jump_params: JumpParams<T>,
}

impl<T: Scalar> EstimationInput<T> {
    /// Validates alignment; `rv` is floored at the variance floor and `jv`
    /// at zero.
    pub fn new(rv: Vec<T>, jv: Vec<T>, nv: Option<Vec<Option<T>>>, jump_params: JumpParams<T>) -> Result<Self> {
        if rv.len() != jv.len() {
            return Err(Error::DimensionMismatch {
                what: "rv vs jv",
                left: rv.len(),
                right: jv.len(),
            });
        }
        if let Some(nv) = &nv {
            if nv.len() != rv.len() {
                return Err(Error::DimensionMismatch {
                    what: "rv vs nv",
                    left: rv.len(),
                    right: nv.len(),
                });
            }
        }
        if rv.is_empty() {
            return Err(Error::InvalidInput("estimation input has no days".into()));
        }
        for (i, (r, j)) in rv.iter().zip(&jv).enumerate() {
            if !r.is_finite() || !j.is_finite() {
                return Err(Error::NonFinite { day: i + 1 });
            }
        }
        let rv = rv.into_iter().map(floor_variance).collect();
        let jv = jv.into_iter().map(|j| j.max(T::zero())).collect();
        Ok(Self { rv, jv, nv, jump_params })
    }

    pub fn n(&self) -> usize {
        self.rv.len()
    }

    /// Share of days carrying a finite option-implied variance.
    pub fn nv_availability(&self) -> f64 {
        match &self.nv {
            None => 0.0,
            Some(nv) => {
                nv.iter().filter(|v| v.is_some_and(|x| x.is_finite())).count() as f64 / nv.len() as f64
            }
        }
    }

    /// Copy restricted to days `range`.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            rv: self.rv[range.clone()].to_vec(),
            jv: self.jv[range.clone()].to_vec(),
            nv: self.nv.as_ref().map(|v| v[range].to_vec()),
            jump_params: self.jump_params,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Hl,
    Hlo,
}

impl Mode {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "hl" => Ok(Self::Hl),
            "hlo" => Ok(Self::Hlo),
            other => Err(Error::Config(format!("unknown estimation mode {other:?} (hl|hlo)"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Hl => "HL",
            Self::Hlo => "HLO",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Hl => GarchParams::<f64>::DIM,
            Self::Hlo => FullParams::<f64>::DIM,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn conditional_path<T: Scalar>(theta: &GarchParams<T>, input: &EstimationInput<T>, h: &mut Vec<T>) -> Result<()> {
    let h1 = default_h1(theta, &input.jump_params)?;
    h_recursion_into(theta, &input.rv, &input.jv, h1, h)
}

/// Per-day contributions `-(log h_i + RV_i / h_i)`.
pub fn loglik_gh_terms<T: Scalar>(theta: &GarchParams<T>, input: &EstimationInput<T>) -> Result<Vec<T>> {
    let mut h = Vec::with_capacity(input.n());
    conditional_path(theta, input, &mut h)?;
    h.iter()
        .zip(&input.rv)
        .enumerate()
        .map(|(i, (&hi, &rv))| {
            let v = -(hi.ln() + rv / hi);
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::NonFinite { day: i + 1 })
            }
        })
        .collect()
}

/// `-sum_i (log h_i + RV_i / h_i)`.
pub fn loglik_gh<T: Scalar>(theta: &GarchParams<T>, input: &EstimationInput<T>) -> Result<T> {
    Ok(loglik_gh_terms(theta, input)?.into_iter().sum())
}

/// Per-day contributions of the joint likelihood; days without an option
/// quote carry only the realized term.
pub fn loglik_gho_terms<T: Scalar>(phi: &FullParams<T>, input: &EstimationInput<T>) -> Result<Vec<T>> {
    let nv = input.nv.as_ref().ok_or_else(|| {
        Error::MissingInput("no option-implied variances; use the HL likelihood".into())
    })?;
    if !nv.iter().any(|v| v.is_some()) {
        return Err(Error::MissingInput(
            "option-implied variance missing on every day; use the HL likelihood".into(),
        ));
    }
    let link = &phi.link;
    if !(link.sigma_e2 > T::zero()) {
        return Err(Error::Domain("sigma_e2 must be > 0".into()));
    }
    let mut h = Vec::with_capacity(input.n());
    conditional_path(&phi.theta, input, &mut h)?;
    let log_s2 = link.sigma_e2.ln();
    h.iter()
        .zip(&input.rv)
        .zip(nv)
        .enumerate()
        .map(|(i, ((&hi, &rv), nvi))| {
            let mut v = -(hi.ln() + rv / hi);
            if let Some(q) = nvi {
                let e = *q - link.b - link.a * hi;
                v = v - (log_s2 + e * e / link.sigma_e2);
            }
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::NonFinite { day: i + 1 })
            }
        })
        .collect()
}

/// Realized block plus `-sum [log sigma_e^2 + (NV - b - a h)^2 / sigma_e^2]`
/// over days with a quote.
pub fn loglik_gho<T: Scalar>(phi: &FullParams<T>, input: &EstimationInput<T>) -> Result<T> {
    Ok(loglik_gho_terms(phi, input)?.into_iter().sum())
}

fn split(mode: Mode, p: &[f64]) -> (GarchParams<f64>, Option<OptionLinkParams<f64>>) {
    let theta = GarchParams::from_slice(&p[..4]);
    match mode {
        Mode::Hl => (theta, None),
        Mode::Hlo => (theta, Some(FullParams::from_slice(p).link)),
    }
}

/// Per-day likelihood terms at natural parameters `p` (length 4 or 7).
pub fn loglik_terms(mode: Mode, p: &[f64], input: &EstimationInput<f64>) -> Result<Vec<f64>> {
    match mode {
        Mode::Hl => loglik_gh_terms(&GarchParams::from_slice(p), input),
        Mode::Hlo => loglik_gho_terms(&FullParams::from_slice(p), input),
    }
}

pub fn loglik(mode: Mode, p: &[f64], input: &EstimationInput<f64>) -> Result<f64> {
    Ok(loglik_terms(mode, p, input)?.iter().sum())
}

/// Parameter boxes; `persistence_cap` bounds `alpha_g + gamma`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamBoxes {
    pub omega_g: (f64, f64),
    pub alpha_g: (f64, f64),
    pub beta_g: (f64, f64),
    pub gamma: (f64, f64),
    pub a: (f64, f64),
    pub b: (f64, f64),
    pub sigma_e2: (f64, f64),
    pub persistence_cap: f64,
}

impl Default for ParamBoxes {
    fn default() -> Self {
        Self {
            omega_g: (1e-10, 1e3),
            alpha_g: (1e-6, 0.999),
            beta_g: (1e-6, 1e2),
            gamma: (1e-6, 0.999),
            a: (1e-4, 1e2),
            b: (1e-10, 1e3),
            sigma_e2: (1e-20, 1e3),
            persistence_cap: 0.9999,
        }
    }
}

const FRACTION_CLAMP: f64 = 1e-12;

fn sigmoid(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(FRACTION_CLAMP, 1.0 - FRACTION_CLAMP);
    (p / (1.0 - p)).ln()
}

fn log_box_to(u: f64, (lo, hi): (f64, f64)) -> f64 {
    (lo.ln() + (hi.ln() - lo.ln()) * sigmoid(u)).exp().clamp(lo, hi)
}

fn log_box_from(x: f64, (lo, hi): (f64, f64)) -> f64 {
    logit((x.max(lo).ln() - lo.ln()) / (hi.ln() - lo.ln()))
}

impl ParamBoxes {
    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [
            ("omega_g", self.omega_g),
            ("alpha_g", self.alpha_g),
            ("beta_g", self.beta_g),
            ("gamma", self.gamma),
            ("a", self.a),
            ("b", self.b),
            ("sigma_e2", self.sigma_e2),
        ] {
            if !(lo > 0.0 && hi > lo && hi.is_finite()) {
                return Err(Error::Config(format!("box for {name} must satisfy 0 < lo < hi < inf")));
            }
        }
        if !(self.persistence_cap <= 1.0 && self.persistence_cap - self.gamma.0 > self.alpha_g.0) {
            return Err(Error::Config(
                "persistence cap must be <= 1 and exceed the lower bounds of alpha_g and gamma combined".into(),
            ));
        }
        Ok(())
    }

    /// Range of `alpha_g` that leaves room for `gamma` under the cap.
    fn alpha_range(&self) -> (f64, f64) {
        let (lo, hi) = self.alpha_g;
        (lo, hi.min(self.persistence_cap - self.gamma.0))
    }

    fn gamma_hi(&self, alpha: f64) -> f64 {
        self.gamma.1.min(self.persistence_cap - alpha)
    }

    /// Maps unconstrained coordinates to natural parameters inside the boxes.
    pub fn to_natural(&self, u: &[f64]) -> Vec<f64> {
        let (alo, ahi) = self.alpha_range();
        let alpha = alo + (ahi - alo) * sigmoid(u[1]);
        let glo = self.gamma.0;
        let gamma = glo + (self.gamma_hi(alpha) - glo) * sigmoid(u[3]);
        let mut p = vec![
            log_box_to(u[0], self.omega_g),
            alpha,
            log_box_to(u[2], self.beta_g),
            gamma,
        ];
        if u.len() == 7 {
            p.push(log_box_to(u[4], self.a));
            p.push(log_box_to(u[5], self.b));
            p.push(log_box_to(u[6], self.sigma_e2));
        }
        p
    }

    /// Inverse of [`Self::to_natural`]; points outside the boxes are clamped.
    pub fn to_unconstrained(&self, p: &[f64]) -> Vec<f64> {
        let (alo, ahi) = self.alpha_range();
        let alpha = p[1].clamp(alo, ahi);
        let glo = self.gamma.0;
        let mut u = vec![
            log_box_from(p[0], self.omega_g),
            logit((alpha - alo) / (ahi - alo)),
            log_box_from(p[2], self.beta_g),
            logit((p[3] - glo) / (self.gamma_hi(alpha) - glo)),
        ];
        if p.len() == 7 {
            u.push(log_box_from(p[4], self.a));
            u.push(log_box_from(p[5], self.b));
            u.push(log_box_from(p[6], self.sigma_e2));
        }
        u
    }

    /// Projects natural parameters into the boxes.
    pub fn clamp(&self, p: &[f64]) -> Vec<f64> {
        self.to_natural(&self.to_unconstrained(p))
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        let inside = |x: f64, (lo, hi): (f64, f64)| x >= lo && x <= hi;
        let base = inside(p[0], self.omega_g)
            && inside(p[1], self.alpha_g)
            && inside(p[2], self.beta_g)
            && inside(p[3], self.gamma)
            && p[1] + p[3] <= self.persistence_cap + 1e-12;
        base && (p.len() == 4
            || (inside(p[4], self.a) && inside(p[5], self.b) && inside(p[6], self.sigma_e2)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub boxes: ParamBoxes,
    pub n_starts: usize,
    pub jitter_sd: f64,
    pub seed: u64,
    pub optimizer: NelderMeadConfig,
    /// Explicit natural-coordinate starts; when non-empty they replace the
    /// moment-matched and jittered starts.
    pub starts: Vec<Vec<f64>>,
    pub agreement_tol: f64,
    pub compute_se: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            boxes: ParamBoxes::default(),
            n_starts: 5,
            jitter_sd: 0.3,
            seed: 0,
            optimizer: NelderMeadConfig::default(),
            starts: Vec::new(),
            agreement_tol: 1e-4,
            compute_se: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sandwich {
    pub covariance: DMatrix<f64>,
    pub std_errors: Vec<f64>,
    /// Hessian block `B` was not positive definite; a pseudo-inverse was used.
    pub pseudo_inverse: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub mode: Mode,
    pub theta: GarchParams<f64>,
    pub link: Option<OptionLinkParams<f64>>,
    /// Unnormalized quasi-likelihood at the maximizer.
    pub loglik: f64,
    pub converged: bool,
    pub n_evals: usize,
    pub starts_used: usize,
    /// Largest coordinate gap between the two best starts.
    pub start_gap: f64,
    pub sandwich: Option<Sandwich>,
}

impl FitResult {
    /// Natural parameters in `(omega_g, alpha_g, beta_g, gamma[, a, b, sigma_e2])` order.
    pub fn params(&self) -> Vec<f64> {
        let mut p = self.theta.to_array().to_vec();
        if let Some(l) = &self.link {
            p.extend([l.a, l.b, l.sigma_e2]);
        }
        p
    }

    pub fn std_errors(&self) -> Option<&[f64]> {
        self.sandwich.as_ref().map(|s| s.std_errors.as_slice())
    }
}

/// Names of the natural coordinates for a mode.
pub fn param_names(mode: Mode) -> &'static [&'static str] {
    const NAMES: [&str; 7] = ["omega_g", "alpha_g", "beta_g", "gamma", "a", "b", "sigma_e2"];
    &NAMES[..mode.dim()]
}

/// Moment-matched start: `gamma = 0.3`, `alpha_g = 0.5`, `beta_g = 0.5`,
/// `omega_g` making the stationary mean equal the sample mean of RV.
pub fn moment_start(input: &EstimationInput<f64>, boxes: &ParamBoxes) -> GarchParams<f64> {
    let (gamma, alpha, beta) = (0.3, 0.5, 0.5);
    let mean_rv = input.rv.iter().sum::<f64>() / input.n() as f64;
    let lj = input.jump_params.lambda * input.jump_params.omega_l;
    let omega = ((1.0 - alpha - gamma) * mean_rv - beta * lj).max(boxes.omega_g.0);
    GarchParams::new(omega, alpha, beta, gamma)
}

/// Least-squares link start `NV ~ b + a h` on days with a quote.
pub fn link_start(theta: &GarchParams<f64>, input: &EstimationInput<f64>, boxes: &ParamBoxes) -> OptionLinkParams<f64> {
    let mut h = Vec::new();
    let pairs: Vec<(f64, f64)> = match (&input.nv, conditional_path(theta, input, &mut h)) {
        (Some(nv), Ok(())) => h
            .iter()
            .zip(nv)
            .filter_map(|(&hi, q)| q.filter(|x| x.is_finite()).map(|q| (hi, q)))
            .collect(),
        _ => Vec::new(),
    };
    let fallback = OptionLinkParams { a: 1.0, b: boxes.b.0.max(1e-3), sigma_e2: 1e-2 };
    if pairs.len() < 3 {
        return fallback;
    }
    let n = pairs.len() as f64;
    let (mh, mq) = pairs.iter().fold((0.0, 0.0), |acc, p| (acc.0 + p.0 / n, acc.1 + p.1 / n));
    let sxx: f64 = pairs.iter().map(|p| (p.0 - mh).powi(2)).sum();
    let sxy: f64 = pairs.iter().map(|p| (p.0 - mh) * (p.1 - mq)).sum();
    let a = if sxx > 0.0 { sxy / sxx } else { 1.0 };
    let a = a.clamp(boxes.a.0, boxes.a.1);
    let b = (mq - a * mh).clamp(boxes.b.0, boxes.b.1);
    let s2 = pairs.iter().map(|p| (p.1 - b - a * p.0).powi(2)).sum::<f64>() / n;
    OptionLinkParams { a, b, sigma_e2: s2.clamp(boxes.sigma_e2.0, boxes.sigma_e2.1) }
}

fn default_starts(mode: Mode, input: &EstimationInput<f64>, cfg: &FitConfig) -> Vec<Vec<f64>> {
    let theta = moment_start(input, &cfg.boxes);
    let mut base = theta.to_array().to_vec();
    if mode == Mode::Hlo {
        let l = link_start(&theta, input, &cfg.boxes);
        base.extend([l.a, l.b, l.sigma_e2]);
    }
    let base = cfg.boxes.clamp(&base);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut starts = vec![base.clone()];
    while starts.len() < cfg.n_starts.max(1) {
        let jittered: Vec<f64> = base
            .iter()
            .map(|x| {
                let z: f64 = StandardNormal.sample(&mut rng);
                x * (cfg.jitter_sd * z).exp()
            })
            .collect();
        starts.push(cfg.boxes.clamp(&jittered));
    }
    starts
}

struct StartOutcome {
    params: Vec<f64>,
    objective: f64,
    evals: usize,
}

/// Maximizes the HL or HLO quasi-likelihood over the parameter boxes.
pub fn fit(input: &EstimationInput<f64>, mode: Mode, cfg: &FitConfig) -> Result<FitResult> {
    cfg.boxes.validate()?;
    if mode == Mode::Hlo {
        let avail = input.nv_availability();
        if avail < MIN_NV_AVAILABILITY {
            return Err(Error::InvalidInput(format!(
                "option-implied variance available on {:.1}% of days (need {:.0}%); fit HL instead",
                100.0 * avail,
                100.0 * MIN_NV_AVAILABILITY
            )));
        }
    }
    let dim = mode.dim();
    let starts = if cfg.starts.is_empty() {
        default_starts(mode, input, cfg)
    } else {
        cfg.starts
            .iter()
            .map(|s| {
                if s.len() < dim {
                    Err(Error::InvalidInput(format!("start has {} coordinates, need {dim}", s.len())))
                } else {
                    Ok(cfg.boxes.clamp(&s[..dim]))
                }
            })
            .collect::<Result<_>>()?
    };
    let n = input.n() as f64;
    let objective = |u: &[f64]| {
        let p = cfg.boxes.to_natural(u);
        loglik(mode, &p, input).map(|l| -l / n).unwrap_or(f64::INFINITY)
    };
    let mut outcomes: Vec<StartOutcome> = starts
        .par_iter()
        .map(|s| {
            let r = nelder_mead(objective, &cfg.boxes.to_unconstrained(s), &cfg.optimizer);
            StartOutcome {
                params: cfg.boxes.to_natural(&r.x),
                objective: r.fx,
                evals: r.n_evals,
            }
        })
        .collect();
    let n_evals = outcomes.iter().map(|o| o.evals).sum();
    outcomes.sort_by(|a, b| a.objective.total_cmp(&b.objective));
    let best = &outcomes[0];
    if !best.objective.is_finite() {
        return Err(Error::Numerical(format!(
            "{mode} likelihood non-finite at every start ({} starts)",
            outcomes.len()
        )));
    }
    let start_gap = outcomes
        .get(1)
        .filter(|o| o.objective.is_finite())
        .map(|o| {
            o.params
                .iter()
                .zip(&best.params)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        })
        .unwrap_or(0.0);
    let converged = if outcomes.len() > 1 {
        start_gap <= cfg.agreement_tol
    } else {
        // A lone start counts as converged when it reached the simplex tolerance.
        nelder_mead(objective, &cfg.boxes.to_unconstrained(&best.params), &NelderMeadConfig {
            restarts: 0,
            max_evals: 4 * dim + 8,
            ..cfg.optimizer
        })
        .fx >= best.objective - cfg.optimizer.tol
    };
    let (theta, link) = split(mode, &best.params);
    let mut result = FitResult {
        mode,
        theta,
        link,
        loglik: -best.objective * n,
        converged,
        n_evals,
        starts_used: outcomes.len(),
        start_gap,
        sandwich: None,
    };
    if cfg.compute_se {
        result.sandwich = sandwich_se(&result, input).ok();
    }
    Ok(result)
}

/// Relative step of the Hessian differences of the total score.
pub const HESSIAN_STEP: f64 = 1e-4;

fn step(x: f64, rel: f64) -> f64 {
    rel * x.abs().max(1e-8)
}

/// `n x p` matrix of per-day scores, differentiating the volatility
/// recursion alongside `h`.
pub fn loglik_scores(mode: Mode, p: &[f64], input: &EstimationInput<f64>) -> Result<DMatrix<f64>> {
    let (theta, link) = split(mode, p);
    let nv = match mode {
        Mode::Hl => None,
        Mode::Hlo => {
            let nv = input.nv.as_ref().ok_or_else(|| {
                Error::MissingInput("no option-implied variances; use the HL likelihood".into())
            })?;
            Some(nv)
        }
    };
    if link.is_some_and(|l| !(l.sigma_e2 > 0.0)) {
        return Err(Error::Domain("sigma_e2 must be > 0".into()));
    }
    let n = input.n();
    let mut s = DMatrix::zeros(n, p.len());
    let lj = input.jump_params.lambda * input.jump_params.omega_l;
    let denom = 1.0 - theta.persistence();
    if !(denom > 0.0) {
        return Err(Error::Domain(format!("alpha_g + gamma = {} must be < 1", theta.persistence())));
    }
    let mut h = (theta.omega_g + theta.beta_g * lj) / denom;
    let mut dh = [1.0 / denom, h / denom, lj / denom, h / denom];
    for i in 0..n {
        let rv = input.rv[i];
        if !(h > 0.0) || !h.is_finite() {
            return Err(Error::NonFinite { day: i + 1 });
        }
        let mut dl_dh = (rv - h) / (h * h);
        if let (Some(nv), Some(l)) = (nv, &link) {
            if let Some(q) = nv[i] {
                let e = q - l.b - l.a * h;
                dl_dh += 2.0 * l.a * e / l.sigma_e2;
                s[(i, 4)] = 2.0 * e * h / l.sigma_e2;
                s[(i, 5)] = 2.0 * e / l.sigma_e2;
                s[(i, 6)] = -1.0 / l.sigma_e2 + e * e / (l.sigma_e2 * l.sigma_e2);
            }
        }
        for k in 0..4 {
            s[(i, k)] = dl_dh * dh[k];
        }
        let (r, j) = (rv.max(0.0), input.jv[i].max(0.0));
        dh = [
            1.0 + theta.gamma * dh[0],
            r + theta.gamma * dh[1],
            j + theta.gamma * dh[2],
            h + theta.gamma * dh[3],
        ];
        h = theta.omega_g + theta.gamma * h + theta.alpha_g * r + theta.beta_g * j;
    }
    Ok(s)
}

fn total_score(mode: Mode, p: &[f64], input: &EstimationInput<f64>) -> Result<Vec<f64>> {
    let s = loglik_scores(mode, p, input)?;
    Ok(s.row_sum().iter().copied().collect())
}

/// Hessian of the unnormalized likelihood by differences of the score.
pub fn numeric_hessian(mode: Mode, p: &[f64], input: &EstimationInput<f64>) -> Result<DMatrix<f64>> {
    let d = p.len();
    let mut hess = DMatrix::zeros(d, d);
    for j in 0..d {
        let h = step(p[j], HESSIAN_STEP);
        let mut up = p.to_vec();
        let mut dn = p.to_vec();
        up[j] += h;
        dn[j] -= h;
        let (gu, gd) = (total_score(mode, &up, input)?, total_score(mode, &dn, input)?);
        for k in 0..d {
            hess[(k, j)] = (gu[k] - gd[k]) / (2.0 * h);
        }
    }
    Ok((&hess + hess.transpose()) * 0.5)
}

/// Sandwich covariance `B^-1 A B^-1 / n` in natural coordinates, with
/// `B = -H / n` and `A` the mean outer product of per-day scores.
pub fn sandwich_se(fit: &FitResult, input: &EstimationInput<f64>) -> Result<Sandwich> {
    let p = fit.params();
    let n = input.n() as f64;
    let scores = loglik_scores(fit.mode, &p, input)?;
    let a = scores.transpose() * &scores / n;
    let b = -numeric_hessian(fit.mode, &p, input)? / n;
    let (b_inv, pseudo_inverse) = match b.clone().cholesky() {
        Some(ch) => (ch.inverse(), false),
        None => (
            b.clone()
                .pseudo_inverse(1e-12)
                .map_err(|e| Error::Numerical(format!("sandwich pseudo-inverse failed: {e}")))?,
            true,
        ),
    };
    let covariance = &b_inv * a * &b_inv / n;
    let std_errors = covariance.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect();
    Ok(Sandwich {
        covariance,
        std_errors,
        pseudo_inverse,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hand_input() -> EstimationInput<f64> {
        EstimationInput::new(vec![1.0, 2.0, 1.5], vec![0.1, 0.0, 0.0], None, JumpParams::new(1.0, 0.5, 0.0)).unwrap()
    }

    #[test]
    fn analytic_scores_match_differences() {
        let mut input = EstimationInput::new(
            vec![1.0, 2.0, 1.5, 0.7, 1.1],
            vec![0.1, 0.0, 0.0, 0.05, 0.0],
            Some(vec![Some(0.9), None, Some(1.2), Some(0.8), Some(1.0)]),
            JumpParams::new(2.0, 0.1, 0.0),
        )
        .unwrap();
        let p = [0.1, 0.5, 0.2, 0.3, 0.8, 0.1, 0.05];
        for mode in [Mode::Hl, Mode::Hlo] {
            let p = &p[..mode.dim()];
            let s = loglik_scores(mode, p, &input).unwrap();
            for j in 0..p.len() {
                let h = 1e-6;
                let (mut up, mut dn) = (p.to_vec(), p.to_vec());
                up[j] += h;
                dn[j] -= h;
                let (tu, td) = (loglik_terms(mode, &up, &input).unwrap(), loglik_terms(mode, &dn, &input).unwrap());
                for i in 0..input.n() {
                    let fd = (tu[i] - td[i]) / (2.0 * h);
                    assert!((s[(i, j)] - fd).abs() < 1e-6 * fd.abs().max(1.0), "{mode} day {i} coord {j}");
                }
            }
        }
        input.nv = None;
        assert!(loglik_scores(Mode::Hlo, &p, &input).is_err());
    }

    #[test]
    fn single_day_value() {
        let input = EstimationInput::new(vec![1.0], vec![0.0], None, JumpParams::none()).unwrap();
        let theta = GarchParams::<f64>::new(0.5, 0.2, 0.0, 0.3);
        assert!((loglik_gh(&theta, &input).unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn hand_case_value() {
        let theta = GarchParams::new(0.1, 0.5, 0.2, 0.3);
        let l = loglik_gh(&theta, &hand_input()).unwrap();
        let want = -(1.0 + (0.92f64.ln() + 2.0 / 0.92) + (1.376f64.ln() + 1.5 / 1.376));
        assert!((l - want).abs() < 1e-12);
        assert!((l + 4.4998).abs() < 1e-4);
    }

    #[test]
    fn exact_link_leaves_realized_block() {
        let theta = GarchParams::new(0.1, 0.5, 0.2, 0.3);
        let mut input = hand_input();
        input.nv = Some(vec![Some(0.2 + 0.7 * 1.0), Some(0.2 + 0.7 * 0.92), Some(0.2 + 0.7 * 1.376)]);
        let phi = FullParams { theta, link: OptionLinkParams { a: 0.7, b: 0.2, sigma_e2: 1.0 } };
        let diff = loglik_gho(&phi, &input).unwrap() - loglik_gh(&theta, &input).unwrap();
        assert!(diff.abs() < 1e-12);
    }

    #[test]
    fn zero_link_block() {
        let theta = GarchParams::<f64>::new(0.5, 0.2, 0.0, 0.3);
        let input = EstimationInput::new(vec![1.0, 1.0], vec![0.0, 0.0], Some(vec![Some(1.0), Some(1.0)]), JumpParams::none()).unwrap();
        let phi = FullParams { theta, link: OptionLinkParams { a: 0.0, b: 0.0, sigma_e2: 1.0 } };
        let block = loglik_gho(&phi, &input).unwrap() - loglik_gh(&theta, &input).unwrap();
        assert!((block + 2.0).abs() < 1e-12);
    }

    #[test]
    fn missing_quotes_are_rejected() {
        let theta = GarchParams::<f64>::new(0.5, 0.2, 0.0, 0.3);
        let phi = FullParams { theta, link: OptionLinkParams { a: 1.0, b: 0.0, sigma_e2: 1.0 } };
        let mut input = hand_input();
        assert!(matches!(loglik_gho(&phi, &input), Err(Error::MissingInput(_))));
        input.nv = Some(vec![None; 3]);
        assert!(matches!(loglik_gho(&phi, &input), Err(Error::MissingInput(_))));
        input.nv = Some(vec![Some(1.0), None, None]);
        assert!(fit(&input, Mode::Hlo, &FitConfig::default()).is_err());
    }

    #[test]
    fn misaligned_input_rejected() {
        assert!(EstimationInput::new(vec![1.0, 2.0], vec![0.0], None, JumpParams::none()).is_err());
        assert!(EstimationInput::new(vec![1.0], vec![0.0], Some(vec![]), JumpParams::none()).is_err());
        assert!(EstimationInput::<f64>::new(vec![], vec![], None, JumpParams::none()).is_err());
    }

    #[test]
    fn transforms_round_trip() {
        let boxes = ParamBoxes::default();
        let p = [0.0122, 0.717, 0.452, 0.225, 0.812, 0.072, 0.0016];
        let back = boxes.to_natural(&boxes.to_unconstrained(&p));
        for (a, b) in p.iter().zip(&back) {
            assert!((a - b).abs() < 1e-10 * a.max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn transformed_points_stay_in_boxes() {
        let boxes = ParamBoxes::default();
        for u in [-40.0, -3.0, 0.0, 2.0, 40.0] {
            let p = boxes.to_natural(&[u, -u, u, u, u, -u, u]);
            assert!(boxes.contains(&p), "{p:?}");
        }
    }

    #[test]
    fn mode_parsing() {
        assert_eq!(Mode::parse("HLO").unwrap(), Mode::Hlo);
        assert!(Mode::parse("x").is_err());
    }

    #[test]
    fn f32_likelihood() {
        let input = EstimationInput::new(vec![1.0f32, 2.0, 1.5], vec![0.1, 0.0, 0.0], None, JumpParams::new(1.0, 0.5, 0.0)).unwrap();
        let l = loglik_gh(&GarchParams::new(0.1f32, 0.5, 0.2, 0.3), &input).unwrap();
        assert!((l + 4.4998).abs() < 1e-3);
    }
}
