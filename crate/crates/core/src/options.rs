//! Spot variance from a cross-section of short-dated out-of-the-money
//! option prices.
//!
//! The empirical characteristic function of the log return to expiry is
//!
//! ```text
//! f(u) = 1 - (u^2 + i u) sum_{l=2}^{N} exp((i u - 1) k_{l-1} - i u X) O(k_{l-1}) dk_l
//! ```
//!
//! with `O(k)` the out-of-the-money price at log strike `k` (puts below the
//! underlying, calls above) and `X` the log underlying. For a Gaussian
//! return `Re log f(u) = -u^2 sigma^2 T / 2`, which the normalizations
//! below invert.

use std::fmt;
use std::sync::OnceLock;

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::model::OptionLinkParams;
use crate::scalar::Scalar;

/// Fewest strikes a cleaned chain needs before it yields an estimate.
pub const MIN_USABLE_STRIKES: usize = 10;
/// `|f(u)|` below this is treated as degenerate.
pub const DEGENERATE_MODULUS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct OptionChain<T> {
    pub quote_day: usize,
    /// Time to expiry in days.
    pub expiry_t: T,
    pub log_strikes: Vec<T>,
    pub prices: Vec<T>,
    pub underlying_logprice: T,
}

impl<T: Scalar> OptionChain<T> {
    pub fn new(
        quote_day: usize,
        expiry_t: T,
        log_strikes: Vec<T>,
        prices: Vec<T>,
        underlying_logprice: T,
    ) -> Result<Self> {
        if log_strikes.len() != prices.len() {
            return Err(Error::DimensionMismatch {
                what: "log_strikes vs prices",
                left: log_strikes.len(),
                right: prices.len(),
            });
        }
        if log_strikes.len() < 3 {
            return Err(Error::InvalidInput(format!(
                "option chain needs at least 3 strikes, got {}",
                log_strikes.len()
            )));
        }
        if !(expiry_t > T::zero()) {
            return Err(Error::InvalidInput("time to expiry must be > 0".into()));
        }
        if log_strikes.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidInput("log strikes must be strictly increasing".into()));
        }
        if prices.iter().any(|p| !p.is_finite() || *p < T::zero()) {
            return Err(Error::InvalidInput("option prices must be finite and >= 0".into()));
        }
        if !underlying_logprice.is_finite() {
            return Err(Error::InvalidInput("underlying log price must be finite".into()));
        }
        Ok(Self {
            quote_day,
            expiry_t,
            log_strikes,
            prices,
            underlying_logprice,
        })
    }

    pub fn len(&self) -> usize {
        self.log_strikes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_strikes.is_empty()
    }
}

/// Left Riemann sum estimate of the characteristic function at `u`.
pub fn f_hat<T: Scalar>(chain: &OptionChain<T>, u: T) -> Complex<T> {
    let k = &chain.log_strikes;
    let x = chain.underlying_logprice;
    let mut sum = Complex::new(T::zero(), T::zero());
    for l in 1..k.len() {
        let kl = k[l - 1];
        let weight = (-kl).exp() * chain.prices[l - 1] * (k[l] - kl);
        let phase = u * (kl - x);
        sum = sum + Complex::new(phase.cos(), phase.sin()) * weight;
    }
    Complex::new(T::one(), T::zero()) - Complex::new(u * u, u) * sum
}

/// Candidate maps from `log f(u)` to a variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NvNormalization {
    /// `-2 / (T u) * min(Re log f, T)`.
    MinT,
    /// `-2 / (T u^2) * Re log f`.
    QuadraticU,
    /// `-2 / T * Re log f / u`.
    LinearU,
}

impl NvNormalization {
    pub const ALL: [NvNormalization; 3] = [Self::MinT, Self::QuadraticU, Self::LinearU];

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|n| n.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown normalization '{s}'")))
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::MinT => "min_t",
            Self::QuadraticU => "quadratic_u",
            Self::LinearU => "linear_u",
        }
    }

    pub fn apply<T: Scalar>(&self, re_log_f: T, t: T, u: T) -> T {
        let two = T::lit(2.0);
        match self {
            Self::MinT => -two / (t * u) * re_log_f.min(t),
            Self::QuadraticU => -two / (t * u * u) * re_log_f,
            Self::LinearU => -two / t * re_log_f / u,
        }
    }
}

impl fmt::Display for NvNormalization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Outcome of running every candidate normalization on the Black–Scholes
/// oracle chain.
#[derive(Debug, Clone, PartialEq)]
pub struct NvCalibration {
    pub selected: NvNormalization,
    pub true_variance: f64,
    /// `(candidate, estimate, relative error)`.
    pub candidates: Vec<(NvNormalization, f64, f64)>,
}

/// Relative error a candidate must reach on the oracle to be selected.
pub const CALIBRATION_TOLERANCE: f64 = 0.05;

/// Oracle variance per day and maturity used by [`calibrate_normalization`].
pub const ORACLE_VARIANCE: f64 = 0.02;
pub const ORACLE_EXPIRY: f64 = 1.0;
pub const ORACLE_STRIKES: usize = 200;

/// Scores every candidate on a noiseless Black–Scholes chain and selects
/// the one recovering the true variance, closest first.
pub fn calibrate_normalization() -> Result<NvCalibration> {
    let chain = black_scholes_chain(10.0, ORACLE_VARIANCE, ORACLE_EXPIRY, ORACLE_STRIKES, 5.0)?;
    let u = default_u(&chain)?;
    let re = f_hat(&chain, u).ln().re;
    let mut candidates: Vec<_> = NvNormalization::ALL
        .iter()
        .map(|n| {
            let est = n.apply(re, chain.expiry_t, u);
            (*n, est, ((est - ORACLE_VARIANCE) / ORACLE_VARIANCE).abs())
        })
        .collect();
    candidates.sort_by(|a, b| a.2.total_cmp(&b.2));
    let (best, _, err) = candidates[0];
    if !(err < CALIBRATION_TOLERANCE) {
        return Err(Error::Numerical(format!(
            "no option normalization recovers the oracle variance (best {best}, error {err:.3})"
        )));
    }
    Ok(NvCalibration {
        selected: best,
        true_variance: ORACLE_VARIANCE,
        candidates,
    })
}

/// Calibration result, computed once per process.
pub fn selected_normalization() -> Result<&'static NvCalibration> {
    static CAL: OnceLock<std::result::Result<NvCalibration, String>> = OnceLock::new();
    CAL.get_or_init(|| calibrate_normalization().map_err(|e| e.to_string()))
        .as_ref()
        .map_err(|e| Error::Numerical(e.clone()))
}

const U_SCAN_START: f64 = 1e-2;
const U_SCAN_RATIO: f64 = 1.25;
/// Upper end of the tuning-parameter search.
pub const U_MAX: f64 = 1e4;

/// Tuning parameter solving `|f(u)| = exp(-1/2)`: geometric scan from
/// small `u` to the first crossing, then bisection.
pub fn default_u<T: Scalar>(chain: &OptionChain<T>) -> Result<T> {
    let target = (-0.5f64).exp();
    let modulus = |u: f64| f_hat(chain, T::lit(u)).norm().as_f64();
    let mut lo = U_SCAN_START;
    if !(modulus(lo) > target) {
        return Err(Error::Numerical(
            "option chain characteristic function already below target at smallest u".into(),
        ));
    }
    let mut hi = lo;
    loop {
        hi *= U_SCAN_RATIO;
        if hi > U_MAX {
            return Err(Error::Numerical(format!(
                "no tuning parameter up to {U_MAX} brings |f(u)| to exp(-1/2)"
            )));
        }
        if modulus(hi) <= target {
            break;
        }
        lo = hi;
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if modulus(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-12 * hi {
            break;
        }
    }
    Ok(T::lit(0.5 * (lo + hi)))
}

/// Settings for [`nv_estimate_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NvConfig<T> {
    /// Fixed tuning parameter; `None` solves for it per chain.
    pub u: Option<T>,
    /// Normalization override; `None` uses the calibrated selection.
    pub normalization: Option<NvNormalization>,
}

impl<T> Default for NvConfig<T> {
    fn default() -> Self {
        Self {
            u: None,
            normalization: None,
        }
    }
}

/// Variance estimate with the calibrated normalization and default `u`.
pub fn nv_estimate<T: Scalar>(chain: &OptionChain<T>) -> Result<T> {
    nv_estimate_with(chain, &NvConfig::default())
}

pub fn nv_estimate_with<T: Scalar>(chain: &OptionChain<T>, cfg: &NvConfig<T>) -> Result<T> {
    let norm = match cfg.normalization {
        Some(n) => n,
        None => selected_normalization()?.selected,
    };
    let u = match cfg.u {
        Some(u) if u > T::zero() => u,
        Some(_) => return Err(Error::InvalidInput("tuning parameter u must be > 0".into())),
        None => default_u(chain)?,
    };
    let f = f_hat(chain, u);
    if !(f.norm().as_f64() > DEGENERATE_MODULUS) {
        return Err(Error::Numerical(format!(
            "degenerate option chain on day {}: |f(u)| ~ 0",
            chain.quote_day
        )));
    }
    let nv = norm.apply(f.ln().re, chain.expiry_t, u);
    if !nv.is_finite() {
        return Err(Error::NonFinite {
            day: chain.quote_day,
        });
    }
    Ok(nv.max(T::zero()))
}

/// Drops quotes that break the monotone out-of-the-money wings: put prices
/// must fall moving down from the underlying, call prices must fall moving
/// up. Quotes above the no-arbitrage bound `min(S, K)` are dropped too.
pub fn clean_chain<T: Scalar>(chain: &OptionChain<T>) -> (Vec<T>, Vec<T>) {
    let x = chain.underlying_logprice;
    let spot = x.exp();
    let ok = |k: T, p: T| p.is_finite() && p >= T::zero() && p <= spot.min(k.exp());
    let pivot = chain.log_strikes.partition_point(|&k| k < x);

    let mut puts = Vec::new();
    let mut last = T::infinity();
    for i in (0..pivot).rev() {
        let (k, p) = (chain.log_strikes[i], chain.prices[i]);
        if ok(k, p) && p <= last {
            puts.push((k, p));
            last = p;
        }
    }
    puts.reverse();
    let mut calls = Vec::new();
    let mut last = T::infinity();
    for i in pivot..chain.len() {
        let (k, p) = (chain.log_strikes[i], chain.prices[i]);
        if ok(k, p) && p <= last {
            calls.push((k, p));
            last = p;
        }
    }
    puts.into_iter().chain(calls).unzip()
}

/// Cleans the chain and estimates; fewer than [`MIN_USABLE_STRIKES`]
/// surviving quotes is a `MissingInput` error.
pub fn nv_for_day<T: Scalar>(chain: &OptionChain<T>, cfg: &NvConfig<T>) -> Result<T> {
    let (k, p) = clean_chain(chain);
    if k.len() < MIN_USABLE_STRIKES {
        return Err(Error::MissingInput(format!(
            "day {}: {} usable strikes (need {MIN_USABLE_STRIKES})",
            chain.quote_day,
            k.len()
        )));
    }
    let cleaned = OptionChain::new(chain.quote_day, chain.expiry_t, k, p, chain.underlying_logprice)?;
    nv_estimate_with(&cleaned, cfg)
}

/// `e_i = NV_{i-1} - b - a h_i`, where `nv[d]` is the quote paired with `h[d]`.
pub fn link_residuals<T: Scalar>(nv: &[T], h: &[T], link: &OptionLinkParams<T>) -> Result<Vec<T>> {
    if nv.len() != h.len() {
        return Err(Error::DimensionMismatch {
            what: "nv vs h",
            left: nv.len(),
            right: h.len(),
        });
    }
    Ok(nv
        .iter()
        .zip(h)
        .map(|(&n, &hi)| n - link.b - link.a * hi)
        .collect())
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Zero-rate Black–Scholes out-of-the-money price at log strike `k`
/// (put below the underlying, call at or above).
pub fn black_scholes_otm(x: f64, k: f64, variance: f64, t: f64) -> f64 {
    let sd = (variance * t).sqrt();
    let (s, strike) = (x.exp(), k.exp());
    if sd <= 0.0 {
        return 0.0;
    }
    let d1 = (x - k) / sd + 0.5 * sd;
    let d2 = d1 - sd;
    let price = if k < x {
        strike * normal_cdf(-d2) - s * normal_cdf(-d1)
    } else {
        s * normal_cdf(d1) - strike * normal_cdf(d2)
    };
    price.max(0.0)
}

/// Chain of `n` equally spaced strikes spanning `x +- width * sd`, priced
/// under constant variance.
pub fn black_scholes_chain(x: f64, variance: f64, t: f64, n: usize, width: f64) -> Result<OptionChain<f64>> {
    if n < 3 {
        return Err(Error::InvalidInput("need at least 3 strikes".into()));
    }
    let half = width * (variance * t).sqrt();
    let k: Vec<f64> = (0..n)
        .map(|i| x - half + 2.0 * half * i as f64 / (n - 1) as f64)
        .collect();
    let p = k.iter().map(|&ki| black_scholes_otm(x, ki, variance, t)).collect();
    OptionChain::new(0, t, k, p, x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(n: usize) -> OptionChain<f64> {
        OptionChain::new(1, 1.0, (0..n).map(|i| i as f64 * 0.1).collect(), vec![0.0; n], 0.5).unwrap()
    }

    #[test]
    fn zero_prices_give_unit_f() {
        let c = flat(5);
        assert_eq!(f_hat(&c, 2.0), Complex::new(1.0, 0.0));
        assert_eq!(nv_estimate_with(&c, &NvConfig { u: Some(1.0), normalization: None }).unwrap(), 0.0);
    }

    #[test]
    fn zero_u_gives_unit_f() {
        let c = black_scholes_chain(0.0, 0.02, 1.0, 50, 5.0).unwrap();
        assert_eq!(f_hat(&c, 0.0), Complex::new(1.0, 0.0));
    }

    #[test]
    fn one_term_sum() {
        let x = 0.3_f64;
        let c = OptionChain::new(1, 1.0, vec![x, x + 1.0, x + 2.0], vec![1.0, 0.0, 0.0], x).unwrap();
        let got = f_hat(&c, 1.0);
        let want = Complex::new(1.0, 0.0) - Complex::new(1.0, 1.0) * (-x).exp();
        assert!((got - want).norm() < 1e-15);
    }

    #[test]
    fn chain_validation() {
        assert!(OptionChain::new(1, 1.0, vec![0.0, 1.0], vec![0.0, 0.0], 0.0).is_err());
        assert!(OptionChain::new(1, 0.0, vec![0.0, 1.0, 2.0], vec![0.0; 3], 0.0).is_err());
        assert!(OptionChain::new(1, 1.0, vec![0.0, 1.0, 1.0], vec![0.0; 3], 0.0).is_err());
        assert!(OptionChain::new(1, 1.0, vec![0.0, 1.0, 2.0], vec![0.0, -1.0, 0.0], 0.0).is_err());
    }

    #[test]
    fn calibration_selects_quadratic() {
        let cal = selected_normalization().unwrap();
        assert_eq!(cal.selected, NvNormalization::QuadraticU);
        assert!(cal.candidates[0].2 < 0.05);
        assert!(cal.candidates[1..].iter().all(|c| c.2 > 0.05));
    }

    #[test]
    fn default_u_hits_target_modulus() {
        let c = black_scholes_chain(10.0, 0.02, 1.0, 200, 5.0).unwrap();
        let u = default_u(&c).unwrap();
        assert!((f_hat(&c, u).norm() - (-0.5f64).exp()).abs() < 1e-9);
        assert!((u - 1.0 / 0.02f64.sqrt()).abs() / u < 0.05);
    }

    #[test]
    fn cleaning_drops_broken_wings() {
        let mut c = black_scholes_chain(0.0, 0.02, 1.0, 40, 5.0).unwrap();
        c.prices[2] = c.prices[10];
        c.prices[35] = 2.0;
        let (k, _) = clean_chain(&c);
        assert_eq!(k.len(), 38);
        assert!(!k.contains(&c.log_strikes[2]));
        assert!(!k.contains(&c.log_strikes[35]));
    }

    #[test]
    fn sparse_chain_is_missing() {
        let c = black_scholes_chain(0.0, 0.02, 1.0, 8, 5.0).unwrap();
        assert!(matches!(nv_for_day(&c, &NvConfig::default()), Err(Error::MissingInput(_))));
    }

    #[test]
    fn link_residual_cases() {
        let link = OptionLinkParams { a: 0.8, b: 0.1, sigma_e2: 0.01 };
        let h = [1.0, 2.0, 0.5];
        let nv: Vec<f64> = h.iter().map(|x| 0.1 + 0.8 * x).collect();
        assert!(link_residuals(&nv, &h, &link).unwrap().iter().all(|e| e.abs() < 1e-15));
        let zero_a = OptionLinkParams { a: 0.0, ..link };
        assert_eq!(link_residuals(&nv, &h, &zero_a).unwrap()[1], nv[1] - 0.1);
        assert!(link_residuals(&nv[..2], &h, &link).is_err());
    }

    #[test]
    fn f32_chain_estimate() {
        let c = black_scholes_chain(0.0, 0.02, 1.0, 200, 5.0).unwrap();
        let c32 = OptionChain::new(
            0,
            1.0f32,
            c.log_strikes.iter().map(|&k| k as f32).collect(),
            c.prices.iter().map(|&p| p as f32).collect(),
            0.0,
        )
        .unwrap();
        let nv = nv_estimate(&c32).unwrap();
        assert!((nv - 0.02).abs() / 0.02 < 0.05, "{nv}");
    }
}
