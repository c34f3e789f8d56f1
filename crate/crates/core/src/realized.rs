//! Per-day nonparametric measures from noisy intraday prices: noise
//! variance, two- and multi-scale realized variance, threshold jump
//! detection, jump variation and jump-adjusted realized variance.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::JumpParams;
use crate::scalar::{floor_variance, mean, median, Scalar};

/// One trading day of observations on `[i-1, i]`.
///
/// Times are stored as intraday fractions in `[0, 1]`; the absolute time of
/// observation `j` is `day_index - 1 + fractions[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TickDay<T> {
    pub day_index: usize,
    pub fractions: Vec<T>,
    pub prices: Vec<T>,
}

pub type TickPanel<T> = Vec<TickDay<T>>;

impl<T: Scalar> TickDay<T> {
    pub fn new(day_index: usize, fractions: Vec<T>, prices: Vec<T>) -> Result<Self> {
        if fractions.len() != prices.len() {
            return Err(Error::DimensionMismatch {
                what: "tick times/prices",
                left: fractions.len(),
                right: prices.len(),
            });
        }
        if prices.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "day {day_index}: need at least 2 observations, got {}",
                prices.len()
            )));
        }
        if day_index == 0 {
            return Err(Error::InvalidInput("day_index starts at 1".into()));
        }
        for (j, w) in fractions.windows(2).enumerate() {
            if !(w[1] > w[0]) {
                return Err(Error::InvalidInput(format!(
                    "day {day_index}: times not strictly increasing at observation {}",
                    j + 1
                )));
            }
        }
        let (first, last) = (fractions[0], fractions[fractions.len() - 1]);
        if first < T::zero() || last > T::one() {
            return Err(Error::InvalidInput(format!(
                "day {day_index}: intraday times must lie in [0, 1]"
            )));
        }
        if prices.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidInput(format!("day {day_index}: non-finite price")));
        }
        Ok(Self {
            day_index,
            fractions,
            prices,
        })
    }

    /// Equally spaced day `j / m`, `j = 0..=m`, with `m = prices.len() - 1`.
    pub fn uniform(day_index: usize, prices: Vec<T>) -> Result<Self> {
        let m = prices.len().saturating_sub(1).max(1);
        let fractions = (0..prices.len())
            .map(|j| T::from_count(j) / T::from_count(m))
            .collect();
        Self::new(day_index, fractions, prices)
    }

    /// Absolute observation times in `[i-1, i]`.
    pub fn times(&self) -> Vec<T> {
        let start = T::from_count(self.day_index - 1);
        self.fractions.iter().map(|&f| start + f).collect()
    }

    /// Number of increments `m_i`.
    pub fn m(&self) -> usize {
        self.prices.len() - 1
    }

    pub fn increments(&self) -> impl Iterator<Item = T> + '_ {
        self.prices.windows(2).map(|w| w[1] - w[0])
    }
}

/// Daily sufficient statistics for estimation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DailyMeasures<T> {
    pub rv: T,
    pub jv: T,
    pub nv: Option<T>,
    pub jump_count: usize,
    pub noise_var: T,
}

/// `[Y,Y]^(1) / (2 m)`.
pub fn noise_variance<T: Scalar>(day: &TickDay<T>) -> T {
    let rv: T = day.increments().map(|r| r * r).sum();
    rv / (T::lit(2.0) * T::from_count(day.m()))
}

/// Offset-averaged realized variance at lag `k`:
/// `(1/k) sum_{j=k}^{m} (Y_j - Y_{j-k})^2`.
pub fn subsampled_rv<T: Scalar>(prices: &[T], k: usize) -> T {
    debug_assert!(k >= 1);
    if prices.len() <= k {
        return T::zero();
    }
    let s: T = prices[k..]
        .iter()
        .zip(prices)
        .map(|(a, b)| {
            let d = *a - *b;
            d * d
        })
        .sum();
    s / T::from_count(k)
}

/// Two-scale realized variance with slow scale `k`.
pub fn tsrv<T: Scalar>(day: &TickDay<T>, k: usize) -> Result<T> {
    let m = day.m();
    if k < 2 || 2 * k > m {
        return Err(Error::InvalidInput(format!(
            "tsrv scale {k} outside [2, {}]",
            m / 2
        )));
    }
    let slow = subsampled_rv(&day.prices, k);
    let fast = subsampled_rv(&day.prices, 1);
    let m_bar = T::from_count(m - k + 1) / T::from_count(k);
    Ok(floor_variance(slow - m_bar / T::from_count(m) * fast))
}

/// Default two-scale lag `floor(m^(2/3))`.
pub fn default_tsrv_scale(m: usize) -> usize {
    ((m as f64).powf(2.0 / 3.0).floor() as usize).clamp(2, (m / 2).max(2))
}

/// Default number of MSRV scales `floor(sqrt(m))`.
pub fn default_msrv_scales(m: usize) -> usize {
    ((m as f64).sqrt().floor() as usize).max(2)
}

/// Minimum-norm weights `a_k`, `k = 1..=scales`, subject to
/// `sum a_k = 1` and `sum a_k / k = 0`.
///
/// The norm is the one induced by the covariance of the subsampled
/// estimators on a noiseless constant-volatility path, so the weights
/// minimize the discretization variance among all bias-cancelling choices.
pub fn msrv_weights<T: Scalar>(scales: usize) -> Vec<T> {
    msrv_weights_f64(scales).iter().map(|&a| T::lit(a)).collect()
}

fn msrv_weights_f64(scales: usize) -> Arc<Vec<f64>> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<Vec<f64>>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(w) = cache.lock().unwrap_or_else(|e| e.into_inner()).get(&scales) {
        return w.clone();
    }
    let w = Arc::new(solve_msrv_weights(scales));
    cache
        .lock()
        .unwrap_or_else(|e| e.into_inner())
        .insert(scales, w.clone());
    w
}

/// `m / (2 sigma^4)` times the covariance of the lag-`j` and lag-`k`
/// subsampled estimators of a Brownian path.
fn subsample_cov(j: usize, k: usize) -> f64 {
    let (j, k) = (j.min(k) as f64, j.max(k) as f64);
    ((k - j + 1.0) * j * j + (j - 1.0) * j * (2.0 * j - 1.0) / 3.0) / (j * k)
}

fn solve_msrv_weights(scales: usize) -> Vec<f64> {
    let n = scales.max(2);
    let sigma = DMatrix::from_fn(n, n, |a, b| subsample_cov(a + 1, b + 1));
    let c = DMatrix::from_fn(2, n, |r, k| if r == 0 { 1.0 } else { 1.0 / (k + 1) as f64 });
    let target = DVector::from_vec(vec![1.0, 0.0]);
    let w = sigma
        .cholesky()
        .and_then(|ch| {
            let sc = ch.solve(&c.transpose());
            let lam = (&c * &sc).lu().solve(&target)?;
            Some(sc * lam)
        })
        .unwrap_or_else(|| DVector::zeros(n));
    // Euclidean projection back onto the constraint set removes the
    // rounding left by the solve.
    let resid = &c * &w - &target;
    let gram = &c * c.transpose();
    let corr = gram
        .lu()
        .solve(&resid)
        .map(|l| c.transpose() * l)
        .unwrap_or_else(|| DVector::zeros(n));
    (w - corr).iter().copied().collect()
}

/// Multi-scale realized variance over lags `1..=scales`.
pub fn msrv<T: Scalar>(day: &TickDay<T>, scales: usize) -> Result<T> {
    msrv_prices(&day.prices, scales)
}

fn msrv_prices<T: Scalar>(prices: &[T], scales: usize) -> Result<T> {
    let m = prices.len() - 1;
    if scales < 2 || scales * scales > m {
        return Err(Error::InvalidInput(format!(
            "msrv scale count {scales} outside [2, sqrt({m})]"
        )));
    }
    let w = msrv_weights::<T>(scales);
    let est: T = w
        .iter()
        .enumerate()
        .map(|(i, &a)| a * subsampled_rv(prices, i + 1))
        .sum();
    Ok(floor_variance(est))
}

/// Threshold jump detector settings.
///
/// Increments over non-overlapping blocks of `block` ticks are flagged when
/// `|r| > c * s * delta^(exponent - 1/2)`, where `s` is a jump-robust scale
/// of the block increments (median absolute increment within one of
/// `segments` intraday segments) and `delta = block / m`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JumpDetectConfig {
    pub c: f64,
    pub exponent: f64,
    pub block: usize,
    pub segments: usize,
}

impl Default for JumpDetectConfig {
    fn default() -> Self {
        Self {
            c: 4.0,
            exponent: 0.49,
            block: 1,
            segments: 10,
        }
    }
}

/// One flagged increment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JumpDetection<T> {
    /// 1-based tick index of the end of the flagged increment: the jump
    /// happened in `(t_{interval - block}, t_interval]`.
    pub interval: usize,
    pub size: T,
}

/// Fewest increments per segment used for the local scale.
const MIN_SEGMENT_LEN: usize = 50;
/// Median of |N(0,1)|.
const MAD_NORMAL: f64 = 0.674_489_750_196_081_7;

pub fn detect_jumps<T: Scalar>(day: &TickDay<T>, cfg: &JumpDetectConfig) -> Vec<JumpDetection<T>> {
    let block = cfg.block.max(1);
    let m = day.m();
    if m < 2 * block {
        return Vec::new();
    }
    let nb = m / block;
    let incr: Vec<T> = (1..=nb)
        .map(|j| day.prices[j * block] - day.prices[(j - 1) * block])
        .collect();
    let segments = cfg.segments.clamp(1, (nb / MIN_SEGMENT_LEN).max(1));
    let delta = block as f64 / m as f64;
    let scale_factor = T::lit(cfg.c * delta.powf(cfg.exponent - 0.5) / MAD_NORMAL);

    let mut out = Vec::new();
    for s in 0..segments {
        let lo = s * nb / segments;
        let hi = (s + 1) * nb / segments;
        let abs: Vec<T> = incr[lo..hi].iter().map(|r| r.abs()).collect();
        let Some(mad) = median(&abs) else { continue };
        let threshold = scale_factor * mad;
        if !(threshold > T::zero()) {
            continue;
        }
        for (j, &r) in incr.iter().enumerate().take(hi).skip(lo) {
            if r.abs() > threshold {
                out.push(JumpDetection {
                    interval: (j + 1) * block,
                    size: r,
                });
            }
        }
    }
    out
}

/// Sum of squared detected jump sizes.
pub fn jump_variation<T: Scalar>(detections: &[JumpDetection<T>]) -> T {
    detections.iter().fold(T::zero(), |acc, d| acc + d.size * d.size)
}

/// Settings for [`jump_adjusted_rv`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MeasureConfig {
    pub jump: JumpDetectConfig,
    /// Number of MSRV scales; `None` uses `floor(sqrt(m))`.
    pub msrv_scales: Option<usize>,
}

/// Removes flagged increments from the price path: every price after a
/// flagged increment is shifted back by the increment's size.
pub fn remove_jumps<T: Scalar>(prices: &[T], detections: &[JumpDetection<T>]) -> Vec<T> {
    let mut sorted = detections.to_vec();
    sorted.sort_by_key(|d| d.interval);
    let mut next = sorted.iter().peekable();
    let mut shift = T::zero();
    prices
        .iter()
        .enumerate()
        .map(|(idx, &p)| {
            while let Some(d) = next.next_if(|d| d.interval <= idx) {
                shift = shift + d.size;
            }
            p - shift
        })
        .collect()
}

/// Detects jumps, removes them and computes MSRV on the adjusted prices.
pub fn jump_adjusted_rv<T: Scalar>(day: &TickDay<T>, cfg: &MeasureConfig) -> Result<DailyMeasures<T>> {
    measure_day(day, cfg).map(|(m, _)| m)
}

/// [`jump_adjusted_rv`] that also returns the detections.
pub fn measure_day<T: Scalar>(
    day: &TickDay<T>,
    cfg: &MeasureConfig,
) -> Result<(DailyMeasures<T>, Vec<JumpDetection<T>>)> {
    let detections = detect_jumps(day, &cfg.jump);
    let scales = cfg.msrv_scales.unwrap_or_else(|| default_msrv_scales(day.m()));
    let (rv, noise_var) = if detections.is_empty() {
        (msrv(day, scales)?, noise_variance(day))
    } else {
        let adjusted = remove_jumps(&day.prices, &detections);
        let rv = msrv_prices(&adjusted, scales)?;
        let r1: T = adjusted
            .windows(2)
            .map(|w| (w[1] - w[0]) * (w[1] - w[0]))
            .sum();
        (rv, r1 / (T::lit(2.0) * T::from_count(day.m())))
    };
    let jv = jump_variation(&detections);
    Ok((
        DailyMeasures {
            rv,
            jv,
            nv: None,
            jump_count: detections.len(),
            noise_var,
        },
        detections,
    ))
}

/// Measures every day of a panel.
pub fn measure_panel<T: Scalar>(
    panel: &[TickDay<T>],
    cfg: &MeasureConfig,
) -> Result<Vec<(DailyMeasures<T>, Vec<JumpDetection<T>>)>> {
    panel.iter().map(|d| measure_day(d, cfg)).collect()
}

/// Jump intensity as the mean daily count and `omega_L` as the median of
/// all squared detected sizes (zero when nothing was detected). `zeta2` is
/// the sample variance of the squared sizes.
pub fn estimate_jump_params<T: Scalar>(detections: &[Vec<JumpDetection<T>>]) -> JumpParams<T> {
    let counts: Vec<T> = detections.iter().map(|d| T::from_count(d.len())).collect();
    let lambda = if counts.is_empty() { T::zero() } else { mean(&counts) };
    let squares: Vec<T> = detections
        .iter()
        .flatten()
        .map(|d| d.size * d.size)
        .collect();
    jump_params_from_counts(lambda, &squares)
}

/// Same rule as [`estimate_jump_params`] from the mean count and the squared sizes.
pub fn jump_params_from_counts<T: Scalar>(lambda: T, squared_sizes: &[T]) -> JumpParams<T> {
    let omega_l = median(squared_sizes).unwrap_or_else(T::zero);
    let zeta2 = if squared_sizes.len() > 1 {
        let mu = mean(squared_sizes);
        squared_sizes.iter().map(|s| (*s - mu) * (*s - mu)).sum::<T>()
            / T::from_count(squared_sizes.len() - 1)
    } else {
        T::zero()
    };
    JumpParams::new(lambda, omega_l, zeta2)
}
