//! Parameter vectors of the realized GARCH-Itô model, the map from the
//! continuous-time parameters to the daily GARCH parameters, stationary
//! moments and the conditional-volatility recursion.
//!
//! Time is measured in trading days. Writing `S` for the spot variance at
//! the previous integer time, the conditional expectation of the next day's
//! integrated variance is affine in `S`:
//!
//! ```text
//! h = c * S + k,   c = r1 - r2 + 2 gamma r3
//! ```
//!
//! where `r1, r2, r3` are the exponential moments returned by
//! [`exp_moments`]. Combined with the integer-time update of `S` this gives
//! the daily recursion `h_n = omega_g + gamma h_{n-1} + alpha_g IV_{n-1} + beta_g JV_{n-1}`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Continuous-time parameters of the instantaneous volatility process.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StructuralParams<T> {
    pub omega1: T,
    pub omega2: T,
    pub alpha: T,
    pub beta: T,
    pub nu: T,
    pub gamma: T,
    pub rho: T,
}

impl<T: Scalar> StructuralParams<T> {
    pub fn validate(&self) -> Result<()> {
        let (zero, one) = (T::zero(), T::one());
        if !(self.alpha > zero && self.alpha < one) {
            return Err(Error::Domain(format!("alpha = {} not in (0,1)", self.alpha)));
        }
        if !(self.gamma > zero && self.gamma < one) {
            return Err(Error::Domain(format!("gamma = {} not in (0,1)", self.gamma)));
        }
        if !(self.nu >= zero) {
            return Err(Error::Domain(format!("nu = {} must be >= 0", self.nu)));
        }
        if !(self.beta >= zero) {
            return Err(Error::Domain(format!("beta = {} must be >= 0", self.beta)));
        }
        if !(self.rho.abs() <= one) {
            return Err(Error::Domain(format!("rho = {} not in [-1,1]", self.rho)));
        }
        if !self.omega1.is_finite() || !self.omega2.is_finite() {
            return Err(Error::Domain("omega1/omega2 must be finite".into()));
        }
        Ok(())
    }

    /// Intercept of the integer-time spot-variance update, `gamma*omega1 - omega2`.
    pub fn omega(&self) -> T {
        self.gamma * self.omega1 - self.omega2
    }
}

/// Distribution of the jump sizes. Both variants are parameterized by the
/// first two moments of `L^2` (`omega_L`, `zeta2`) and carry a random sign.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum JumpSizeLaw {
    /// `|L| ~ Normal(delta, eta)` with `delta^2 + eta = omega_L` and
    /// `4 delta^2 eta + 2 eta^2 = zeta2`.
    #[default]
    SignedNormal,
    /// `L^2 = omega_L + M` with `M ~ Normal(0, zeta2)`.
    SquaredNormal,
}

impl JumpSizeLaw {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "signed_normal" | "signed-normal" => Ok(Self::SignedNormal),
            "squared_normal" | "squared-normal" => Ok(Self::SquaredNormal),
            other => Err(Error::Config(format!("unknown jump law '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::SignedNormal => "signed_normal",
            Self::SquaredNormal => "squared_normal",
        }
    }
}

/// Compound-Poisson jump component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JumpParams<T> {
    /// Poisson intensity per day.
    pub lambda: T,
    /// Mean squared jump size.
    pub omega_l: T,
    /// Variance of `L^2 - omega_L`.
    pub zeta2: T,
    pub law: JumpSizeLaw,
}

impl<T: Scalar> JumpParams<T> {
    pub fn new(lambda: T, omega_l: T, zeta2: T) -> Self {
        Self {
            lambda,
            omega_l,
            zeta2,
            law: JumpSizeLaw::default(),
        }
    }

    /// No jumps; only meaningful as a simulation input.
    pub fn none() -> Self {
        Self::new(T::zero(), T::zero(), T::zero())
    }

    /// Expected daily jump variation `lambda * omega_L`.
    pub fn mean_jump_variation(&self) -> T {
        self.lambda * self.omega_l
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= T::zero()) || !(self.omega_l >= T::zero()) || !(self.zeta2 >= T::zero()) {
            return Err(Error::Domain(
                "jump parameters must be nonnegative".into(),
            ));
        }
        if self.lambda > T::zero() && !(self.omega_l > T::zero()) {
            return Err(Error::Domain("omega_L must be > 0 when lambda > 0".into()));
        }
        if self.law == JumpSizeLaw::SignedNormal
            && self.zeta2 > T::lit(2.0) * self.omega_l * self.omega_l
        {
            return Err(Error::Domain(
                "signed-normal jump law needs zeta2 <= 2 omega_L^2".into(),
            ));
        }
        Ok(())
    }

    /// `(delta, eta)` of the signed-normal law matching `(omega_L, zeta2)`.
    pub fn signed_normal_moments(&self) -> (T, T) {
        let two = T::lit(2.0);
        let disc = (self.omega_l * self.omega_l - self.zeta2 / two).max(T::zero());
        let eta = (self.omega_l - disc.sqrt()).max(T::zero());
        let delta = (self.omega_l - eta).max(T::zero()).sqrt();
        (delta, eta)
    }
}

/// Daily GARCH parameters `theta = (omega_g, alpha_g, beta_g, gamma)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GarchParams<T> {
    pub omega_g: T,
    pub alpha_g: T,
    pub beta_g: T,
    pub gamma: T,
}

impl<T: Scalar> GarchParams<T> {
    pub const DIM: usize = 4;

    pub fn new(omega_g: T, alpha_g: T, beta_g: T, gamma: T) -> Self {
        Self {
            omega_g,
            alpha_g,
            beta_g,
            gamma,
        }
    }

    pub fn to_array(&self) -> [T; 4] {
        [self.omega_g, self.alpha_g, self.beta_g, self.gamma]
    }

    pub fn from_slice(v: &[T]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    /// `alpha_g + gamma`, the persistence of the conditional volatility.
    pub fn persistence(&self) -> T {
        self.alpha_g + self.gamma
    }

    pub fn is_stationary(&self) -> bool {
        self.persistence() < T::one()
    }
}

/// Linear link between option-implied variance and conditional volatility.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptionLinkParams<T> {
    pub a: T,
    pub b: T,
    pub sigma_e2: T,
}

/// `phi = (theta, a, b, sigma_e^2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FullParams<T> {
    pub theta: GarchParams<T>,
    pub link: OptionLinkParams<T>,
}

impl<T: Scalar> FullParams<T> {
    pub const DIM: usize = 7;

    pub fn to_array(&self) -> [T; 7] {
        let t = &self.theta;
        [
            t.omega_g,
            t.alpha_g,
            t.beta_g,
            t.gamma,
            self.link.a,
            self.link.b,
            self.link.sigma_e2,
        ]
    }

    pub fn from_slice(v: &[T]) -> Self {
        Self {
            theta: GarchParams::from_slice(&v[..4]),
            link: OptionLinkParams {
                a: v[4],
                b: v[5],
                sigma_e2: v[6],
            },
        }
    }
}

/// Below this `alpha` the exponential moments are summed as power series.
const SERIES_THRESHOLD: f64 = 0.1;

/// Exponential moments
/// `r1 = (e^a - 1)/a`, `r2 = (e^a - 1 - a)/a^2`, `r3 = (e^a - 1 - a - a^2/2)/a^3`.
///
/// Equivalently `r_k = sum_j a^j / (j + k)!`. The closed forms cancel
/// catastrophically as `a -> 0`, so small arguments use the series.
pub fn exp_moments<T: Scalar>(alpha: T) -> (T, T, T) {
    if alpha.abs() < T::lit(SERIES_THRESHOLD) {
        let mut r = [T::zero(); 3];
        for (k, slot) in r.iter_mut().enumerate() {
            // a^j / (j + k + 1)!
            let mut fact = T::one();
            for f in 2..=(k + 1) {
                fact = fact * T::from_count(f);
            }
            let mut term = T::one() / fact;
            let mut sum = T::zero();
            for j in 0..40 {
                sum = sum + term;
                term = term * alpha / T::from_count(j + k + 2);
                if term.abs() <= T::epsilon() * sum.abs() {
                    break;
                }
            }
            *slot = sum;
        }
        (r[0], r[1], r[2])
    } else {
        let em1 = alpha.exp_m1();
        let a2 = alpha * alpha;
        let r1 = em1 / alpha;
        let r2 = (em1 - alpha) / a2;
        let r3 = (em1 - alpha - a2 / T::lit(2.0)) / (a2 * alpha);
        (r1, r2, r3)
    }
}

/// Affine map `h = slope * S + intercept` from the spot variance at the
/// previous integer time to the conditional expected integrated variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionalIvMap<T> {
    pub slope: T,
    pub intercept: T,
}

impl<T: Scalar> ConditionalIvMap<T> {
    pub fn new(s: &StructuralParams<T>, j: &JumpParams<T>) -> Result<Self> {
        s.validate()?;
        let (r1, r2, r3) = exp_moments(s.alpha);
        let two = T::lit(2.0);
        let slope = r1 - r2 + two * s.gamma * r3;
        let intercept = two * s.gamma * r3 * s.omega1 - r2 * s.omega2
            + r2 * s.beta * j.lambda * j.omega_l
            + s.nu * (r2 - two * r3);
        Ok(Self { slope, intercept })
    }

    pub fn apply(&self, spot_variance: T) -> T {
        self.slope * spot_variance + self.intercept
    }
}

/// Maps the structural parameters to `theta = (omega_g, alpha_g, beta_g, gamma)`.
pub fn derive_garch_params<T: Scalar>(
    s: &StructuralParams<T>,
    j: &JumpParams<T>,
) -> Result<GarchParams<T>> {
    s.validate()?;
    let (r1, r2, r3) = exp_moments(s.alpha);
    let two = T::lit(2.0);
    let g = s.gamma;
    let loading = r1 - r2 + two * g * r3;
    let omega_g = g * (r1 - r2 + two * r3) * s.omega1 - (r1 - g * r2 + two * g * r3) * s.omega2
        + (T::one() - g) * ((r2 - two * r3) * s.nu + r2 * s.beta * j.lambda * j.omega_l);
    Ok(GarchParams {
        omega_g,
        alpha_g: loading * s.alpha,
        beta_g: loading * s.beta,
        gamma: g,
    })
}

/// Stationary mean of the conditional volatility,
/// `(omega_g + beta_g lambda omega_L) / (1 - alpha_g - gamma)`.
pub fn stationary_h_mean<T: Scalar>(theta: &GarchParams<T>, j: &JumpParams<T>) -> Result<T> {
    let denom = T::one() - theta.persistence();
    if !(denom > T::zero()) {
        return Err(Error::Domain(format!(
            "alpha_g + gamma = {} must be < 1",
            theta.persistence()
        )));
    }
    Ok((theta.omega_g + theta.beta_g * j.lambda * j.omega_l) / denom)
}

/// Seed of the volatility recursion: the stationary mean.
pub fn default_h1<T: Scalar>(theta: &GarchParams<T>, j: &JumpParams<T>) -> Result<T> {
    stationary_h_mean(theta, j)
}

/// Stationary mean of the integer-time spot variance.
pub fn stationary_spot_mean<T: Scalar>(s: &StructuralParams<T>, j: &JumpParams<T>) -> Result<T> {
    let theta = derive_garch_params(s, j)?;
    let mean_h = stationary_h_mean(&theta, j)?;
    let lj = j.lambda * j.omega_l;
    Ok((s.omega() + s.beta * lj + s.alpha * mean_h) / (T::one() - s.gamma))
}

/// Conditional volatility path: `h[0] = h1` and
/// `h[i] = omega_g + gamma h[i-1] + alpha_g rv[i-1] + beta_g jv[i-1]`.
///
/// Negative measures are floored at zero.
pub fn h_recursion<T: Scalar>(theta: &GarchParams<T>, rv: &[T], jv: &[T], h1: T) -> Result<Vec<T>> {
    let mut out = Vec::with_capacity(rv.len());
    h_recursion_into(theta, rv, jv, h1, &mut out)?;
    Ok(out)
}

/// Allocation-free variant of [`h_recursion`] used inside likelihood loops.
pub fn h_recursion_into<T: Scalar>(
    theta: &GarchParams<T>,
    rv: &[T],
    jv: &[T],
    h1: T,
    out: &mut Vec<T>,
) -> Result<()> {
    if rv.len() != jv.len() {
        return Err(Error::DimensionMismatch {
            what: "rv/jv",
            left: rv.len(),
            right: jv.len(),
        });
    }
    out.clear();
    if rv.is_empty() {
        return Ok(());
    }
    let zero = T::zero();
    let mut h = h1;
    out.push(h);
    for i in 1..rv.len() {
        h = theta.omega_g
            + theta.gamma * h
            + theta.alpha_g * rv[i - 1].max(zero)
            + theta.beta_g * jv[i - 1].max(zero);
        out.push(h);
    }
    Ok(())
}

/// Reference simulation design: the structural parameters, jump law and
/// option link used throughout the Monte-Carlo studies.
#[derive(Debug, Clone, Copy)]
pub struct ReferenceDesign {
    pub structural: StructuralParams<f64>,
    pub jumps: JumpParams<f64>,
    pub link: OptionLinkParams<f64>,
    /// Target `theta` implied by `structural` and `jumps`, rounded to three
    /// significant digits.
    pub theta: GarchParams<f64>,
    pub x0: f64,
    pub sigma0_sq: f64,
    pub noise_sd: f64,
}

pub fn reference_design() -> ReferenceDesign {
    ReferenceDesign {
        structural: StructuralParams {
            omega1: 5.816,
            omega2: 1.228,
            alpha: 0.765,
            beta: 0.482,
            nu: 0.6,
            gamma: 0.225,
            rho: -0.6,
        },
        jumps: JumpParams {
            lambda: 26.0,
            omega_l: 0.005,
            zeta2: 1e-6,
            law: JumpSizeLaw::SquaredNormal,
        },
        link: OptionLinkParams {
            a: 0.812,
            b: 0.072,
            sigma_e2: 0.04 * 0.04,
        },
        theta: GarchParams::new(0.0122, 0.717, 0.452, 0.225),
        x0: 10.0,
        sigma0_sq: 1.4,
        noise_sd: 0.005,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference_structural() -> (StructuralParams<f64>, JumpParams<f64>) {
        let d = reference_design();
        (d.structural, d.jumps)
    }

    #[test]
    fn maps_simulation_design_to_target_theta() {
        let (s, j) = reference_structural();
        let t = derive_garch_params(&s, &j).unwrap();
        let target = [0.0122, 0.717, 0.452, 0.225];
        for (got, want) in t.to_array().iter().zip(target) {
            assert!((got - want).abs() < 5e-4, "{got} vs {want}");
        }
    }

    #[test]
    fn moments_have_series_limits() {
        let (r1, r2, r3) = exp_moments(1e-9_f64);
        assert!((r1 - 1.0).abs() < 1e-8);
        assert!((r2 - 0.5).abs() < 1e-8);
        assert!((r3 - 1.0 / 6.0).abs() < 1e-8);
    }

    #[test]
    fn series_and_closed_form_agree_at_threshold() {
        for a in [0.0999_f64, 0.1, 0.1001, 0.2] {
            let mut r = [0.0; 3];
            for (k, slot) in r.iter_mut().enumerate() {
                let mut fact = 1.0;
                for f in 2..=(k + 1) {
                    fact *= f as f64;
                }
                let mut term = 1.0 / fact;
                for j in 0..60 {
                    *slot += term;
                    term *= a / (j + k + 2) as f64;
                }
            }
            let (r1, r2, r3) = exp_moments(a);
            assert!((r1 - r[0]).abs() < 1e-14);
            assert!((r2 - r[1]).abs() < 1e-13);
            assert!((r3 - r[2]).abs() < 1e-12, "{a}: {r3} vs {}", r[2]);
        }
    }

    #[test]
    fn rejects_alpha_outside_unit_interval() {
        let (mut s, j) = reference_structural();
        s.alpha = 0.0;
        assert!(matches!(derive_garch_params(&s, &j), Err(Error::Domain(_))));
        s.alpha = 1.0;
        assert!(derive_garch_params(&s, &j).is_err());
    }

    #[test]
    fn stationary_mean_examples() {
        let j = JumpParams::new(26.0, 0.005, 0.0);
        let t = GarchParams::<f64>::new(0.0122, 0.717, 0.452, 0.225);
        let m = stationary_h_mean(&t, &j).unwrap();
        assert!((m - 1.2234).abs() < 1e-3, "{m}");
        assert_eq!(default_h1(&t, &j).unwrap(), m);

        let t = GarchParams::new(0.2, 0.25, 0.0, 0.25);
        assert!((stationary_h_mean(&t, &j).unwrap() - 0.4).abs() < 1e-12);

        let t = GarchParams::<f64>::new(0.3, 0.4, 0.7, 0.2);
        let m = stationary_h_mean(&t, &JumpParams::none()).unwrap();
        assert!((m - 0.3 / 0.4).abs() < 1e-12);

        let t = GarchParams::new(0.3, 0.7, 0.1, 0.3);
        assert!(matches!(stationary_h_mean(&t, &j), Err(Error::Domain(_))));
    }

    #[test]
    fn recursion_hand_case() {
        let t = GarchParams::<f64>::new(0.1, 0.5, 0.2, 0.3);
        // lambda * omega_L = 0.5
        let j = JumpParams::new(1.0, 0.5, 0.0);
        let h1 = default_h1(&t, &j).unwrap();
        assert!((h1 - 1.0).abs() < 1e-12);
        let h = h_recursion(&t, &[1.0, 2.0, 1.5], &[0.1, 0.0, 0.0], h1).unwrap();
        assert!((h[1] - 0.92).abs() < 1e-12);
        assert!((h[2] - 1.376).abs() < 1e-12);
    }

    #[test]
    fn recursion_without_persistence() {
        let t = GarchParams::<f64>::new(0.1, 0.5, 0.2, 0.0);
        let rv = [1.0_f64, 3.0, 0.5, 2.0];
        let jv = [0.2, 0.0, 0.4, 0.1];
        let h = h_recursion(&t, &rv, &jv, 7.0).unwrap();
        for i in 1..rv.len() {
            assert!((h[i] - (0.1 + 0.5 * rv[i - 1] + 0.2 * jv[i - 1])).abs() < 1e-15);
        }
    }

    #[test]
    fn recursion_rejects_mismatched_lengths() {
        let t = GarchParams::<f64>::new(0.1, 0.5, 0.2, 0.3);
        let err = h_recursion(&t, &[1.0, 2.0], &[0.1], 1.0).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }

    #[test]
    fn works_in_single_precision() {
        let s = StructuralParams::<f32> {
            omega1: 5.816,
            omega2: 1.228,
            alpha: 0.765,
            beta: 0.482,
            nu: 0.6,
            gamma: 0.225,
            rho: -0.6,
        };
        let t = derive_garch_params(&s, &JumpParams::new(26.0, 0.005, 0.0)).unwrap();
        assert!((t.alpha_g - 0.717).abs() < 5e-4);
        assert!((t.beta_g - 0.452).abs() < 5e-4);
    }

    #[test]
    fn conditional_map_reproduces_recursion_coefficients() {
        let (s, j) = reference_structural();
        let map = ConditionalIvMap::new(&s, &j).unwrap();
        let t = derive_garch_params(&s, &j).unwrap();
        // one integer-time step: S' = omega + gamma S + alpha IV + beta JV
        let (spot, iv, jv) = (1.3, 1.1, 0.12);
        let next_spot = s.omega() + s.gamma * spot + s.alpha * iv + s.beta * jv;
        let direct = map.apply(next_spot);
        let rec = t.omega_g + t.gamma * map.apply(spot) + t.alpha_g * iv + t.beta_g * jv;
        assert!((direct - rec).abs() < 1e-12, "{direct} vs {rec}");
    }

    #[test]
    fn stationary_spot_mean_near_simulation_start() {
        let (s, j) = reference_structural();
        let m = stationary_spot_mean(&s, &j).unwrap();
        assert!((m - 1.4).abs() < 0.05, "{m}");
    }
}
