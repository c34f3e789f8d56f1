//! Euler–Maruyama paths of the realized GARCH-Itô jump-diffusion.
//!
//! Within day `i` (intraday time `tau` in `[0, 1]`, anchor `S` = spot
//! variance at `i - 1`):
//!
//! ```text
//! sigma^2 = S + gamma tau^2 (omega1 + S) - tau (omega2 + S)
//!         + alpha A + beta J + nu (1 - tau) Z^2
//! ```
//!
//! with `A` the running integrated variance, `J` the running sum of squared
//! jumps and `Z` the running Brownian increment of `W` since the open. At
//! the close the anchor is updated to `omega + gamma S + alpha A + beta J`.
//!
//! Every day draws from its own ChaCha stream (keyed by seed, day and
//! purpose), so days and replications are independent and reproducible.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{
    reference_design, ConditionalIvMap, JumpParams, JumpSizeLaw, OptionLinkParams, StructuralParams,
};
use crate::realized::TickDay;

/// Substeps per day the default discretization guarantees.
pub const MIN_SUBSTEPS_PER_DAY: usize = 23_400;
/// Largest tolerated share of floored variance evaluations.
pub const MAX_FLOORED_SHARE: f64 = 0.01;
const SPOT_FLOOR_REL: f64 = 1e-12;
const MIN_SQUARED_JUMP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub structural: StructuralParams<f64>,
    pub jumps: JumpParams<f64>,
    pub link: OptionLinkParams<f64>,
    pub n_days: usize,
    pub ticks_per_day: usize,
    pub noise_sd: f64,
    pub x0: f64,
    pub sigma0_sq: f64,
    pub seed: u64,
    pub euler_substeps_per_tick: usize,
}

impl SimConfig {
    /// Reference design with `n_days` days of `m` ticks.
    pub fn reference(n_days: usize, m: usize, seed: u64) -> Self {
        let d = reference_design();
        Self {
            structural: d.structural,
            jumps: d.jumps,
            link: d.link,
            n_days,
            ticks_per_day: m,
            noise_sd: d.noise_sd,
            x0: d.x0,
            sigma0_sq: d.sigma0_sq,
            seed,
            euler_substeps_per_tick: default_substeps(m),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.structural.validate()?;
        self.jumps.validate()?;
        if self.n_days == 0 {
            return Err(Error::InvalidInput("n_days must be >= 1".into()));
        }
        if self.ticks_per_day < 2 {
            return Err(Error::InvalidInput("ticks_per_day must be >= 2".into()));
        }
        if !(self.noise_sd >= 0.0) {
            return Err(Error::InvalidInput("noise_sd must be >= 0".into()));
        }
        if !(self.sigma0_sq > 0.0) {
            return Err(Error::InvalidInput("sigma0_sq must be > 0".into()));
        }
        if self.euler_substeps_per_tick == 0 {
            return Err(Error::InvalidInput("euler_substeps_per_tick must be >= 1".into()));
        }
        if !(self.link.sigma_e2 >= 0.0) {
            return Err(Error::InvalidInput("sigma_e2 must be >= 0".into()));
        }
        Ok(())
    }

    pub fn substeps_per_day(&self) -> usize {
        self.ticks_per_day * self.euler_substeps_per_tick
    }
}

/// `1` for `m >= 23400`, else `ceil(23400 / m)`.
pub fn default_substeps(m: usize) -> usize {
    if m >= MIN_SUBSTEPS_PER_DAY {
        1
    } else {
        MIN_SUBSTEPS_PER_DAY.div_ceil(m.max(1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JumpEvent {
    /// 1-based day.
    pub day: usize,
    /// Intraday time in `(0, 1)`.
    pub time: f64,
    pub size: f64,
}

impl JumpEvent {
    /// 1-based index `j` of the tick increment `(t_{j-1}, t_j]` holding the jump.
    pub fn tick_interval(&self, m: usize) -> usize {
        ((self.time * m as f64).ceil() as usize).clamp(1, m)
    }
}

/// Everything generated for one day.
#[derive(Debug, Clone, PartialEq)]
pub struct SimDay {
    pub ticks: TickDay<f64>,
    /// Clean log prices on the tick grid (`m + 1` points).
    pub latent_x: Vec<f64>,
    pub true_iv: f64,
    pub true_jv: f64,
    pub true_h: f64,
    /// Spot variance at the open.
    pub spot_open: f64,
    pub jumps: Vec<JumpEvent>,
    /// Option-implied variance quoted at the open, `b + a h + e`.
    pub nv: f64,
    pub link_noise: f64,
    pub floored_substeps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub ticks: Vec<TickDay<f64>>,
    pub latent_x: Vec<Vec<f64>>,
    pub true_iv: Vec<f64>,
    pub true_jv: Vec<f64>,
    pub true_h: Vec<f64>,
    pub spot_open: Vec<f64>,
    pub jump_times: Vec<JumpEvent>,
    pub nv: Vec<f64>,
    pub link_noise: Vec<f64>,
    pub floored_substeps: usize,
    pub total_substeps: usize,
}

#[derive(Clone, Copy)]
enum Stream {
    Path = 0,
    Jumps = 1,
    Noise = 2,
    Link = 3,
}

fn stream_rng(seed: u64, day: usize, purpose: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((day as u64) << 2 | purpose as u64);
    rng
}

/// Mixes a replication index into a base seed (SplitMix64 finalizer).
pub fn replication_seed(base: u64, replication: u64) -> u64 {
    let mut z = base.wrapping_add(replication.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn draw_squared_jump(rng: &mut ChaCha8Rng, j: &JumpParams<f64>) -> f64 {
    let sq = match j.law {
        JumpSizeLaw::SquaredNormal => {
            j.omega_l + j.zeta2.sqrt() * rng.sample::<f64, _>(StandardNormal)
        }
        JumpSizeLaw::SignedNormal => {
            let (delta, eta) = j.signed_normal_moments();
            let l = delta + eta.sqrt() * rng.sample::<f64, _>(StandardNormal);
            l * l
        }
    };
    sq.max(MIN_SQUARED_JUMP)
}

/// Day-by-day generator; [`simulate`] collects it.
pub struct Simulator {
    cfg: SimConfig,
    map: ConditionalIvMap<f64>,
    day: usize,
    spot: f64,
    x: f64,
    floored: usize,
}

impl Simulator {
    pub fn new(cfg: SimConfig) -> Result<Self> {
        cfg.validate()?;
        let map = ConditionalIvMap::new(&cfg.structural, &cfg.jumps)?;
        Ok(Self {
            spot: cfg.sigma0_sq,
            x: cfg.x0,
            cfg,
            map,
            day: 0,
            floored: 0,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    /// Generates the next day, or `None` after `n_days`.
    pub fn next_day(&mut self) -> Option<Result<SimDay>> {
        if self.day >= self.cfg.n_days {
            return None;
        }
        self.day += 1;
        let out = self.step_day();
        self.floored += out.floored_substeps;
        let total = self.day * self.cfg.substeps_per_day();
        if self.floored as f64 > MAX_FLOORED_SHARE * total as f64 {
            self.day = self.cfg.n_days;
            return Some(Err(Error::Numerical(format!(
                "spot variance floored on {} of {} substeps; parameters incompatible with positivity",
                self.floored, total
            ))));
        }
        Some(Ok(out))
    }

    fn step_day(&mut self) -> SimDay {
        let cfg = &self.cfg;
        let s = &cfg.structural;
        let day = self.day;
        let m = cfg.ticks_per_day;
        let sub = cfg.euler_substeps_per_tick;
        let n_steps = m * sub;
        let dt = 1.0 / n_steps as f64;
        let sqrt_dt = dt.sqrt();
        let rho_perp = (1.0 - s.rho * s.rho).max(0.0).sqrt();
        let floor = SPOT_FLOOR_REL * cfg.sigma0_sq;

        let mut path_rng = stream_rng(cfg.seed, day, Stream::Path);
        let mut jump_rng = stream_rng(cfg.seed, day, Stream::Jumps);
        let mut noise_rng = stream_rng(cfg.seed, day, Stream::Noise);
        let mut link_rng = stream_rng(cfg.seed, day, Stream::Link);

        let mut jumps = Vec::new();
        if cfg.jumps.lambda > 0.0 {
            let count = Poisson::new(cfg.jumps.lambda)
                .map(|p| p.sample(&mut jump_rng) as usize)
                .unwrap_or(0);
            for _ in 0..count {
                let time: f64 = jump_rng.random();
                let sq = draw_squared_jump(&mut jump_rng, &cfg.jumps);
                let sign = if jump_rng.random::<bool>() { 1.0 } else { -1.0 };
                jumps.push(JumpEvent {
                    day,
                    time,
                    size: sign * sq.sqrt(),
                });
            }
            jumps.sort_by(|a, b| a.time.total_cmp(&b.time));
        }

        let spot_open = self.spot;
        let true_h = self.map.apply(spot_open);
        let (c_quad, c_lin) = (s.gamma * (s.omega1 + spot_open), s.omega2 + spot_open);

        let mut x = self.x;
        let mut latent = Vec::with_capacity(m + 1);
        latent.push(x);
        let (mut a_int, mut j_sum, mut z) = (0.0_f64, 0.0_f64, 0.0_f64);
        let mut next_jump = 0;
        let mut floored = 0;
        for k in 0..n_steps {
            let tau = k as f64 * dt;
            let mut var = spot_open + c_quad * tau * tau - c_lin * tau
                + s.alpha * a_int
                + s.beta * j_sum
                + s.nu * (1.0 - tau) * z * z;
            if !(var >= floor) {
                var = floor;
                floored += 1;
            }
            let e1: f64 = path_rng.sample(StandardNormal);
            let e2: f64 = path_rng.sample(StandardNormal);
            let dw = sqrt_dt * e1;
            let db = s.rho * dw + rho_perp * sqrt_dt * e2;
            x += var.sqrt() * db;
            a_int += var * dt;
            z += dw;
            let tau_end = (k + 1) as f64 * dt;
            while next_jump < jumps.len() && jumps[next_jump].time <= tau_end {
                let l = jumps[next_jump].size;
                x += l;
                j_sum += l * l;
                next_jump += 1;
            }
            if (k + 1) % sub == 0 {
                latent.push(x);
            }
        }

        let mut prices = latent.clone();
        if cfg.noise_sd > 0.0 {
            for p in prices.iter_mut().take(m).skip(1) {
                *p += cfg.noise_sd * noise_rng.sample::<f64, _>(StandardNormal);
            }
        }
        let fractions = (0..=m).map(|j| j as f64 / m as f64).collect();
        let ticks = TickDay {
            day_index: day,
            fractions,
            prices,
        };

        let link_noise = cfg.link.sigma_e2.sqrt() * link_rng.sample::<f64, _>(StandardNormal);
        let nv = cfg.link.b + cfg.link.a * true_h + link_noise;

        self.spot = s.omega() + s.gamma * spot_open + s.alpha * a_int + s.beta * j_sum;
        self.x = x;

        SimDay {
            ticks,
            latent_x: latent,
            true_iv: a_int,
            true_jv: j_sum,
            true_h,
            spot_open,
            jumps,
            nv,
            link_noise,
            floored_substeps: floored,
        }
    }
}

impl Iterator for Simulator {
    type Item = Result<SimDay>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_day()
    }
}

/// Simulates the whole panel.
pub fn simulate(cfg: &SimConfig) -> Result<SimOutput> {
    let sim = Simulator::new(cfg.clone())?;
    let n = cfg.n_days;
    let mut out = SimOutput {
        ticks: Vec::with_capacity(n),
        latent_x: Vec::with_capacity(n),
        true_iv: Vec::with_capacity(n),
        true_jv: Vec::with_capacity(n),
        true_h: Vec::with_capacity(n),
        spot_open: Vec::with_capacity(n),
        jump_times: Vec::new(),
        nv: Vec::with_capacity(n),
        link_noise: Vec::with_capacity(n),
        floored_substeps: 0,
        total_substeps: n * cfg.substeps_per_day(),
    };
    for day in sim {
        let d = day?;
        out.ticks.push(d.ticks);
        out.latent_x.push(d.latent_x);
        out.true_iv.push(d.true_iv);
        out.true_jv.push(d.true_jv);
        out.true_h.push(d.true_h);
        out.spot_open.push(d.spot_open);
        out.jump_times.extend(d.jumps);
        out.nv.push(d.nv);
        out.link_noise.push(d.link_noise);
        out.floored_substeps += d.floored_substeps;
    }
    Ok(out)
}

/// Per-day martingale differences `D_i = IV_i - h_i`.
pub fn realized_d(output: &SimOutput) -> Vec<f64> {
    output
        .true_iv
        .iter()
        .zip(&output.true_h)
        .map(|(iv, h)| iv - h)
        .collect()
}
