use rgito::model::{stationary_h_mean, JumpParams};
use rgito::options::link_residuals;
use rgito::simulator::{realized_d, replication_seed, simulate, SimConfig};

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn coarse(n: usize, m: usize, seed: u64) -> SimConfig {
    let mut cfg = SimConfig::reference(n, m, seed);
    cfg.euler_substeps_per_tick = 1;
    cfg
}

#[test]
fn mean_true_h_matches_stationary_mean() {
    let d = rgito::model::reference_design();
    let target = stationary_h_mean(&d.theta, &d.jumps).unwrap();
    assert!((target - 1.2234).abs() < 1e-3, "{target}");
    let reps = 200;
    let mut total = 0.0;
    for r in 0..reps {
        let out = simulate(&coarse(125, 390, replication_seed(11, r))).unwrap();
        total += out.true_h.iter().sum::<f64>() / 125.0;
    }
    let mean = total / reps as f64;
    assert!((mean - target).abs() < 0.1, "mean true_h {mean} vs {target}");
}

#[test]
fn first_day_martingale_difference_has_zero_mean() {
    let reps = 2000;
    let d1: Vec<f64> = (0..reps)
        .map(|r| realized_d(&simulate(&SimConfig::reference(1, 390, replication_seed(5, r))).unwrap())[0])
        .collect();
    let (mean, sd) = mean_sd(&d1);
    assert!(mean.abs() < 3.0 * sd / (reps as f64).sqrt(), "mean {mean} sd {sd}");
}

#[test]
fn doubling_nu_doubles_continuous_innovation() {
    let reps = 400;
    let draw = |nu: f64| -> Vec<f64> {
        (0..reps)
            .map(|r| {
                let mut cfg = coarse(1, 780, replication_seed(8, r));
                cfg.jumps = JumpParams::none();
                cfg.structural.nu = nu;
                realized_d(&simulate(&cfg).unwrap())[0]
            })
            .collect()
    };
    let (_, sd1) = mean_sd(&draw(0.3));
    let (_, sd2) = mean_sd(&draw(0.6));
    let ratio = sd2 / sd1;
    assert!((1.8..=2.2).contains(&ratio), "ratio {ratio}");
}

#[test]
fn observation_noise_has_configured_variance() {
    let (n, m) = (300, 390);
    let cfg = coarse(n, m, 21);
    let out = simulate(&cfg).unwrap();
    let mut diffs = Vec::with_capacity(n * m);
    for (t, x) in out.ticks.iter().zip(&out.latent_x) {
        for j in 1..m {
            diffs.push(t.prices[j] - x[j]);
        }
    }
    assert!(diffs.len() >= 100_000);
    let var = diffs.iter().map(|d| d * d).sum::<f64>() / diffs.len() as f64;
    let target = cfg.noise_sd * cfg.noise_sd;
    assert!((var / target - 1.0).abs() < 0.05, "{var} vs {target}");
}

#[test]
fn jump_counts_are_poisson_mean() {
    let reps = 400;
    let mut counts = 0usize;
    for r in 0..reps {
        let out = simulate(&coarse(1, 390, replication_seed(33, r))).unwrap();
        counts += out.jump_times.len();
    }
    let lambda = 26.0;
    let mean = counts as f64 / reps as f64;
    assert!((mean - lambda).abs() < 3.0 * (lambda / reps as f64).sqrt(), "mean count {mean}");
}

#[test]
fn option_link_residuals_have_zero_mean() {
    let reps = 1000;
    let e: Vec<f64> = (0..reps)
        .map(|r| {
            let out = simulate(&coarse(1, 50, replication_seed(44, r))).unwrap();
            let link = SimConfig::reference(1, 50, 0).link;
            out.nv[0] - link.b - link.a * out.true_h[0]
        })
        .collect();
    let (mean, sd) = mean_sd(&e);
    assert!(mean.abs() < 3.0 * sd / (reps as f64).sqrt(), "mean {mean} sd {sd}");
}

#[test]
fn link_residual_variance_matches_sigma_e2() {
    let cfg = coarse(2000, 50, 77);
    let out = simulate(&cfg).unwrap();
    let resid = link_residuals(&out.nv, &out.true_h, &cfg.link).unwrap();
    let var = resid.iter().map(|r| r * r).sum::<f64>() / resid.len() as f64;
    assert!((var / cfg.link.sigma_e2 - 1.0).abs() < 0.10, "{var} vs {}", cfg.link.sigma_e2);
}

#[test]
fn identical_seed_gives_identical_output() {
    let cfg = SimConfig::reference(3, 390, 2024);
    assert_eq!(simulate(&cfg).unwrap(), simulate(&cfg).unwrap());
}
