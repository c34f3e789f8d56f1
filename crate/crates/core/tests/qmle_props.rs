mod common;

use nalgebra::DMatrix;
use proptest::prelude::*;
use rgito::model::{reference_design, FullParams, GarchParams, JumpParams};
use rgito::qmle::{fit, loglik, loglik_gh_terms, numeric_hessian, EstimationInput, FitConfig, Mode, ParamBoxes};

fn truth() -> [f64; 7] {
    let d = reference_design();
    FullParams {
        theta: d.theta,
        link: d.link,
    }
    .to_array()
}

fn quick_fit() -> FitConfig {
    FitConfig {
        compute_se: false,
        ..FitConfig::default()
    }
}

#[test]
fn estimate_dominates_truth_in_likelihood() {
    let t = truth();
    for rep in 0..8 {
        let (input, _) = common::coarse_panel(250, 390, 3, rep);
        for mode in [Mode::Hl, Mode::Hlo] {
            let r = fit(&input, mode, &quick_fit()).unwrap();
            let at_truth = loglik(mode, &t[..mode.dim()], &input).unwrap_or(f64::NEG_INFINITY);
            assert!(r.loglik >= at_truth, "rep {rep} {mode}: {} < {at_truth}", r.loglik);
        }
    }
}

fn stationary_theta() -> impl Strategy<Value = GarchParams<f64>> {
    (1e-4..2.0f64, 1e-3..0.9f64, 0.0..2.0f64, 0.0..1.0f64)
        .prop_map(|(w, a, b, s)| GarchParams::new(w, a, b, (0.999 - a) * s))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn each_term_is_bounded_by_its_realized_variance(
        theta in stationary_theta(),
        rv in prop::collection::vec(1e-4..5.0f64, 1..80),
        jv_scale in 0.0..0.3f64,
        lambda in 0.0..30.0f64,
    ) {
        let jv: Vec<f64> = rv.iter().map(|r| r * jv_scale).collect();
        let input = EstimationInput::new(rv.clone(), jv, None, JumpParams::new(lambda, 0.005, 0.0)).unwrap();
        let terms = loglik_gh_terms(&theta, &input).unwrap();
        for (t, r) in terms.iter().zip(&rv) {
            prop_assert!(*t <= -(r.ln() + 1.0) + 1e-12 * r.ln().abs().max(1.0));
        }
    }
}

#[test]
fn rescaling_the_data_rescales_omega_only() {
    let (input, _) = common::coarse_panel(300, 390, 12, 0);
    let base = fit(&input, Mode::Hl, &quick_fit()).unwrap();
    for c in [0.25, 4.0] {
        let j = input.jump_params;
        let scaled = EstimationInput::new(
            input.rv.iter().map(|v| v * c).collect(),
            input.jv.iter().map(|v| v * c).collect(),
            None,
            JumpParams { omega_l: j.omega_l * c, ..j },
        )
        .unwrap();
        let r = fit(&scaled, Mode::Hl, &quick_fit()).unwrap();
        let (p, q) = (base.theta.to_array(), r.theta.to_array());
        assert!((q[0] / (c * p[0]) - 1.0).abs() < 1e-3, "c={c}: omega {} vs {}", q[0], c * p[0]);
        for k in 1..4 {
            assert!((q[k] - p[k]).abs() < 1e-3, "c={c} coord {k}: {} vs {}", q[k], p[k]);
        }
        let shift = -(input.n() as f64) * c.ln();
        assert!((r.loglik - base.loglik - shift).abs() < 1e-6 * base.loglik.abs());
    }
}

#[test]
fn truth_is_a_local_maximum_of_the_joint_likelihood() {
    let t = truth();
    let reps = 200;
    let mut maximal = 0;
    for rep in 0..reps {
        let (input, _) = common::coarse_panel(1000, 2340, 29, rep);
        let at_truth = loglik(Mode::Hlo, &t, &input).unwrap_or(f64::NEG_INFINITY);
        let beats_all = (0..7).all(|j| {
            let mut p = t;
            p[j] += 0.1;
            at_truth >= loglik(Mode::Hlo, &p, &input).unwrap_or(f64::NEG_INFINITY)
        });
        maximal += beats_all as usize;
    }
    assert!(maximal as f64 >= 0.95 * reps as f64, "{maximal}/{reps}");
}

#[test]
fn sandwich_covariance_scales_inversely_with_sample_size() {
    let reps = 100;
    let cfg = FitConfig::default();
    let mut diag = [[0.0f64; 4]; 2];
    for rep in 0..reps {
        for (slot, n) in [1000usize, 2000].into_iter().enumerate() {
            let (input, _) = common::coarse_panel(n, 390, 40 + slot as u64, rep);
            let r = fit(&input, Mode::Hl, &cfg).unwrap();
            let s = r.sandwich.expect("sandwich");
            for k in 0..4 {
                diag[slot][k] += s.covariance[(k, k)] / reps as f64;
            }
        }
    }
    for k in 0..4 {
        let ratio = diag[1][k] / diag[0][k];
        assert!((ratio / 0.5 - 1.0).abs() <= 0.25, "coord {k}: ratio {ratio}");
    }
}

fn interior(p: &[f64]) -> bool {
    let b = ParamBoxes::default();
    let boxes = [b.omega_g, b.alpha_g, b.beta_g, b.gamma, b.a, b.b, b.sigma_e2];
    p.iter().zip(boxes).all(|(x, (lo, hi))| *x > 100.0 * lo && *x < 0.99 * hi)
        && p[1] + p[3] < b.persistence_cap - 1e-3
}

#[test]
fn negative_hessian_is_positive_definite_at_interior_estimates() {
    let mut checked = [0usize; 2];
    for rep in 0..10 {
        let (input, _) = common::coarse_panel(1000, 2340, 51, rep);
        for (slot, mode) in [Mode::Hl, Mode::Hlo].into_iter().enumerate() {
            let r = fit(&input, mode, &quick_fit()).unwrap();
            if !(r.converged && interior(&r.params())) {
                continue;
            }
            checked[slot] += 1;
            let h: DMatrix<f64> = numeric_hessian(mode, &r.params(), &input).unwrap();
            assert!((-h).cholesky().is_some(), "rep {rep} {mode}: -H not SPD");
        }
    }
    assert!(checked.iter().all(|&c| c >= 5), "interior estimates {checked:?}");
}

fn mse(n: usize, m: usize, substeps: usize, reps: u64) -> Vec<f64> {
    let t = truth();
    let mut acc = vec![0.0; 4];
    for rep in 0..reps {
        let cfg = common::design(n, m, substeps, rgito::simulator::replication_seed(70, rep));
        let (input, _) = common::panel(&cfg);
        let r = fit(&input, Mode::Hl, &quick_fit()).unwrap();
        for (k, p) in r.theta.to_array().iter().enumerate() {
            acc[k] += (p - t[k]).powi(2) / reps as f64;
        }
    }
    acc
}

#[test]
fn longer_panels_estimate_more_precisely() {
    let short = mse(125, 390, 1, 40);
    let long = mse(1000, 390, 1, 40);
    let (s, l): (f64, f64) = (short.iter().sum(), long.iter().sum());
    assert!(l < s, "aggregate mse n=1000 {l} vs n=125 {s}");
}

#[test]
#[ignore = "full-scale Monte Carlo, about an hour"]
fn rate_direction_at_full_scale() {
    let short = mse(125, 23_400, 1, 100);
    let long = mse(1000, 23_400, 1, 100);
    for k in 0..4 {
        assert!(long[k] <= short[k], "coord {k}: {} > {}", long[k], short[k]);
    }
    let coarse = mse(1000, 2340, 10, 100);
    assert!(long.iter().sum::<f64>() <= coarse.iter().sum::<f64>());
}
