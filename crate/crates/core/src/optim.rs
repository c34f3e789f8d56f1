//! Derivative-free minimization (Nelder–Mead with adaptive coefficients).

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NelderMeadConfig {
    /// Stop when both the spread of vertex values and the largest vertex
    /// distance from the best point fall below this.
    pub tol: f64,
    pub max_evals: usize,
    /// Edge length of the initial simplex.
    pub initial_step: f64,
    /// Number of fresh restarts from the best point after convergence.
    pub restarts: usize,
}

impl Default for NelderMeadConfig {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_evals: 20_000,
            initial_step: 0.25,
            restarts: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub fx: f64,
    pub n_evals: usize,
    pub converged: bool,
}

/// Minimizes `f` from `x0`. Non-finite values are treated as `+inf`.
pub fn nelder_mead<F>(mut f: F, x0: &[f64], cfg: &NelderMeadConfig) -> OptimResult
where
    F: FnMut(&[f64]) -> f64,
{
    let mut evals = 0;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };
    let mut best = x0.to_vec();
    let mut best_f = eval(&best, &mut evals);
    let mut converged = false;
    for _ in 0..=cfg.restarts {
        let budget = cfg.max_evals.saturating_sub(evals);
        if budget == 0 {
            break;
        }
        let (x, fx, used, ok) = run(&mut |x: &[f64]| eval(x, &mut 0), &best, best_f, cfg, budget);
        evals += used;
        let improved = fx < best_f;
        if fx <= best_f {
            best = x;
            best_f = fx;
        }
        converged = ok;
        if ok && !improved {
            break;
        }
    }
    OptimResult {
        x: best,
        fx: best_f,
        n_evals: evals,
        converged,
    }
}

fn run(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x0: &[f64],
    f0: f64,
    cfg: &NelderMeadConfig,
    budget: usize,
) -> (Vec<f64>, f64, usize, bool) {
    let n = x0.len();
    if n == 0 {
        return (Vec::new(), f0, 0, true);
    }
    let nf = n as f64;
    let (alpha, beta, gamma, delta) = (1.0, 1.0 + 2.0 / nf, 0.75 - 0.5 / nf, 1.0 - 1.0 / nf);
    let mut used = 0;
    let mut call = |x: &[f64], used: &mut usize| {
        *used += 1;
        f(x)
    };

    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((x0.to_vec(), f0));
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += cfg.initial_step;
        let fx = call(&x, &mut used);
        simplex.push((x, fx));
    }

    let combine = |a: &[f64], b: &[f64], t: f64| -> Vec<f64> {
        a.iter().zip(b).map(|(ai, bi)| ai + t * (bi - ai)).collect()
    };

    loop {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (best, best_f) = (&simplex[0].0, simplex[0].1);
        let f_spread = simplex.iter().map(|v| (v.1 - best_f).abs()).fold(0.0, f64::max);
        let x_spread = simplex
            .iter()
            .flat_map(|v| v.0.iter().zip(best).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        if best_f.is_finite() && f_spread <= cfg.tol && x_spread <= cfg.tol {
            let (x, fx) = simplex.swap_remove(0);
            return (x, fx, used, true);
        }
        if used >= budget {
            let (x, fx) = simplex.swap_remove(0);
            return (x, fx, used, false);
        }

        let mut centroid = vec![0.0; n];
        for v in &simplex[..n] {
            for (c, xi) in centroid.iter_mut().zip(&v.0) {
                *c += xi / nf;
            }
        }
        let worst_f = simplex[n].1;
        let second_f = simplex[n - 1].1;

        let xr = combine(&centroid, &simplex[n].0, -alpha);
        let fr = call(&xr, &mut used);
        if fr < best_f {
            let xe = combine(&centroid, &simplex[n].0, -alpha * beta);
            let fe = call(&xe, &mut used);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr < second_f {
            simplex[n] = (xr, fr);
            continue;
        }
        let (xc, fc) = if fr < worst_f {
            let xc = combine(&centroid, &xr, gamma);
            let fc = call(&xc, &mut used);
            (xc, fc)
        } else {
            let xc = combine(&centroid, &simplex[n].0, gamma);
            let fc = call(&xc, &mut used);
            (xc, fc)
        };
        if fc < worst_f.min(fr) {
            simplex[n] = (xc, fc);
            continue;
        }
        let anchor = simplex[0].0.clone();
        for v in simplex.iter_mut().skip(1) {
            v.0 = combine(&anchor, &v.0, delta);
            v.1 = call(&v.0, &mut used);
        }
    }
}
