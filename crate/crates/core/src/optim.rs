//! Nelder-Mead simplex minimization.
//!
//! Uses the dimension-adaptive coefficients of Gao & Han (2012), which keep
//! the simplex from collapsing prematurely on problems with more than a
//! handful of parameters.

#[derive(Debug, Clone, PartialEq)]
pub struct NelderMeadOptions {
    /// Maximum iterations per simplex run.
    pub max_iter: usize,
    /// Convergence threshold on the spread `f_max - f_min` over the simplex.
    pub tol: f64,
    /// Fresh simplices built around the incumbent after a run converges.
    pub restarts: usize,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        NelderMeadOptions {
            max_iter: 5000,
            tol: 1e-8,
            restarts: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NelderMeadResult {
    pub x: Vec<f64>,
    pub fx: f64,
    /// Iterations summed over all runs.
    pub iterations: usize,
    /// The last run ended on the spread criterion rather than `max_iter`.
    pub converged: bool,
}

/// Minimizes `f` starting from `x0`. `step[i]` is the initial simplex edge
/// along coordinate i. Non-finite objective values are treated as +∞.
pub fn nelder_mead<F>(
    mut f: F,
    x0: &[f64],
    step: &[f64],
    opts: &NelderMeadOptions,
) -> NelderMeadResult
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(x0.len(), step.len());
    let mut eval = |x: &[f64]| {
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    let mut x = x0.to_vec();
    let mut fx = eval(&x);
    let mut iterations = 0;
    let mut converged = false;
    for run in 0..=opts.restarts {
        let (xr, fr, it, conv) = single_run(&mut eval, &x, fx, step, opts);
        iterations += it;
        converged = conv;
        let improvement = fx - fr;
        if fr <= fx {
            x = xr;
            fx = fr;
        }
        if run > 0 && !(improvement > opts.tol) {
            break;
        }
    }
    NelderMeadResult {
        x,
        fx,
        iterations,
        converged,
    }
}

fn single_run<F>(
    f: &mut F,
    x0: &[f64],
    f0: f64,
    step: &[f64],
    opts: &NelderMeadOptions,
) -> (Vec<f64>, f64, usize, bool)
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x0.len();
    if n == 0 {
        return (Vec::new(), f0, 0, true);
    }
    let nf = n as f64;
    let (alpha, beta, gamma, delta) = if n >= 2 {
        (1.0, 1.0 + 2.0 / nf, 0.75 - 1.0 / (2.0 * nf), 1.0 - 1.0 / nf)
    } else {
        (1.0, 2.0, 0.5, 0.5)
    };

    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((x0.to_vec(), f0));
    for i in 0..n {
        let mut v = x0.to_vec();
        v[i] += step[i];
        let fv = f(&v);
        simplex.push((v, fv));
    }

    let point = |c: &[f64], w: &[f64], t: f64| -> Vec<f64> {
        c.iter().zip(w).map(|(ci, wi)| ci + t * (wi - ci)).collect()
    };

    let mut it = 0;
    loop {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let spread = simplex[n].1 - simplex[0].1;
        if spread.is_finite() && spread < opts.tol {
            return (simplex[0].0.clone(), simplex[0].1, it, true);
        }
        if it >= opts.max_iter {
            return (simplex[0].0.clone(), simplex[0].1, it, false);
        }
        it += 1;

        let mut centroid = vec![0.0; n];
        for (v, _) in &simplex[..n] {
            for (c, vi) in centroid.iter_mut().zip(v) {
                *c += vi / nf;
            }
        }
        let worst = simplex[n].0.clone();
        let f_worst = simplex[n].1;
        let f_best = simplex[0].1;
        let f_second = simplex[n - 1].1;

        let xr = point(&centroid, &worst, -alpha);
        let fr = f(&xr);
        if fr < f_best {
            let xe = point(&centroid, &worst, -alpha * beta);
            let fe = f(&xe);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr < f_second {
            simplex[n] = (xr, fr);
            continue;
        }
        let (xc, fc) = if fr < f_worst {
            let xc = point(&centroid, &worst, -alpha * gamma);
            let fc = f(&xc);
            (xc, fc)
        } else {
            let xc = point(&centroid, &worst, gamma);
            let fc = f(&xc);
            (xc, fc)
        };
        if fc < fr.min(f_worst) {
            simplex[n] = (xc, fc);
            continue;
        }
        // shrink toward the best vertex
        let best = simplex[0].0.clone();
        for (v, fv) in simplex.iter_mut().skip(1) {
            *v = point(&best, v, delta);
            *fv = f(v);
        }
    }
}
