//! Kalman filtering, exact Gaussian log-likelihood, and maximum-likelihood
//! calibration of the (functional-regression extended) two-factor model.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix2xX, MatrixXx2, Vector2};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{AlignedDataset, FuturesPanel};
use crate::error::{Error, Result};
use crate::kpca::FactorScores;
use crate::model::{ModelParams, StateSpaceMatrices};
use crate::optim::{nelder_mead, NelderMeadOptions};
use crate::rng::{self, Consumer};

/// Objective value assigned to parameter points where the filter breaks down.
pub const INFEASIBLE_PENALTY: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub a0: Vector2<f64>,
    pub p0: Matrix2<f64>,
    /// Replace each covariance by `(P + Pᵀ)/2` after every step.
    pub symmetrize: bool,
}

impl FilterConfig {
    /// χ starts at 0 and ξ at the mean log price of the first date, both with
    /// variance 0.5.
    pub fn for_futures(futures: &FuturesPanel) -> Self {
        let first_mean = if futures.n_dates() > 0 {
            futures.log_prices.row(0).mean()
        } else {
            0.0
        };
        FilterConfig {
            a0: Vector2::new(0.0, first_mean),
            p0: Matrix2::from_diagonal(&Vector2::new(0.5, 0.5)),
            symmetrize: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.a0.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParam("a0 must be finite".into()));
        }
        let sym = (self.p0 - self.p0.transpose()).amax() <= 1e-12 * self.p0.amax();
        if !sym || self.p0.cholesky().is_none() {
            return Err(Error::InvalidParam(
                "P0 must be symmetric positive definite".into(),
            ));
        }
        Ok(())
    }
}

fn sym2(p: Matrix2<f64>) -> Matrix2<f64> {
    0.5 * (p + p.transpose())
}

/// `a⁻ = C + E a`, `P⁻ = E P Eᵀ + Σ_v`.
pub fn kalman_predict(
    a: &Vector2<f64>,
    p: &Matrix2<f64>,
    c: &Vector2<f64>,
    e: &Matrix2<f64>,
    sigma_v: &Matrix2<f64>,
    symmetrize: bool,
) -> (Vector2<f64>, Matrix2<f64>) {
    let a_pred = c + e * a;
    let p_pred = e * p * e.transpose() + sigma_v;
    (a_pred, if symmetrize { sym2(p_pred) } else { p_pred })
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateResult {
    pub a: Vector2<f64>,
    pub p: Matrix2<f64>,
    /// `e = y - D - F a⁻ - Γ u`
    pub innovation: DVector<f64>,
    /// `L = F P⁻ Fᵀ + Σ_w`
    pub innovation_cov: DMatrix<f64>,
    /// `K = P⁻ Fᵀ L⁻¹`, 2×P.
    pub gain: Matrix2xX<f64>,
    /// `eᵀ L⁻¹ e`
    pub mahalanobis: f64,
    /// `log |L|`
    pub log_det: f64,
}

/// Measurement update. All solves go through the Cholesky factor of `L`;
/// a non-SPD `L` is reported as a numerical error.
#[allow(clippy::too_many_arguments)]
pub fn kalman_update(
    a_pred: &Vector2<f64>,
    p_pred: &Matrix2<f64>,
    y: &DVector<f64>,
    d: &DVector<f64>,
    f: &MatrixXx2<f64>,
    gamma: &DMatrix<f64>,
    u: Option<&DVector<f64>>,
    sigma_w: &DMatrix<f64>,
    symmetrize: bool,
) -> Result<UpdateResult> {
    let np = y.len();
    if d.len() != np || f.nrows() != np || sigma_w.shape() != (np, np) || gamma.nrows() != np {
        return Err(Error::Shape(
            "measurement matrices do not match the observation".into(),
        ));
    }
    let mut innovation = y - d - f * a_pred;
    if let Some(u) = u {
        if gamma.ncols() != u.len() {
            return Err(Error::Shape(
                "Gamma columns do not match factor scores".into(),
            ));
        }
        innovation -= gamma * u;
    }
    let fp = f * p_pred; // P×2
    let innovation_cov = &fp * f.transpose() + sigma_w;
    let chol = innovation_cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("innovation covariance is not positive definite".into()))?;
    // L Kᵀ = F P⁻  (P⁻ and L symmetric)
    let gain_t = chol.solve(&fp);
    let gain = gain_t.transpose();
    let a = a_pred + &gain * &innovation;
    let p = (Matrix2::identity() - &gain * f) * p_pred;
    let p = if symmetrize { sym2(p) } else { p };
    let l = chol.l_dirty();
    let whitened = l
        .solve_lower_triangular(&innovation)
        .ok_or_else(|| Error::Numerical("singular Cholesky factor".into()))?;
    let mahalanobis = whitened.norm_squared();
    let log_det = 2.0 * (0..np).map(|i| l[(i, i)].ln()).sum::<f64>();
    Ok(UpdateResult {
        a,
        p,
        innovation,
        innovation_cov,
        gain,
        mahalanobis,
        log_det,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutput {
    pub a_pred: Vec<Vector2<f64>>,
    pub a_filt: Vec<Vector2<f64>>,
    pub p_pred: Vec<Matrix2<f64>>,
    pub p_filt: Vec<Matrix2<f64>>,
    /// N×P one-step-ahead prediction errors.
    pub innovations: DMatrix<f64>,
    pub innovation_cov: Vec<DMatrix<f64>>,
    /// `-½ Σ_t (e_tᵀ L_t⁻¹ e_t + log|L_t|)`, without the 2π constant.
    pub loglik: f64,
}

impl FilterOutput {
    pub fn n_dates(&self) -> usize {
        self.a_pred.len()
    }
}

fn check_scores(q: usize, n: usize, scores: Option<&DMatrix<f64>>) -> Result<()> {
    match (q, scores) {
        (0, None) => Ok(()),
        (0, Some(_)) => Err(Error::InvalidParam(
            "factor scores given for a Q = 0 model".into(),
        )),
        (_, None) => Err(Error::InvalidParam(
            "factor scores required when Q > 0".into(),
        )),
        (q, Some(u)) if u.shape() != (n, q) => Err(Error::Shape(format!(
            "factor scores are {:?}, expected ({n}, {q})",
            u.shape()
        ))),
        _ => Ok(()),
    }
}

/// Filters an N×P observation matrix. `scores` is N×Q and must be present
/// exactly when `gamma` has columns.
pub fn filter_observations(
    m: &StateSpaceMatrices,
    gamma: &DMatrix<f64>,
    observations: &DMatrix<f64>,
    scores: Option<&DMatrix<f64>>,
    config: &FilterConfig,
) -> Result<FilterOutput> {
    let n = observations.nrows();
    check_scores(gamma.ncols(), n, scores)?;
    if observations.ncols() != m.p() {
        return Err(Error::Shape(
            "observation width differs from the tenor count".into(),
        ));
    }
    let mut out = FilterOutput {
        a_pred: Vec::with_capacity(n),
        a_filt: Vec::with_capacity(n),
        p_pred: Vec::with_capacity(n),
        p_filt: Vec::with_capacity(n),
        innovations: DMatrix::zeros(n, m.p()),
        innovation_cov: Vec::with_capacity(n),
        loglik: 0.0,
    };
    let mut a = config.a0;
    let mut p = config.p0;
    let mut total = 0.0;
    for t in 0..n {
        let (a_pred, p_pred) = kalman_predict(&a, &p, &m.c, &m.e, &m.sigma_v, config.symmetrize);
        let y = observations.row(t).transpose();
        let u = scores.map(|u| u.row(t).transpose());
        let up = kalman_update(
            &a_pred,
            &p_pred,
            &y,
            &m.d,
            &m.f,
            gamma,
            u.as_ref(),
            &m.sigma_w,
            config.symmetrize,
        )?;
        total += up.mahalanobis + up.log_det;
        out.innovations.set_row(t, &up.innovation.transpose());
        out.a_pred.push(a_pred);
        out.p_pred.push(p_pred);
        out.a_filt.push(up.a);
        out.p_filt.push(up.p);
        out.innovation_cov.push(up.innovation_cov);
        a = up.a;
        p = up.p;
    }
    out.loglik = -0.5 * total;
    if !out.loglik.is_finite() {
        return Err(Error::Numerical("non-finite log-likelihood".into()));
    }
    Ok(out)
}

/// Runs the filter over an aligned dataset with the given parameters.
pub fn run_filter(
    dataset: &AlignedDataset,
    params: &ModelParams,
    scores: Option<&FactorScores>,
    config: &FilterConfig,
) -> Result<FilterOutput> {
    params.validate()?;
    if let Some(s) = scores {
        if s.dates != dataset.futures.dates {
            return Err(Error::Shape(
                "factor score dates differ from the dataset".into(),
            ));
        }
    }
    let m = StateSpaceMatrices::new(params, &dataset.futures.tenors, dataset.dt)?;
    filter_observations(
        &m,
        &params.gamma,
        &dataset.futures.log_prices,
        scores.map(|s| &s.values),
        config,
    )
}

/// Log-likelihood only, or `None` at infeasible points.
fn loglik_or_none(
    dataset: &AlignedDataset,
    params: &ModelParams,
    scores: Option<&DMatrix<f64>>,
    config: &FilterConfig,
) -> Option<f64> {
    let m = StateSpaceMatrices::new(params, &dataset.futures.tenors, dataset.dt).ok()?;
    let y = &dataset.futures.log_prices;
    info_form_loglik(&m, &params.gamma, y, scores, config)
        .or_else(|| covariance_form_loglik(&m, &params.gamma, y, scores, config))
}

fn covariance_form_loglik(
    m: &StateSpaceMatrices,
    gamma: &DMatrix<f64>,
    y: &DMatrix<f64>,
    scores: Option<&DMatrix<f64>>,
    config: &FilterConfig,
) -> Option<f64> {
    let mut a = config.a0;
    let mut p = config.p0;
    let mut total = 0.0;
    for t in 0..y.nrows() {
        let (a_pred, p_pred) = kalman_predict(&a, &p, &m.c, &m.e, &m.sigma_v, config.symmetrize);
        let yt = y.row(t).transpose();
        let u = scores.map(|u| u.row(t).transpose());
        let up = kalman_update(
            &a_pred,
            &p_pred,
            &yt,
            &m.d,
            &m.f,
            gamma,
            u.as_ref(),
            &m.sigma_w,
            config.symmetrize,
        )
        .ok()?;
        total += up.mahalanobis + up.log_det;
        a = up.a;
        p = up.p;
    }
    let ll = -0.5 * total;
    ll.is_finite().then_some(ll)
}

/// The same likelihood computed through the 2×2 information form, which
/// relies on `Σ_w` being diagonal:
/// `L⁻¹ = H − H F M⁻¹ Fᵀ H` and `|L| = |Σ_w| |P⁻| |M|` with
/// `H = Σ_w⁻¹`, `M = P⁻⁻¹ + Fᵀ H F`. The update is `P = M⁻¹`,
/// `a = a⁻ + M⁻¹ Fᵀ H e`. Returns `None` when a 2×2 factor fails.
fn info_form_loglik(
    m: &StateSpaceMatrices,
    gamma: &DMatrix<f64>,
    y: &DMatrix<f64>,
    scores: Option<&DMatrix<f64>>,
    config: &FilterConfig,
) -> Option<f64> {
    let np = m.p();
    let sw = m.sigma_w.diagonal();
    if sw.iter().any(|&v| !(v > 0.0)) {
        return None;
    }
    let h = sw.map(|v| 1.0 / v);
    let log_det_w: f64 = sw.iter().map(|v| v.ln()).sum();
    let fth = DMatrix::from_fn(2, np, |r, i| m.f[(i, r)] * h[i]);
    let fthf: Matrix2<f64> = {
        let full = &fth * &m.f;
        Matrix2::new(full[(0, 0)], full[(0, 1)], full[(1, 0)], full[(1, 1)])
    };
    // measurement offsets D + Γ u_t for every date, N×P
    let mut offset = DMatrix::from_fn(y.nrows(), np, |_, i| m.d[i]);
    if let Some(u) = scores {
        if gamma.ncols() > 0 {
            offset += u * gamma.transpose();
        }
    }
    let mut a = config.a0;
    let mut p = config.p0;
    let mut total = 0.0;
    let mut e = vec![0.0; np];
    for t in 0..y.nrows() {
        let (a_pred, p_pred) = kalman_predict(&a, &p, &m.c, &m.e, &m.sigma_v, config.symmetrize);
        let p_chol = p_pred.cholesky()?;
        let p_inv = p_chol.inverse();
        let log_det_p = 2.0 * (p_chol.l_dirty()[(0, 0)].ln() + p_chol.l_dirty()[(1, 1)].ln());
        let mut ehe = 0.0;
        let mut g = Vector2::zeros();
        for i in 0..np {
            let ei = y[(t, i)] - offset[(t, i)] - m.f[(i, 0)] * a_pred[0] - m.f[(i, 1)] * a_pred[1];
            e[i] = ei;
            ehe += h[i] * ei * ei;
            g[0] += fth[(0, i)] * ei;
            g[1] += fth[(1, i)] * ei;
        }
        let mm = sym2(p_inv + fthf);
        let m_chol = mm.cholesky()?;
        let log_det_m = 2.0 * (m_chol.l_dirty()[(0, 0)].ln() + m_chol.l_dirty()[(1, 1)].ln());
        let mg = m_chol.solve(&g);
        total += ehe - g.dot(&mg) + log_det_w + log_det_p + log_det_m;
        a = a_pred + mg;
        p = m_chol.inverse();
        if config.symmetrize {
            p = sym2(p);
        }
    }
    let ll = -0.5 * total;
    ll.is_finite().then_some(ll)
}

// Clamp ranges for unconstrained coordinates so that every finite vector maps
// to a valid parameter set (strict κ ordering, |ρ| < 1, positive scales).
const LOG_KAPPA_RANGE: (f64, f64) = (-20.0, 10.0);
const LOG_SCALE_RANGE: (f64, f64) = (-30.0, 10.0);
const ATANH_RHO_RANGE: (f64, f64) = (-15.0, 15.0);

/// Shape of the unconstrained parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub p: usize,
    pub q: usize,
    /// Group index per contract when measurement deviations are tied.
    pub tying: Option<Vec<usize>>,
}

impl ParamLayout {
    pub fn new(p: usize, q: usize, tying: Option<Vec<usize>>) -> Result<Self> {
        if let Some(t) = &tying {
            if t.len() != p {
                return Err(Error::InvalidParam(format!(
                    "tying has {} entries for {p} contracts",
                    t.len()
                )));
            }
            let g = t.iter().max().map_or(0, |m| m + 1);
            if (0..g).any(|k| !t.contains(&k)) {
                return Err(Error::InvalidParam(
                    "tying groups must be numbered 0..G".into(),
                ));
            }
        }
        Ok(ParamLayout { p, q, tying })
    }

    pub fn n_groups(&self) -> usize {
        match &self.tying {
            Some(t) => t.iter().max().map_or(0, |m| m + 1),
            None => self.p,
        }
    }

    pub fn dim(&self) -> usize {
        8 + self.n_groups() + self.p * self.q
    }

    fn group_of(&self, i: usize) -> usize {
        self.tying.as_ref().map_or(i, |t| t[i])
    }
}

/// Maps parameters to the optimizer's unconstrained coordinates:
/// `[ln κ_ξ, ln(κ_χ - κ_ξ), μ_ξ, ln σ_χ, ln σ_ξ, atanh ρ, λ_χ, λ_ξ,
///   ln σ_g for each measurement group, Γ row-major]`.
pub fn transform_params(params: &ModelParams, layout: &ParamLayout) -> Result<Vec<f64>> {
    params.validate()?;
    if params.p() != layout.p || params.q() != layout.q {
        return Err(Error::Shape("parameters do not match the layout".into()));
    }
    let mut v = vec![
        params.kappa_xi.ln(),
        (params.kappa_chi - params.kappa_xi).ln(),
        params.mu_xi,
        params.sigma_chi.ln(),
        params.sigma_xi.ln(),
        params.rho.atanh(),
        params.lambda_chi,
        params.lambda_xi,
    ];
    for g in 0..layout.n_groups() {
        let i = (0..layout.p)
            .find(|&i| layout.group_of(i) == g)
            .unwrap_or(g);
        v.push(params.meas_std[i].ln());
    }
    for i in 0..layout.p {
        for j in 0..layout.q {
            v.push(params.gamma[(i, j)]);
        }
    }
    Ok(v)
}

fn clamp(x: f64, r: (f64, f64)) -> f64 {
    x.clamp(r.0, r.1)
}

pub fn inverse_transform(v: &[f64], layout: &ParamLayout) -> Result<ModelParams> {
    if v.len() != layout.dim() {
        return Err(Error::Shape(format!(
            "parameter vector has length {}, layout needs {}",
            v.len(),
            layout.dim()
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidParam(
            "non-finite unconstrained parameter".into(),
        ));
    }
    let kappa_xi = clamp(v[0], LOG_KAPPA_RANGE).exp();
    let kappa_chi = kappa_xi + clamp(v[1], LOG_KAPPA_RANGE).exp();
    let groups = layout.n_groups();
    let group_std: Vec<f64> = (0..groups)
        .map(|g| clamp(v[8 + g], LOG_SCALE_RANGE).exp())
        .collect();
    let meas_std = (0..layout.p)
        .map(|i| group_std[layout.group_of(i)])
        .collect();
    let off = 8 + groups;
    let gamma = DMatrix::from_fn(layout.p, layout.q, |i, j| v[off + i * layout.q + j]);
    Ok(ModelParams {
        kappa_chi,
        kappa_xi,
        mu_xi: v[2],
        sigma_chi: clamp(v[3], LOG_SCALE_RANGE).exp(),
        sigma_xi: clamp(v[4], LOG_SCALE_RANGE).exp(),
        rho: clamp(v[5], ATANH_RHO_RANGE).tanh(),
        lambda_chi: v[6],
        lambda_xi: v[7],
        meas_std,
        gamma,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub n_starts: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
    /// Simplex restarts around the incumbent within each start.
    pub restarts: usize,
    /// Optional grouping of measurement deviations.
    pub tying: Option<Vec<usize>>,
    /// Replaces the heuristic initial point.
    pub initial: Option<ModelParams>,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            n_starts: 8,
            seed: 0,
            max_iter: 5000,
            tol: 1e-8,
            restarts: 4,
            tying: None,
            initial: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartTrace {
    pub start: ModelParams,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: ModelParams,
    pub loglik: f64,
    pub n_starts: usize,
    pub converged: bool,
    pub trace: Vec<StartTrace>,
}

/// Initial point used when none is supplied.
pub fn heuristic_start(p: usize, q: usize) -> ModelParams {
    ModelParams {
        kappa_chi: 1.5,
        kappa_xi: 0.1,
        mu_xi: 0.0,
        sigma_chi: 0.3,
        sigma_xi: 0.3,
        rho: 0.0,
        lambda_chi: 0.0,
        lambda_xi: 0.0,
        meas_std: vec![0.05; p],
        gamma: DMatrix::zeros(p, q),
    }
}

/// Start `k`: the base point itself for k = 0, otherwise every positive
/// quantity multiplied by an independent lognormal(0, 0.5²) draw.
fn dispersed_start(base: &ModelParams, seed: u64, k: usize) -> ModelParams {
    if k == 0 {
        return base.clone();
    }
    let mut rng = rng::stream(seed, Consumer::OptimizerStart(k as u32));
    let mut draw = || {
        let z: f64 = StandardNormal.sample(&mut rng);
        (0.5 * z).exp()
    };
    let kappa_xi = base.kappa_xi * draw();
    let gap = (base.kappa_chi - base.kappa_xi) * draw();
    let sigma_chi = base.sigma_chi * draw();
    let sigma_xi = base.sigma_xi * draw();
    let meas_std = base.meas_std.iter().map(|s| s * draw()).collect();
    ModelParams {
        kappa_xi,
        kappa_chi: kappa_xi + gap,
        sigma_chi,
        sigma_xi,
        meas_std,
        ..base.clone()
    }
}

/// Simplex edge lengths in unconstrained coordinates. Loadings get a step that
/// moves the log price by about 0.05 given the spread of their factor.
fn initial_steps(layout: &ParamLayout, scores: Option<&DMatrix<f64>>) -> Vec<f64> {
    let mut step = vec![0.3, 0.3, 0.1, 0.3, 0.3, 0.3, 0.1, 0.1];
    step.extend(std::iter::repeat_n(0.3, layout.n_groups()));
    for _ in 0..layout.p {
        for j in 0..layout.q {
            let sd = scores.map_or(1.0, |u| {
                let col = u.column(j);
                let mean = col.mean();
                (col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / col.len().max(1) as f64)
                    .sqrt()
            });
            step.push(0.05 / sd.max(1e-8));
        }
    }
    step
}

/// Multi-start Nelder-Mead maximization of the log-likelihood.
pub fn fit_mle(
    dataset: &AlignedDataset,
    scores: Option<&FactorScores>,
    config: &FitConfig,
    filter: &FilterConfig,
) -> Result<FitResult> {
    if config.n_starts == 0 {
        return Err(Error::InvalidParam("n_starts must be at least 1".into()));
    }
    filter.validate()?;
    let p = dataset.futures.n_tenors();
    let q = scores.map_or(0, FactorScores::q);
    if let Some(s) = scores {
        if s.dates != dataset.futures.dates {
            return Err(Error::Shape(
                "factor score dates differ from the dataset".into(),
            ));
        }
    }
    let u = scores.map(|s| &s.values);
    let layout = ParamLayout::new(p, q, config.tying.clone())?;
    let base = match &config.initial {
        Some(init) => {
            if init.p() != p || init.q() != q {
                return Err(Error::Shape(
                    "initial parameters do not match the data".into(),
                ));
            }
            init.clone()
        }
        None => heuristic_start(p, q),
    };
    let step = initial_steps(&layout, u);
    let nm = NelderMeadOptions {
        max_iter: config.max_iter,
        tol: config.tol,
        restarts: config.restarts,
    };

    let objective = |x: &[f64]| -> f64 {
        match inverse_transform(x, &layout) {
            Ok(par) => {
                loglik_or_none(dataset, &par, u, filter).map_or(INFEASIBLE_PENALTY, |ll| -ll)
            }
            Err(_) => INFEASIBLE_PENALTY,
        }
    };

    let mut trace = Vec::with_capacity(config.n_starts);
    let mut best: Option<(f64, Vec<f64>, bool)> = None;
    for k in 0..config.n_starts {
        let start = dispersed_start(&base, config.seed, k);
        let x0 = transform_params(&start, &layout)?;
        let res = nelder_mead(objective, &x0, &step, &nm);
        let feasible = res.fx < INFEASIBLE_PENALTY;
        trace.push(StartTrace {
            start,
            loglik: if feasible { -res.fx } else { f64::NEG_INFINITY },
            iterations: res.iterations,
            converged: res.converged,
        });
        if !feasible {
            continue;
        }
        let better = match &best {
            None => true,
            Some((fx, x, _)) => res.fx < *fx || (res.fx == *fx && res.x.as_slice() < x.as_slice()),
        };
        if better {
            best = Some((res.fx, res.x, res.converged));
        }
    }
    let (_, x, converged) =
        best.ok_or_else(|| Error::Numerical("every optimizer start was infeasible".into()))?;
    let params = inverse_transform(&x, &layout)?;
    let loglik = run_filter(dataset, &params, scores, filter)?.loglik;
    Ok(FitResult {
        params,
        loglik,
        n_starts: config.n_starts,
        converged,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{tenors, Month, YieldPanel};
    use crate::model::{simulate, SimulationSpec};
    use proptest::prelude::*;

    fn params(p: usize, q: usize) -> ModelParams {
        ModelParams {
            kappa_chi: 1.4,
            kappa_xi: 0.25,
            mu_xi: 0.9,
            sigma_chi: 0.35,
            sigma_xi: 0.22,
            rho: 0.3,
            lambda_chi: 0.05,
            lambda_xi: -0.02,
            meas_std: vec![0.02; p],
            gamma: DMatrix::from_fn(p, q, |i, j| 0.5 - 0.1 * i as f64 + 0.3 * j as f64),
        }
    }

    fn dataset(p: usize, n: usize, seed: u64) -> AlignedDataset {
        let ts = tenors(&(1..=p as u32).map(|k| 2 * k).collect::<Vec<_>>()).unwrap();
        let par = params(p, 0);
        let start = Month::new(2000, 1).unwrap();
        let sim = simulate(
            &par,
            &SimulationSpec {
                tenors: &ts,
                start,
                n_steps: n,
                dt: 1.0 / 12.0,
                scores: None,
                initial: None,
                seed,
            },
        )
        .unwrap();
        let yields = YieldPanel::new(
            sim.futures.dates.clone(),
            crate::data::default_yield_tenors(),
            DMatrix::from_fn(5, n, |i, t| 0.01 + 0.001 * (i + t) as f64),
        )
        .unwrap();
        AlignedDataset {
            futures: sim.futures,
            yields,
            dt: 1.0 / 12.0,
        }
    }

    #[test]
    fn identity_dynamics_leave_state_unchanged() {
        let a = Vector2::new(0.3, 4.0);
        let p = Matrix2::new(0.2, 0.05, 0.05, 0.1);
        let (ap, pp) = kalman_predict(
            &a,
            &p,
            &Vector2::zeros(),
            &Matrix2::identity(),
            &Matrix2::zeros(),
            true,
        );
        assert_eq!(ap, a);
        assert_eq!(pp, p);
    }

    #[test]
    fn contraction_shrinks_covariance() {
        let p = Matrix2::new(0.2, 0.05, 0.05, 0.1);
        let e = Matrix2::from_diagonal(&Vector2::new(
            (-1.5f64 / 12.0).exp(),
            (-0.2f64 / 12.0).exp(),
        ));
        let (_, pp) = kalman_predict(
            &Vector2::zeros(),
            &p,
            &Vector2::zeros(),
            &e,
            &Matrix2::zeros(),
            false,
        );
        assert!(pp.trace() < p.trace());
    }

    #[test]
    fn predict_matches_hand_arithmetic() {
        let a = [0.3, 4.0];
        let p = [[0.2, 0.05], [0.05, 0.1]];
        let c = [0.01, 0.02];
        let e = [[0.9, 0.0], [0.0, 0.99]];
        let s = [[0.01, 0.002], [0.002, 0.004]];
        let (ap, pp) = kalman_predict(
            &Vector2::from(a),
            &Matrix2::new(p[0][0], p[0][1], p[1][0], p[1][1]),
            &Vector2::from(c),
            &Matrix2::new(e[0][0], e[0][1], e[1][0], e[1][1]),
            &Matrix2::new(s[0][0], s[0][1], s[1][0], s[1][1]),
            false,
        );
        for i in 0..2 {
            let want: f64 = c[i] + (0..2).map(|k| e[i][k] * a[k]).sum::<f64>();
            assert!((ap[i] - want).abs() < 1e-15);
            for j in 0..2 {
                let mut epe = 0.0;
                for k in 0..2 {
                    for l in 0..2 {
                        epe += e[i][k] * p[k][l] * e[j][l];
                    }
                }
                assert!((pp[(i, j)] - (epe + s[i][j])).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn scalar_update_matches_textbook() {
        let a_pred = Vector2::new(0.2, 3.0);
        let p_pred = Matrix2::new(0.3, 0.1, 0.1, 0.2);
        let f = MatrixXx2::from_row_slice(&[1.0, 0.0]);
        let s2 = 0.04;
        let y = DVector::from_element(1, 0.5);
        let d = DVector::zeros(1);
        let r = kalman_update(
            &a_pred,
            &p_pred,
            &y,
            &d,
            &f,
            &DMatrix::zeros(1, 0),
            None,
            &DMatrix::from_element(1, 1, s2),
            false,
        )
        .unwrap();
        // observing χ alone: S = P11 + σ², K = P[:,0]/S
        let s = 0.3 + s2;
        let e = 0.5 - 0.2;
        let k = [0.3 / s, 0.1 / s];
        assert!((r.innovation[0] - e).abs() < 1e-12);
        assert!((r.innovation_cov[(0, 0)] - s).abs() < 1e-12);
        assert!((r.a[0] - (0.2 + k[0] * e)).abs() < 1e-12);
        assert!((r.a[1] - (3.0 + k[1] * e)).abs() < 1e-12);
        let p_new = [
            [0.3 - k[0] * 0.3, 0.1 - k[0] * 0.1],
            [0.1 - k[1] * 0.3, 0.2 - k[1] * 0.1],
        ];
        for i in 0..2 {
            for j in 0..2 {
                assert!((r.p[(i, j)] - p_new[i][j]).abs() < 1e-12);
            }
        }
        assert!((r.mahalanobis - e * e / s).abs() < 1e-12);
        assert!((r.log_det - s.ln()).abs() < 1e-12);
    }

    #[test]
    fn huge_noise_makes_update_uninformative() {
        let a_pred = Vector2::new(0.2, 3.0);
        let p_pred = Matrix2::new(0.3, 0.1, 0.1, 0.2);
        let f = MatrixXx2::from_row_slice(&[1.0, 1.0, 0.8, 0.95]);
        let y = DVector::from_vec(vec![5.0, 5.0]);
        let r = kalman_update(
            &a_pred,
            &p_pred,
            &y,
            &DVector::zeros(2),
            &f,
            &DMatrix::zeros(2, 0),
            None,
            &DMatrix::from_diagonal_element(2, 2, 1e12),
            true,
        )
        .unwrap();
        assert!(r.gain.amax() < 1e-11);
        assert!((r.a - a_pred).amax() < 1e-10);
    }

    #[test]
    fn zero_innovation_keeps_prediction() {
        let a_pred = Vector2::new(0.2, 3.0);
        let p_pred = Matrix2::new(0.3, 0.1, 0.1, 0.2);
        let f = MatrixXx2::from_row_slice(&[1.0, 1.0, 0.8, 0.95]);
        let d = DVector::from_vec(vec![0.1, -0.1]);
        let y = &d + &f * a_pred;
        let r = kalman_update(
            &a_pred,
            &p_pred,
            &y,
            &d,
            &f,
            &DMatrix::zeros(2, 0),
            None,
            &DMatrix::from_diagonal_element(2, 2, 0.01),
            true,
        )
        .unwrap();
        assert!(r.innovation.amax() < 1e-15);
        assert!((r.a - a_pred).amax() < 1e-15);
    }

    #[test]
    fn non_spd_innovation_covariance_is_an_error() {
        let r = kalman_update(
            &Vector2::zeros(),
            &Matrix2::zeros(),
            &DVector::zeros(1),
            &DVector::zeros(1),
            &MatrixXx2::from_row_slice(&[1.0, 1.0]),
            &DMatrix::zeros(1, 0),
            None,
            &DMatrix::from_element(1, 1, -1.0),
            true,
        );
        assert!(matches!(r, Err(Error::Numerical(_))));
    }

    #[test]
    fn noisier_measurement_lowers_likelihood() {
        let ds = dataset(3, 120, 1);
        let par = params(3, 0);
        let cfg = FilterConfig::for_futures(&ds.futures);
        let ll = run_filter(&ds, &par, None, &cfg).unwrap().loglik;
        let mut noisy = par.clone();
        noisy.meas_std.iter_mut().for_each(|s| *s *= 2f64.sqrt());
        let ll2 = run_filter(&ds, &noisy, None, &cfg).unwrap().loglik;
        assert!(ll2 < ll);
    }

    #[test]
    fn zero_gamma_nests_plain_model() {
        let ds = dataset(3, 60, 2);
        let cfg = FilterConfig::for_futures(&ds.futures);
        let ss = run_filter(&ds, &params(3, 0), None, &cfg).unwrap();
        let fr_params = params(3, 0).with_gamma(DMatrix::zeros(3, 2));
        let scores = FactorScores {
            dates: ds.futures.dates.clone(),
            values: DMatrix::from_fn(60, 2, |t, j| ((t * 7 + j) as f64).sin()),
        };
        let fr = run_filter(&ds, &fr_params, Some(&scores), &cfg).unwrap();
        assert_eq!(ss, fr);
    }

    #[test]
    fn scores_presence_must_match_q() {
        let ds = dataset(2, 10, 3);
        let cfg = FilterConfig::for_futures(&ds.futures);
        assert!(run_filter(&ds, &params(2, 1), None, &cfg).is_err());
        let scores = FactorScores {
            dates: ds.futures.dates.clone(),
            values: DMatrix::zeros(10, 1),
        };
        assert!(run_filter(&ds, &params(2, 0), Some(&scores), &cfg).is_err());
    }

    #[test]
    fn shifting_data_and_intercept_is_invariant() {
        let ds = dataset(3, 40, 4);
        let par = params(3, 0);
        let cfg = FilterConfig::for_futures(&ds.futures);
        let m = StateSpaceMatrices::new(&par, &ds.futures.tenors, ds.dt).unwrap();
        let base = filter_observations(&m, &par.gamma, &ds.futures.log_prices, None, &cfg).unwrap();
        let c = 0.75;
        let mut m2 = m.clone();
        m2.d.add_scalar_mut(c);
        let shifted = ds.futures.log_prices.add_scalar(c);
        let out = filter_observations(&m2, &par.gamma, &shifted, None, &cfg).unwrap();
        assert!((out.loglik - base.loglik).abs() < 1e-9);
        for t in 0..40 {
            assert!((out.a_filt[t] - base.a_filt[t]).amax() < 1e-10);
        }
    }

    #[test]
    fn filtered_covariances_stay_spd() {
        let ds = dataset(4, 200, 5);
        let par = params(4, 0);
        let out = run_filter(&ds, &par, None, &FilterConfig::for_futures(&ds.futures)).unwrap();
        for (pf, l) in out.p_filt.iter().zip(&out.innovation_cov) {
            assert!(pf.cholesky().is_some());
            assert!(l.clone().cholesky().is_some());
        }
    }

    fn arb_params(p: usize, q: usize) -> impl Strategy<Value = ModelParams> {
        (
            0.05f64..2.0,
            0.05f64..3.0,
            -1.0f64..1.0,
            0.05f64..0.8,
            0.05f64..0.8,
            -0.95f64..0.95,
            -0.5f64..0.5,
            -0.5f64..0.5,
            proptest::collection::vec(0.005f64..0.2, p),
            proptest::collection::vec(-2.0f64..2.0, p * q),
        )
            .prop_map(
                move |(kx, gap, mu, sc, sx, rho, lc, lx, ms, g)| ModelParams {
                    kappa_chi: kx + gap,
                    kappa_xi: kx,
                    mu_xi: mu,
                    sigma_chi: sc,
                    sigma_xi: sx,
                    rho,
                    lambda_chi: lc,
                    lambda_xi: lx,
                    meas_std: ms,
                    gamma: DMatrix::from_row_slice(p, q, &g),
                },
            )
    }

    proptest! {
        #[test]
        fn transform_round_trip(par in arb_params(4, 2)) {
            let layout = ParamLayout::new(4, 2, None).unwrap();
            let v = transform_params(&par, &layout).unwrap();
            let back = inverse_transform(&v, &layout).unwrap();
            let a = transform_params(&back, &layout).unwrap();
            for (x, y) in v.iter().zip(&a) {
                prop_assert!((x - y).abs() < 1e-12 * (1.0 + x.abs()));
            }
            prop_assert!((back.kappa_chi - par.kappa_chi).abs() < 1e-12);
            prop_assert!((back.rho - par.rho).abs() < 1e-12);
        }

        #[test]
        fn any_finite_vector_is_feasible(v in proptest::collection::vec(-1e6f64..1e6, 8 + 3 + 3)) {
            let layout = ParamLayout::new(3, 1, None).unwrap();
            let par = inverse_transform(&v, &layout).unwrap();
            prop_assert!(par.validate().is_ok());
        }

        #[test]
        fn info_form_matches_covariance_form(par in arb_params(4, 2), seed in 0u64..1000) {
            let ds = dataset(4, 40, seed);
            let u = DMatrix::from_fn(40, 2, |t, j| ((t * (j + 3)) as f64 * 0.37).sin() * 0.02);
            let m = StateSpaceMatrices::new(&par, &ds.futures.tenors, ds.dt).unwrap();
            let cfg = FilterConfig::for_futures(&ds.futures);
            let y = &ds.futures.log_prices;
            let fast = info_form_loglik(&m, &par.gamma, y, Some(&u), &cfg).unwrap();
            let slow = covariance_form_loglik(&m, &par.gamma, y, Some(&u), &cfg).unwrap();
            prop_assert!((fast - slow).abs() <= 1e-9 * slow.abs().max(1.0), "{} vs {}", fast, slow);
        }
    }

    #[test]
    fn zero_rho_maps_to_zero() {
        let mut par = params(2, 0);
        par.rho = 0.0;
        let layout = ParamLayout::new(2, 0, None).unwrap();
        assert_eq!(transform_params(&par, &layout).unwrap()[5], 0.0);
        let mut v = transform_params(&par, &layout).unwrap();
        v[5] = 0.0;
        assert_eq!(inverse_transform(&v, &layout).unwrap().rho, 0.0);
        v[0] = f64::NAN;
        assert!(inverse_transform(&v, &layout).is_err());
    }

    #[test]
    fn tied_deviations_share_values() {
        let layout = ParamLayout::new(4, 0, Some(vec![0, 0, 1, 1])).unwrap();
        assert_eq!(layout.dim(), 10);
        let mut v = vec![0.0; 10];
        v[8] = (0.01f64).ln();
        v[9] = (0.03f64).ln();
        let par = inverse_transform(&v, &layout).unwrap();
        assert!((par.meas_std[1] - 0.01).abs() < 1e-15);
        assert!((par.meas_std[2] - 0.03).abs() < 1e-15);
        assert!(ParamLayout::new(3, 0, Some(vec![0, 2, 2])).is_err());
    }

    #[test]
    fn small_fit_improves_on_truth_and_is_a_fixed_point() {
        let ds = dataset(2, 150, 6);
        let filter = FilterConfig::for_futures(&ds.futures);
        let truth = params(2, 0);
        let ll_true = run_filter(&ds, &truth, None, &filter).unwrap().loglik;
        let cfg = FitConfig {
            n_starts: 2,
            seed: 1,
            initial: Some(truth.clone()),
            ..Default::default()
        };
        let fit = fit_mle(&ds, None, &cfg, &filter).unwrap();
        assert!(fit.loglik >= ll_true);
        let rerun = run_filter(&ds, &fit.params, None, &filter).unwrap().loglik;
        assert!((rerun - fit.loglik).abs() < 1e-9);
        assert_eq!(fit.trace.len(), 2);

        let again = fit_mle(
            &ds,
            None,
            &FitConfig {
                n_starts: 1,
                initial: Some(fit.params.clone()),
                ..cfg
            },
            &filter,
        )
        .unwrap();
        assert!(
            (again.loglik - fit.loglik).abs() < 1e-6,
            "{} vs {}",
            again.loglik,
            fit.loglik
        );
    }

    #[test]
    fn zero_starts_rejected() {
        let ds = dataset(2, 10, 7);
        let cfg = FitConfig {
            n_starts: 0,
            ..Default::default()
        };
        assert!(fit_mle(&ds, None, &cfg, &FilterConfig::for_futures(&ds.futures)).is_err());
    }
}
