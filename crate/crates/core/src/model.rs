//! The two-factor spot model, its state-space form, and a simulator.
//!
//! Log spot is `χ_t + ξ_t` with
//!
//! ```text
//! dχ = -κ_χ χ dt + σ_χ dW^χ
//! dξ = (μ_ξ - κ_ξ ξ) dt + σ_ξ dW^ξ,     d⟨W^χ, W^ξ⟩ = ρ dt
//! ```
//!
//! and constant risk premia λ_χ, λ_ξ. Log futures prices at constant tenor τ
//! are `A(τ) + e^{-κ_χ τ} χ + e^{-κ_ξ τ} ξ`, optionally plus the functional
//! regression term `Γ U_t`. All times are in years.

use nalgebra::{DMatrix, DVector, Matrix2, MatrixXx2, Vector2};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{FuturesPanel, Month, Tenor, YieldPanel};
use crate::error::{Error, Result};
use crate::rng::{self, Consumer};

/// Parameters of the two-factor model and its functional-regression loadings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ParamsRepr", into = "ParamsRepr")]
pub struct ModelParams {
    pub kappa_chi: f64,
    pub kappa_xi: f64,
    pub mu_xi: f64,
    pub sigma_chi: f64,
    pub sigma_xi: f64,
    pub rho: f64,
    pub lambda_chi: f64,
    pub lambda_xi: f64,
    /// Measurement noise standard deviation per contract.
    pub meas_std: Vec<f64>,
    /// P×Q loadings on the functional factor scores. Q = 0 is the plain model.
    pub gamma: DMatrix<f64>,
}

/// Flat JSON layout of [`ModelParams`].
#[derive(Serialize, Deserialize)]
struct ParamsRepr {
    kappa_chi: f64,
    kappa_xi: f64,
    mu_xi: f64,
    sigma_chi: f64,
    sigma_xi: f64,
    rho: f64,
    lambda_chi: f64,
    lambda_xi: f64,
    meas_std: Vec<f64>,
    #[serde(rename = "Gamma")]
    gamma: Vec<Vec<f64>>,
    #[serde(rename = "Q")]
    q: usize,
}

impl TryFrom<ParamsRepr> for ModelParams {
    type Error = Error;

    fn try_from(r: ParamsRepr) -> Result<Self> {
        if r.gamma.len() != r.meas_std.len() {
            return Err(Error::Shape(format!(
                "Gamma has {} rows but meas_std has {} entries",
                r.gamma.len(),
                r.meas_std.len()
            )));
        }
        let gamma = crate::serde_mat::from_rows(&r.gamma, r.q).map_err(Error::Shape)?;
        let p = ModelParams {
            kappa_chi: r.kappa_chi,
            kappa_xi: r.kappa_xi,
            mu_xi: r.mu_xi,
            sigma_chi: r.sigma_chi,
            sigma_xi: r.sigma_xi,
            rho: r.rho,
            lambda_chi: r.lambda_chi,
            lambda_xi: r.lambda_xi,
            meas_std: r.meas_std,
            gamma,
        };
        p.validate()?;
        Ok(p)
    }
}

impl From<ModelParams> for ParamsRepr {
    fn from(p: ModelParams) -> Self {
        ParamsRepr {
            kappa_chi: p.kappa_chi,
            kappa_xi: p.kappa_xi,
            mu_xi: p.mu_xi,
            sigma_chi: p.sigma_chi,
            sigma_xi: p.sigma_xi,
            rho: p.rho,
            lambda_chi: p.lambda_chi,
            lambda_xi: p.lambda_xi,
            q: p.gamma.ncols(),
            gamma: crate::serde_mat::to_rows(&p.gamma),
            meas_std: p.meas_std,
        }
    }
}

impl ModelParams {
    pub fn p(&self) -> usize {
        self.meas_std.len()
    }

    pub fn q(&self) -> usize {
        self.gamma.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let scalars = [
            self.kappa_chi,
            self.kappa_xi,
            self.mu_xi,
            self.sigma_chi,
            self.sigma_xi,
            self.rho,
            self.lambda_chi,
            self.lambda_xi,
        ];
        if scalars.iter().any(|v| !v.is_finite())
            || self.meas_std.iter().any(|v| !v.is_finite())
            || self.gamma.iter().any(|v| !v.is_finite())
        {
            return Err(Error::InvalidParam("parameters must be finite".into()));
        }
        if !(self.kappa_xi > 0.0) {
            return Err(Error::InvalidParam("kappa_xi must be positive".into()));
        }
        if !(self.kappa_chi > self.kappa_xi) {
            return Err(Error::InvalidParam("kappa_chi must exceed kappa_xi".into()));
        }
        if !(self.sigma_chi > 0.0 && self.sigma_xi > 0.0) {
            return Err(Error::InvalidParam("volatilities must be positive".into()));
        }
        if !(self.rho.abs() < 1.0) {
            return Err(Error::InvalidParam("rho must lie in (-1, 1)".into()));
        }
        if self.meas_std.is_empty() || self.meas_std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidParam(
                "meas_std must be non-empty and positive".into(),
            ));
        }
        if self.gamma.nrows() != self.p() {
            return Err(Error::Shape(format!(
                "Gamma has {} rows, expected {}",
                self.gamma.nrows(),
                self.p()
            )));
        }
        Ok(())
    }

    /// Same parameters with a different set of functional loadings.
    pub fn with_gamma(&self, gamma: DMatrix<f64>) -> Self {
        ModelParams {
            gamma,
            ..self.clone()
        }
    }
}

/// Latent factors (χ, ξ).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateVector {
    pub chi: f64,
    pub xi: f64,
}

impl StateVector {
    pub fn as_vector(&self) -> Vector2<f64> {
        Vector2::new(self.chi, self.xi)
    }

    pub fn from_vector(v: &Vector2<f64>) -> Self {
        StateVector {
            chi: v[0],
            xi: v[1],
        }
    }

    pub fn log_spot(&self) -> f64 {
        self.chi + self.xi
    }
}

/// `(1 - e^{-k t}) / k`
fn decay_integral(k: f64, t: f64) -> f64 {
    -(-k * t).exp_m1() / k
}

/// Deterministic part of the log futures price at time to maturity `tau`:
/// risk-premium drift plus half the risk-neutral log-variance.
pub fn a_function(p: &ModelParams, tau: f64) -> f64 {
    let kc = p.kappa_chi;
    let kx = p.kappa_xi;
    let drift =
        -p.lambda_chi * decay_integral(kc, tau) + (p.mu_xi - p.lambda_xi) * decay_integral(kx, tau);
    let variance = p.sigma_chi * p.sigma_chi * decay_integral(2.0 * kc, tau)
        + p.sigma_xi * p.sigma_xi * decay_integral(2.0 * kx, tau)
        + 2.0 * p.rho * p.sigma_chi * p.sigma_xi * decay_integral(kc + kx, tau);
    drift + 0.5 * variance
}

/// Exact Gaussian transition `X_t = C + E X_{t-1} + v_t` over a step `dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateTransition {
    pub c: Vector2<f64>,
    pub e: Matrix2<f64>,
    pub sigma_v: Matrix2<f64>,
}

pub fn state_transition(p: &ModelParams, dt: f64) -> StateTransition {
    let kc = p.kappa_chi;
    let kx = p.kappa_xi;
    let c = Vector2::new(0.0, p.mu_xi * decay_integral(kx, dt));
    let e = Matrix2::new((-kc * dt).exp(), 0.0, 0.0, (-kx * dt).exp());
    let v_cc = p.sigma_chi * p.sigma_chi * decay_integral(2.0 * kc, dt);
    let v_xx = p.sigma_xi * p.sigma_xi * decay_integral(2.0 * kx, dt);
    let v_cx = p.rho * p.sigma_chi * p.sigma_xi * decay_integral(kc + kx, dt);
    StateTransition {
        c,
        e,
        sigma_v: Matrix2::new(v_cc, v_cx, v_cx, v_xx),
    }
}

/// Measurement `Y_t = D + F X_t + Γ U_t + w_t` at fixed tenors.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub d: DVector<f64>,
    pub f: MatrixXx2<f64>,
    pub sigma_w: DMatrix<f64>,
}

/// Measurement matrices for tenors given in years.
pub fn measurement_at(p: &ModelParams, taus: &[f64]) -> Measurement {
    let d = DVector::from_iterator(taus.len(), taus.iter().map(|&t| a_function(p, t)));
    let f = MatrixXx2::from_fn(taus.len(), |i, j| {
        let k = if j == 0 { p.kappa_chi } else { p.kappa_xi };
        (-k * taus[i]).exp()
    });
    let sigma_w = DMatrix::from_diagonal(&DVector::from_iterator(
        p.meas_std.len(),
        p.meas_std.iter().map(|s| s * s),
    ));
    Measurement { d, f, sigma_w }
}

pub fn measurement(p: &ModelParams, tenors: &[Tenor]) -> Result<Measurement> {
    if tenors.len() != p.p() {
        return Err(Error::Shape(format!(
            "{} tenors but {} measurement deviations",
            tenors.len(),
            p.p()
        )));
    }
    if tenors.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidParam("tenors must be ascending".into()));
    }
    let taus: Vec<f64> = tenors.iter().map(Tenor::years).collect();
    Ok(measurement_at(p, &taus))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateSpaceMatrices {
    pub c: Vector2<f64>,
    pub e: Matrix2<f64>,
    pub sigma_v: Matrix2<f64>,
    pub d: DVector<f64>,
    pub f: MatrixXx2<f64>,
    pub sigma_w: DMatrix<f64>,
}

impl StateSpaceMatrices {
    pub fn new(p: &ModelParams, tenors: &[Tenor], dt: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::InvalidParam("dt must be positive".into()));
        }
        let StateTransition { c, e, sigma_v } = state_transition(p, dt);
        let Measurement { d, f, sigma_w } = measurement(p, tenors)?;
        Ok(StateSpaceMatrices {
            c,
            e,
            sigma_v,
            d,
            f,
            sigma_w,
        })
    }

    pub fn p(&self) -> usize {
        self.d.len()
    }

    /// Measurement mean without the functional term.
    pub fn ss_mean(&self, state: &Vector2<f64>) -> DVector<f64> {
        &self.d + &self.f * state
    }
}

/// `D + F x + Γ u`.
pub fn fr_measurement_mean(
    m: &StateSpaceMatrices,
    state: &StateVector,
    gamma: &DMatrix<f64>,
    u: &[f64],
) -> Result<DVector<f64>> {
    if gamma.nrows() != m.p() || gamma.ncols() != u.len() {
        return Err(Error::Shape(format!(
            "Gamma is {:?}, expected ({}, {})",
            gamma.shape(),
            m.p(),
            u.len()
        )));
    }
    let mut mean = m.ss_mean(&state.as_vector());
    mean += gamma * DVector::from_column_slice(u);
    Ok(mean)
}

/// Lower Cholesky factor of a 2×2 covariance, tolerating exact zeros.
fn chol2(s: &Matrix2<f64>) -> Result<Matrix2<f64>> {
    let l11 = s[(0, 0)].max(0.0).sqrt();
    let l21 = if l11 > 0.0 { s[(1, 0)] / l11 } else { 0.0 };
    let rem = s[(1, 1)] - l21 * l21;
    if rem < -1e-12 * s[(1, 1)].abs().max(f64::MIN_POSITIVE) {
        return Err(Error::Numerical(
            "state covariance not positive semi-definite".into(),
        ));
    }
    Ok(Matrix2::new(l11, 0.0, l21, rem.max(0.0).sqrt()))
}

/// Output of [`simulate`].
#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub futures: FuturesPanel,
    pub states: Vec<StateVector>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationSpec<'a> {
    pub tenors: &'a [Tenor],
    pub start: Month,
    pub n_steps: usize,
    pub dt: f64,
    /// N×Q factor scores, required when the parameters carry Q > 0 loadings.
    pub scores: Option<&'a DMatrix<f64>>,
    /// State before the first step; defaults to the long-run mean (0, μ_ξ/κ_ξ).
    pub initial: Option<StateVector>,
    pub seed: u64,
}

/// Draws states from the exact transition and observations from the measurement
/// equation. Fully determined by the seed.
pub fn simulate(p: &ModelParams, spec: &SimulationSpec<'_>) -> Result<Simulation> {
    p.validate()?;
    let q = p.q();
    let scores = match (q, spec.scores) {
        (0, _) => None,
        (_, None) => {
            return Err(Error::InvalidParam(
                "factor scores required when Q > 0".into(),
            ))
        }
        (_, Some(u)) => {
            if u.shape() != (spec.n_steps, q) {
                return Err(Error::Shape(format!(
                    "scores are {:?}, expected ({}, {q})",
                    u.shape(),
                    spec.n_steps
                )));
            }
            Some(u)
        }
    };
    let m = StateSpaceMatrices::new(p, spec.tenors, spec.dt)?;
    let chol = chol2(&m.sigma_v)?;
    let mut rng = rng::stream(spec.seed, Consumer::StateSimulator);
    let mut x = spec
        .initial
        .unwrap_or(StateVector {
            chi: 0.0,
            xi: p.mu_xi / p.kappa_xi,
        })
        .as_vector();
    let n_tenors = spec.tenors.len();
    let mut states = Vec::with_capacity(spec.n_steps);
    let mut log_prices = DMatrix::zeros(spec.n_steps, n_tenors);
    for t in 0..spec.n_steps {
        let z = Vector2::new(
            StandardNormal.sample(&mut rng),
            StandardNormal.sample(&mut rng),
        );
        x = m.c + m.e * x + chol * z;
        states.push(StateVector::from_vector(&x));
        let mut y = m.ss_mean(&x);
        if let Some(u) = scores {
            y += &p.gamma * u.row(t).transpose();
        }
        for i in 0..n_tenors {
            let eps: f64 = StandardNormal.sample(&mut rng);
            log_prices[(t, i)] = y[i] + p.meas_std[i] * eps;
        }
    }
    let dates = (0..spec.n_steps as i64)
        .map(|k| spec.start.add_months(k))
        .collect();
    Ok(Simulation {
        futures: FuturesPanel::new(dates, spec.tenors.to_vec(), log_prices)?,
        states,
    })
}

/// Synthetic yield curves from AR(1) level, slope and curvature factors with
/// Nelson-Siegel loadings. Used to produce functional inputs for test data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct YieldSimConfig {
    pub mean_level: f64,
    pub mean_slope: f64,
    pub persistence: f64,
    pub level_vol: f64,
    pub slope_vol: f64,
    pub curvature_vol: f64,
    /// Nelson-Siegel decay in years.
    pub decay: f64,
}

impl Default for YieldSimConfig {
    fn default() -> Self {
        YieldSimConfig {
            mean_level: 0.025,
            mean_slope: -0.01,
            persistence: 0.97,
            level_vol: 0.002,
            slope_vol: 0.0015,
            curvature_vol: 0.001,
            decay: 0.5,
        }
    }
}

pub fn simulate_yields(
    cfg: &YieldSimConfig,
    tenors: &[Tenor],
    start: Month,
    n_steps: usize,
    seed: u64,
) -> Result<YieldPanel> {
    let mut rng = rng::stream(seed, Consumer::YieldSimulator);
    let phi = cfg.persistence;
    let (mut level, mut slope, mut curv) = (cfg.mean_level, cfg.mean_slope, 0.0);
    let loadings: Vec<(f64, f64)> = tenors
        .iter()
        .map(|t| {
            let x = t.years() / cfg.decay;
            let l1 = -(-x).exp_m1() / x;
            (l1, l1 - (-x).exp())
        })
        .collect();
    let mut yields = DMatrix::zeros(tenors.len(), n_steps);
    for t in 0..n_steps {
        let e: [f64; 3] = [
            StandardNormal.sample(&mut rng),
            StandardNormal.sample(&mut rng),
            StandardNormal.sample(&mut rng),
        ];
        level = cfg.mean_level + phi * (level - cfg.mean_level) + cfg.level_vol * e[0];
        slope = cfg.mean_slope + phi * (slope - cfg.mean_slope) + cfg.slope_vol * e[1];
        curv = phi * curv + cfg.curvature_vol * e[2];
        for (i, (l1, l2)) in loadings.iter().enumerate() {
            yields[(i, t)] = level + slope * l1 + curv * l2;
        }
    }
    let dates = (0..n_steps as i64).map(|k| start.add_months(k)).collect();
    YieldPanel::new(dates, tenors.to_vec(), yields)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tenors;

    pub(crate) fn params(p: usize, q: usize) -> ModelParams {
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

    /// Term-by-term evaluation of A(τ) written directly from the closed form.
    fn a_oracle(p: &ModelParams, t: f64) -> f64 {
        let (kc, kx, sc, sx) = (p.kappa_chi, p.kappa_xi, p.sigma_chi, p.sigma_xi);
        let t1 = -(p.lambda_chi / kc) * (1.0 - (-kc * t).exp());
        let t2 = ((p.mu_xi - p.lambda_xi) / kx) * (1.0 - (-kx * t).exp());
        let t3 = (1.0 - (-2.0 * kc * t).exp()) / (2.0 * kc) * sc * sc;
        let t4 = (1.0 - (-2.0 * kx * t).exp()) / (2.0 * kx) * sx * sx;
        let t5 = 2.0 * (1.0 - (-(kc + kx) * t).exp()) / (kc + kx) * sc * sx * p.rho;
        t1 + t2 + 0.5 * (t3 + t4 + t5)
    }

    #[test]
    fn a_function_at_zero_and_limit() {
        let p = params(3, 0);
        assert_eq!(a_function(&p, 0.0), 0.0);
        let limit = -p.lambda_chi / p.kappa_chi
            + (p.mu_xi - p.lambda_xi) / p.kappa_xi
            + 0.5
                * (p.sigma_chi.powi(2) / (2.0 * p.kappa_chi)
                    + p.sigma_xi.powi(2) / (2.0 * p.kappa_xi)
                    + 2.0 * p.rho * p.sigma_chi * p.sigma_xi / (p.kappa_chi + p.kappa_xi));
        assert!((a_function(&p, 1000.0) - limit).abs() <= 1e-9 * limit.abs());
    }

    #[test]
    fn a_function_matches_oracle() {
        let p = params(3, 0);
        for t in [0.5, 1.0 / 12.0, 2.0, 10.0] {
            assert!((a_function(&p, t) - a_oracle(&p, t)).abs() < 1e-13);
        }
    }

    #[test]
    fn transition_small_dt_limit() {
        let tr = state_transition(&params(2, 0), 1e-10);
        assert!((tr.e - Matrix2::identity()).amax() < 1e-8);
        assert!(tr.c.amax() < 1e-8);
        assert!(tr.sigma_v.amax() < 1e-8);
    }

    #[test]
    fn zero_rho_has_zero_covariance() {
        let mut p = params(2, 0);
        p.rho = 0.0;
        let tr = state_transition(&p, 1.0 / 12.0);
        assert_eq!(tr.sigma_v[(0, 1)], 0.0);
        assert_eq!(tr.sigma_v[(1, 0)], 0.0);
    }

    #[test]
    fn chi_variance_matches_euler_monte_carlo() {
        use rand::SeedableRng;
        let p = params(2, 0);
        let dt = 1.0 / 12.0;
        let exact = state_transition(&p, dt).sigma_v[(0, 0)];
        let closed =
            p.sigma_chi.powi(2) * (1.0 - (-2.0 * p.kappa_chi * dt).exp()) / (2.0 * p.kappa_chi);
        assert!((exact - closed).abs() < 1e-15);

        // fine-step Euler scheme of dχ = -κχ dt + σ dW started at 0
        let paths = 1_000_000;
        let sub = 64;
        let h = dt / sub as f64;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut s2 = 0.0;
        for _ in 0..paths {
            let mut x = 0.0f64;
            for _ in 0..sub {
                let z: f64 = StandardNormal.sample(&mut rng);
                x += -p.kappa_chi * x * h + p.sigma_chi * h.sqrt() * z;
            }
            s2 += x * x;
        }
        let var = s2 / paths as f64;
        let se = exact * (2.0 / paths as f64).sqrt();
        assert!(
            (var - exact).abs() < 3.0 * se + exact * p.kappa_chi * h,
            "{var} vs {exact}"
        );
    }

    #[test]
    fn measurement_properties() {
        let p = params(3, 0);
        let m = measurement_at(&p, &[0.0, 0.5, 1.0]);
        assert_eq!(m.f[(0, 0)], 1.0);
        assert_eq!(m.f[(0, 1)], 1.0);
        assert_eq!(m.d[0], 0.0);
        for j in 0..2 {
            assert!(m.f[(0, j)] > m.f[(1, j)] && m.f[(1, j)] > m.f[(2, j)]);
        }
        let mut fast = p.clone();
        fast.kappa_chi = 40.0;
        assert!(measurement_at(&fast, &[1.0]).f[(0, 0)] < 1e-15);
        assert_eq!(m.sigma_w[(1, 1)], 0.02 * 0.02);
        assert_eq!(m.sigma_w[(0, 1)], 0.0);
    }

    #[test]
    fn futures_formula_consistency() {
        let p = params(4, 0);
        let ts = tenors(&[1, 3, 6, 12]).unwrap();
        let m = StateSpaceMatrices::new(&p, &ts, 1.0 / 12.0).unwrap();
        let x = StateVector { chi: -0.3, xi: 4.1 };
        let y = m.ss_mean(&x.as_vector());
        for (i, t) in ts.iter().enumerate() {
            let tau = t.years();
            let direct = a_function(&p, tau)
                + (-p.kappa_chi * tau).exp() * x.chi
                + (-p.kappa_xi * tau).exp() * x.xi;
            assert!((y[i] - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn fr_mean_nesting_and_shift() {
        let p = params(3, 1);
        let ts = tenors(&[1, 2, 3]).unwrap();
        let m = StateSpaceMatrices::new(&p, &ts, 1.0 / 12.0).unwrap();
        let x = StateVector { chi: 0.1, xi: 4.0 };
        let ss = m.ss_mean(&x.as_vector());
        assert_eq!(
            fr_measurement_mean(&m, &x, &DMatrix::zeros(3, 1), &[0.7]).unwrap(),
            ss
        );
        assert_eq!(fr_measurement_mean(&m, &x, &p.gamma, &[0.0]).unwrap(), ss);
        let shifted =
            fr_measurement_mean(&m, &x, &DMatrix::from_element(3, 1, 1.0), &[0.5]).unwrap();
        for i in 0..3 {
            assert_eq!(shifted[i], ss[i] + 0.5);
        }
        assert!(fr_measurement_mean(&m, &x, &p.gamma, &[0.0, 1.0]).is_err());
    }

    #[test]
    fn sigma_v_is_spd_for_extreme_rho() {
        for rho in [-0.999, -0.5, 0.0, 0.5, 0.999] {
            for dt in [1e-6, 1.0 / 12.0, 1.0, 30.0] {
                let mut p = params(1, 0);
                p.rho = rho;
                let s = state_transition(&p, dt).sigma_v;
                assert!(s.cholesky().is_some(), "rho={rho} dt={dt}");
            }
        }
    }

    #[test]
    fn noiseless_simulation_follows_mean_path() {
        let mut p = params(3, 0);
        p.sigma_chi = 1e-12;
        p.sigma_xi = 1e-12;
        p.meas_std = vec![1e-12; 3];
        let ts = tenors(&[1, 6, 12]).unwrap();
        let spec = SimulationSpec {
            tenors: &ts,
            start: Month::new(2000, 1).unwrap(),
            n_steps: 50,
            dt: 1.0 / 12.0,
            scores: None,
            initial: Some(StateVector { chi: 0.4, xi: 3.0 }),
            seed: 3,
        };
        let sim = simulate(&p, &spec).unwrap();
        let m = StateSpaceMatrices::new(&p, &ts, spec.dt).unwrap();
        let mut x = Vector2::new(0.4, 3.0);
        for t in 0..50 {
            x = m.c + m.e * x;
            let y = m.ss_mean(&x);
            for i in 0..3 {
                assert!((sim.futures.log_prices[(t, i)] - y[i]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn long_run_mean_of_xi() {
        let mut p = params(1, 0);
        p.kappa_xi = 1.0;
        p.kappa_chi = 2.0;
        p.mu_xi = 0.5;
        let ts = tenors(&[1]).unwrap();
        let n = 200_000;
        let spec = SimulationSpec {
            tenors: &ts,
            start: Month::new(2000, 1).unwrap(),
            n_steps: n,
            dt: 1.0 / 12.0,
            scores: None,
            initial: None,
            seed: 5,
        };
        let sim = simulate(&p, &spec).unwrap();
        let mean = sim.states.iter().map(|s| s.xi).sum::<f64>() / n as f64;
        // stationary sd sqrt(σ²/2κ); effective sample size n(1-φ)/(1+φ)
        let sd = (p.sigma_xi.powi(2) / 2.0).sqrt();
        let phi = (-spec.dt).exp();
        let se = sd / (n as f64 * (1.0 - phi) / (1.0 + phi)).sqrt();
        assert!((mean - 0.5).abs() < 4.0 * se, "mean {mean}, se {se}");
    }

    #[test]
    fn simulation_is_deterministic_and_needs_scores() {
        let p = params(2, 1);
        let ts = tenors(&[1, 2]).unwrap();
        let u = DMatrix::from_fn(10, 1, |t, _| t as f64 * 0.01);
        let mut spec = SimulationSpec {
            tenors: &ts,
            start: Month::new(2000, 1).unwrap(),
            n_steps: 10,
            dt: 1.0 / 12.0,
            scores: Some(&u),
            initial: None,
            seed: 9,
        };
        let a = simulate(&p, &spec).unwrap();
        let b = simulate(&p, &spec).unwrap();
        assert_eq!(a, b);
        spec.scores = None;
        assert!(simulate(&p, &spec).is_err());
    }

    #[test]
    fn params_json_round_trip_and_field_names() {
        let p = params(3, 2);
        let s = serde_json::to_string(&p).unwrap();
        for key in ["kappa_chi", "lambda_xi", "meas_std", "\"Gamma\"", "\"Q\""] {
            assert!(s.contains(key), "{key} missing from {s}");
        }
        let back: ModelParams = serde_json::from_str(&s).unwrap();
        assert_eq!(back, p);
        let pure = params(3, 0);
        let back: ModelParams =
            serde_json::from_str(&serde_json::to_string(&pure).unwrap()).unwrap();
        assert_eq!(back.q(), 0);
        assert_eq!(back.p(), 3);
    }

    #[test]
    fn invalid_params_rejected() {
        let mut p = params(2, 0);
        p.kappa_chi = 0.1;
        assert!(p.validate().is_err());
        let mut p = params(2, 0);
        p.rho = 1.0;
        assert!(p.validate().is_err());
        let mut p = params(2, 0);
        p.meas_std[1] = 0.0;
        assert!(p.validate().is_err());
    }
}
