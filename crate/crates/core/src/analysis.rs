//! In-sample diagnostics: fitted values, RMSE, the functional component and
//! its price multiplier, coefficient curves, and the yield-curve regime.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{Month, Tenor, YieldPanel};
use crate::error::{Error, Result};
use crate::filter::FilterOutput;
use crate::kpca::{FactorScores, KpcaModel};
use crate::model::StateSpaceMatrices;

/// Which state estimate feeds the fitted values.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StateSource {
    /// One-step-ahead `a_{t|t-1}`, consistent with the likelihood innovations.
    #[default]
    Predicted,
    Filtered,
}

fn check_gamma_scores(gamma: &DMatrix<f64>, scores: Option<&DMatrix<f64>>, n: usize) -> Result<()> {
    match scores {
        None if gamma.ncols() > 0 => Err(Error::InvalidParam(
            "factor scores required when Q > 0".into(),
        )),
        Some(u) if u.shape() != (n, gamma.ncols()) => Err(Error::Shape(format!(
            "factor scores are {:?}, expected ({n}, {})",
            u.shape(),
            gamma.ncols()
        ))),
        _ => Ok(()),
    }
}

/// State-space part `D + F a_t` of the fitted log prices, N×P.
fn ss_log_prices(
    output: &FilterOutput,
    m: &StateSpaceMatrices,
    source: StateSource,
) -> DMatrix<f64> {
    let states = match source {
        StateSource::Predicted => &output.a_pred,
        StateSource::Filtered => &output.a_filt,
    };
    let mut out = DMatrix::zeros(states.len(), m.p());
    for (t, a) in states.iter().enumerate() {
        out.set_row(t, &m.ss_mean(a).transpose());
    }
    out
}

/// `ŷ_t = D + F a_t + Γ u_t` for every date.
pub fn fitted_log_prices(
    output: &FilterOutput,
    m: &StateSpaceMatrices,
    gamma: &DMatrix<f64>,
    scores: Option<&DMatrix<f64>>,
    source: StateSource,
) -> Result<DMatrix<f64>> {
    let n = output.n_dates();
    check_gamma_scores(gamma, scores, n)?;
    if gamma.nrows() != m.p() {
        return Err(Error::Shape(format!(
            "Gamma has {} rows, expected {}",
            gamma.nrows(),
            m.p()
        )));
    }
    let mut y = ss_log_prices(output, m, source);
    if let Some(u) = scores {
        if gamma.ncols() > 0 {
            y += u * gamma.transpose();
        }
    }
    Ok(y)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmseTable {
    pub per_tenor: Vec<f64>,
    pub mean: f64,
}

pub fn rmse_table(y: &DMatrix<f64>, y_hat: &DMatrix<f64>) -> Result<RmseTable> {
    if y.shape() != y_hat.shape() {
        return Err(Error::Shape(format!(
            "observed {:?} vs fitted {:?}",
            y.shape(),
            y_hat.shape()
        )));
    }
    if y.nrows() == 0 || y.ncols() == 0 {
        return Err(Error::Shape("RMSE of an empty panel".into()));
    }
    let n = y.nrows() as f64;
    let per_tenor: Vec<f64> = (0..y.ncols())
        .map(|i| {
            let sse: f64 = y
                .column(i)
                .iter()
                .zip(y_hat.column(i).iter())
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            (sse / n).sqrt()
        })
        .collect();
    let mean = per_tenor.iter().sum::<f64>() / per_tenor.len() as f64;
    Ok(RmseTable { per_tenor, mean })
}

/// Entry (t, i) is `Σ_j Γ_{ij} U_{tj}`.
pub fn functional_component(gamma: &DMatrix<f64>, scores: &FactorScores) -> Result<DMatrix<f64>> {
    if gamma.ncols() != scores.q() {
        return Err(Error::Shape(format!(
            "Gamma has {} columns, scores have {}",
            gamma.ncols(),
            scores.q()
        )));
    }
    Ok(&scores.values * gamma.transpose())
}

/// Fitted price split into the state-space price and the functional multiplier.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceDecomposition {
    /// `exp(D + F a_t)`, N×P.
    pub ss_price: DMatrix<f64>,
    /// `exp(Γ u_t)`, N×P.
    pub multiplier: DMatrix<f64>,
}

pub fn price_decomposition(
    output: &FilterOutput,
    m: &StateSpaceMatrices,
    gamma: &DMatrix<f64>,
    scores: Option<&DMatrix<f64>>,
    source: StateSource,
) -> Result<PriceDecomposition> {
    let n = output.n_dates();
    check_gamma_scores(gamma, scores, n)?;
    let ss_log = ss_log_prices(output, m, source);
    let component = match scores {
        Some(u) if gamma.ncols() > 0 => u * gamma.transpose(),
        _ => DMatrix::zeros(n, m.p()),
    };
    let ss_price = ss_log.map(f64::exp);
    let multiplier = component.map(f64::exp);
    let overflow = ss_price
        .iter()
        .chain(multiplier.iter())
        .any(|v| !v.is_finite())
        || ss_price
            .component_mul(&multiplier)
            .iter()
            .any(|v| !v.is_finite());
    if overflow {
        return Err(Error::Numerical("price overflow".into()));
    }
    Ok(PriceDecomposition {
        ss_price,
        multiplier,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientCurve {
    pub tenor_grid: Vec<Tenor>,
    /// P×M, entry (i, j) = `γ_i(τ_j)`.
    pub gamma_values: DMatrix<f64>,
}

/// `γ_i(τ_j) = Σ_k Γ_{ik} e_k(τ_j)` on the kPCA tenor grid.
pub fn coefficient_curves(gamma: &DMatrix<f64>, kpca: &KpcaModel) -> Result<CoefficientCurve> {
    if gamma.ncols() != kpca.q() {
        return Err(Error::Shape(format!(
            "Gamma has {} columns but the kPCA model keeps Q = {}",
            gamma.ncols(),
            kpca.q()
        )));
    }
    let gamma_values = gamma * kpca.basis_values().transpose();
    if gamma_values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite coefficient curve".into()));
    }
    Ok(CoefficientCurve {
        tenor_grid: kpca.tenors.clone(),
        gamma_values,
    })
}

/// Quadrature inner products of each curve with each basis function, P×Q.
pub fn project_curves(curves: &CoefficientCurve, kpca: &KpcaModel) -> Result<DMatrix<f64>> {
    if curves.tenor_grid != kpca.tenors {
        return Err(Error::Shape(
            "coefficient curve grid differs from the kPCA grid".into(),
        ));
    }
    let w = &kpca.quadrature;
    let basis = kpca.basis_values();
    let weighted = DMatrix::from_fn(kpca.m(), kpca.q(), |j, k| w[j] * basis[(j, k)]);
    Ok(&curves.gamma_values * weighted)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Contango,
    Backwardation,
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Regime::Contango => "contango",
            Regime::Backwardation => "backwardation",
        })
    }
}

/// Contango when the short yield is at or below the long yield.
pub fn contango_indicator(
    yields: &YieldPanel,
    short: Tenor,
    long: Tenor,
) -> Result<Vec<(Month, Regime)>> {
    let find = |t: Tenor| {
        yields
            .tenor_index(t)
            .ok_or_else(|| Error::Data(format!("tenor {} absent from the yield panel", t.header())))
    };
    let (s, l) = (find(short)?, find(long)?);
    Ok(yields
        .dates
        .iter()
        .enumerate()
        .map(|(t, &d)| {
            let regime = if yields.yields[(s, t)] <= yields.yields[(l, t)] {
                Regime::Contango
            } else {
                Regime::Backwardation
            };
            (d, regime)
        })
        .collect())
}
