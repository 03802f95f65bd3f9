//! Kernel PCA over yield-tenor time series and Karhunen-Loève factor scores.
//!
//! Each of the M yield tenors contributes one training row: its full time
//! series of length N. The M×M kernel matrix between those rows is
//! eigendecomposed as `K = R Λ Rᵀ`, giving principal-component scores
//! `A = R Λ^{1/2}` and out-of-sample weights `W = A Λ^{-1}`. The score columns,
//! read as functions of maturity and orthonormalized under a trapezoidal
//! quadrature on the tenor grid, form the basis `e_q(τ)` used to reduce the
//! functional regressor to finitely many factor scores `U_{tq}`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Month, Tenor, YieldPanel};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    /// `exp(-‖x - y‖² / (2σ²))`
    Rbf,
    /// Plain dot product.
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    /// σ of the RBF kernel. Ignored by the linear kernel.
    pub bandwidth: f64,
}

impl KernelSpec {
    pub fn rbf(bandwidth: f64) -> Self {
        KernelSpec {
            kind: KernelKind::Rbf,
            bandwidth,
        }
    }

    pub fn linear() -> Self {
        KernelSpec {
            kind: KernelKind::Linear,
            bandwidth: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == KernelKind::Rbf && !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return Err(Error::InvalidParam(format!(
                "rbf bandwidth must be positive, got {}",
                self.bandwidth
            )));
        }
        Ok(())
    }
}

pub fn kernel_value(x: &[f64], y: &[f64], spec: &KernelSpec) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!(
            "kernel arguments have lengths {} and {}",
            x.len(),
            y.len()
        )));
    }
    spec.validate()?;
    Ok(kernel_unchecked(x, y, spec))
}

fn kernel_unchecked(x: &[f64], y: &[f64], spec: &KernelSpec) -> f64 {
    match spec.kind {
        KernelKind::Rbf => {
            let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
            (-d2 / (2.0 * spec.bandwidth * spec.bandwidth)).exp()
        }
        KernelKind::Linear => x.iter().zip(y).map(|(a, b)| a * b).sum(),
    }
}

/// Median of the pairwise Euclidean distances between rows (lower median on
/// an even count).
pub fn median_bandwidth(rows: &[Vec<f64>]) -> Result<f64> {
    if rows.len() < 2 {
        return Err(Error::Data(
            "median bandwidth needs at least two rows".into(),
        ));
    }
    let mut dists = Vec::with_capacity(rows.len() * (rows.len() - 1) / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            if rows[i].len() != rows[j].len() {
                return Err(Error::Shape("rows of unequal length".into()));
            }
            let d2: f64 = rows[i]
                .iter()
                .zip(&rows[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            dists.push(d2.sqrt());
        }
    }
    dists.sort_by(f64::total_cmp);
    let median = dists[(dists.len() - 1) / 2];
    if !(median > 0.0 && median.is_finite()) {
        return Err(Error::Data(
            "degenerate bandwidth: pairwise distances are zero".into(),
        ));
    }
    Ok(median)
}

/// Trapezoidal weights for integrating over the tenor grid (in years), from
/// the shortest to the longest tenor.
pub fn trapezoid_weights(tenors: &[Tenor]) -> Result<Vec<f64>> {
    let m = tenors.len();
    if m < 2 {
        return Err(Error::Data("quadrature needs at least two tenors".into()));
    }
    let x: Vec<f64> = tenors.iter().map(Tenor::years).collect();
    let mut w = vec![0.0; m];
    for i in 0..m - 1 {
        let h = 0.5 * (x[i + 1] - x[i]);
        w[i] += h;
        w[i + 1] += h;
    }
    Ok(w)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KpcaOptions {
    /// Number of factors kept.
    pub q: usize,
    /// Eigenvalues must exceed `eigen_tolerance · λ_max` to be kept.
    pub eigen_tolerance: f64,
    /// Double-center the kernel matrix. Off by default.
    pub center: bool,
}

impl Default for KpcaOptions {
    fn default() -> Self {
        KpcaOptions {
            q: 2,
            eigen_tolerance: 1e-10,
            center: false,
        }
    }
}

/// A fitted kernel PCA. Immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KpcaModel {
    pub spec: KernelSpec,
    pub center: bool,
    pub tenors: Vec<Tenor>,
    /// M×N training rows, row i being the yield series at `tenors[i]`.
    #[serde(with = "crate::serde_mat")]
    pub train_rows: DMatrix<f64>,
    /// The decomposed M×M kernel matrix (centered when `center`).
    #[serde(with = "crate::serde_mat")]
    pub kernel_matrix: DMatrix<f64>,
    /// All M eigenvalues of the kernel matrix, descending.
    pub spectrum: Vec<f64>,
    /// The Q retained eigenvalues.
    pub eigenvalues: Vec<f64>,
    /// M×Q orthonormal eigenvectors.
    #[serde(with = "crate::serde_mat")]
    pub eigenvectors: DMatrix<f64>,
    /// M×Q principal-component scores `A = R Λ^{1/2}`.
    #[serde(with = "crate::serde_mat")]
    pub scores: DMatrix<f64>,
    /// M×Q projection weights `W = A Λ^{-1}`.
    #[serde(with = "crate::serde_mat")]
    pub weights: DMatrix<f64>,
    /// M×Q basis values `e_q(τ_i)`, orthonormal under `quadrature`.
    #[serde(with = "crate::serde_mat")]
    pub basis: DMatrix<f64>,
    pub quadrature: Vec<f64>,
    /// Column means and grand mean of the uncentered kernel, for projecting
    /// new points when `center` is set.
    kernel_col_means: Vec<f64>,
    kernel_grand_mean: f64,
}

/// Functional factor scores `U_{tq}`, one row per date.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorScores {
    pub dates: Vec<Month>,
    /// N×Q
    pub values: DMatrix<f64>,
}

impl FactorScores {
    pub fn q(&self) -> usize {
        self.values.ncols()
    }
}

fn flip_sign_to_largest_positive(mut col: nalgebra::DVectorViewMut<'_, f64>) {
    let mut best = 0;
    for i in 1..col.len() {
        if col[i].abs() > col[best].abs() {
            best = i;
        }
    }
    if col[best] < 0.0 {
        col.neg_mut();
    }
}

pub fn fit_kpca(yields: &YieldPanel, spec: KernelSpec, opts: &KpcaOptions) -> Result<KpcaModel> {
    spec.validate()?;
    let m = yields.n_tenors();
    let q = opts.q;
    if q == 0 || q > m {
        return Err(Error::InvalidParam(format!(
            "need 1 <= Q <= M = {m}, got Q = {q}"
        )));
    }
    if !(opts.eigen_tolerance > 0.0) {
        return Err(Error::InvalidParam(
            "eigen_tolerance must be positive".into(),
        ));
    }
    let quadrature = trapezoid_weights(&yields.tenors)?;
    let rows: Vec<Vec<f64>> = (0..m)
        .map(|i| yields.yields.row(i).iter().copied().collect())
        .collect();
    let raw = DMatrix::from_fn(m, m, |i, j| kernel_unchecked(&rows[i], &rows[j], &spec));
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite kernel entries".into()));
    }
    let kernel_col_means: Vec<f64> = (0..m).map(|j| raw.column(j).mean()).collect();
    let kernel_grand_mean = raw.mean();
    let kernel_matrix = if opts.center {
        DMatrix::from_fn(m, m, |i, j| {
            raw[(i, j)] - kernel_col_means[i] - kernel_col_means[j] + kernel_grand_mean
        })
    } else {
        raw
    };

    let eig = kernel_matrix.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let spectrum: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let lambda_max = spectrum[0];
    let threshold = opts.eigen_tolerance * lambda_max.abs();
    let n_above = spectrum
        .iter()
        .take_while(|&&l| l > threshold && l > 0.0)
        .count();
    if n_above < q {
        return Err(Error::Numerical(format!(
            "only {n_above} kernel eigenvalues above tolerance, {q} requested"
        )));
    }
    let eigenvalues = spectrum[..q].to_vec();
    let mut eigenvectors = DMatrix::zeros(m, q);
    for (c, &k) in order.iter().take(q).enumerate() {
        eigenvectors.set_column(c, &eig.eigenvectors.column(k));
        flip_sign_to_largest_positive(eigenvectors.column_mut(c));
    }
    let sqrt_l = DVector::from_iterator(q, eigenvalues.iter().map(|l| l.sqrt()));
    let inv_sqrt_l = sqrt_l.map(|s| 1.0 / s);
    let scores = DMatrix::from_fn(m, q, |i, c| eigenvectors[(i, c)] * sqrt_l[c]);
    let weights = DMatrix::from_fn(m, q, |i, c| eigenvectors[(i, c)] * inv_sqrt_l[c]);
    let basis = weighted_orthonormal_basis(&scores, &quadrature)?;

    Ok(KpcaModel {
        spec,
        center: opts.center,
        tenors: yields.tenors.clone(),
        train_rows: yields.yields.clone(),
        kernel_matrix,
        spectrum,
        eigenvalues,
        eigenvectors,
        scores,
        weights,
        basis,
        quadrature,
        kernel_col_means,
        kernel_grand_mean,
    })
}

/// Gram-Schmidt on the score columns (in eigenvalue order) under the
/// quadrature inner product, then the largest-magnitude entry made positive.
fn weighted_orthonormal_basis(scores: &DMatrix<f64>, w: &[f64]) -> Result<DMatrix<f64>> {
    let (m, q) = scores.shape();
    let inner =
        |a: &DVector<f64>, b: &DVector<f64>| -> f64 { (0..m).map(|i| w[i] * a[i] * b[i]).sum() };
    let mut cols: Vec<DVector<f64>> = Vec::with_capacity(q);
    for c in 0..q {
        let mut v: DVector<f64> = scores.column(c).into_owned();
        // two passes keep the result orthogonal to round-off
        for _ in 0..2 {
            for e in &cols {
                let proj = inner(&v, e);
                v.axpy(-proj, e, 1.0);
            }
        }
        let norm = inner(&v, &v).sqrt();
        if !(norm > 1e-300) {
            return Err(Error::Numerical(
                "score columns are degenerate on the tenor grid".into(),
            ));
        }
        v /= norm;
        cols.push(v);
    }
    let mut basis = DMatrix::from_columns(&cols);
    for c in 0..q {
        flip_sign_to_largest_positive(basis.column_mut(c));
    }
    Ok(basis)
}

impl KpcaModel {
    pub fn q(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn m(&self) -> usize {
        self.tenors.len()
    }

    /// Length N of each training row.
    pub fn series_len(&self) -> usize {
        self.train_rows.ncols()
    }

    pub fn basis_values(&self) -> &DMatrix<f64> {
        &self.basis
    }

    /// Scores `α*_q = Σ_i W_{iq} k(z*, row_i)` of a new series.
    pub fn project_new_tenor(&self, z_star: &[f64]) -> Result<Vec<f64>> {
        if z_star.len() != self.series_len() {
            return Err(Error::Shape(format!(
                "projected series has length {}, model rows have length {}",
                z_star.len(),
                self.series_len()
            )));
        }
        let m = self.m();
        let mut k: Vec<f64> = (0..m)
            .map(|i| {
                let row: Vec<f64> = self.train_rows.row(i).iter().copied().collect();
                kernel_unchecked(z_star, &row, &self.spec)
            })
            .collect();
        if self.center {
            let kmean = k.iter().sum::<f64>() / m as f64;
            for (i, ki) in k.iter_mut().enumerate() {
                *ki = *ki - kmean - self.kernel_col_means[i] + self.kernel_grand_mean;
            }
        }
        Ok((0..self.q())
            .map(|c| (0..m).map(|i| self.weights[(i, c)] * k[i]).sum())
            .collect())
    }

    /// `U_{tq} = Σ_i quadrature_i · Z_t(τ_i) · e_q(τ_i)` for every date.
    pub fn factor_scores(&self, yields: &YieldPanel) -> Result<FactorScores> {
        if yields.tenors != self.tenors {
            return Err(Error::Shape(format!(
                "yield tenors {:?} differ from the model grid {:?}",
                yields.tenors, self.tenors
            )));
        }
        let weighted = DMatrix::from_fn(self.m(), self.q(), |i, c| {
            self.quadrature[i] * self.basis[(i, c)]
        });
        Ok(FactorScores {
            dates: yields.dates.clone(),
            values: yields.yields.transpose() * weighted,
        })
    }
}

/// Kernel PCA settings with the bandwidth rule left open.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KpcaConfig {
    pub kind: KernelKind,
    /// Fixed RBF bandwidth; `None` uses the median heuristic.
    pub bandwidth: Option<f64>,
    pub q: usize,
    pub eigen_tolerance: f64,
    pub center: bool,
}

impl Default for KpcaConfig {
    fn default() -> Self {
        let o = KpcaOptions::default();
        KpcaConfig {
            kind: KernelKind::Rbf,
            bandwidth: None,
            q: o.q,
            eigen_tolerance: o.eigen_tolerance,
            center: o.center,
        }
    }
}

impl KpcaConfig {
    pub fn options(&self) -> KpcaOptions {
        KpcaOptions {
            q: self.q,
            eigen_tolerance: self.eigen_tolerance,
            center: self.center,
        }
    }

    pub fn resolve_spec(&self, yields: &YieldPanel) -> Result<KernelSpec> {
        match self.kind {
            KernelKind::Linear => Ok(KernelSpec::linear()),
            KernelKind::Rbf => {
                let bandwidth = match self.bandwidth {
                    Some(b) => b,
                    None => {
                        let rows: Vec<Vec<f64>> = (0..yields.n_tenors())
                            .map(|i| yields.yields.row(i).iter().copied().collect())
                            .collect();
                        median_bandwidth(&rows)?
                    }
                };
                Ok(KernelSpec::rbf(bandwidth))
            }
        }
    }

    pub fn fit(&self, yields: &YieldPanel) -> Result<KpcaModel> {
        let spec = self.resolve_spec(yields)?;
        fit_kpca(yields, spec, &self.options())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{default_yield_tenors, Month};

    fn panel(n: usize, f: impl Fn(usize, usize) -> f64) -> YieldPanel {
        let start = Month::new(2010, 1).unwrap();
        YieldPanel::new(
            (0..n as i64).map(|k| start.add_months(k)).collect(),
            default_yield_tenors(),
            DMatrix::from_fn(5, n, f),
        )
        .unwrap()
    }

    fn wavy(n: usize) -> YieldPanel {
        panel(n, |i, t| {
            let tau = [1.0, 3.0, 6.0, 9.0, 12.0][i] / 12.0;
            0.02 + 0.01 * (t as f64 * 0.3).sin()
                + tau * 0.01 * (t as f64 * 0.11).cos()
                + 0.002 * ((i * t) as f64).sin()
        })
    }

    #[test]
    fn kernel_values() {
        let x = [0.3, -1.2];
        assert_eq!(kernel_value(&x, &x, &KernelSpec::rbf(0.7)).unwrap(), 1.0);
        let v = kernel_value(&[0.0, 0.0], &[2.0, 0.0], &KernelSpec::rbf(2f64.sqrt())).unwrap();
        assert!((v - (-1f64).exp()).abs() < 1e-15);
        assert!((v - 0.367879).abs() < 1e-6);
        assert_eq!(
            kernel_value(&[1.0, 2.0], &[3.0, 4.0], &KernelSpec::linear()).unwrap(),
            11.0
        );
        assert!(kernel_value(&[1.0], &[1.0, 2.0], &KernelSpec::linear()).is_err());
        assert!(kernel_value(&[1.0], &[1.0], &KernelSpec::rbf(0.0)).is_err());
    }

    #[test]
    fn median_bandwidth_cases() {
        assert_eq!(
            median_bandwidth(&[vec![0.0, 0.0], vec![3.0, 4.0]]).unwrap(),
            5.0
        );
        let rows = [vec![0.0, 0.0], vec![1.0, 0.0], vec![3.0, 0.0]];
        assert_eq!(median_bandwidth(&rows).unwrap(), 2.0);
        // four distances {1,2,3,4}? use 3 points on a line plus lower-median check
        let rows = [vec![0.0], vec![1.0], vec![3.0], vec![7.0]];
        // distances 1,3,7,2,6,4 -> sorted 1,2,3,4,6,7 -> lower median 3
        assert_eq!(median_bandwidth(&rows).unwrap(), 3.0);
        let err = median_bandwidth(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap_err();
        assert!(err.to_string().contains("degenerate bandwidth"));
    }

    #[test]
    fn trapezoid_weights_integrate_linear_exactly() {
        let w = trapezoid_weights(&default_yield_tenors()).unwrap();
        let x: Vec<f64> = [1.0, 3.0, 6.0, 9.0, 12.0]
            .iter()
            .map(|m| m / 12.0)
            .collect();
        let total: f64 = w.iter().sum();
        assert!((total - 11.0 / 12.0).abs() < 1e-15);
        let lin: f64 = w.iter().zip(&x).map(|(w, x)| w * (2.0 * x + 1.0)).sum();
        let exact = (x[4] * x[4] + x[4]) - (x[0] * x[0] + x[0]);
        assert!((lin - exact).abs() < 1e-14);
    }

    #[test]
    fn identical_rows_are_rank_one() {
        let y = panel(6, |_, t| 0.01 * t as f64);
        let opts = KpcaOptions {
            q: 2,
            ..Default::default()
        };
        let err = fit_kpca(&y, KernelSpec::rbf(1.0), &opts).unwrap_err();
        assert!(
            err.to_string().contains("eigenvalues above tolerance"),
            "{err}"
        );
        let m = fit_kpca(&y, KernelSpec::rbf(1.0), &KpcaOptions { q: 1, ..opts }).unwrap();
        assert!(m.kernel_matrix.iter().all(|&k| k == 1.0));
        assert!((m.eigenvalues[0] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn fitted_identities() {
        let y = wavy(40);
        let spec = KpcaConfig::default().resolve_spec(&y).unwrap();
        let m = fit_kpca(
            &y,
            spec,
            &KpcaOptions {
                q: 3,
                ..Default::default()
            },
        )
        .unwrap();
        let q = m.q();
        let id = DMatrix::<f64>::identity(q, q);
        assert!((m.eigenvectors.transpose() * &m.eigenvectors - &id).amax() < 1e-10);
        let lam = DMatrix::from_diagonal(&DVector::from_vec(m.eigenvalues.clone()));
        assert!((m.scores.transpose() * &m.scores - &lam).amax() < 1e-10);
        let trace: f64 = m.kernel_matrix.trace();
        let sum: f64 = m.spectrum.iter().sum();
        assert!((trace - sum).abs() <= 1e-8 * trace.abs());
        let gram = m.basis.transpose()
            * DMatrix::from_diagonal(&DVector::from_vec(m.quadrature.clone()))
            * &m.basis;
        assert!((gram - id).amax() < 1e-10);
        for c in 0..q {
            let col = m.basis.column(c);
            let imax = col.iamax();
            assert!(col[imax] > 0.0);
            let col = m.eigenvectors.column(c);
            assert!(col[col.iamax()] > 0.0);
        }
    }

    #[test]
    fn single_factor_basis_is_scaled_score() {
        let y = wavy(30);
        let m = KpcaConfig {
            q: 1,
            ..Default::default()
        }
        .fit(&y)
        .unwrap();
        let ratio: Vec<f64> = (0..5).map(|i| m.basis[(i, 0)] / m.scores[(i, 0)]).collect();
        for r in &ratio {
            assert!((r - ratio[0]).abs() < 1e-12 * ratio[0].abs());
        }
    }

    #[test]
    fn projection_of_training_rows_reproduces_scores() {
        let y = wavy(25);
        for center in [false, true] {
            let cfg = KpcaConfig {
                q: 2,
                center,
                ..Default::default()
            };
            let m = cfg.fit(&y).unwrap();
            for i in 0..5 {
                let row: Vec<f64> = y.yields.row(i).iter().copied().collect();
                let a = m.project_new_tenor(&row).unwrap();
                for c in 0..2 {
                    assert!((a[c] - m.scores[(i, c)]).abs() < 1e-8, "center={center}");
                }
            }
        }
    }

    #[test]
    fn projection_edge_cases() {
        let y = wavy(20);
        let mut m = KpcaConfig {
            q: 1,
            ..Default::default()
        }
        .fit(&y)
        .unwrap();
        let far = vec![1e6; 20];
        assert!(m.project_new_tenor(&far).unwrap()[0].abs() < 1e-300);
        assert!(m.project_new_tenor(&[0.0; 3]).is_err());
        m.weights.fill(0.0);
        let row: Vec<f64> = y.yields.row(0).iter().copied().collect();
        assert_eq!(m.project_new_tenor(&row).unwrap(), vec![0.0]);
    }

    #[test]
    fn factor_scores_linear_and_orthonormal() {
        let y = wavy(30);
        let m = KpcaConfig {
            q: 2,
            ..Default::default()
        }
        .fit(&y)
        .unwrap();
        let mut z = y.clone();
        z.yields.column_mut(3).fill(0.0);
        z.yields.set_column(4, &m.basis.column(0));
        let u = m.factor_scores(&z).unwrap();
        assert_eq!(
            u.values.row(3).iter().copied().collect::<Vec<_>>(),
            vec![0.0, 0.0]
        );
        assert!((u.values[(4, 0)] - 1.0).abs() < 1e-10);
        assert!(u.values[(4, 1)].abs() < 1e-10);

        let mut doubled = z.clone();
        doubled.yields *= 2.0;
        let u2 = m.factor_scores(&doubled).unwrap();
        for (a, b) in u.values.iter().zip(u2.values.iter()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn factor_scores_reject_other_grid() {
        let y = wavy(10);
        let m = KpcaConfig {
            q: 1,
            ..Default::default()
        }
        .fit(&y)
        .unwrap();
        let mut other = y.clone();
        other.tenors[4] = Tenor::new(24).unwrap();
        assert!(matches!(m.factor_scores(&other), Err(Error::Shape(_))));
    }

    #[test]
    fn model_json_round_trip() {
        let y = wavy(12);
        let m = KpcaConfig::default().fit(&y).unwrap();
        let s = serde_json::to_string(&m).unwrap();
        let back: KpcaModel = serde_json::from_str(&s).unwrap();
        assert_eq!(back, m);
    }
}
