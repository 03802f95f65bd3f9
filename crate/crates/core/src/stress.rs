//! Multiplicative yield-curve shocks and their effect on fitted futures prices
//! with the model parameters held fixed.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::analysis::{fitted_log_prices, StateSource};
use crate::data::{AlignedDataset, Month, Tenor, YieldPanel};
use crate::error::{Error, Result};
use crate::filter::{run_filter, FilterConfig};
use crate::kpca::{fit_kpca, FactorScores, KernelSpec, KpcaConfig, KpcaModel};
use crate::model::{ModelParams, StateSpaceMatrices};

/// Normal quantile for the two-sided 95% band.
pub const Z_95: f64 = 1.96;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShockKind {
    Temporary,
    Permanent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShockScenario {
    pub kind: ShockKind,
    pub start: Month,
    /// Last shocked month, inclusive. Temporary shocks only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end: Option<Month>,
    pub multiplier: f64,
}

impl ShockScenario {
    pub fn permanent(start: Month, multiplier: f64) -> Self {
        ShockScenario {
            kind: ShockKind::Permanent,
            start,
            end: None,
            multiplier,
        }
    }

    pub fn temporary(start: Month, end: Month, multiplier: f64) -> Self {
        ShockScenario {
            kind: ShockKind::Temporary,
            start,
            end: Some(end),
            multiplier,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.multiplier > 0.0 && self.multiplier.is_finite()) {
            return Err(Error::InvalidParam(format!(
                "shock multiplier must be positive, got {}",
                self.multiplier
            )));
        }
        match (self.kind, self.end) {
            (ShockKind::Temporary, None) => Err(Error::InvalidParam(
                "temporary shock needs an end date".into(),
            )),
            (ShockKind::Temporary, Some(end)) if end < self.start => Err(Error::InvalidParam(
                format!("shock end {end} precedes start {}", self.start),
            )),
            (ShockKind::Permanent, Some(_)) => Err(Error::InvalidParam(
                "permanent shock takes no end date".into(),
            )),
            _ => Ok(()),
        }
    }

    pub fn covers(&self, d: Month) -> bool {
        d >= self.start && self.end.is_none_or(|e| d <= e)
    }
}

/// Multiplies every yield dated inside the shock window.
pub fn apply_shock(yields: &YieldPanel, scenario: &ShockScenario) -> Result<YieldPanel> {
    scenario.validate()?;
    match yields.dates.last() {
        Some(&last) if scenario.start <= last => {}
        Some(&last) => {
            return Err(Error::InvalidParam(format!(
                "shock starts {} after the panel ends {last}",
                scenario.start
            )))
        }
        None => return Err(Error::Data("empty yield panel".into())),
    }
    let mut out = yields.clone();
    for (t, &d) in yields.dates.iter().enumerate() {
        if scenario.covers(d) {
            for i in 0..yields.n_tenors() {
                out.yields[(i, t)] *= scenario.multiplier;
            }
        }
    }
    Ok(out)
}

/// How factors are obtained from the shocked yields.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KpcaMode {
    /// Fit a fresh kPCA model on the shocked panel.
    #[default]
    Refit,
    /// Project the shocked yields through the base model.
    Freeze,
}

/// Bandwidth used when refitting on shocked data.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BandwidthRule {
    /// Apply the configured rule (median heuristic unless fixed) to the shocked panel.
    #[default]
    Recompute,
    /// Reuse the bandwidth resolved on the base panel.
    Frozen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StressOptions {
    pub kpca_mode: KpcaMode,
    pub bandwidth: BandwidthRule,
    pub state_source: StateSource,
}

impl Default for StressOptions {
    fn default() -> Self {
        StressOptions {
            kpca_mode: KpcaMode::Refit,
            bandwidth: BandwidthRule::Recompute,
            state_source: StateSource::Predicted,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StressRun {
    /// N×P USD prices from the unshocked pipeline.
    pub base_prices: DMatrix<f64>,
    /// N×P USD prices from the shocked pipeline.
    pub shocked_prices: DMatrix<f64>,
    pub base_scores: FactorScores,
    pub shocked_scores: FactorScores,
    pub base_spec: KernelSpec,
    pub shocked_spec: KernelSpec,
}

fn priced(
    dataset: &AlignedDataset,
    params: &ModelParams,
    scores: &FactorScores,
    filter: &FilterConfig,
    source: StateSource,
) -> Result<DMatrix<f64>> {
    let out = run_filter(dataset, params, Some(scores), filter)?;
    let m = StateSpaceMatrices::new(params, &dataset.futures.tenors, dataset.dt)?;
    let y = fitted_log_prices(&out, &m, &params.gamma, Some(&scores.values), source)?;
    let prices = y.map(f64::exp);
    if prices.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("price overflow".into()));
    }
    Ok(prices)
}

/// Prices the dataset twice at fixed parameters, once with the original
/// yields and once with the shocked yields.
pub fn stress_run(
    dataset: &AlignedDataset,
    params: &ModelParams,
    kpca: &KpcaConfig,
    scenario: &ShockScenario,
    opts: &StressOptions,
    filter: &FilterConfig,
) -> Result<StressRun> {
    if params.q() == 0 {
        return Err(Error::InvalidParam(
            "stress testing needs a model with Q > 0".into(),
        ));
    }
    if params.q() != kpca.q {
        return Err(Error::InvalidParam(format!(
            "model has Q = {} but the kPCA config asks for Q = {}",
            params.q(),
            kpca.q
        )));
    }
    let shocked_yields = apply_shock(&dataset.yields, scenario)?;

    let base_spec = kpca.resolve_spec(&dataset.yields)?;
    let base_model = fit_kpca(&dataset.yields, base_spec, &kpca.options())?;
    let base_scores = base_model.factor_scores(&dataset.yields)?;

    let (shocked_model, shocked_spec): (KpcaModel, KernelSpec) = match opts.kpca_mode {
        KpcaMode::Freeze => (base_model.clone(), base_spec),
        KpcaMode::Refit => {
            let spec = match opts.bandwidth {
                BandwidthRule::Recompute => kpca.resolve_spec(&shocked_yields)?,
                BandwidthRule::Frozen => base_spec,
            };
            (fit_kpca(&shocked_yields, spec, &kpca.options())?, spec)
        }
    };
    let shocked_scores = shocked_model.factor_scores(&shocked_yields)?;

    let base_prices = priced(dataset, params, &base_scores, filter, opts.state_source)?;
    let shocked_prices = priced(dataset, params, &shocked_scores, filter, opts.state_source)?;
    Ok(StressRun {
        base_prices,
        shocked_prices,
        base_scores,
        shocked_scores,
        base_spec,
        shocked_spec,
    })
}

/// Half-open tenor range `(lo, hi]` in months.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bucket {
    pub lo: u32,
    pub hi: u32,
}

impl Bucket {
    pub fn contains(&self, t: Tenor) -> bool {
        t.months() > self.lo && t.months() <= self.hi
    }

    pub fn label(&self) -> String {
        format!("({},{}]", self.lo, self.hi)
    }
}

pub fn default_buckets() -> Vec<Bucket> {
    vec![
        Bucket { lo: 0, hi: 4 },
        Bucket { lo: 4, hi: 8 },
        Bucket { lo: 8, hi: 12 },
    ]
}

/// Per-bucket mean USD price difference over time with normal bands.
#[derive(Debug, Clone, PartialEq)]
pub struct StressReport {
    pub dates: Vec<Month>,
    pub buckets: Vec<Bucket>,
    /// `mean_diff[b][t]`
    pub mean_diff: Vec<Vec<f64>>,
    pub ci_low: Vec<Vec<f64>>,
    pub ci_high: Vec<Vec<f64>>,
}

/// Cross-sectional mean and `mean ± 1.96·sd/√n` over the tenors in each
/// bucket. `sd` uses the n−1 denominator and is 0 for a single tenor.
pub fn bucket_report(
    dates: &[Month],
    tenors: &[Tenor],
    base: &DMatrix<f64>,
    shocked: &DMatrix<f64>,
    buckets: &[Bucket],
) -> Result<StressReport> {
    let shape = (dates.len(), tenors.len());
    if base.shape() != shape || shocked.shape() != shape {
        return Err(Error::Shape(format!(
            "price panels {:?} and {:?}, expected {shape:?}",
            base.shape(),
            shocked.shape()
        )));
    }
    for t in tenors {
        let n = buckets.iter().filter(|b| b.contains(*t)).count();
        if n != 1 {
            return Err(Error::InvalidParam(format!(
                "tenor {} lies in {n} buckets, expected exactly one",
                t.header()
            )));
        }
    }
    let members: Vec<Vec<usize>> = buckets
        .iter()
        .map(|b| {
            (0..tenors.len())
                .filter(|&i| b.contains(tenors[i]))
                .collect()
        })
        .collect();
    if let Some(b) = buckets.iter().zip(&members).find(|(_, m)| m.is_empty()) {
        return Err(Error::InvalidParam(format!(
            "bucket {} holds no tenors",
            b.0.label()
        )));
    }

    let mut report = StressReport {
        dates: dates.to_vec(),
        buckets: buckets.to_vec(),
        mean_diff: Vec::with_capacity(buckets.len()),
        ci_low: Vec::with_capacity(buckets.len()),
        ci_high: Vec::with_capacity(buckets.len()),
    };
    for idx in &members {
        let n = idx.len() as f64;
        let (mut mean, mut lo, mut hi) = (Vec::new(), Vec::new(), Vec::new());
        for t in 0..dates.len() {
            let d: Vec<f64> = idx
                .iter()
                .map(|&i| shocked[(t, i)] - base[(t, i)])
                .collect();
            let m = d.iter().sum::<f64>() / n;
            let sd = if idx.len() > 1 {
                (d.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            let half = Z_95 * sd / n.sqrt();
            mean.push(m);
            lo.push(m - half);
            hi.push(m + half);
        }
        report.mean_diff.push(mean);
        report.ci_low.push(lo);
        report.ci_high.push(hi);
    }
    Ok(report)
}

/// Description of the run written next to the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StressMetadata {
    pub scenario: ShockScenario,
    pub options: StressOptions,
    pub kpca: KpcaConfig,
    pub base_kernel: KernelSpec,
    pub shocked_kernel: KernelSpec,
    pub buckets: Vec<String>,
    pub price_units: String,
    pub ci_method: String,
}

impl StressMetadata {
    pub fn new(
        scenario: &ShockScenario,
        options: &StressOptions,
        kpca: &KpcaConfig,
        run: &StressRun,
        buckets: &[Bucket],
    ) -> Self {
        StressMetadata {
            scenario: scenario.clone(),
            options: options.clone(),
            kpca: kpca.clone(),
            base_kernel: run.base_spec,
            shocked_kernel: run.shocked_spec,
            buckets: buckets.iter().map(Bucket::label).collect(),
            price_units: "USD".into(),
            ci_method: "cross-sectional normal approximation per date and bucket: \
                        mean ± 1.96·sd/sqrt(n) over the n contracts in the bucket, \
                        sd with n-1 denominator (0 when n = 1)"
                .into(),
        }
    }
}
