//! One function per subcommand. Each takes the fully merged configuration and
//! writes its fixed set of files under `output_dir`.

use std::path::Path;

use nalgebra::DMatrix;

use super::config::RunConfig;
use super::output::{Manifest, OutputDir};
use crate::analysis::{
    coefficient_curves, contango_indicator, fitted_log_prices, functional_component, rmse_table,
    RmseTable,
};
use crate::data::{
    align_panels, fmt_sig12, load_futures_csv, load_yields_csv, write_futures_csv,
    write_yields_csv, AlignedDataset, Month, Tenor,
};
use crate::error::{Error, Result};
use crate::filter::{fit_mle, run_filter, FitResult};
use crate::kpca::{FactorScores, KpcaConfig, KpcaModel};
use crate::model::{simulate, simulate_yields, ModelParams, SimulationSpec, StateSpaceMatrices};
use crate::stress::{bucket_report, stress_run, StressMetadata, StressReport};

/// Parameters used by `simulate` when none are configured.
pub fn reference_params(p: usize, q: usize) -> ModelParams {
    ModelParams {
        kappa_chi: 1.2,
        kappa_xi: 0.3,
        mu_xi: 1.2,
        sigma_chi: 0.4,
        sigma_xi: 0.25,
        rho: 0.3,
        lambda_chi: 0.05,
        lambda_xi: 0.03,
        meas_std: vec![0.02; p],
        gamma: DMatrix::from_fn(p, q, |i, j| {
            if j % 2 == 0 {
                6.0 - i as f64
            } else {
                -3.0 + 0.5 * i as f64
            }
        }),
    }
}

fn load_dataset(cfg: &RunConfig) -> Result<AlignedDataset> {
    let futures = load_futures_csv(cfg.futures_path()?, &cfg.futures_ingest())?;
    let yields = load_yields_csv(cfg.yields_path()?, &cfg.yields_ingest())?;
    align_panels(&futures, &yields)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

fn kpca_with_q(cfg: &KpcaConfig, q: usize) -> KpcaConfig {
    KpcaConfig { q, ..cfg.clone() }
}

fn states_rows(dates: &[Month], states: impl Iterator<Item = (f64, f64)>) -> Vec<Vec<String>> {
    dates
        .iter()
        .zip(states)
        .map(|(d, (chi, xi))| vec![d.to_string(), fmt_sig12(chi), fmt_sig12(xi)])
        .collect()
}

fn header(first: &str, rest: impl IntoIterator<Item = String>) -> Vec<String> {
    std::iter::once(first.to_string()).chain(rest).collect()
}

fn date_matrix_rows(dates: &[Month], m: &DMatrix<f64>) -> Vec<Vec<String>> {
    dates
        .iter()
        .enumerate()
        .map(|(t, d)| {
            let mut row = vec![d.to_string()];
            row.extend(m.row(t).iter().map(|&v| fmt_sig12(v)));
            row
        })
        .collect()
}

pub fn cmd_fit(cfg: &RunConfig) -> Result<()> {
    let dataset = load_dataset(cfg)?;
    let q = cfg.kpca.q;
    let kpca = if q > 0 {
        Some(cfg.kpca.fit(&dataset.yields)?)
    } else {
        None
    };
    let scores = kpca
        .as_ref()
        .map(|k| k.factor_scores(&dataset.yields))
        .transpose()?;
    let filter = cfg.filter_config(&dataset);
    let fit = fit_mle(&dataset, scores.as_ref(), &cfg.fit_config(), &filter)?;
    let out = run_filter(&dataset, &fit.params, scores.as_ref(), &filter)?;

    let mut dir = OutputDir::create(&cfg.output_dir)?;
    dir.json("fit.json", &fit)?;
    dir.csv(
        "filtered_states.csv",
        &header("date", ["chi".to_string(), "xi".to_string()]),
        states_rows(dataset.dates(), out.a_filt.iter().map(|a| (a[0], a[1]))),
    )?;
    if let Some(k) = &kpca {
        dir.json("kpca_model.json", k)?;
    }
    let manifest = Manifest::new(
        "fit",
        cfg.seed,
        cfg,
        &[cfg.futures_path()?, cfg.yields_path()?],
        dir.written(),
    )?;
    dir.json("manifest.json", &manifest)
}

pub fn cmd_simulate(cfg: &RunConfig) -> Result<()> {
    let s = &cfg.simulate;
    if s.n_steps == 0 {
        return Err(Error::InvalidParam(
            "simulate.n_steps must be positive".into(),
        ));
    }
    let params = match &s.params {
        Some(p) => p.clone(),
        None => reference_params(s.futures_tenors.len(), cfg.kpca.q),
    };
    if params.p() != s.futures_tenors.len() {
        return Err(Error::InvalidParam(format!(
            "params have {} contracts but {} futures tenors are configured",
            params.p(),
            s.futures_tenors.len()
        )));
    }
    let yields = simulate_yields(&s.yields, &s.yield_tenors, s.start, s.n_steps, cfg.seed)?;
    let scores = if params.q() > 0 {
        let k = kpca_with_q(&cfg.kpca, params.q()).fit(&yields)?;
        Some(k.factor_scores(&yields)?.values)
    } else {
        None
    };
    let spec = SimulationSpec {
        tenors: &s.futures_tenors,
        start: s.start,
        n_steps: s.n_steps,
        dt: crate::data::MONTHLY_DT,
        scores: scores.as_ref(),
        initial: None,
        seed: cfg.seed,
    };
    let sim = simulate(&params, &spec)?;

    let mut dir = OutputDir::create(&cfg.output_dir)?;
    write_futures_csv(&sim.futures, dir.path("futures.csv"))?;
    dir.record("futures.csv");
    write_yields_csv(&yields, dir.path("yields.csv"))?;
    dir.record("yields.csv");
    dir.csv(
        "states.csv",
        &header("date", ["chi".to_string(), "xi".to_string()]),
        states_rows(&sim.futures.dates, sim.states.iter().map(|x| (x.chi, x.xi))),
    )?;
    dir.json("true_params.json", &params)?;
    let manifest = Manifest::new("simulate", cfg.seed, cfg, &[], dir.written())?;
    dir.json("manifest.json", &manifest)
}

pub fn cmd_extract_factors(cfg: &RunConfig) -> Result<()> {
    let path = cfg.yields_path()?;
    let yields = load_yields_csv(path, &cfg.yields_ingest())?;
    let model = cfg.kpca.fit(&yields)?;
    let scores = model.factor_scores(&yields)?;
    let mut dir = OutputDir::create(&cfg.output_dir)?;
    dir.csv(
        "factors.csv",
        &header("date", (1..=model.q()).map(|k| format!("u{k}"))),
        date_matrix_rows(&scores.dates, &scores.values),
    )?;
    dir.json("kpca_model.json", &model)?;
    let manifest = Manifest::new("extract-factors", cfg.seed, cfg, &[path], dir.written())?;
    dir.json("manifest.json", &manifest)
}

/// Loads the saved kPCA model when configured, otherwise refits on the yields.
fn factor_model(cfg: &RunConfig, dataset: &AlignedDataset, q: usize) -> Result<KpcaModel> {
    let model = match &cfg.evaluate.kpca_model {
        Some(p) => read_json::<KpcaModel>(p)?,
        None => kpca_with_q(&cfg.kpca, q).fit(&dataset.yields)?,
    };
    if model.q() != q {
        return Err(Error::InvalidParam(format!(
            "kPCA model keeps Q = {} but the fit uses Q = {q}",
            model.q()
        )));
    }
    Ok(model)
}

struct Evaluated {
    rmse: RmseTable,
    params: ModelParams,
    scores: Option<FactorScores>,
    kpca: Option<KpcaModel>,
}

fn evaluate_fit(cfg: &RunConfig, dataset: &AlignedDataset, fit: &FitResult) -> Result<Evaluated> {
    let params = fit.params.clone();
    let q = params.q();
    let kpca = if q > 0 {
        Some(factor_model(cfg, dataset, q)?)
    } else {
        None
    };
    let scores = kpca
        .as_ref()
        .map(|k| k.factor_scores(&dataset.yields))
        .transpose()?;
    let filter = cfg.filter_config(dataset);
    let out = run_filter(dataset, &params, scores.as_ref(), &filter)?;
    let m = StateSpaceMatrices::new(&params, &dataset.futures.tenors, dataset.dt)?;
    let u = scores.as_ref().map(|s| &s.values);
    let y_hat = fitted_log_prices(&out, &m, &params.gamma, u, cfg.evaluate.state_source)?;
    let rmse = rmse_table(&dataset.futures.log_prices, &y_hat)?;
    Ok(Evaluated {
        rmse,
        params,
        scores,
        kpca,
    })
}

pub fn cmd_evaluate(cfg: &RunConfig) -> Result<()> {
    let e = &cfg.evaluate;
    if e.ss_fit.is_none() && e.fr_fit.is_none() {
        return Err(Error::InvalidParam(
            "evaluate needs --ss-fit and/or --fr-fit".into(),
        ));
    }
    let dataset = load_dataset(cfg)?;
    let load = |p: &Option<std::path::PathBuf>| -> Result<Option<FitResult>> {
        p.as_deref().map(read_json).transpose()
    };
    let ss_fit = load(&e.ss_fit)?;
    let fr_fit = load(&e.fr_fit)?;
    if ss_fit.as_ref().is_some_and(|f| f.params.q() != 0) {
        return Err(Error::InvalidParam(
            "--ss-fit must be a model without factors (Q = 0)".into(),
        ));
    }
    if fr_fit.as_ref().is_some_and(|f| f.params.q() == 0) {
        return Err(Error::InvalidParam(
            "--fr-fit must be a model with factors (Q > 0)".into(),
        ));
    }
    let ss = ss_fit
        .as_ref()
        .map(|f| evaluate_fit(cfg, &dataset, f))
        .transpose()?;
    let fr = fr_fit
        .as_ref()
        .map(|f| evaluate_fit(cfg, &dataset, f))
        .transpose()?;

    let mut dir = OutputDir::create(&cfg.output_dir)?;
    let tenors = &dataset.futures.tenors;
    let mut cols = Vec::new();
    if ss.is_some() {
        cols.push("ss_rmse".to_string());
    }
    if fr.is_some() {
        cols.push("fr_rmse".to_string());
    }
    let tables: Vec<&RmseTable> = ss.iter().chain(fr.iter()).map(|x| &x.rmse).collect();
    let mut rows: Vec<Vec<String>> = tenors
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let mut r = vec![t.header()];
            r.extend(tables.iter().map(|tb| fmt_sig12(tb.per_tenor[i])));
            r
        })
        .collect();
    let mut mean_row = vec!["mean".to_string()];
    mean_row.extend(tables.iter().map(|tb| fmt_sig12(tb.mean)));
    rows.push(mean_row);
    dir.csv("rmse.csv", &header("tenor", cols), rows)?;

    if let Some(fr) = &fr {
        let (scores, kpca) = (
            fr.scores.as_ref().expect("Q > 0"),
            fr.kpca.as_ref().expect("Q > 0"),
        );
        let comp = functional_component(&fr.params.gamma, scores)?;
        dir.csv(
            "functional_component.csv",
            &header("date", tenors.iter().map(Tenor::header)),
            date_matrix_rows(&scores.dates, &comp),
        )?;
        let curves = coefficient_curves(&fr.params.gamma, kpca)?;
        let rows = curves.tenor_grid.iter().enumerate().map(|(j, g)| {
            let mut r = vec![g.header()];
            r.extend((0..tenors.len()).map(|i| fmt_sig12(curves.gamma_values[(i, j)])));
            r
        });
        dir.csv(
            "coefficients.csv",
            &header(
                "tenor",
                tenors.iter().map(|t| format!("gamma_{}", t.header())),
            ),
            rows,
        )?;
    }

    let yt = &dataset.yields.tenors;
    let short = e.regime_short.unwrap_or(yt[0]);
    let long = e.regime_long.unwrap_or(yt[yt.len() - 1]);
    let regime = contango_indicator(&dataset.yields, short, long)?;
    dir.csv(
        "regime.csv",
        &header("date", ["indicator".to_string()]),
        regime
            .into_iter()
            .map(|(d, r)| vec![d.to_string(), r.to_string()]),
    )?;

    let mut inputs: Vec<&Path> = vec![cfg.futures_path()?, cfg.yields_path()?];
    inputs.extend(e.ss_fit.as_deref());
    inputs.extend(e.fr_fit.as_deref());
    inputs.extend(e.kpca_model.as_deref());
    let manifest = Manifest::new("evaluate", cfg.seed, cfg, &inputs, dir.written())?;
    dir.json("manifest.json", &manifest)
}

fn report_rows(report: &StressReport) -> Vec<Vec<String>> {
    let mut rows = Vec::with_capacity(report.dates.len() * report.buckets.len());
    for (t, d) in report.dates.iter().enumerate() {
        for (b, bucket) in report.buckets.iter().enumerate() {
            rows.push(vec![
                d.to_string(),
                bucket.label(),
                fmt_sig12(report.mean_diff[b][t]),
                fmt_sig12(report.ci_low[b][t]),
                fmt_sig12(report.ci_high[b][t]),
            ]);
        }
    }
    rows
}

pub fn cmd_stress(cfg: &RunConfig) -> Result<()> {
    let s = &cfg.stress;
    let fit_path = s.fit.as_deref().ok_or_else(|| {
        Error::InvalidParam("stress needs a fitted model (--fit or stress.fit)".into())
    })?;
    if s.scenarios.is_empty() {
        return Err(Error::InvalidParam("no shock scenario given".into()));
    }
    let dataset = load_dataset(cfg)?;
    let fit: FitResult = read_json(fit_path)?;
    let kpca = kpca_with_q(&cfg.kpca, fit.params.q());
    let filter = cfg.filter_config(&dataset);

    let mut dir = OutputDir::create(&cfg.output_dir)?;
    let cols = ["date", "bucket", "mean_diff", "ci_low", "ci_high"].map(String::from);
    for (k, scenario) in s.scenarios.iter().enumerate() {
        let run = stress_run(&dataset, &fit.params, &kpca, scenario, &s.options, &filter)?;
        let report = bucket_report(
            dataset.dates(),
            &dataset.futures.tenors,
            &run.base_prices,
            &run.shocked_prices,
            &s.buckets,
        )?;
        let meta = StressMetadata::new(scenario, &s.options, &kpca, &run, &s.buckets);
        if s.scenarios.len() == 1 {
            dir.csv("stress_report.csv", &cols, report_rows(&report))?;
            dir.json("stress_metadata.json", &meta)?;
        } else {
            let name = format!("scenario_{k}");
            let mut sub = dir.subdir(&name)?;
            sub.csv("stress_report.csv", &cols, report_rows(&report))?;
            sub.json("stress_metadata.json", &meta)?;
            dir.record(&format!("{name}/stress_report.csv"));
            dir.record(&format!("{name}/stress_metadata.json"));
        }
    }
    let manifest = Manifest::new(
        "stress",
        cfg.seed,
        cfg,
        &[cfg.futures_path()?, cfg.yields_path()?, fit_path],
        dir.written(),
    )?;
    dir.json("manifest.json", &manifest)
}
