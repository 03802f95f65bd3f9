//! Command-line driver.
//!
//! Settings are resolved in three layers: built-in defaults, then the JSON
//! document given by `--config`, then individual flags. Failures print one
//! line `CODE: message` to stderr and exit with 1 for user or data errors and
//! 2 for numerical breakdowns.

mod commands;
mod config;
mod output;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use commands::{
    cmd_evaluate, cmd_extract_factors, cmd_fit, cmd_simulate, cmd_stress, reference_params,
};
pub use config::{
    DataConfig, EvaluateSection, FitSection, RunConfig, SimulateSection, StressSection,
};
pub use output::{sha256_hex, Manifest};

use crate::analysis::StateSource;
use crate::data::{Month, Tenor};
use crate::error::Error;
use crate::kpca::KernelKind;
use crate::stress::{BandwidthRule, KpcaMode, ShockKind, ShockScenario};

#[derive(Debug, Parser)]
#[command(
    name = "ssfr",
    version,
    about = "Futures term-structure fitting with yield-curve factors"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the model by maximum likelihood.
    Fit(FitArgs),
    /// Simulate yields, factors and futures from known parameters.
    Simulate(SimulateArgs),
    /// Extract yield-curve factors with kernel PCA.
    ExtractFactors(ExtractArgs),
    /// In-sample diagnostics for one or two fitted models.
    Evaluate(EvaluateArgs),
    /// Yield-shock stress test at fixed parameters.
    Stress(StressArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Futures price CSV (date, m1, m2, ...).
    #[arg(long)]
    pub futures: Option<PathBuf>,
    /// Yield CSV (date, m1, m3, ...).
    #[arg(long)]
    pub yields: Option<PathBuf>,
    /// Yields are quoted in percent.
    #[arg(long)]
    pub yields_in_percent: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum KernelArg {
    Rbf,
    Linear,
}

#[derive(Debug, Args)]
pub struct KpcaArgs {
    /// Number of yield-curve factors; 0 fits the model without factors.
    #[arg(long)]
    pub q: Option<usize>,
    #[arg(long, value_enum)]
    pub kernel: Option<KernelArg>,
    /// Fixed RBF bandwidth instead of the median heuristic.
    #[arg(long)]
    pub bandwidth: Option<f64>,
    /// Double-center the kernel matrix.
    #[arg(long)]
    pub center: bool,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub kpca: KpcaArgs,
    #[arg(long)]
    pub n_starts: Option<usize>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// Measurement-noise group per contract, e.g. `0,0,1,1,1`.
    #[arg(long, value_delimiter = ',')]
    pub tying: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub n_steps: Option<usize>,
    /// First simulated month, YYYY-MM.
    #[arg(long)]
    pub start: Option<Month>,
    /// JSON file with the true parameters.
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long)]
    pub q: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub yields: Option<PathBuf>,
    #[arg(long)]
    pub yields_in_percent: bool,
    #[command(flatten)]
    pub kpca: KpcaArgs,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub kpca: KpcaArgs,
    /// fit.json of the model without factors.
    #[arg(long)]
    pub ss_fit: Option<PathBuf>,
    /// fit.json of the model with factors.
    #[arg(long)]
    pub fr_fit: Option<PathBuf>,
    /// Saved kPCA model to reuse.
    #[arg(long)]
    pub kpca_model: Option<PathBuf>,
    /// Fitted values from filtered rather than one-step-ahead states.
    #[arg(long)]
    pub filtered: bool,
    /// Short yield tenor in months for the regime indicator.
    #[arg(long)]
    pub regime_short: Option<u32>,
    #[arg(long)]
    pub regime_long: Option<u32>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum KindArg {
    Temporary,
    Permanent,
}

#[derive(Debug, Args)]
pub struct StressArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub kpca: KpcaArgs,
    /// fit.json of a model with factors.
    #[arg(long)]
    pub fit: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub kind: Option<KindArg>,
    #[arg(long)]
    pub start: Option<Month>,
    #[arg(long)]
    pub end: Option<Month>,
    #[arg(long)]
    pub multiplier: Option<f64>,
    /// Project shocked yields through the base kPCA model.
    #[arg(long)]
    pub freeze_kpca: bool,
    /// Reuse the base bandwidth when refitting kPCA on shocked yields.
    #[arg(long)]
    pub frozen_bandwidth: bool,
}

fn base_config(common: &CommonArgs) -> Result<RunConfig, Error> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn apply_data(cfg: &mut RunConfig, d: &DataArgs) {
    if let Some(f) = &d.futures {
        cfg.data.futures = Some(f.clone());
    }
    if let Some(y) = &d.yields {
        cfg.data.yields = Some(y.clone());
    }
    cfg.data.yields_in_percent |= d.yields_in_percent;
}

fn apply_kpca(cfg: &mut RunConfig, k: &KpcaArgs) {
    if let Some(q) = k.q {
        cfg.kpca.q = q;
    }
    if let Some(kind) = k.kernel {
        cfg.kpca.kind = match kind {
            KernelArg::Rbf => KernelKind::Rbf,
            KernelArg::Linear => KernelKind::Linear,
        };
    }
    if let Some(b) = k.bandwidth {
        cfg.kpca.bandwidth = Some(b);
    }
    cfg.kpca.center |= k.center;
}

fn tenor(months: u32) -> Result<Tenor, Error> {
    Tenor::new(months).map_err(|e| Error::InvalidParam(e.to_string()))
}

/// Applies the flags on top of the configuration file.
pub fn resolve(command: &Command) -> Result<RunConfig, Error> {
    match command {
        Command::Fit(a) => {
            let mut cfg = base_config(&a.common)?;
            apply_data(&mut cfg, &a.data);
            apply_kpca(&mut cfg, &a.kpca);
            if let Some(n) = a.n_starts {
                cfg.fit.n_starts = n;
            }
            if let Some(n) = a.max_iter {
                cfg.fit.max_iter = n;
            }
            if let Some(t) = &a.tying {
                cfg.fit.tying = Some(t.clone());
            }
            Ok(cfg)
        }
        Command::Simulate(a) => {
            let mut cfg = base_config(&a.common)?;
            if let Some(n) = a.n_steps {
                cfg.simulate.n_steps = n;
            }
            if let Some(s) = a.start {
                cfg.simulate.start = s;
            }
            if let Some(q) = a.q {
                cfg.kpca.q = q;
            }
            if let Some(p) = &a.params {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                let params = serde_json::from_str(&text)
                    .map_err(|e| Error::Parse(format!("{}: {e}", p.display())))?;
                cfg.simulate.params = Some(params);
            }
            Ok(cfg)
        }
        Command::ExtractFactors(a) => {
            let mut cfg = base_config(&a.common)?;
            if let Some(y) = &a.yields {
                cfg.data.yields = Some(y.clone());
            }
            cfg.data.yields_in_percent |= a.yields_in_percent;
            apply_kpca(&mut cfg, &a.kpca);
            Ok(cfg)
        }
        Command::Evaluate(a) => {
            let mut cfg = base_config(&a.common)?;
            apply_data(&mut cfg, &a.data);
            apply_kpca(&mut cfg, &a.kpca);
            let e = &mut cfg.evaluate;
            if let Some(p) = &a.ss_fit {
                e.ss_fit = Some(p.clone());
            }
            if let Some(p) = &a.fr_fit {
                e.fr_fit = Some(p.clone());
            }
            if let Some(p) = &a.kpca_model {
                e.kpca_model = Some(p.clone());
            }
            if a.filtered {
                e.state_source = StateSource::Filtered;
            }
            if let Some(m) = a.regime_short {
                e.regime_short = Some(tenor(m)?);
            }
            if let Some(m) = a.regime_long {
                e.regime_long = Some(tenor(m)?);
            }
            Ok(cfg)
        }
        Command::Stress(a) => {
            let mut cfg = base_config(&a.common)?;
            apply_data(&mut cfg, &a.data);
            apply_kpca(&mut cfg, &a.kpca);
            let s = &mut cfg.stress;
            if let Some(p) = &a.fit {
                s.fit = Some(p.clone());
            }
            if a.freeze_kpca {
                s.options.kpca_mode = KpcaMode::Freeze;
            }
            if a.frozen_bandwidth {
                s.options.bandwidth = BandwidthRule::Frozen;
            }
            // scenario flags replace the configured scenario list
            if a.kind.is_some() || a.start.is_some() || a.end.is_some() || a.multiplier.is_some() {
                let kind = match a.kind {
                    Some(KindArg::Temporary) => ShockKind::Temporary,
                    Some(KindArg::Permanent) => ShockKind::Permanent,
                    None => {
                        return Err(Error::InvalidParam(
                            "--kind is required with scenario flags".into(),
                        ))
                    }
                };
                let start = a
                    .start
                    .ok_or_else(|| Error::InvalidParam("--start is required".into()))?;
                let multiplier = a
                    .multiplier
                    .ok_or_else(|| Error::InvalidParam("--multiplier is required".into()))?;
                let scenario = ShockScenario {
                    kind,
                    start,
                    end: a.end,
                    multiplier,
                };
                scenario.validate()?;
                s.scenarios = vec![scenario];
            }
            Ok(cfg)
        }
    }
}

pub fn error_code(e: &Error) -> &'static str {
    match e {
        Error::FileNotFound(_) | Error::Io { .. } => "E_IO",
        Error::Csv(_) | Error::Json(_) | Error::Parse(_) => "E_PARSE",
        Error::Data(_) | Error::Shape(_) => "E_DATA",
        Error::InvalidParam(_) => "E_CONFIG",
        Error::Numerical(_) => "E_NUMERIC",
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_numerical() {
        2
    } else {
        1
    }
}

fn execute(command: &Command) -> Result<(), Error> {
    let cfg = resolve(command)?;
    match command {
        Command::Fit(_) => cmd_fit(&cfg),
        Command::Simulate(_) => cmd_simulate(&cfg),
        Command::ExtractFactors(_) => cmd_extract_factors(&cfg),
        Command::Evaluate(_) => cmd_evaluate(&cfg),
        Command::Stress(_) => cmd_stress(&cfg),
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg
                .lines()
                .next()
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            eprintln!("E_CONFIG: {first}");
            return 1;
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("{}: {msg}", error_code(&e));
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Command {
        Cli::try_parse_from(std::iter::once("ssfr").chain(args.iter().copied()))
            .unwrap()
            .command
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = dir.path().join("c.json");
        std::fs::write(
            &cfg_path,
            r#"{"seed": 3, "kpca": {"q": 1}, "fit": {"n_starts": 2}}"#,
        )
        .unwrap();
        let c = cfg_path.to_str().unwrap();
        let cfg = resolve(&parse(&[
            "fit",
            "--config",
            c,
            "--seed",
            "11",
            "--n-starts",
            "5",
        ]))
        .unwrap();
        assert_eq!(cfg.seed, 11);
        assert_eq!(cfg.fit.n_starts, 5);
        assert_eq!(cfg.kpca.q, 1);
        let cfg = resolve(&parse(&["fit", "--config", c])).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.fit.n_starts, 2);
    }

    #[test]
    fn tying_list_parses() {
        let cfg = resolve(&parse(&["fit", "--tying", "0,0,1"])).unwrap();
        assert_eq!(cfg.fit.tying, Some(vec![0, 0, 1]));
    }

    #[test]
    fn stress_flags_build_scenario() {
        let cfg = resolve(&parse(&[
            "stress",
            "--kind",
            "temporary",
            "--start",
            "2015-01",
            "--end",
            "2016-01",
            "--multiplier",
            "2",
            "--freeze-kpca",
        ]))
        .unwrap();
        let s = &cfg.stress.scenarios[0];
        assert_eq!(s.kind, ShockKind::Temporary);
        assert_eq!(s.end, Some(Month::new(2016, 1).unwrap()));
        assert_eq!(cfg.stress.options.kpca_mode, KpcaMode::Freeze);
        assert!(resolve(&parse(&[
            "stress",
            "--kind",
            "temporary",
            "--start",
            "2015-01",
            "--multiplier",
            "2"
        ]))
        .is_err());
    }

    #[test]
    fn missing_file_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.csv");
        let cmd = parse(&[
            "extract-factors",
            "--yields",
            missing.to_str().unwrap(),
            "--out",
            dir.path().to_str().unwrap(),
        ]);
        let err = execute(&cmd).unwrap_err();
        assert_eq!(error_code(&err), "E_IO");
        assert_eq!(exit_code(&err), 1);
        assert!(err.to_string().starts_with("file not found"));
    }

    #[test]
    fn bad_arguments_exit_one() {
        assert_eq!(run(["ssfr", "fit", "--bogus"]), 1);
        assert_eq!(run(["ssfr", "stress", "--start", "2015-13"]), 1);
    }

    #[test]
    fn numerical_errors_exit_two() {
        assert_eq!(exit_code(&Error::Numerical("x".into())), 2);
        assert_eq!(error_code(&Error::InvalidParam("x".into())), "E_CONFIG");
    }
}
