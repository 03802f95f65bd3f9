//! The JSON run configuration. Every field has a default, a config file
//! overrides the defaults, and command-line flags override the file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::StateSource;
use crate::data::{default_yield_tenors, AlignedDataset, IngestConfig, Month, Tenor};
use crate::error::{Error, Result};
use crate::filter::{FilterConfig, FitConfig};
use crate::kpca::KpcaConfig;
use crate::model::{ModelParams, YieldSimConfig};
use crate::stress::{default_buckets, Bucket, ShockScenario, StressOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root of every random stream in the run.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub kpca: KpcaConfig,
    /// Initial filter state; `None` derives it from the first futures curve.
    pub filter: Option<FilterConfig>,
    pub fit: FitSection,
    pub simulate: SimulateSection,
    pub evaluate: EvaluateSection,
    pub stress: StressSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("out"),
            data: DataConfig::default(),
            kpca: KpcaConfig::default(),
            filter: None,
            fit: FitSection::default(),
            simulate: SimulateSection::default(),
            evaluate: EvaluateSection::default(),
            stress: StressSection::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub futures: Option<PathBuf>,
    pub yields: Option<PathBuf>,
    pub yields_in_percent: bool,
    /// Futures columns to read; all when absent.
    pub futures_tenors: Option<Vec<Tenor>>,
    /// Yield columns to read; 1, 3, 6, 9 and 12 months when absent.
    pub yield_tenors: Option<Vec<Tenor>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSection {
    pub n_starts: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub restarts: usize,
    pub tying: Option<Vec<usize>>,
    pub initial: Option<ModelParams>,
}

impl Default for FitSection {
    fn default() -> Self {
        let f = FitConfig::default();
        FitSection {
            n_starts: f.n_starts,
            max_iter: f.max_iter,
            tol: f.tol,
            restarts: f.restarts,
            tying: None,
            initial: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub n_steps: usize,
    pub start: Month,
    pub futures_tenors: Vec<Tenor>,
    pub yield_tenors: Vec<Tenor>,
    /// True parameters; a built-in set sized to the tenors and `kpca.q` when absent.
    pub params: Option<ModelParams>,
    pub yields: YieldSimConfig,
}

impl Default for SimulateSection {
    fn default() -> Self {
        SimulateSection {
            n_steps: 240,
            start: Month::new(2000, 1).expect("valid month"),
            futures_tenors: default_yield_tenors(),
            yield_tenors: default_yield_tenors(),
            params: None,
            yields: YieldSimConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    /// `fit.json` of a model without factors.
    pub ss_fit: Option<PathBuf>,
    /// `fit.json` of a model with factors.
    pub fr_fit: Option<PathBuf>,
    /// Reuse a saved kPCA model instead of refitting on the yields.
    pub kpca_model: Option<PathBuf>,
    pub state_source: StateSource,
    /// Regime tenors; shortest and longest yield tenor when absent.
    pub regime_short: Option<Tenor>,
    pub regime_long: Option<Tenor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StressSection {
    pub fit: Option<PathBuf>,
    /// One report per scenario; several scenarios go to numbered subdirectories.
    pub scenarios: Vec<ShockScenario>,
    pub options: StressOptions,
    pub buckets: Vec<Bucket>,
}

impl Default for StressSection {
    fn default() -> Self {
        StressSection {
            fit: None,
            scenarios: Vec::new(),
            options: StressOptions::default(),
            buckets: default_buckets(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Parse(format!("config {}: {e}", path.display())))
    }

    pub fn fit_config(&self) -> FitConfig {
        FitConfig {
            n_starts: self.fit.n_starts,
            seed: self.seed,
            max_iter: self.fit.max_iter,
            tol: self.fit.tol,
            restarts: self.fit.restarts,
            tying: self.fit.tying.clone(),
            initial: self.fit.initial.clone(),
        }
    }

    pub fn filter_config(&self, dataset: &AlignedDataset) -> FilterConfig {
        self.filter
            .clone()
            .unwrap_or_else(|| FilterConfig::for_futures(&dataset.futures))
    }

    pub fn futures_path(&self) -> Result<&Path> {
        self.data.futures.as_deref().ok_or_else(|| {
            Error::InvalidParam("no futures file given (--futures or data.futures)".into())
        })
    }

    pub fn yields_path(&self) -> Result<&Path> {
        self.data.yields.as_deref().ok_or_else(|| {
            Error::InvalidParam("no yields file given (--yields or data.yields)".into())
        })
    }

    pub fn futures_ingest(&self) -> IngestConfig {
        IngestConfig {
            yields_in_percent: false,
            tenors: self.data.futures_tenors.clone(),
        }
    }

    pub fn yields_ingest(&self) -> IngestConfig {
        IngestConfig {
            yields_in_percent: self.data.yields_in_percent,
            tenors: self.data.yield_tenors.clone(),
        }
    }
}
