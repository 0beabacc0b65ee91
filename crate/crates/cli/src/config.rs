use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use rram_tc::crossbar::{AccuracySweepConfig, CompensationConfig, DEFAULT_LEVELS};
use rram_tc::dynamics::{PerturbParams, SetParams};
use rram_tc::mlp::TrainConfig;
use rram_tc::network::ConductanceModel;
use rram_tc::tcoeff::{CalibrationConfig, SearchRanges, SweepConfig};

/// Everything a run needs; written back as `config.json` next to the results.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    pub output_dir: PathBuf,
    pub model: ConductanceModel,
    pub ensemble: EnsembleSettings,
    pub set: SetSettings,
    pub perturb: PerturbSettings,
    pub calibration: CalibrationSettings,
    pub data: DataSettings,
    pub train: TrainConfig,
    pub crossbar: CrossbarSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            master_seed: 7,
            output_dir: PathBuf::from("out"),
            model: ConductanceModel::default(),
            ensemble: EnsembleSettings::default(),
            set: SetSettings::default(),
            perturb: PerturbSettings::default(),
            calibration: CalibrationSettings::default(),
            data: DataSettings::default(),
            train: TrainConfig::default(),
            crossbar: CrossbarSettings::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleSettings {
    pub concentrations: Vec<f64>,
    pub trials: usize,
    pub sweep: SweepConfig,
}

impl Default for EnsembleSettings {
    fn default() -> Self {
        EnsembleSettings {
            concentrations: vec![0.50, 0.55, 0.58],
            trials: 300,
            sweep: SweepConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SetSettings {
    pub runs: usize,
    pub initial_cv: f64,
    pub params: SetParams,
    /// Run whose final read is exported as a current-density map.
    pub density_run: usize,
}

impl Default for SetSettings {
    fn default() -> Self {
        SetSettings {
            runs: 100,
            initial_cv: 0.5,
            params: SetParams::default(),
            density_run: 0,
        }
    }
}

/// Perturbation acts on cells programmed with the `set` settings.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbSettings {
    pub cells: usize,
    pub params: PerturbParams,
}

impl Default for PerturbSettings {
    fn default() -> Self {
        PerturbSettings {
            cells: 100,
            params: PerturbParams::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationSettings {
    pub target_mean: f64,
    pub config: CalibrationConfig,
    pub search: SearchRanges,
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        CalibrationSettings {
            target_mean: -0.004,
            config: CalibrationConfig::default(),
            search: SearchRanges::default(),
        }
    }
}

/// IDX files when given, otherwise synthetic digits.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSettings {
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    /// Caps on the number of IDX samples used.
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub noise: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
}

impl Default for DataSettings {
    fn default() -> Self {
        DataSettings {
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            train_limit: None,
            test_limit: None,
            noise: 1.2,
            train_per_class: 200,
            test_per_class: 100,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct CrossbarSettings {
    pub levels: usize,
    /// Mapping window for `map` and `infer`: full, low, middle or high.
    pub range: String,
    pub temperature: f64,
    pub chip: usize,
    pub compensation: CompensationConfig,
    /// Trained network checkpoint; trained in-process when absent.
    pub weights: Option<PathBuf>,
    /// Thermal statistics JSON; derived from the ensemble settings when absent.
    pub stats: Option<PathBuf>,
    /// Use the parametric Tα model instead of ensemble statistics.
    pub parametric: bool,
    pub sweep: AccuracySweepConfig,
}

impl Default for CrossbarSettings {
    fn default() -> Self {
        CrossbarSettings {
            levels: DEFAULT_LEVELS,
            range: "full".into(),
            temperature: 400.0,
            chip: 0,
            compensation: CompensationConfig {
                enabled: false,
                ..CompensationConfig::default()
            },
            weights: None,
            stats: None,
            parametric: false,
            sweep: AccuracySweepConfig::default(),
        }
    }
}

pub fn load(path: Option<&Path>) -> anyhow::Result<ExperimentConfig> {
    match path {
        None => Ok(ExperimentConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
        }
    }
}
