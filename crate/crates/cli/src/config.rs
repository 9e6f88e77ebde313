use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use svihr_pinn::data_io::{Regime, SplitSpec};
use svihr_pinn::epi_model::{CompartmentState, SvihrParams};
use svihr_pinn::nsfd::FitGrid;
use svihr_pinn::pareto::BedsConfig;
use svihr_pinn::pinn_train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: SvihrParams,
    pub nsfd: NsfdBlock,
    pub train: TrainConfig,
    pub beds: BedsBlock,
    pub data: DataBlock,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: SvihrParams::long_term(),
            nsfd: NsfdBlock::default(),
            train: TrainConfig::default(),
            beds: BedsBlock::default(),
            data: DataBlock::default(),
            output_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NsfdBlock {
    /// Step size in weeks.
    pub h: f64,
    pub steps: usize,
    pub initial: CompartmentState,
    pub fit_grid: FitGrid,
}

impl Default for NsfdBlock {
    fn default() -> Self {
        NsfdBlock {
            h: 1.0,
            steps: 29,
            initial: CompartmentState::new(7.9e7, 3.0e6, 5.0e4, 5.0e3, 1.045e6),
            fit_grid: FitGrid::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrainerKind {
    /// Network training on the configured data.
    #[default]
    Pinn,
    /// Closed-form weighted-sum optimum of ((x-1)^2, (x+1)^2); for checking the search.
    Toy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BedsBlock {
    pub levels: usize,
    pub alpha1: f64,
    pub alpha2: f64,
    pub fail_hi: f64,
    pub fail_lo: f64,
    pub trainer: TrainerKind,
}

impl Default for BedsBlock {
    fn default() -> Self {
        let d = BedsConfig::default();
        BedsBlock {
            levels: d.levels,
            alpha1: d.alpha1,
            alpha2: d.alpha2,
            fail_hi: d.fail_hi,
            fail_lo: d.fail_lo,
            trainer: TrainerKind::default(),
        }
    }
}

impl BedsBlock {
    pub fn search_config(&self) -> BedsConfig {
        BedsConfig {
            levels: self.levels,
            alpha1: self.alpha1,
            alpha2: self.alpha2,
            fail_hi: self.fail_hi,
            fail_lo: self.fail_lo,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum DataSource {
    /// CSV file with header `week,S,V,I,H,R`; relative paths resolve against the config file.
    Csv { path: PathBuf },
    /// NSFD trajectory from `model` and `nsfd`, with optional beta regimes.
    Synth {
        #[serde(default)]
        noise_rel: f64,
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        regimes: Vec<Regime>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataBlock {
    pub source: DataSource,
    pub split: SplitSpec,
}

impl Default for DataBlock {
    fn default() -> Self {
        DataBlock {
            source: DataSource::Synth {
                noise_rel: 0.0,
                seed: 0,
                regimes: Vec::new(),
            },
            split: SplitSpec {
                train_range: [0, 25],
                validate_range: [25, 29],
            },
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut config: RunConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if let DataSource::Csv { path: csv } = &mut config.data.source {
            if csv.is_relative() {
                if let Some(dir) = path.parent() {
                    *csv = dir.join(&*csv);
                }
            }
        }
        Ok(config)
    }

    /// Checks every block before any work starts.
    pub fn validate(&self) -> anyhow::Result<()> {
        self.model.validate().context("model")?;
        self.nsfd.initial.validate().context("nsfd.initial")?;
        if !(self.nsfd.h > 0.0 && self.nsfd.h.is_finite()) {
            bail!("nsfd.h must be positive, got {}", self.nsfd.h);
        }
        if self.nsfd.fit_grid.is_empty() {
            bail!("nsfd.fit_grid is empty");
        }
        let grid = &self.nsfd.fit_grid;
        if grid.beta.iter().chain(&grid.kappa).any(|v| !(v.is_finite() && *v >= 0.0)) {
            bail!("nsfd.fit_grid values must be finite and nonnegative");
        }
        self.train.validate().context("train")?;
        self.beds.search_config().validate().context("beds")?;
        self.data.split.validate().context("data.split")?;
        if let DataSource::Synth { noise_rel, regimes, .. } = &self.data.source {
            if !(*noise_rel >= 0.0 && noise_rel.is_finite()) {
                bail!("data.source.synth.noise_rel must be nonnegative, got {noise_rel}");
            }
            if regimes.iter().any(|r| !(r.beta >= 0.0 && r.beta.is_finite())) {
                bail!("data.source.synth.regimes: beta must be finite and nonnegative");
            }
        }
        Ok(())
    }
}
