//! Sectioned TOML configuration shared by every experiment.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ExpError;
use crate::dataset::{DataSpec, FeatureKind, DEFAULT_WINDOWS};
use crate::fhn::{SimConstants, ThetaPair, Tolerances};
use crate::nn::{NetworkSpec, TrainConfig};
use crate::stochastic::{NoisePrior, PriorSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub train: u64,
    pub valid: u64,
    /// The fixed test set shared by all experiments.
    pub test: u64,
    /// Seed of the (sigma, rho) pool shared by all noisy sets.
    pub noise_pool: u64,
    pub weight_init: u64,
    pub shuffle: u64,
    pub kfold: u64,
    /// Noise added to single simulated series (simulate, loss-grid).
    pub noise: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds { train: 1001, valid: 2002, test: 3003, noise_pool: 4004, weight_init: 5005, shuffle: 6006, kfold: 7007, noise: 8008 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    pub noise_pool_size: usize,
    pub feature_kind: FeatureKind,
    pub windows: Vec<(usize, usize)>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_train: 1000,
            n_valid: 2000,
            n_test: 2000,
            noise_pool_size: 100,
            feature_kind: FeatureKind::Time,
            windows: DEFAULT_WINDOWS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Dense,
    Cnn,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Dense => "dense",
            Family::Cnn => "cnn",
        }
    }
}

impl std::str::FromStr for Family {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "dense" => Ok(Family::Dense),
            "cnn" => Ok(Family::Cnn),
            other => Err(format!("unknown network family '{other}'")),
        }
    }
}

/// One member of a network family: `depth` is the number of hidden dense
/// layers or conv blocks, `width` the units per layer or base filter count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Architecture {
    pub family: Family,
    pub depth: usize,
    pub width: usize,
}

impl Architecture {
    pub fn spec(self, input_len: usize, output_len: usize) -> NetworkSpec {
        match self.family {
            Family::Dense => NetworkSpec::dense_family(input_len, self.depth, self.width, output_len),
            Family::Cnn => NetworkSpec::cnn_family(input_len, self.depth, self.width, output_len),
        }
    }

    pub fn label(self) -> String {
        match self.family {
            Family::Dense => format!("dense-{}x{}", self.depth, self.width),
            Family::Cnn => format!("cnn-{}x[1..{}]", self.width, 1 << (self.depth - 1)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub family: Family,
    pub dense_layers: usize,
    pub dense_units: usize,
    pub cnn_blocks: usize,
    pub cnn_filters: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig { family: Family::Cnn, dense_layers: 4, dense_units: 32, cnn_blocks: 3, cnn_filters: 8 }
    }
}

impl NetworkConfig {
    pub fn architecture(&self, family: Family) -> Architecture {
        match family {
            Family::Dense => Architecture { family, depth: self.dense_layers, width: self.dense_units },
            Family::Cnn => Architecture { family, depth: self.cnn_blocks, width: self.cnn_filters },
        }
    }

    pub fn selected(&self) -> Architecture {
        self.architecture(self.family)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs_clean: usize,
    pub epochs_noisy: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection { epochs_clean: 200, epochs_noisy: 50, batch_size: 32, lr: 0.002 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub dense_layers: Vec<usize>,
    pub dense_units: Vec<usize>,
    pub cnn_blocks: Vec<usize>,
    pub cnn_filters: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            dense_layers: vec![2, 4, 8, 12, 16],
            dense_units: vec![4, 8, 16, 32, 64, 128],
            cnn_blocks: vec![2, 3, 4],
            cnn_filters: vec![2, 4, 8, 16, 32],
        }
    }
}

impl SweepConfig {
    pub fn grid(&self, family: Family) -> Vec<Architecture> {
        let (depths, widths) = match family {
            Family::Dense => (&self.dense_layers, &self.dense_units),
            Family::Cnn => (&self.cnn_blocks, &self.cnn_filters),
        };
        depths
            .iter()
            .flat_map(|&depth| widths.iter().map(move |&width| Architecture { family, depth, width }))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudySizes {
    pub sizes: Vec<usize>,
}

impl Default for StudySizes {
    fn default() -> Self {
        StudySizes { sizes: vec![500, 1000, 4000, 8000] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JointConfig {
    pub sizes: Vec<usize>,
    pub feature_kinds: Vec<FeatureKind>,
}

impl Default for JointConfig {
    fn default() -> Self {
        JointConfig {
            sizes: vec![500, 1000, 4000, 8000],
            feature_kinds: vec![FeatureKind::Time, FeatureKind::Fourier, FeatureKind::TimeAndFourier],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    pub feature_kinds: Vec<FeatureKind>,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig { feature_kinds: vec![FeatureKind::Time, FeatureKind::Fourier, FeatureKind::TimeAndFourier] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrossvalConfig {
    pub k: usize,
    pub init_seeds: Vec<u64>,
}

impl Default for CrossvalConfig {
    fn default() -> Self {
        CrossvalConfig { k: 6, init_seeds: (1..=10).collect() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResimConfig {
    pub percentiles: Vec<f64>,
    pub n_train: usize,
}

impl Default for ResimConfig {
    fn default() -> Self {
        ResimConfig { percentiles: vec![10.0, 25.0, 50.0, 75.0, 90.0], n_train: 1000 }
    }
}

/// A single observed series: the parameters that generate it and optional
/// AR(1) noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeriesConfig {
    pub theta0: f64,
    pub theta1: f64,
    pub with_noise: bool,
    pub sigma: f64,
    pub rho: f64,
}

impl Default for SeriesConfig {
    fn default() -> Self {
        SeriesConfig { theta0: 0.7, theta1: 0.8, with_noise: false, sigma: 0.07, rho: 0.8 }
    }
}

impl SeriesConfig {
    pub fn theta(&self) -> ThetaPair {
        ThetaPair::new(self.theta0, self.theta1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossGridConfig {
    pub resolution: usize,
    pub misfit_term: bool,
    pub prior_term: bool,
    pub data: SeriesConfig,
}

impl Default for LossGridConfig {
    fn default() -> Self {
        LossGridConfig {
            resolution: 200,
            misfit_term: true,
            prior_term: true,
            data: SeriesConfig { with_noise: true, ..SeriesConfig::default() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpikeGridConfig {
    pub resolution: usize,
    pub threshold: f64,
    pub prior_samples: usize,
}

impl Default for SpikeGridConfig {
    fn default() -> Self {
        SpikeGridConfig { resolution: 60, threshold: crate::fhn::DEFAULT_SPIKE_THRESHOLD, prior_samples: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: String,
    pub seeds: Seeds,
    pub prior: PriorSpec,
    pub noise_prior: NoisePrior,
    pub sim: SimConstants,
    pub tolerances: Tolerances,
    pub data: DataConfig,
    pub network: NetworkConfig,
    pub train: TrainSection,
    pub sweep: SweepConfig,
    pub noise_study: StudySizes,
    pub window_study: WindowConfig,
    pub joint: JointConfig,
    pub crossval: CrossvalConfig,
    pub resimulate: ResimConfig,
    pub simulate: SeriesConfig,
    pub loss_grid: LossGridConfig,
    pub spike_grid: SpikeGridConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            output_dir: "out".into(),
            seeds: Seeds::default(),
            prior: PriorSpec::default(),
            noise_prior: NoisePrior::default(),
            sim: SimConstants::default(),
            tolerances: Tolerances::default(),
            data: DataConfig::default(),
            network: NetworkConfig::default(),
            train: TrainSection::default(),
            sweep: SweepConfig::default(),
            noise_study: StudySizes::default(),
            window_study: WindowConfig::default(),
            joint: JointConfig::default(),
            crossval: CrossvalConfig::default(),
            resimulate: ResimConfig::default(),
            simulate: SeriesConfig::default(),
            loss_grid: LossGridConfig::default(),
            spike_grid: SpikeGridConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ExpError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| ExpError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ExpError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ExpError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// First 16 hex digits of the SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<(), ExpError> {
        let bad = |msg: &str| Err(ExpError::Config(msg.into()));
        self.prior.validate().map_err(|e| ExpError::Config(e.to_string()))?;
        self.sim.n_steps().map_err(|e| ExpError::Config(e.to_string()))?;
        if !(self.tolerances.rtol > 0.0 && self.tolerances.atol > 0.0) {
            return bad("tolerances must be positive");
        }
        if !(self.noise_prior.sd_sigma >= 0.0 && self.noise_prior.sd_rho >= 0.0) {
            return bad("noise prior sd must be non-negative");
        }
        let d = &self.data;
        if d.n_train == 0 || d.n_valid == 0 || d.n_test < 2 || d.noise_pool_size == 0 {
            return bad("dataset sizes must be positive (test set at least 2)");
        }
        if self.train.batch_size == 0 || !(self.train.lr > 0.0) {
            return bad("batch size and learning rate must be positive");
        }
        let n = &self.network;
        if n.dense_layers == 0 || n.dense_units == 0 || n.cnn_blocks == 0 || n.cnn_filters == 0 {
            return bad("network sizes must be positive");
        }
        if self.crossval.k < 2 {
            return bad("cross-validation needs k >= 2");
        }
        if self.resimulate.percentiles.iter().any(|p| !(0.0..=100.0).contains(p)) {
            return bad("percentiles must lie in [0, 100]");
        }
        if self.loss_grid.resolution < 2 || self.spike_grid.resolution < 2 {
            return bad("grid resolutions must be at least 2");
        }
        Ok(())
    }

    pub fn data_spec(&self) -> DataSpec {
        DataSpec {
            prior: self.prior,
            noise_prior: self.noise_prior,
            consts: self.sim,
            tolerances: self.tolerances,
            noise_pool_seed: self.seeds.noise_pool,
            noise_pool_size: self.data.noise_pool_size,
        }
    }

    pub fn train_config(&self, noisy: bool, shuffle_seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: if noisy { self.train.epochs_noisy } else { self.train.epochs_clean },
            batch_size: self.train.batch_size,
            lr: self.train.lr,
            shuffle_seed,
        }
    }
}
