//! Run directories, manifests and CSV tables.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::ExpError;

/// `<output_dir>/<experiment>/<config hash>/`.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub path: PathBuf,
    pub experiment: String,
    pub config_hash: String,
    files: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub experiment: String,
    pub config_hash: String,
    pub tool_version: String,
    pub files: Vec<String>,
    pub config: String,
}

impl RunDir {
    pub fn create(cfg: &ExperimentConfig, experiment: &str) -> Result<RunDir, ExpError> {
        let config_hash = cfg.hash();
        let path = Path::new(&cfg.output_dir).join(experiment).join(&config_hash);
        fs::create_dir_all(&path)?;
        Ok(RunDir { path, experiment: experiment.into(), config_hash, files: Vec::new() })
    }

    pub fn file(&mut self, name: &str) -> PathBuf {
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.into());
        }
        self.path.join(name)
    }

    pub fn write_csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<PathBuf, ExpError> {
        let path = self.file(name);
        write_csv(&path, rows)?;
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf, ExpError> {
        let path = self.file(name);
        let mut text = serde_json::to_string_pretty(value).map_err(|e| ExpError::Io(std::io::Error::other(e)))?;
        text.push('\n');
        fs::write(&path, text)?;
        Ok(path)
    }

    /// Writes `manifest.json` listing every file produced through this handle.
    pub fn finish(mut self, cfg: &ExperimentConfig) -> Result<PathBuf, ExpError> {
        let manifest = Manifest {
            experiment: self.experiment.clone(),
            config_hash: self.config_hash.clone(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            files: self.files.clone(),
            config: cfg.to_toml(),
        };
        let path = self.write_json("manifest.json", &manifest)?;
        Ok(path)
    }
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), ExpError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn csv_string<T: Serialize>(rows: &[T]) -> Result<String, ExpError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| ExpError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn read_csv<T: DeserializeOwned>(text: &str) -> Result<Vec<T>, ExpError> {
    csv::Reader::from_reader(text.as_bytes()).deserialize().map(|r| r.map_err(ExpError::from)).collect()
}

/// Four-metric summary of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub squared_bias: f64,
    pub c_mse: f64,
    pub median_ape: f64,
    pub r2: f64,
}

impl From<&crate::metrics::EvalReport> for Scores {
    fn from(r: &crate::metrics::EvalReport) -> Self {
        Scores { squared_bias: r.squared_bias, c_mse: r.c_mse, median_ape: r.median_ape, r2: r.r2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub family: String,
    pub depth: usize,
    pub width: usize,
    pub params: usize,
    pub status: String,
    pub squared_bias: Option<f64>,
    pub c_mse: Option<f64>,
    pub median_ape: Option<f64>,
    pub r2: Option<f64>,
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseRow {
    pub family: String,
    pub n_train: usize,
    pub scenario: String,
    pub squared_bias: f64,
    pub c_mse: f64,
    pub median_ape: f64,
    pub r2: f64,
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub n_train: usize,
    pub scenario: String,
    pub sample: usize,
    pub coord: String,
    pub truth: f64,
    pub prediction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowRow {
    pub family: String,
    pub data_type: String,
    pub n_train: usize,
    pub n_test: usize,
    pub squared_bias: f64,
    pub c_mse: f64,
    pub median_ape: f64,
    pub r2: f64,
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointRow {
    pub n_train: usize,
    pub data_type: String,
    pub parameter: String,
    pub median_ape: Option<f64>,
    pub r2: Option<f64>,
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossvalFoldRow {
    pub family: String,
    pub init_seed: u64,
    pub fold: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub squared_bias: f64,
    pub c_mse: f64,
    pub median_ape: f64,
    pub r2: f64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossvalRow {
    pub family: String,
    pub init_seed: u64,
    pub folds: usize,
    pub squared_bias_mean: f64,
    pub squared_bias_std: f64,
    pub c_mse_mean: f64,
    pub c_mse_std: f64,
    pub median_ape_mean: f64,
    pub median_ape_std: f64,
    pub r2_mean: f64,
    pub r2_std: f64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResimRow {
    pub scenario: String,
    pub percentile: f64,
    pub sample: usize,
    pub param_mse: f64,
    pub theta0: f64,
    pub theta1: f64,
    pub theta0_pred: f64,
    pub theta1_pred: f64,
    pub status: String,
    pub ts_squared_bias: Option<f64>,
    pub ts_c_mse: Option<f64>,
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResimSeriesRow {
    pub t: f64,
    pub data: f64,
    pub clean: f64,
    pub simulated: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpikeRow {
    pub theta0: f64,
    pub theta1: f64,
    pub count: Option<usize>,
    pub rate: Option<f64>,
    pub mean_duration: Option<f64>,
}

impl From<&crate::fhn::SpikeCell> for SpikeRow {
    fn from(c: &crate::fhn::SpikeCell) -> Self {
        SpikeRow {
            theta0: c.theta.theta0,
            theta1: c.theta.theta1,
            count: c.stats.map(|s| s.count),
            rate: c.stats.map(|s| s.rate),
            mean_duration: c.stats.map(|s| s.mean_duration),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaRow {
    pub theta0: f64,
    pub theta1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub theta0: f64,
    pub theta1: f64,
    pub loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesRow {
    pub t: f64,
    pub u: f64,
    pub data: Option<f64>,
}
