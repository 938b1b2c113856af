//! Training, validation and test data for reconstruction maps.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fhn::{integrate, SimConstants, SimError, ThetaPair, TimeSeries, Tolerances};
use crate::stochastic::{ar1_path, noise_pool, sample_theta, NoiseParams, NoisePrior, PriorSpec, RngStream, SampleError};

pub const DATASET_MAGIC: &[u8; 6] = b"FHNDS1";
const TRAILER_MAGIC: &[u8; 4] = b"PROV";

/// How many fresh substreams a sample may consume before giving up.
pub const MAX_SAMPLE_RETRIES: u64 = 16;
const RETRY_STRIDE: u64 = 1 << 40;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("sample {index}: {source}")]
    Simulation { index: usize, source: SimError },
    #[error("sample {index}: {source}")]
    Sampling { index: usize, source: SampleError },
    #[error(transparent)]
    Prior(#[from] SampleError),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("window [{start}, {end}) out of range for series of length {len}")]
    IndexOutOfRange { start: usize, end: usize, len: usize },
    #[error("invalid dataset request: {0}")]
    Invalid(String),
    #[error("unsupported dataset format: {0}")]
    FormatVersionMismatch(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Time,
    Fourier,
    TimeAndFourier,
}

impl FeatureKind {
    pub fn code(self) -> u8 {
        match self {
            FeatureKind::Time => 0,
            FeatureKind::Fourier => 1,
            FeatureKind::TimeAndFourier => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(FeatureKind::Time),
            1 => Some(FeatureKind::Fourier),
            2 => Some(FeatureKind::TimeAndFourier),
            _ => None,
        }
    }

    /// Feature length for a time series of length `n_t`.
    pub fn feature_len(self, n_t: usize) -> usize {
        match self {
            FeatureKind::Time => n_t,
            FeatureKind::Fourier => n_t / 2 + 1,
            FeatureKind::TimeAndFourier => n_t + n_t / 2 + 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureKind::Time => "time",
            FeatureKind::Fourier => "fourier",
            FeatureKind::TimeAndFourier => "time_and_fourier",
        }
    }
}

impl std::str::FromStr for FeatureKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "time" => Ok(FeatureKind::Time),
            "fourier" => Ok(FeatureKind::Fourier),
            "time_and_fourier" | "time+fourier" => Ok(FeatureKind::TimeAndFourier),
            other => Err(format!("unknown feature kind '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub theta: ThetaPair,
    pub noise: Option<NoiseParams>,
    pub stream_id: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    /// `(theta0, theta1)` or `(theta0, theta1, sigma, rho)`.
    pub target: Vec<f64>,
    pub meta: SampleMeta,
}

/// Everything needed to regenerate a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub noise_pool_seed: u64,
    pub noise_pool_size: usize,
    pub prior: PriorSpec,
    pub noise_prior: NoisePrior,
    pub consts: SimConstants,
    pub tolerances: Tolerances,
    /// Free-form record of derivations applied after generation (windows, halves).
    pub transforms: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub feature_kind: FeatureKind,
    pub noise_applied: bool,
    pub scaler: Option<Scaler>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn feature_len(&self) -> usize {
        self.samples.first().map_or(0, |s| s.features.len())
    }

    pub fn target_len(&self) -> usize {
        self.samples.first().map_or(0, |s| s.target.len())
    }

    pub fn targets(&self) -> Vec<Vec<f64>> {
        self.samples.iter().map(|s| s.target.clone()).collect()
    }

    /// The first `n` samples.
    pub fn prefix(&self, n: usize) -> Dataset {
        Dataset {
            samples: self.samples[..n.min(self.len())].to_vec(),
            ..self.clone_header()
        }
    }

    /// A dataset made of the samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            ..self.clone_header()
        }
    }

    fn clone_header(&self) -> Dataset {
        Dataset {
            samples: Vec::new(),
            feature_kind: self.feature_kind,
            noise_applied: self.noise_applied,
            scaler: self.scaler.clone(),
            provenance: self.provenance.clone(),
        }
    }

    fn check_uniform(&self) -> Result<(), DataError> {
        let (f, t) = (self.feature_len(), self.target_len());
        if self.samples.iter().any(|s| s.features.len() != f || s.target.len() != t) {
            return Err(DataError::LengthMismatch("samples differ in feature or target length".into()));
        }
        Ok(())
    }
}

/// Generation settings shared by every dataset of an experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSpec {
    pub prior: PriorSpec,
    pub noise_prior: NoisePrior,
    pub consts: SimConstants,
    pub tolerances: Tolerances,
    pub noise_pool_seed: u64,
    pub noise_pool_size: usize,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            prior: PriorSpec::default(),
            noise_prior: NoisePrior::default(),
            consts: SimConstants::default(),
            tolerances: Tolerances::default(),
            noise_pool_seed: 0x5eed_0001,
            noise_pool_size: 100,
        }
    }
}

/// One simulated sample before feature extraction.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSample {
    pub theta: ThetaPair,
    pub clean: Vec<f64>,
    /// Noisy observation, present when noise was requested.
    pub noisy: Option<(Vec<f64>, NoiseParams)>,
    pub stream_id: u64,
}

impl DataSpec {
    fn provenance(&self, seed: u64) -> Provenance {
        Provenance {
            seed,
            noise_pool_seed: self.noise_pool_seed,
            noise_pool_size: self.noise_pool_size,
            prior: self.prior,
            noise_prior: self.noise_prior,
            consts: self.consts,
            tolerances: self.tolerances,
            transforms: Vec::new(),
        }
    }

    pub fn noise_pool(&self) -> Result<Vec<NoiseParams>, SampleError> {
        noise_pool(self.noise_pool_seed, &self.noise_prior, self.noise_pool_size.max(1))
    }

    /// Draws theta from substream `index` of `seed`, simulates it and, with a
    /// pool, adds an AR(1) path drawn from the same substream. A failed
    /// simulation moves on to a fresh substream.
    pub fn raw_sample(&self, seed: u64, index: usize, pool: Option<&[NoiseParams]>) -> Result<RawSample, DataError> {
        let mut last_err = None;
        for attempt in 0..MAX_SAMPLE_RETRIES {
            let stream_id = index as u64 + attempt * RETRY_STRIDE;
            let mut rng = RngStream::new(seed, stream_id).rng();
            let theta = sample_theta(&mut rng, &self.prior).map_err(|source| DataError::Sampling { index, source })?;
            match integrate(theta, &self.consts, &self.tolerances) {
                Ok(series) => {
                    let noisy = pool.map(|pool| {
                        let params = pool[index % pool.len()];
                        let path = ar1_path(&mut rng, params, self.consts.dt_out, series.len());
                        let data = series.values.iter().zip(&path).map(|(u, e)| u + e).collect();
                        (data, params)
                    });
                    return Ok(RawSample { theta, clean: series.values, noisy, stream_id });
                }
                Err(e) => last_err = Some(e),
            }
        }
        Err(DataError::Simulation { index, source: last_err.expect("at least one attempt") })
    }

    /// Raw samples `0..n` of `seed`; noise is drawn when `with_noise` is set.
    pub fn raw_samples(&self, seed: u64, n: usize, with_noise: bool) -> Result<Vec<RawSample>, DataError> {
        let pool = if with_noise { Some(self.noise_pool()?) } else { None };
        (0..n).map(|i| self.raw_sample(seed, i, pool.as_deref())).collect()
    }

    /// Assembles a dataset from raw samples.
    pub fn assemble(
        &self,
        seed: u64,
        raw: &[RawSample],
        feature_kind: FeatureKind,
        with_noise: bool,
        joint_targets: bool,
    ) -> Result<Dataset, DataError> {
        if joint_targets && !with_noise {
            return Err(DataError::Invalid("joint targets require noisy data".into()));
        }
        let samples = raw
            .iter()
            .map(|r| {
                let (series, noise) = if with_noise {
                    let (data, params) = r
                        .noisy
                        .as_ref()
                        .ok_or_else(|| DataError::Invalid("raw sample carries no noise".into()))?;
                    (data.as_slice(), Some(*params))
                } else {
                    (r.clean.as_slice(), None)
                };
                let mut target = vec![r.theta.theta0, r.theta.theta1];
                if joint_targets {
                    let p = noise.expect("noisy sample");
                    target.extend([p.sigma, p.rho]);
                }
                Ok(Sample {
                    features: features_of(series, feature_kind),
                    target,
                    meta: SampleMeta { theta: r.theta, noise, stream_id: r.stream_id },
                })
            })
            .collect::<Result<Vec<_>, DataError>>()?;
        Ok(Dataset {
            samples,
            feature_kind,
            noise_applied: with_noise,
            scaler: None,
            provenance: self.provenance(seed),
        })
    }

    pub fn build_dataset(
        &self,
        seed: u64,
        n: usize,
        feature_kind: FeatureKind,
        with_noise: bool,
        joint_targets: bool,
    ) -> Result<Dataset, DataError> {
        if n == 0 {
            return Err(DataError::Invalid("dataset size must be at least 1".into()));
        }
        if joint_targets && !with_noise {
            return Err(DataError::Invalid("joint targets require noisy data".into()));
        }
        let raw = self.raw_samples(seed, n, with_noise)?;
        self.assemble(seed, &raw, feature_kind, with_noise, joint_targets)
    }

    /// Noise-free dataset for explicitly given parameters.
    pub fn dataset_for_thetas(&self, thetas: &[ThetaPair], feature_kind: FeatureKind) -> Result<Dataset, DataError> {
        let raw = thetas
            .iter()
            .enumerate()
            .map(|(index, &theta)| {
                let series = integrate(theta, &self.consts, &self.tolerances)
                    .map_err(|source| DataError::Simulation { index, source })?;
                Ok(RawSample { theta, clean: series.values, noisy: None, stream_id: index as u64 })
            })
            .collect::<Result<Vec<_>, DataError>>()?;
        self.assemble(0, &raw, feature_kind, false, false)
    }
}

fn features_of(series: &[f64], kind: FeatureKind) -> Vec<f64> {
    match kind {
        FeatureKind::Time => series.to_vec(),
        FeatureKind::Fourier => fourier_magnitudes(series),
        FeatureKind::TimeAndFourier => {
            let mut f = series.to_vec();
            f.extend(fourier_magnitudes(series));
            f
        }
    }
}

/// Magnitudes of the one-sided DFT `X_k = sum_j x_j exp(-2 pi i j k / N)`,
/// `k = 0..=N/2`.
pub fn fourier_magnitudes(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    if n == 0 {
        return Vec::new();
    }
    let mut buf: Vec<Complex<f64>> = values.iter().map(|&x| Complex::new(x, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    buf.truncate(n / 2 + 1);
    buf.into_iter().map(|c| c.norm()).collect()
}

pub fn fourier_features(series: &TimeSeries) -> Vec<f64> {
    fourier_magnitudes(&series.values)
}

/// Recomputes features of a time-feature dataset as `kind`.
pub fn convert_features(dataset: &Dataset, kind: FeatureKind) -> Result<Dataset, DataError> {
    if dataset.feature_kind != FeatureKind::Time {
        return Err(DataError::Invalid("feature conversion needs time-series features".into()));
    }
    if dataset.scaler.is_some() {
        return Err(DataError::Invalid("feature conversion needs unscaled features".into()));
    }
    let mut out = dataset.clone();
    out.feature_kind = kind;
    for s in &mut out.samples {
        s.features = features_of(&s.features, kind);
    }
    Ok(out)
}

fn require_time(dataset: &Dataset, what: &str) -> Result<(), DataError> {
    if dataset.feature_kind != FeatureKind::Time {
        return Err(DataError::Invalid(format!("{what} needs time-series features")));
    }
    Ok(())
}

/// Splits every series into its first and second half; targets are duplicated.
pub fn split_halves(dataset: &Dataset) -> Result<Dataset, DataError> {
    require_time(dataset, "split_halves")?;
    let len = dataset.feature_len();
    if !len.is_multiple_of(2) {
        return Err(DataError::LengthMismatch(format!("cannot halve odd length {len}")));
    }
    let half = len / 2;
    let mut out = dataset.clone_header();
    out.provenance.transforms.push(format!("halves:{half}"));
    for s in &dataset.samples {
        for part in s.features.chunks(half) {
            out.samples.push(Sample { features: part.to_vec(), ..s.clone() });
        }
    }
    Ok(out)
}

pub const DEFAULT_WINDOWS: [(usize, usize); 5] = [(30, 530), (146, 646), (174, 674), (362, 862), (370, 870)];

/// Emits one sample per (sample, window) pair, sample-major.
pub fn extract_windows(dataset: &Dataset, windows: &[(usize, usize)]) -> Result<Dataset, DataError> {
    require_time(dataset, "extract_windows")?;
    let len = dataset.feature_len();
    let width = windows.first().map(|w| w.1.saturating_sub(w.0)).unwrap_or(0);
    for &(start, end) in windows {
        if start >= end || end > len {
            return Err(DataError::IndexOutOfRange { start, end, len });
        }
        if end - start != width {
            return Err(DataError::LengthMismatch("windows must share one length".into()));
        }
    }
    let mut out = dataset.clone_header();
    out.provenance
        .transforms
        .push(format!("windows:{}", windows.iter().map(|(a, b)| format!("{a}-{b}")).collect::<Vec<_>>().join(",")));
    for s in &dataset.samples {
        for &(start, end) in windows {
            out.samples.push(Sample { features: s.features[start..end].to_vec(), ..s.clone() });
        }
    }
    Ok(out)
}

/// Per-coordinate standardization of features and targets.
///
/// Coordinates with (numerically) zero spread get a unit scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub feature_mean: Vec<f64>,
    pub feature_sd: Vec<f64>,
    pub target_mean: Vec<f64>,
    pub target_sd: Vec<f64>,
}

fn column_stats<'a>(rows: impl Iterator<Item = &'a [f64]> + Clone, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; dim];
    let mut n = 0usize;
    for r in rows.clone() {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x;
        }
        n += 1;
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; dim];
    for r in rows {
        for ((v, x), m) in var.iter_mut().zip(r).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    let sd = var
        .iter()
        .zip(&mean)
        .map(|(v, m)| {
            let sd = (v / n as f64).sqrt();
            if sd <= 1e-12 * m.abs().max(1.0) {
                1.0
            } else {
                sd
            }
        })
        .collect();
    (mean, sd)
}

impl Scaler {
    pub fn fit(dataset: &Dataset) -> Result<Scaler, DataError> {
        if dataset.is_empty() {
            return Err(DataError::Invalid("cannot fit a scaler on an empty dataset".into()));
        }
        dataset.check_uniform()?;
        let (feature_mean, feature_sd) =
            column_stats(dataset.samples.iter().map(|s| s.features.as_slice()), dataset.feature_len());
        let (target_mean, target_sd) =
            column_stats(dataset.samples.iter().map(|s| s.target.as_slice()), dataset.target_len());
        Ok(Scaler { feature_mean, feature_sd, target_mean, target_sd })
    }

    fn check(&self, dataset: &Dataset) -> Result<(), DataError> {
        dataset.check_uniform()?;
        if dataset.feature_len() != self.feature_mean.len() || dataset.target_len() != self.target_mean.len() {
            return Err(DataError::LengthMismatch("scaler shape differs from dataset".into()));
        }
        Ok(())
    }

    pub fn scale_features(&self, x: &mut [f64]) {
        for ((v, m), s) in x.iter_mut().zip(&self.feature_mean).zip(&self.feature_sd) {
            *v = (*v - m) / s;
        }
    }

    pub fn scale_target(&self, y: &mut [f64]) {
        for ((v, m), s) in y.iter_mut().zip(&self.target_mean).zip(&self.target_sd) {
            *v = (*v - m) / s;
        }
    }

    pub fn unscale_features(&self, x: &mut [f64]) {
        for ((v, m), s) in x.iter_mut().zip(&self.feature_mean).zip(&self.feature_sd) {
            *v = *v * s + m;
        }
    }

    pub fn unscale_target(&self, y: &mut [f64]) {
        for ((v, m), s) in y.iter_mut().zip(&self.target_mean).zip(&self.target_sd) {
            *v = *v * s + m;
        }
    }

    /// Scaled copy of `dataset`, carrying this scaler.
    pub fn apply(&self, dataset: &Dataset) -> Result<Dataset, DataError> {
        if dataset.scaler.is_some() {
            return Err(DataError::Invalid("dataset is already scaled".into()));
        }
        self.check(dataset)?;
        let mut out = dataset.clone();
        for s in &mut out.samples {
            self.scale_features(&mut s.features);
            self.scale_target(&mut s.target);
        }
        out.scaler = Some(self.clone());
        Ok(out)
    }

    /// Restores original units of a dataset scaled by this scaler.
    pub fn invert(&self, dataset: &Dataset) -> Result<Dataset, DataError> {
        self.check(dataset)?;
        let mut out = dataset.clone();
        for s in &mut out.samples {
            self.unscale_features(&mut s.features);
            self.unscale_target(&mut s.target);
        }
        out.scaler = None;
        Ok(out)
    }
}

fn put_f64s(w: &mut impl Write, xs: &[f64]) -> io::Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_exact_array<const N: usize>(r: &mut impl Read) -> io::Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn get_u8(r: &mut impl Read) -> io::Result<u8> {
    Ok(read_exact_array::<1>(r)?[0])
}

fn get_u32(r: &mut impl Read) -> io::Result<u32> {
    Ok(u32::from_le_bytes(read_exact_array(r)?))
}

fn get_u64(r: &mut impl Read) -> io::Result<u64> {
    Ok(u64::from_le_bytes(read_exact_array(r)?))
}

fn get_f64s(r: &mut impl Read, n: usize) -> io::Result<Vec<f64>> {
    (0..n).map(|_| Ok(f64::from_le_bytes(read_exact_array(r)?))).collect()
}

/// Writes the binary container: magic, fixed header, per-sample records, then
/// a trailer holding the optional scaler and the JSON provenance.
pub fn write_dataset(w: &mut impl Write, dataset: &Dataset) -> Result<(), DataError> {
    dataset.check_uniform()?;
    let target_len = dataset.target_len();
    let feature_len = dataset.feature_len();
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&[dataset.feature_kind.code(), dataset.noise_applied as u8])?;
    w.write_all(&(target_len as u32).to_le_bytes())?;
    w.write_all(&(feature_len as u32).to_le_bytes())?;
    w.write_all(&(dataset.len() as u64).to_le_bytes())?;
    w.write_all(&dataset.provenance.seed.to_le_bytes())?;
    for s in &dataset.samples {
        w.write_all(&s.meta.stream_id.to_le_bytes())?;
        put_f64s(w, &s.target)?;
        let (sigma, rho) = s.meta.noise.map_or((f64::NAN, f64::NAN), |p| (p.sigma, p.rho));
        put_f64s(w, &[s.meta.theta.theta0, s.meta.theta.theta1, sigma, rho])?;
        put_f64s(w, &s.features)?;
    }
    w.write_all(TRAILER_MAGIC)?;
    match &dataset.scaler {
        Some(sc) => {
            w.write_all(&[1])?;
            for v in [&sc.feature_mean, &sc.feature_sd, &sc.target_mean, &sc.target_sd] {
                put_f64s(w, v)?;
            }
        }
        None => w.write_all(&[0])?,
    }
    let prov = serde_json::to_vec(&dataset.provenance).map_err(io::Error::other)?;
    w.write_all(&(prov.len() as u64).to_le_bytes())?;
    w.write_all(&prov)?;
    Ok(())
}

pub fn read_dataset(r: &mut impl Read) -> Result<Dataset, DataError> {
    let magic: [u8; 6] = read_exact_array(r)?;
    if &magic != DATASET_MAGIC {
        return Err(DataError::FormatVersionMismatch(format!("bad magic {magic:?}")));
    }
    let kind_code = get_u8(r)?;
    let feature_kind = FeatureKind::from_code(kind_code)
        .ok_or_else(|| DataError::FormatVersionMismatch(format!("unknown feature kind code {kind_code}")))?;
    let noise_applied = match get_u8(r)? {
        0 => false,
        1 => true,
        b => return Err(DataError::FormatVersionMismatch(format!("bad noise flag {b}"))),
    };
    let target_len = get_u32(r)? as usize;
    let feature_len = get_u32(r)? as usize;
    let n = get_u64(r)? as usize;
    let seed = get_u64(r)?;
    let mut samples = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let stream_id = get_u64(r)?;
        let target = get_f64s(r, target_len)?;
        let meta = get_f64s(r, 4)?;
        let features = get_f64s(r, feature_len)?;
        let noise = if meta[2].is_nan() { None } else { Some(NoiseParams::new(meta[2], meta[3])) };
        samples.push(Sample {
            features,
            target,
            meta: SampleMeta { theta: ThetaPair::new(meta[0], meta[1]), noise, stream_id },
        });
    }
    let trailer: [u8; 4] = read_exact_array(r)?;
    if &trailer != TRAILER_MAGIC {
        return Err(DataError::FormatVersionMismatch("missing provenance trailer".into()));
    }
    let scaler = match get_u8(r)? {
        0 => None,
        1 => Some(Scaler {
            feature_mean: get_f64s(r, feature_len)?,
            feature_sd: get_f64s(r, feature_len)?,
            target_mean: get_f64s(r, target_len)?,
            target_sd: get_f64s(r, target_len)?,
        }),
        b => return Err(DataError::FormatVersionMismatch(format!("bad scaler flag {b}"))),
    };
    let prov_len = get_u64(r)? as usize;
    let mut prov = vec![0u8; prov_len];
    r.read_exact(&mut prov)?;
    let provenance: Provenance =
        serde_json::from_slice(&prov).map_err(|e| DataError::FormatVersionMismatch(format!("provenance: {e}")))?;
    if provenance.seed != seed {
        return Err(DataError::FormatVersionMismatch("header and provenance seeds differ".into()));
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(DataError::FormatVersionMismatch("trailing bytes after dataset".into()));
    }
    Ok(Dataset { samples, feature_kind, noise_applied, scaler, provenance })
}

pub fn save_dataset(path: &Path, dataset: &Dataset) -> Result<(), DataError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset(&mut w, dataset)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset, DataError> {
    read_dataset(&mut BufReader::new(File::open(path)?))
}

/// CSV export: `target_0..target_k, f_0..f_m`, one row per sample.
pub fn write_dataset_csv(w: &mut impl Write, dataset: &Dataset) -> Result<(), DataError> {
    dataset.check_uniform()?;
    let mut header: Vec<String> = (0..dataset.target_len()).map(|i| format!("target_{i}")).collect();
    header.extend((0..dataset.feature_len()).map(|i| format!("f_{i}")));
    writeln!(w, "{}", header.join(","))?;
    for s in &dataset.samples {
        let row: Vec<String> = s.target.iter().chain(&s.features).map(|x| format!("{x:?}")).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn short_spec() -> DataSpec {
        DataSpec {
            consts: SimConstants { t_end: 20.0, ..Default::default() },
            ..Default::default()
        }
    }

    #[test]
    fn sizes_and_lengths() {
        let spec = short_spec();
        let ds = spec.build_dataset(1, 5, FeatureKind::Time, false, false).unwrap();
        assert_eq!(ds.len(), 5);
        assert_eq!(ds.feature_len(), 100);
        assert_eq!(ds.target_len(), 2);
        assert!(!ds.noise_applied);

        let ds = spec.build_dataset(1, 3, FeatureKind::TimeAndFourier, true, true).unwrap();
        assert_eq!(ds.feature_len(), 100 + 51);
        assert_eq!(ds.target_len(), 4);
    }

    #[test]
    fn joint_without_noise_is_rejected() {
        assert!(matches!(
            short_spec().build_dataset(1, 3, FeatureKind::Time, false, true),
            Err(DataError::Invalid(_))
        ));
        assert!(short_spec().build_dataset(1, 0, FeatureKind::Time, false, false).is_err());
    }

    #[test]
    fn forced_theta_reproduces_integration() {
        let spec = DataSpec::default();
        let theta = ThetaPair::new(0.7, 0.8);
        let ds = spec.dataset_for_thetas(&[theta], FeatureKind::Time).unwrap();
        let direct = integrate(theta, &spec.consts, &spec.tolerances).unwrap();
        assert_eq!(ds.samples[0].features, direct.values);
        assert_eq!(ds.samples[0].target, vec![0.7, 0.8]);
    }

    #[test]
    fn clean_samples_reproduce_integration() {
        let spec = short_spec();
        let ds = spec.build_dataset(4, 4, FeatureKind::Time, false, false).unwrap();
        for s in &ds.samples {
            let direct = integrate(s.meta.theta, &spec.consts, &spec.tolerances).unwrap();
            assert_eq!(s.features, direct.values);
            assert!(s.meta.noise.is_none());
        }
    }

    #[test]
    fn noisy_and_clean_share_theta() {
        let spec = short_spec();
        let clean = spec.build_dataset(9, 6, FeatureKind::Time, false, false).unwrap();
        let noisy = spec.build_dataset(9, 6, FeatureKind::Time, true, true).unwrap();
        let pool = spec.noise_pool().unwrap();
        for (i, (c, n)) in clean.samples.iter().zip(&noisy.samples).enumerate() {
            assert_eq!(c.meta.theta, n.meta.theta);
            let p = pool[i % pool.len()];
            assert_eq!(n.meta.noise, Some(p));
            assert_eq!(&n.target[2..], &[p.sigma, p.rho]);
            assert_ne!(c.features, n.features);
        }
    }

    #[test]
    fn prefix_property() {
        let spec = short_spec();
        let small = spec.build_dataset(2, 3, FeatureKind::Time, true, false).unwrap();
        let large = spec.build_dataset(2, 7, FeatureKind::Time, true, false).unwrap();
        assert_eq!(small.samples[..], large.samples[..3]);
    }

    #[test]
    fn fourier_of_zero_and_constant() {
        assert!(fourier_magnitudes(&[0.0; 16]).iter().all(|&x| x == 0.0));
        let spec = fourier_magnitudes(&[2.5; 10]);
        assert_eq!(spec.len(), 6);
        assert!((spec[0] - 25.0).abs() < 1e-12);
        assert!(spec[1..].iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn halves_and_windows() {
        let spec = short_spec();
        let ds = spec.build_dataset(3, 2, FeatureKind::Time, false, false).unwrap();
        let halves = split_halves(&ds).unwrap();
        assert_eq!(halves.len(), 4);
        assert_eq!(halves.feature_len(), 50);
        for (i, s) in ds.samples.iter().enumerate() {
            let mut joined = halves.samples[2 * i].features.clone();
            joined.extend(&halves.samples[2 * i + 1].features);
            assert_eq!(joined, s.features);
            assert_eq!(halves.samples[2 * i].target, s.target);
        }

        let first = extract_windows(&ds, &[(0, 50)]).unwrap();
        for i in 0..ds.len() {
            assert_eq!(first.samples[i].features, halves.samples[2 * i].features);
        }
        let ident = extract_windows(&ds, &[(0, 100)]).unwrap();
        assert_eq!(ident.samples, ds.samples);
        let w = extract_windows(&ds, &[(3, 43), (10, 50)]).unwrap();
        assert_eq!(w.len(), 4);
        assert_eq!(w.samples[1].features, ds.samples[0].features[10..50].to_vec());
    }

    #[test]
    fn window_errors() {
        let spec = short_spec();
        let ds = spec.build_dataset(3, 1, FeatureKind::Time, false, false).unwrap();
        assert!(matches!(extract_windows(&ds, &[(60, 101)]), Err(DataError::IndexOutOfRange { .. })));
        assert!(matches!(extract_windows(&ds, &[(0, 10), (0, 11)]), Err(DataError::LengthMismatch(_))));
        let mut odd = ds.clone();
        odd.samples[0].features.pop();
        assert!(matches!(split_halves(&odd), Err(DataError::LengthMismatch(_))));
        let fourier = convert_features(&ds, FeatureKind::Fourier).unwrap();
        assert!(split_halves(&fourier).is_err());
    }

    #[test]
    fn equal_halves_give_identical_samples() {
        let mut ds = short_spec().build_dataset(3, 1, FeatureKind::Time, false, false).unwrap();
        let half: Vec<f64> = (0..50).map(|i| i as f64).collect();
        ds.samples[0].features = [half.clone(), half].concat();
        let h = split_halves(&ds).unwrap();
        assert_eq!(h.samples[0], h.samples[1]);
    }

    #[test]
    fn scaler_on_constant_features() {
        let mut ds = short_spec().build_dataset(3, 4, FeatureKind::Time, false, false).unwrap();
        for s in &mut ds.samples {
            s.features.iter_mut().for_each(|x| *x = 0.3);
        }
        let sc = Scaler::fit(&ds).unwrap();
        assert!(sc.feature_sd.iter().all(|&s| s == 1.0));
        let scaled = sc.apply(&ds).unwrap();
        assert!(scaled.samples.iter().all(|s| s.features.iter().all(|x| x.abs() < 1e-12)));
    }

    #[test]
    fn scaler_standardizes_and_inverts() {
        let ds = short_spec().build_dataset(5, 40, FeatureKind::Time, true, true).unwrap();
        let sc = Scaler::fit(&ds).unwrap();
        let scaled = sc.apply(&ds).unwrap();
        let n = scaled.len() as f64;
        for j in 0..scaled.feature_len() {
            let m = scaled.samples.iter().map(|s| s.features[j]).sum::<f64>() / n;
            let v = scaled.samples.iter().map(|s| (s.features[j] - m).powi(2)).sum::<f64>() / n;
            assert!(m.abs() < 1e-10);
            assert!((v.sqrt() - 1.0).abs() < 1e-10);
        }
        let back = sc.invert(&scaled).unwrap();
        for (a, b) in back.samples.iter().zip(&ds.samples) {
            for (x, y) in a.features.iter().chain(&a.target).zip(b.features.iter().chain(&b.target)) {
                assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
            }
        }
        assert!(sc.apply(&scaled).is_err());
    }

    #[test]
    fn container_round_trip_and_truncation() {
        let ds = short_spec().build_dataset(5, 4, FeatureKind::TimeAndFourier, true, true).unwrap();
        let scaled = Scaler::fit(&ds).unwrap().apply(&ds).unwrap();
        for d in [&ds, &scaled] {
            let mut buf = Vec::new();
            write_dataset(&mut buf, d).unwrap();
            assert_eq!(&buf[..6], b"FHNDS1");
            let back = read_dataset(&mut buf.as_slice()).unwrap();
            assert_eq!(&back, d);
            for cut in [3, 10, 30, buf.len() / 2, buf.len() - 1] {
                assert!(read_dataset(&mut &buf[..cut]).is_err(), "cut at {cut}");
            }
            let mut bad = buf.clone();
            bad[0] = b'X';
            assert!(matches!(read_dataset(&mut bad.as_slice()), Err(DataError::FormatVersionMismatch(_))));
        }
    }

    #[test]
    fn csv_export_shape() {
        let ds = short_spec().build_dataset(5, 2, FeatureKind::Time, false, false).unwrap();
        let mut buf = Vec::new();
        write_dataset_csv(&mut buf, &ds).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("target_0,target_1,f_0,"));
        assert_eq!(lines[1].split(',').count(), 102);
    }
}
