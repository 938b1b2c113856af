//! Experiment drivers: dataset assembly, training and evaluation for each
//! study, plus the loss and spike landscapes.
//!
//! A [`Lab`] owns one configuration, caches simulated samples per split and
//! memoizes trained networks, so studies sharing a setting share the work.
//! Every result is a pure function of the configuration.

pub mod config;
pub mod output;

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};

use thiserror::Error;

use crate::dataset::{
    convert_features, extract_windows, split_halves, DataError, DataSpec, Dataset, FeatureKind, RawSample, Scaler,
};
use crate::fhn::{integrate, linspace, spike_grid, SimError, SpikeGrid, ThetaPair, TimeSeries};
use crate::metrics::{coordinate_names, mse_decompose, EvalReport, MeanStd, MetricsError};
use crate::nn::{read_model, train, write_model, EpochRecord, Network, NnError};
use crate::stochastic::{ar1_path, domain, sample_theta, NoiseParams, RngStream, SampleError};

use config::{Architecture, ExperimentConfig, Family, LossGridConfig, SeriesConfig};
use output::*;

#[derive(Debug, Error)]
pub enum ExpError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl ExpError {
    pub fn is_config(&self) -> bool {
        matches!(self, ExpError::Config(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// Identifies an assembled dataset; used in memo keys and reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DataKey {
    pub split: Split,
    pub n: usize,
    pub kind: FeatureKind,
    pub noisy: bool,
    pub joint: bool,
}

impl DataKey {
    pub fn new(split: Split, n: usize, kind: FeatureKind, noisy: bool, joint: bool) -> Self {
        DataKey { split, n, kind, noisy, joint }
    }

    pub fn id(&self) -> String {
        format!(
            "{:?}-n{}-{}-{}{}",
            self.split,
            self.n,
            self.kind.name(),
            if self.noisy { "noisy" } else { "clean" },
            if self.joint { "-joint" } else { "" }
        )
        .to_lowercase()
    }
}

/// A trained network with the scaler fitted on its training data.
#[derive(Debug, Clone, PartialEq)]
pub struct Fitted {
    pub net: Network,
    pub scaler: Scaler,
    pub history: Vec<EpochRecord>,
}

impl Fitted {
    /// Predictions in original target units.
    pub fn predict(&self, data: &Dataset) -> Result<Vec<Vec<f64>>, ExpError> {
        let mut ws = self.net.workspace();
        let mut x = Vec::with_capacity(data.feature_len());
        data.samples
            .iter()
            .map(|s| {
                x.clear();
                x.extend_from_slice(&s.features);
                self.scaler.scale_features(&mut x);
                let mut y = self.net.forward_ws(&x, &mut ws)?.to_vec();
                self.scaler.unscale_target(&mut y);
                Ok(y)
            })
            .collect()
    }

    pub fn evaluate(&self, data: &Dataset) -> Result<(EvalReport, Vec<Vec<f64>>), ExpError> {
        let pred = self.predict(data)?;
        let report = EvalReport::evaluate(&data.targets(), &pred)?;
        Ok((report, pred))
    }

    /// Writes the network and its scaler; the training history is not kept.
    pub fn save(&self, path: &Path) -> Result<(), ExpError> {
        let mut w = BufWriter::new(File::create(path)?);
        write_model(&mut w, &self.net, Some(&self.scaler))?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Fitted, ExpError> {
        let (net, scaler) = read_model(&mut BufReader::new(File::open(path)?))?;
        let scaler = scaler.ok_or_else(|| ExpError::Config(format!("{} carries no scaler", path.display())))?;
        Ok(Fitted { net, scaler, history: Vec::new() })
    }
}

/// Draws one observed series for `series` with noise from stream
/// `(seed, MISC)`.
pub fn observe(
    series: &SeriesConfig,
    spec: &DataSpec,
    seed: u64,
) -> Result<(TimeSeries, Option<Vec<f64>>), ExpError> {
    let clean = integrate(series.theta(), &spec.consts, &spec.tolerances)?;
    let noisy = series.with_noise.then(|| {
        let mut rng = RngStream::new(seed, domain::MISC).rng();
        let eta = ar1_path(&mut rng, NoiseParams::new(series.sigma, series.rho), clean.dt, clean.len());
        clean.values.iter().zip(&eta).map(|(u, e)| u + e).collect()
    });
    Ok((clean, noisy))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrid {
    pub theta0: Vec<f64>,
    pub theta1: Vec<f64>,
    /// Row-major with `theta0` as the outer index; `None` where the
    /// simulation failed.
    pub loss: Vec<Option<f64>>,
}

impl LossGrid {
    pub fn at(&self, i0: usize, i1: usize) -> Option<f64> {
        self.loss[i0 * self.theta1.len() + i1]
    }

    /// Grid node with the smallest loss.
    pub fn argmin(&self) -> Option<(usize, usize)> {
        let n1 = self.theta1.len();
        self.loss
            .iter()
            .enumerate()
            .filter_map(|(k, l)| l.map(|l| (k, l)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(k, _)| (k / n1, k % n1))
    }

    /// Lower-left node of the grid cell containing `theta`.
    pub fn containing_cell(&self, theta: ThetaPair) -> Option<(usize, usize)> {
        let find = |grid: &[f64], x: f64| grid.windows(2).position(|w| w[0] <= x && x <= w[1]);
        Some((find(&self.theta0, theta.theta0)?, find(&self.theta1, theta.theta1)?))
    }

    pub fn rows(&self) -> Vec<LossRow> {
        let mut rows = Vec::with_capacity(self.loss.len());
        for (i0, &t0) in self.theta0.iter().enumerate() {
            for (i1, &t1) in self.theta1.iter().enumerate() {
                rows.push(LossRow { theta0: t0, theta1: t1, loss: self.at(i0, i1) });
            }
        }
        rows
    }
}

/// Negative log posterior on a grid: a dt-weighted misfit with noise level
/// `sigma / dt` plus the Gaussian prior term, either of which may be off.
pub fn loss_landscape(
    data: &[f64],
    lg: &LossGridConfig,
    spec: &DataSpec,
) -> Result<LossGrid, ExpError> {
    let p = &spec.prior;
    let dt = spec.consts.dt_out;
    let sigma_noise = lg.data.sigma / dt;
    if lg.misfit_term && !(sigma_noise > 0.0) {
        return Err(ExpError::Config("misfit needs a positive noise sigma".into()));
    }
    let theta0 = linspace(p.lo0, p.hi0, lg.resolution);
    let theta1 = linspace(p.lo1, p.hi1, lg.resolution);
    let mut loss = Vec::with_capacity(theta0.len() * theta1.len());
    for &t0 in &theta0 {
        for &t1 in &theta1 {
            let mut value = 0.0;
            if lg.prior_term {
                value += 0.5 * (((t0 - p.mean0) / p.sd0).powi(2) + ((t1 - p.mean1) / p.sd1).powi(2));
            }
            if lg.misfit_term {
                match integrate(ThetaPair::new(t0, t1), &spec.consts, &spec.tolerances) {
                    Ok(u) => {
                        let ss: f64 = data.iter().zip(&u.values).map(|(d, u)| ((d - u) / sigma_noise).powi(2)).sum();
                        value += 0.5 * dt * ss;
                    }
                    Err(_) => {
                        loss.push(None);
                        continue;
                    }
                }
            }
            loss.push(Some(value));
        }
    }
    Ok(LossGrid { theta0, theta1, loss })
}

#[derive(Debug, Clone)]
pub struct NoiseStudy {
    pub rows: Vec<NoiseRow>,
    pub scatter: Vec<ScatterRow>,
    pub reports: Vec<(usize, String, EvalReport)>,
}

impl NoiseStudy {
    pub fn report(&self, n: usize, scenario: &str) -> Option<&EvalReport> {
        self.reports.iter().find(|r| r.0 == n && r.1 == scenario).map(|r| &r.2)
    }
}

pub const SCENARIOS: [&str; 3] = ["clean/clean", "clean/noisy", "noisy/noisy"];

#[derive(Debug, Clone)]
pub struct JointStudy {
    pub rows: Vec<JointRow>,
    pub reports: Vec<(usize, FeatureKind, EvalReport)>,
}

impl JointStudy {
    pub fn report(&self, n: usize, kind: FeatureKind) -> Option<&EvalReport> {
        self.reports.iter().find(|r| r.0 == n && r.1 == kind).map(|r| &r.2)
    }

    pub fn r2(&self, n: usize, kind: FeatureKind, parameter: &str) -> Option<f64> {
        self.report(n, kind)?.coordinate(parameter)?.r2
    }
}

#[derive(Debug, Clone)]
pub struct ResimResult {
    pub rows: Vec<ResimRow>,
    pub series: Vec<Vec<ResimSeriesRow>>,
}

type ModelSlot = Arc<Mutex<Option<Arc<Fitted>>>>;

pub struct Lab {
    pub cfg: ExperimentConfig,
    spec: DataSpec,
    pool: Vec<NoiseParams>,
    raw: Mutex<HashMap<Split, Arc<Vec<RawSample>>>>,
    models: Mutex<HashMap<String, ModelSlot>>,
    pub verbose: bool,
}

impl Lab {
    pub fn new(cfg: ExperimentConfig) -> Result<Lab, ExpError> {
        cfg.validate()?;
        let spec = cfg.data_spec();
        let pool = spec.noise_pool()?;
        Ok(Lab { cfg, spec, pool, raw: Mutex::default(), models: Mutex::default(), verbose: false })
    }

    pub fn data_spec(&self) -> &DataSpec {
        &self.spec
    }

    fn log(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn seed(&self, split: Split) -> u64 {
        match split {
            Split::Train => self.cfg.seeds.train,
            Split::Valid => self.cfg.seeds.valid,
            Split::Test => self.cfg.seeds.test,
        }
    }

    /// The first `n` raw samples of `split`, each with clean and noisy series.
    pub fn raw(&self, split: Split, n: usize) -> Result<Arc<Vec<RawSample>>, ExpError> {
        let mut cache = self.raw.lock().expect("raw cache lock");
        let entry = cache.entry(split).or_insert_with(|| Arc::new(Vec::new()));
        if entry.len() < n {
            self.log(format!("simulating {:?} samples {}..{}", split, entry.len(), n));
            let mut grown = Vec::with_capacity(n);
            grown.extend_from_slice(entry);
            for i in entry.len()..n {
                grown.push(self.spec.raw_sample(self.seed(split), i, Some(&self.pool))?);
            }
            *entry = Arc::new(grown);
        }
        Ok(Arc::clone(entry))
    }

    pub fn dataset(&self, key: DataKey) -> Result<Dataset, ExpError> {
        let raw = self.raw(key.split, key.n)?;
        Ok(self.spec.assemble(self.seed(key.split), &raw[..key.n], key.kind, key.noisy, key.joint)?)
    }

    /// Fits a scaler on `train_set`, trains `arch` from `init_seed` and
    /// memoizes the result under `key` when one is given.
    pub fn fit(
        &self,
        arch: Architecture,
        train_set: &Dataset,
        valid_set: &Dataset,
        noisy: bool,
        init_seed: u64,
        key: Option<String>,
    ) -> Result<Arc<Fitted>, ExpError> {
        let run = || self.train_fresh(arch, train_set, valid_set, noisy, init_seed);
        match key {
            Some(k) => self.memo(self.full_key(arch, &k, noisy, init_seed), run),
            None => run().map(Arc::new),
        }
    }

    /// Trains on `train_key` (validated on the matching validation split) and
    /// returns the memoized model.
    pub fn fit_keyed(&self, arch: Architecture, train_key: DataKey, init_seed: u64) -> Result<Arc<Fitted>, ExpError> {
        let valid_key = DataKey { split: Split::Valid, n: self.cfg.data.n_valid, ..train_key };
        let key = format!("{}|{}", train_key.id(), valid_key.id());
        self.memo(self.full_key(arch, &key, train_key.noisy, init_seed), || {
            let tr = self.dataset(train_key)?;
            let va = self.dataset(valid_key)?;
            self.train_fresh(arch, &tr, &va, train_key.noisy, init_seed)
        })
    }

    /// Concurrent callers with the same key wait for a single training run.
    fn memo(&self, key: String, run: impl FnOnce() -> Result<Fitted, ExpError>) -> Result<Arc<Fitted>, ExpError> {
        let slot = Arc::clone(self.models.lock().expect("model cache lock").entry(key).or_default());
        let mut slot = slot.lock().expect("model slot lock");
        if let Some(f) = slot.as_ref() {
            return Ok(Arc::clone(f));
        }
        let fitted = Arc::new(run()?);
        *slot = Some(Arc::clone(&fitted));
        Ok(fitted)
    }

    fn train_fresh(
        &self,
        arch: Architecture,
        train_set: &Dataset,
        valid_set: &Dataset,
        noisy: bool,
        init_seed: u64,
    ) -> Result<Fitted, ExpError> {
        let scaler = Scaler::fit(train_set)?;
        let tr = scaler.apply(train_set)?;
        let va = scaler.apply(valid_set)?;
        let spec = arch.spec(train_set.feature_len(), train_set.target_len());
        let net = Network::init(spec, init_seed)?;
        let tcfg = self.cfg.train_config(noisy, self.cfg.seeds.shuffle);
        self.log(format!(
            "training {} ({} params) on {} samples for {} epochs",
            arch.label(),
            net.params.len(),
            tr.len(),
            tcfg.epochs
        ));
        let (net, history) = train(net, &tr, Some(&va), &tcfg)?;
        Ok(Fitted { net, scaler, history })
    }

    fn full_key(&self, arch: Architecture, key: &str, noisy: bool, init_seed: u64) -> String {
        format!("{arch:?}|{key}|noisy={noisy}|init={init_seed}|shuffle={}", self.cfg.seeds.shuffle)
    }

    fn test_key(&self, kind: FeatureKind, noisy: bool, joint: bool) -> DataKey {
        DataKey::new(Split::Test, self.cfg.data.n_test, kind, noisy, joint)
    }

    /// Noise-free training and testing with time-series features.
    pub fn baseline(&self, arch: Architecture) -> Result<EvalReport, ExpError> {
        let fitted = self.fit_keyed(arch, DataKey::new(Split::Train, self.cfg.data.n_train, FeatureKind::Time, false, false), self.cfg.seeds.weight_init)?;
        let test = self.dataset(self.test_key(FeatureKind::Time, false, false))?;
        Ok(fitted.evaluate(&test)?.0)
    }

    pub fn simulate(&self, series: &SeriesConfig) -> Result<Vec<SeriesRow>, ExpError> {
        let (clean, noisy) = observe(series, &self.spec, self.cfg.seeds.noise)?;
        Ok(clean
            .values
            .iter()
            .enumerate()
            .map(|(i, &u)| SeriesRow { t: clean.time(i), u, data: noisy.as_ref().map(|d| d[i]) })
            .collect())
    }

    pub fn loss_grid(&self, lg: &LossGridConfig) -> Result<LossGrid, ExpError> {
        let (clean, noisy) = observe(&lg.data, &self.spec, self.cfg.seeds.noise)?;
        let data = noisy.unwrap_or(clean.values);
        loss_landscape(&data, lg, &self.spec)
    }

    pub fn spike_grid(&self) -> SpikeGrid {
        let p = &self.spec.prior;
        let sg = &self.cfg.spike_grid;
        spike_grid(
            (p.lo0, p.hi0),
            (p.lo1, p.hi1),
            (sg.resolution, sg.resolution),
            &self.spec.consts,
            &self.spec.tolerances,
            sg.threshold,
        )
    }

    /// Parameters of the first `n` training samples, without simulating.
    pub fn prior_samples(&self, n: usize) -> Result<Vec<ThetaRow>, ExpError> {
        (0..n)
            .map(|i| {
                let mut rng = RngStream::new(self.cfg.seeds.train, i as u64).rng();
                let t = sample_theta(&mut rng, &self.spec.prior)?;
                Ok(ThetaRow { theta0: t.theta0, theta1: t.theta1 })
            })
            .collect()
    }

    pub fn sweep(&self, family: Family) -> Result<Vec<SweepRow>, ExpError> {
        let hash = self.cfg.hash();
        let seed = self.cfg.seeds.weight_init;
        self.cfg
            .sweep
            .grid(family)
            .into_iter()
            .map(|arch| {
                let params = crate::nn::param_count(&arch.spec(self.spec.consts.n_steps()?, 2)).unwrap_or(0);
                let row = |status: String, s: Option<Scores>| SweepRow {
                    family: family.name().into(),
                    depth: arch.depth,
                    width: arch.width,
                    params,
                    status,
                    squared_bias: s.map(|s| s.squared_bias),
                    c_mse: s.map(|s| s.c_mse),
                    median_ape: s.map(|s| s.median_ape),
                    r2: s.map(|s| s.r2),
                    config_hash: hash.clone(),
                    seed,
                };
                Ok(match self.baseline(arch) {
                    Ok(r) => row("ok".into(), Some(Scores::from(&r))),
                    Err(e @ (ExpError::Nn(_) | ExpError::Metrics(_))) => row(format!("failed: {e}"), None),
                    Err(e) => return Err(e),
                })
            })
            .collect()
    }

    pub fn noise_study(&self, family: Family) -> Result<NoiseStudy, ExpError> {
        let arch = self.cfg.network.architecture(family);
        let hash = self.cfg.hash();
        let seed = self.cfg.seeds.weight_init;
        let test_clean = self.dataset(self.test_key(FeatureKind::Time, false, false))?;
        let test_noisy = self.dataset(self.test_key(FeatureKind::Time, true, false))?;
        let mut study = NoiseStudy { rows: Vec::new(), scatter: Vec::new(), reports: Vec::new() };
        for &n in &self.cfg.noise_study.sizes {
            let clean = self.fit_keyed(arch, DataKey::new(Split::Train, n, FeatureKind::Time, false, false), seed)?;
            let noisy = self.fit_keyed(arch, DataKey::new(Split::Train, n, FeatureKind::Time, true, false), seed)?;
            for (scenario, model, test) in [
                (SCENARIOS[0], &clean, &test_clean),
                (SCENARIOS[1], &clean, &test_noisy),
                (SCENARIOS[2], &noisy, &test_noisy),
            ] {
                let (report, pred) = model.evaluate(test)?;
                study.rows.push(NoiseRow {
                    family: family.name().into(),
                    n_train: n,
                    scenario: scenario.into(),
                    squared_bias: report.squared_bias,
                    c_mse: report.c_mse,
                    median_ape: report.median_ape,
                    r2: report.r2,
                    config_hash: hash.clone(),
                    seed,
                });
                let names = coordinate_names(test.target_len());
                for (i, (s, p)) in test.samples.iter().zip(&pred).enumerate() {
                    for (c, name) in names.iter().enumerate() {
                        study.scatter.push(ScatterRow {
                            n_train: n,
                            scenario: scenario.into(),
                            sample: i,
                            coord: name.clone(),
                            truth: s.target[c],
                            prediction: p[c],
                        });
                    }
                }
                study.reports.push((n, scenario.into(), report));
            }
        }
        Ok(study)
    }

    /// Trains on the two halves of each training series and tests on
    /// windows of the test series.
    pub fn window_study(&self, family: Family, kinds: &[FeatureKind]) -> Result<Vec<(WindowRow, EvalReport)>, ExpError> {
        let arch = self.cfg.network.architecture(family);
        let seed = self.cfg.seeds.weight_init;
        let d = &self.cfg.data;
        let train_time = split_halves(&self.dataset(DataKey::new(Split::Train, d.n_train, FeatureKind::Time, false, false))?)?;
        let valid_time = split_halves(&self.dataset(DataKey::new(Split::Valid, d.n_valid, FeatureKind::Time, false, false))?)?;
        let test_time = extract_windows(&self.dataset(self.test_key(FeatureKind::Time, false, false))?, &d.windows)?;
        let mut out = Vec::new();
        for &kind in kinds {
            let tr = convert_features(&train_time, kind)?;
            let va = convert_features(&valid_time, kind)?;
            let te = convert_features(&test_time, kind)?;
            let key = format!("halves-{}-n{}|valid-halves-n{}|{:?}", kind.name(), d.n_train, d.n_valid, d.windows);
            let fitted = self.fit(arch, &tr, &va, false, seed, Some(key))?;
            let (report, _) = fitted.evaluate(&te)?;
            out.push((
                WindowRow {
                    family: family.name().into(),
                    data_type: kind.name().into(),
                    n_train: tr.len(),
                    n_test: te.len(),
                    squared_bias: report.squared_bias,
                    c_mse: report.c_mse,
                    median_ape: report.median_ape,
                    r2: report.r2,
                    config_hash: self.cfg.hash(),
                    seed,
                },
                report,
            ));
        }
        Ok(out)
    }

    /// Noisy data with targets `(theta0, theta1, sigma, rho)`.
    pub fn joint(&self, sizes: &[usize], kinds: &[FeatureKind]) -> Result<JointStudy, ExpError> {
        let arch = self.cfg.network.architecture(Family::Cnn);
        let seed = self.cfg.seeds.weight_init;
        let mut study = JointStudy { rows: Vec::new(), reports: Vec::new() };
        for &n in sizes {
            for &kind in kinds {
                let fitted = self.fit_keyed(arch, DataKey::new(Split::Train, n, kind, true, true), seed)?;
                let (report, _) = fitted.evaluate(&self.dataset(self.test_key(kind, true, true))?)?;
                for c in &report.per_coordinate {
                    study.rows.push(JointRow {
                        n_train: n,
                        data_type: kind.name().into(),
                        parameter: c.name.clone(),
                        median_ape: c.median_ape,
                        r2: c.r2,
                        config_hash: self.cfg.hash(),
                        seed,
                    });
                }
                study.reports.push((n, kind, report));
            }
        }
        Ok(study)
    }

    /// Re-simulates the test samples whose parameter error sits at the given
    /// percentiles. `test` must carry time-series features in original units.
    pub fn resimulate(
        &self,
        fitted: &Fitted,
        test: &Dataset,
        percentiles: &[f64],
        scenario: &str,
    ) -> Result<ResimResult, ExpError> {
        if test.feature_kind != FeatureKind::Time || test.scaler.is_some() {
            return Err(ExpError::Config("re-simulation needs unscaled time-series test data".into()));
        }
        let pred = fitted.predict(test)?;
        let truth = test.targets();
        let mse: Vec<f64> = truth
            .iter()
            .zip(&pred)
            .map(|(t, p)| t.iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / t.len() as f64)
            .collect();
        let picks = percentile_indices(&mse, percentiles);
        let mut result = ResimResult { rows: Vec::new(), series: Vec::new() };
        for (&pct, &i) in percentiles.iter().zip(&picks) {
            let sample = &test.samples[i];
            let theta_hat = ThetaPair::new(pred[i][0], pred[i][1]);
            let clean = integrate(sample.meta.theta, &self.spec.consts, &self.spec.tolerances)?;
            let (status, ts, series) = match integrate(theta_hat, &self.spec.consts, &self.spec.tolerances) {
                Ok(sim) => {
                    let data: Vec<Vec<f64>> = sample.features.iter().map(|&x| vec![x]).collect();
                    let simulated: Vec<Vec<f64>> = sim.values.iter().map(|&x| vec![x]).collect();
                    let d = mse_decompose(&data, &simulated)?[0];
                    let rows = (0..sim.len())
                        .map(|k| ResimSeriesRow {
                            t: sim.time(k),
                            data: sample.features[k],
                            clean: clean.values[k],
                            simulated: sim.values[k],
                        })
                        .collect();
                    ("ok".to_string(), Some(d), rows)
                }
                Err(e) => (format!("failed: {e}"), None, Vec::new()),
            };
            result.rows.push(ResimRow {
                scenario: scenario.into(),
                percentile: pct,
                sample: i,
                param_mse: mse[i],
                theta0: sample.meta.theta.theta0,
                theta1: sample.meta.theta.theta1,
                theta0_pred: theta_hat.theta0,
                theta1_pred: theta_hat.theta1,
                status,
                ts_squared_bias: ts.map(|d| d.squared_bias),
                ts_c_mse: ts.map(|d| d.c_mse),
                config_hash: self.cfg.hash(),
                seed: self.cfg.seeds.weight_init,
            });
            result.series.push(series);
        }
        Ok(result)
    }

    /// Re-simulation for the three noise scenarios with the configured network.
    pub fn resimulate_study(&self) -> Result<ResimResult, ExpError> {
        let arch = self.cfg.network.selected();
        let n = self.cfg.resimulate.n_train;
        let seed = self.cfg.seeds.weight_init;
        let clean = self.fit_keyed(arch, DataKey::new(Split::Train, n, FeatureKind::Time, false, false), seed)?;
        let noisy = self.fit_keyed(arch, DataKey::new(Split::Train, n, FeatureKind::Time, true, false), seed)?;
        let test_clean = self.dataset(self.test_key(FeatureKind::Time, false, false))?;
        let test_noisy = self.dataset(self.test_key(FeatureKind::Time, true, false))?;
        let pct = &self.cfg.resimulate.percentiles;
        let mut all = ResimResult { rows: Vec::new(), series: Vec::new() };
        for (scenario, model, test) in [
            (SCENARIOS[0], &clean, &test_clean),
            (SCENARIOS[1], &clean, &test_noisy),
            (SCENARIOS[2], &noisy, &test_noisy),
        ] {
            let r = self.resimulate(model, test, pct, scenario)?;
            all.rows.extend(r.rows);
            all.series.extend(r.series);
        }
        Ok(all)
    }

    /// k-fold cross-validation on the noise-free training set, repeated for
    /// every configured weight-initialization seed.
    pub fn crossval(&self, family: Family) -> Result<(Vec<CrossvalRow>, Vec<CrossvalFoldRow>), ExpError> {
        let arch = self.cfg.network.architecture(family);
        let cv = &self.cfg.crossval;
        let data = self.dataset(DataKey::new(Split::Train, self.cfg.data.n_train, FeatureKind::Time, false, false))?;
        let plan = crate::metrics::kfold(data.len(), cv.k, self.cfg.seeds.kfold)?;
        let hash = self.cfg.hash();
        let mut summary = Vec::new();
        let mut folds = Vec::new();
        for &init in &cv.init_seeds {
            let mut scores = Vec::new();
            for f in 0..cv.k {
                let tr = data.select(&plan.train_indices(f));
                let te = data.select(&plan.test_indices(f));
                // The held-out fold only feeds the logged validation loss.
                let fitted = self.fit(arch, &tr, &te, false, init, None)?;
                let (report, _) = fitted.evaluate(&te)?;
                let s = Scores::from(&report);
                folds.push(CrossvalFoldRow {
                    family: family.name().into(),
                    init_seed: init,
                    fold: f,
                    n_train: tr.len(),
                    n_test: te.len(),
                    squared_bias: s.squared_bias,
                    c_mse: s.c_mse,
                    median_ape: s.median_ape,
                    r2: s.r2,
                    config_hash: hash.clone(),
                });
                scores.push(s);
            }
            let stat = |g: fn(&Scores) -> f64| MeanStd::of(&scores.iter().map(g).collect::<Vec<_>>());
            let (b, c, m, r) = (stat(|s| s.squared_bias), stat(|s| s.c_mse), stat(|s| s.median_ape), stat(|s| s.r2));
            summary.push(CrossvalRow {
                family: family.name().into(),
                init_seed: init,
                folds: cv.k,
                squared_bias_mean: b.mean,
                squared_bias_std: b.std,
                c_mse_mean: c.mean,
                c_mse_std: c.std,
                median_ape_mean: m.mean,
                median_ape_std: m.std,
                r2_mean: r.mean,
                r2_std: r.std,
                config_hash: hash.clone(),
            });
        }
        Ok((summary, folds))
    }
}

/// Nearest-rank selection: the sample at sorted position
/// `round(p / 100 * (n - 1))` for each percentile `p`.
pub fn percentile_indices(values: &[f64], percentiles: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    percentiles
        .iter()
        .map(|p| order[((p / 100.0) * (values.len() - 1) as f64).round() as usize])
        .collect()
}
