//! `fhn-infer`: simulation, dataset generation, training and the experiment
//! studies, driven by one TOML configuration.
//!
//! Exit status is 0 on success, 1 on a configuration error and 2 on a runtime
//! failure.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use fhn_core::dataset::{load_dataset, save_dataset, write_dataset_csv, FeatureKind};
use fhn_core::experiments::config::{Architecture, ExperimentConfig, Family};
use fhn_core::experiments::output::{write_csv, RunDir, SpikeRow};
use fhn_core::experiments::{DataKey, ExpError, Fitted, Lab, Split};
use fhn_core::nn::write_history_csv;

#[derive(Debug, Parser)]
#[command(name = "fhn-infer", version, about = "Parameter inference for the FitzHugh-Nagumo model with neural networks")]
struct Cli {
    /// TOML configuration; missing keys take their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override one configuration key, e.g. `--set data.n_train=500`.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,

    /// Root of the run directories.
    #[arg(long, global = true, value_name = "DIR")]
    output_dir: Option<String>,

    /// Suppress progress messages.
    #[arg(long, short, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Valid,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Valid => Split::Valid,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Args)]
struct FamilyArg {
    /// `dense` or `cnn`; defaults to `network.family`.
    #[arg(long)]
    family: Option<Family>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Integrate one parameter pair and write the series as CSV.
    Simulate {
        #[arg(long)]
        theta0: Option<f64>,
        #[arg(long)]
        theta1: Option<f64>,
        /// Add AR(1) observation noise.
        #[arg(long)]
        noise: bool,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long)]
        t_end: Option<f64>,
        #[arg(long)]
        dt_out: Option<f64>,
        /// Output file, `-` for stdout; defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate a dataset split and save it in the binary dataset format.
    GenData {
        #[arg(long, value_enum)]
        split: SplitArg,
        #[arg(long)]
        n: Option<usize>,
        /// `time`, `fourier` or `time_and_fourier`.
        #[arg(long)]
        features: Option<FeatureKind>,
        #[arg(long)]
        noisy: bool,
        /// Targets include the noise parameters (sigma, rho).
        #[arg(long)]
        joint: bool,
        #[arg(long)]
        out: PathBuf,
        /// Also write the dataset as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Train a network on saved datasets.
    Train {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        valid: PathBuf,
        #[command(flatten)]
        family: FamilyArg,
        /// Hidden dense layers or conv blocks.
        #[arg(long)]
        depth: Option<usize>,
        /// Units per dense layer or base filter count.
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Weight-initialization seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch losses as CSV.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Evaluate a saved model on a saved dataset and print a JSON report.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Architecture sweep on noise-free data.
    Sweep(FamilyArg),
    /// Clean and noisy training and testing over the configured sizes.
    NoiseStudy(FamilyArg),
    /// Training on half series and testing on windows.
    WindowStudy(FamilyArg),
    /// Joint estimation of model and noise parameters.
    Joint,
    /// Re-simulate test samples at selected parameter-error percentiles.
    Resimulate {
        /// Use a saved model instead of the three noise scenarios.
        #[arg(long, requires = "data")]
        model: Option<PathBuf>,
        /// Saved time-series test dataset for `--model`.
        #[arg(long, requires = "model")]
        data: Option<PathBuf>,
    },
    /// k-fold cross-validation over weight-initialization seeds.
    Crossval {
        #[command(flatten)]
        family: FamilyArg,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Spike count, rate and duration over the prior box.
    SpikeGrid {
        #[arg(long)]
        resolution: Option<usize>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Negative log posterior of one observed series over the prior box.
    LossGrid {
        #[arg(long)]
        resolution: Option<usize>,
        #[arg(long)]
        no_prior: bool,
        #[arg(long)]
        no_misfit: bool,
        /// Use the noise-free series as data.
        #[arg(long)]
        clean: bool,
    },
}

#[derive(Debug)]
enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<ExpError> for Failure {
    fn from(e: ExpError) -> Self {
        if e.is_config() {
            Failure::Config(e.into())
        } else {
            Failure::Runtime(e.into())
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn config_error(e: impl std::fmt::Display) -> Failure {
    Failure::Config(anyhow!("{e}"))
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), Failure> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| config_error(format!("empty key in '{key}'")))?;
    let mut node = table;
    for p in parts {
        node = node
            .entry(p)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| config_error(format!("'{p}' in '{key}' is not a section")))?;
    }
    node.insert(last.into(), value);
    Ok(())
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let text = match &cli.config {
        Some(p) => fs::read_to_string(p).map_err(|e| config_error(format!("cannot read {}: {e}", p.display())))?,
        None => String::new(),
    };
    let mut table: toml::Table = text.parse().map_err(config_error)?;
    for o in &cli.overrides {
        let (key, raw) = o.split_once('=').ok_or_else(|| config_error(format!("override '{o}' is not KEY=VALUE")))?;
        // Bare words that are not TOML literals are taken as strings.
        let value = format!("v = {raw}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.into()));
        set_dotted(&mut table, key.trim(), value)?;
    }
    if let Some(dir) = &cli.output_dir {
        table.insert("output_dir".into(), toml::Value::String(dir.clone()));
    }
    Ok(ExperimentConfig::from_toml(&toml::to_string(&table).map_err(config_error)?)?)
}

fn family_or_default(cfg: &ExperimentConfig, f: &FamilyArg) -> Family {
    f.family.unwrap_or(cfg.network.family)
}

fn lab(cfg: ExperimentConfig, quiet: bool) -> Result<Lab, Failure> {
    let mut lab = Lab::new(cfg)?;
    lab.verbose = !quiet;
    Ok(lab)
}

fn finish(run: RunDir, cfg: &ExperimentConfig, quiet: bool) -> Result<(), Failure> {
    let dir = run.path.clone();
    run.finish(cfg)?;
    if !quiet {
        eprintln!("wrote {}", dir.display());
    }
    Ok(())
}

fn series_file_name(scenario: &str, percentile: f64) -> String {
    format!("series_{}_p{percentile}.csv", scenario.replace('/', "-"))
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = load_config(&cli)?;
    let quiet = cli.quiet;
    match &cli.command {
        Command::Simulate { theta0, theta1, noise, sigma, rho, t_end, dt_out, out } => {
            let s = &mut cfg.simulate;
            s.theta0 = theta0.unwrap_or(s.theta0);
            s.theta1 = theta1.unwrap_or(s.theta1);
            s.with_noise |= *noise;
            s.sigma = sigma.unwrap_or(s.sigma);
            s.rho = rho.unwrap_or(s.rho);
            cfg.sim.t_end = t_end.unwrap_or(cfg.sim.t_end);
            cfg.sim.dt_out = dt_out.unwrap_or(cfg.sim.dt_out);
            let lab = lab(cfg.clone(), quiet)?;
            let rows = lab.simulate(&cfg.simulate)?;
            match out.as_deref() {
                Some(p) if p == Path::new("-") => {
                    let mut w = csv::Writer::from_writer(io::stdout().lock());
                    for r in &rows {
                        w.serialize(r).context("writing series")?;
                    }
                    w.flush().context("writing series")?;
                }
                Some(p) => write_csv(p, &rows)?,
                None => {
                    let mut run = RunDir::create(&cfg, "simulate")?;
                    run.write_csv("series.csv", &rows)?;
                    finish(run, &cfg, quiet)?;
                }
            }
        }
        Command::GenData { split, n, features, noisy, joint, out, csv } => {
            let split = Split::from(*split);
            let n = n.unwrap_or(match split {
                Split::Train => cfg.data.n_train,
                Split::Valid => cfg.data.n_valid,
                Split::Test => cfg.data.n_test,
            });
            if n == 0 {
                return Err(config_error("--n must be positive"));
            }
            let kind = features.unwrap_or(cfg.data.feature_kind);
            let data = lab(cfg, quiet)?.dataset(DataKey::new(split, n, kind, *noisy, *joint))?;
            save_dataset(out, &data).map_err(ExpError::from)?;
            if let Some(p) = csv {
                let mut w = BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?);
                write_dataset_csv(&mut w, &data).map_err(ExpError::from)?;
                w.flush().context("writing dataset CSV")?;
            }
        }
        Command::Train { train, valid, family, depth, width, epochs, seed, out, history } => {
            let base = cfg.network.architecture(family_or_default(&cfg, family));
            let arch = Architecture { depth: depth.unwrap_or(base.depth), width: width.unwrap_or(base.width), ..base };
            if arch.depth == 0 || arch.width == 0 {
                return Err(config_error("--depth and --width must be positive"));
            }
            if let Some(e) = epochs {
                cfg.train.epochs_clean = *e;
                cfg.train.epochs_noisy = *e;
            }
            let seed = seed.unwrap_or(cfg.seeds.weight_init);
            let tr = load_dataset(train).map_err(ExpError::from)?;
            let va = load_dataset(valid).map_err(ExpError::from)?;
            let fitted = lab(cfg, quiet)?.fit(arch, &tr, &va, tr.noise_applied, seed, None)?;
            fitted.save(out)?;
            if let Some(p) = history {
                let mut w = BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?);
                write_history_csv(&mut w, &fitted.history).context("writing history")?;
                w.flush().context("writing history")?;
            }
        }
        Command::Evaluate { model, data, out } => {
            let fitted = Fitted::load(model)?;
            let ds = load_dataset(data).map_err(ExpError::from)?;
            let (report, _) = fitted.evaluate(&ds)?;
            let report = report.with_ids(data.display().to_string(), model.display().to_string());
            let mut text = serde_json::to_string_pretty(&report).context("serializing report")?;
            text.push('\n');
            match out {
                Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
                None => io::stdout().write_all(text.as_bytes()).context("writing report")?,
            }
        }
        Command::Sweep(f) => {
            let family = family_or_default(&cfg, f);
            let rows = lab(cfg.clone(), quiet)?.sweep(family)?;
            let mut run = RunDir::create(&cfg, &format!("sweep-{}", family.name()))?;
            run.write_csv("table.csv", &rows)?;
            finish(run, &cfg, quiet)?;
        }
        Command::NoiseStudy(f) => {
            let family = family_or_default(&cfg, f);
            let study = lab(cfg.clone(), quiet)?.noise_study(family)?;
            let mut run = RunDir::create(&cfg, &format!("noise-study-{}", family.name()))?;
            run.write_csv("table.csv", &study.rows)?;
            run.write_csv("scatter.csv", &study.scatter)?;
            finish(run, &cfg, quiet)?;
        }
        Command::WindowStudy(f) => {
            let family = family_or_default(&cfg, f);
            let kinds = cfg.window_study.feature_kinds.clone();
            let rows: Vec<_> = lab(cfg.clone(), quiet)?.window_study(family, &kinds)?.into_iter().map(|r| r.0).collect();
            let mut run = RunDir::create(&cfg, &format!("window-study-{}", family.name()))?;
            run.write_csv("table.csv", &rows)?;
            finish(run, &cfg, quiet)?;
        }
        Command::Joint => {
            let study = lab(cfg.clone(), quiet)?.joint(&cfg.joint.sizes, &cfg.joint.feature_kinds)?;
            let mut run = RunDir::create(&cfg, "joint")?;
            run.write_csv("table.csv", &study.rows)?;
            finish(run, &cfg, quiet)?;
        }
        Command::Resimulate { model, data } => {
            let lab = lab(cfg.clone(), quiet)?;
            let result = match (model, data) {
                (Some(m), Some(d)) => {
                    let fitted = Fitted::load(m)?;
                    let ds = load_dataset(d).map_err(ExpError::from)?;
                    lab.resimulate(&fitted, &ds, &cfg.resimulate.percentiles, "custom")?
                }
                _ => lab.resimulate_study()?,
            };
            let mut run = RunDir::create(&cfg, "resimulate")?;
            run.write_csv("table.csv", &result.rows)?;
            for (row, series) in result.rows.iter().zip(&result.series) {
                if !series.is_empty() {
                    run.write_csv(&series_file_name(&row.scenario, row.percentile), series)?;
                }
            }
            finish(run, &cfg, quiet)?;
        }
        Command::Crossval { family, k } => {
            cfg.crossval.k = k.unwrap_or(cfg.crossval.k);
            cfg.validate()?;
            let family = family_or_default(&cfg, family);
            let (summary, folds) = lab(cfg.clone(), quiet)?.crossval(family)?;
            let mut run = RunDir::create(&cfg, &format!("crossval-{}", family.name()))?;
            run.write_csv("table.csv", &summary)?;
            run.write_csv("folds.csv", &folds)?;
            finish(run, &cfg, quiet)?;
        }
        Command::SpikeGrid { resolution, threshold } => {
            cfg.spike_grid.resolution = resolution.unwrap_or(cfg.spike_grid.resolution);
            cfg.spike_grid.threshold = threshold.unwrap_or(cfg.spike_grid.threshold);
            cfg.validate()?;
            let lab = lab(cfg.clone(), quiet)?;
            let grid = lab.spike_grid();
            let rows: Vec<SpikeRow> = grid.cells.iter().map(SpikeRow::from).collect();
            let samples = lab.prior_samples(cfg.spike_grid.prior_samples)?;
            let mut run = RunDir::create(&cfg, "spike-grid")?;
            run.write_csv("raster.csv", &rows)?;
            run.write_csv("prior_samples.csv", &samples)?;
            finish(run, &cfg, quiet)?;
        }
        Command::LossGrid { resolution, no_prior, no_misfit, clean } => {
            let lg = &mut cfg.loss_grid;
            lg.resolution = resolution.unwrap_or(lg.resolution);
            lg.prior_term &= !no_prior;
            lg.misfit_term &= !no_misfit;
            lg.data.with_noise &= !clean;
            cfg.validate()?;
            let grid = lab(cfg.clone(), quiet)?.loss_grid(&cfg.loss_grid)?;
            let mut run = RunDir::create(&cfg, "loss-grid")?;
            run.write_csv("grid.csv", &grid.rows())?;
            finish(run, &cfg, quiet)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
