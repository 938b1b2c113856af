//! Reproducible sampling: parameter priors, noise priors and AR(1) noise paths.
//!
//! All randomness flows through [`StreamRng`], a ChaCha8 generator keyed by a
//! 64-bit seed with a 64-bit stream selector. A `(seed, stream_id)` pair always
//! yields the same sequence, and distinct stream ids are independent, so
//! per-sample substreams can be consumed in any order.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::fhn::ThetaPair;

pub const MAX_REJECTIONS: usize = 10_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SampleError {
    #[error("prior rejected {0} consecutive draws")]
    RejectionExhausted(usize),
    #[error("invalid prior: {0}")]
    InvalidPrior(String),
}

/// Identifies a reproducible random substream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self { seed, stream_id }
    }

    pub fn rng(self) -> StreamRng {
        StreamRng::new(self)
    }
}

/// Stream-id namespaces. The top byte keeps unrelated consumers of one seed apart.
pub mod domain {
    pub const SAMPLE: u64 = 0;
    pub const NOISE_POOL: u64 = 1 << 56;
    pub const WEIGHT_INIT: u64 = 2 << 56;
    pub const SHUFFLE: u64 = 3 << 56;
    pub const KFOLD: u64 = 4 << 56;
    pub const MISC: u64 = 5 << 56;
}

pub struct StreamRng {
    inner: ChaCha8Rng,
}

impl StreamRng {
    pub fn new(stream: RngStream) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(stream.seed);
        inner.set_stream(stream.stream_id);
        Self { inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on the open interval (0, 1), 53-bit resolution.
    pub fn uniform_open(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        let u = (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        lo + (hi - lo) * u
    }

    /// Standard normal variate by inverse-CDF transform.
    pub fn standard_normal(&mut self) -> f64 {
        let u = self.uniform_open();
        standard_normal().inverse_cdf(u)
    }

    pub fn normal(&mut self, mean: f64, sd: f64) -> f64 {
        mean + sd * self.standard_normal()
    }

    /// Uniform integer in `0..n` (Lemire-style rejection, unbiased).
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        let zone = u64::MAX - (u64::MAX - n + 1) % n;
        loop {
            let x = self.next_u64();
            if x <= zone {
                return x % n;
            }
        }
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

fn standard_normal() -> Normal {
    Normal::standard()
}

/// Independent Gaussian prior on each ODE parameter, truncated by rejection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorSpec {
    pub mean0: f64,
    pub sd0: f64,
    pub lo0: f64,
    pub hi0: f64,
    pub mean1: f64,
    pub sd1: f64,
    pub lo1: f64,
    pub hi1: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self {
            mean0: 0.4,
            sd0: 0.3,
            lo0: -0.2,
            hi0: 1.0,
            mean1: 0.4,
            sd1: 0.4,
            lo1: -0.4,
            hi1: 1.2,
        }
    }
}

impl PriorSpec {
    pub fn validate(&self) -> Result<(), SampleError> {
        if !(self.sd0 > 0.0 && self.sd1 > 0.0) {
            return Err(SampleError::InvalidPrior("prior sd must be positive".into()));
        }
        if !(self.lo0 < self.hi0 && self.lo1 < self.hi1) {
            return Err(SampleError::InvalidPrior("prior bounds must satisfy lo < hi".into()));
        }
        Ok(())
    }

    pub fn contains(&self, theta: ThetaPair) -> bool {
        (self.lo0..=self.hi0).contains(&theta.theta0) && (self.lo1..=self.hi1).contains(&theta.theta1)
    }

    pub fn mean(&self) -> ThetaPair {
        ThetaPair::new(self.mean0, self.mean1)
    }
}

/// Draws both components and redraws the pair until it lies inside the bounds.
pub fn sample_theta(rng: &mut StreamRng, prior: &PriorSpec) -> Result<ThetaPair, SampleError> {
    prior.validate()?;
    for _ in 0..MAX_REJECTIONS {
        let theta = ThetaPair::new(rng.normal(prior.mean0, prior.sd0), rng.normal(prior.mean1, prior.sd1));
        if prior.contains(theta) {
            return Ok(theta);
        }
    }
    Err(SampleError::RejectionExhausted(MAX_REJECTIONS))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoisePrior {
    pub mean_sigma: f64,
    pub sd_sigma: f64,
    pub mean_rho: f64,
    pub sd_rho: f64,
}

impl Default for NoisePrior {
    fn default() -> Self {
        Self {
            mean_sigma: 0.07,
            sd_sigma: 0.01,
            mean_rho: 0.8,
            sd_rho: 0.05,
        }
    }
}

/// Parameters of the AR(1) observation noise. The stationary standard
/// deviation of the process is `sigma / dt`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    pub sigma: f64,
    pub rho: f64,
}

impl NoiseParams {
    pub fn new(sigma: f64, rho: f64) -> Self {
        Self { sigma, rho }
    }

    pub fn stationary_sd(&self, dt: f64) -> f64 {
        self.sigma / dt
    }
}

pub fn sample_noise_params(rng: &mut StreamRng, prior: &NoisePrior) -> Result<NoiseParams, SampleError> {
    if !(prior.sd_sigma > 0.0 && prior.sd_rho > 0.0) {
        return Err(SampleError::InvalidPrior("noise prior sd must be positive".into()));
    }
    let sigma = redraw_until(rng, prior.mean_sigma, prior.sd_sigma, |s| s > 0.0)?;
    let rho = redraw_until(rng, prior.mean_rho, prior.sd_rho, |r| r.abs() < 1.0)?;
    Ok(NoiseParams { sigma, rho })
}

fn redraw_until(
    rng: &mut StreamRng,
    mean: f64,
    sd: f64,
    accept: impl Fn(f64) -> bool,
) -> Result<f64, SampleError> {
    for _ in 0..MAX_REJECTIONS {
        let x = rng.normal(mean, sd);
        if accept(x) {
            return Ok(x);
        }
    }
    Err(SampleError::RejectionExhausted(MAX_REJECTIONS))
}

/// A fixed pool of noise parameters shared by every dataset built from the
/// same pool seed; sample `i` uses entry `i % len`.
pub fn noise_pool(seed: u64, prior: &NoisePrior, size: usize) -> Result<Vec<NoiseParams>, SampleError> {
    let mut rng = RngStream::new(seed, domain::NOISE_POOL).rng();
    (0..size).map(|_| sample_noise_params(&mut rng, prior)).collect()
}

/// First-order autoregressive path with stationary variance `(sigma/dt)^2`.
pub fn ar1_path(rng: &mut StreamRng, params: NoiseParams, dt: f64, n: usize) -> Vec<f64> {
    let sd = params.stationary_sd(dt);
    let innovation_sd = sd * (1.0 - params.rho * params.rho).sqrt();
    let mut path = Vec::with_capacity(n);
    if n == 0 {
        return path;
    }
    let mut eta = sd * rng.standard_normal();
    path.push(eta);
    for _ in 1..n {
        eta = params.rho * eta + innovation_sd * rng.standard_normal();
        path.push(eta);
    }
    path
}
