//! FitzHugh-Nagumo forward model.
//!
//! The system integrated here is
//!
//! ```text
//!   du/dt =  gamma * (u - u^3/3 + v + zeta)
//!   dv/dt = -(u - theta0 + theta1 * v) / gamma
//! ```
//!
//! with an adaptive Bogacki-Shampine 3(2) pair. Only the membrane potential
//! `u` is reported, sampled on the uniform grid `t_i = i * dt_out`,
//! `i = 1..=N_t`, by cubic Hermite interpolation between accepted steps.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("step size underflow at t = {t}: h = {h:e} is below the floor {min_step:e}")]
    StepSizeUnderflow { t: f64, h: f64, min_step: f64 },
    #[error("non-finite state at t = {t}")]
    NonFiniteState { t: f64 },
    #[error("invalid simulation constants: {0}")]
    InvalidConstants(String),
}

/// The two inferred ODE parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThetaPair {
    pub theta0: f64,
    pub theta1: f64,
}

impl ThetaPair {
    pub fn new(theta0: f64, theta1: f64) -> Self {
        Self { theta0, theta1 }
    }

    pub fn is_finite(&self) -> bool {
        self.theta0.is_finite() && self.theta1.is_finite()
    }
}

/// Known constants of the model and of the output grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConstants {
    /// Damping strength.
    pub gamma: f64,
    /// Total membrane current.
    pub zeta: f64,
    pub u0: f64,
    pub v0: f64,
    /// Simulated time span in milliseconds.
    pub t_end: f64,
    /// Uniform output step in milliseconds.
    pub dt_out: f64,
}

impl Default for SimConstants {
    fn default() -> Self {
        Self {
            gamma: 3.0,
            zeta: -0.4,
            u0: 0.0,
            v0: 0.0,
            t_end: 200.0,
            dt_out: 0.2,
        }
    }
}

impl SimConstants {
    /// Number of output points, `t_end / dt_out`.
    pub fn n_steps(&self) -> Result<usize, SimError> {
        if !(self.gamma != 0.0 && self.gamma.is_finite()) {
            return Err(SimError::InvalidConstants("gamma must be finite and non-zero".into()));
        }
        if !(self.t_end > 0.0 && self.dt_out > 0.0) || !self.t_end.is_finite() {
            return Err(SimError::InvalidConstants("t_end and dt_out must be positive".into()));
        }
        let ratio = self.t_end / self.dt_out;
        let n = ratio.round();
        if n < 1.0 || (ratio - n).abs() > 1e-9 * ratio.max(1.0) {
            return Err(SimError::InvalidConstants(format!(
                "t_end / dt_out = {ratio} is not a positive integer"
            )));
        }
        Ok(n as usize)
    }

    /// Output grid times `i * dt_out` for `i = 1..=N_t`.
    pub fn output_times(&self) -> Result<Vec<f64>, SimError> {
        let n = self.n_steps()?;
        Ok((1..=n).map(|i| i as f64 * self.dt_out).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct State {
    pub u: f64,
    pub v: f64,
}

impl State {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    fn is_finite(&self) -> bool {
        self.u.is_finite() && self.v.is_finite()
    }
}

/// Step-size controller settings for [`integrate`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    pub rtol: f64,
    pub atol: f64,
    /// Smallest admissible step before giving up.
    pub min_step: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            rtol: 1e-8,
            atol: 1e-11,
            min_step: 1e-10,
        }
    }
}

impl Tolerances {
    pub fn new(rtol: f64, atol: f64) -> Self {
        Self {
            rtol,
            atol,
            ..Self::default()
        }
    }
}

/// Membrane potential sampled at `t_i = i * dt`, `i = 1..=len`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    pub dt: f64,
    pub values: Vec<f64>,
}

impl TimeSeries {
    pub fn new(dt: f64, values: Vec<f64>) -> Self {
        Self { dt, values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn time(&self, i: usize) -> f64 {
        (i + 1) as f64 * self.dt
    }
}

pub fn fhn_rhs(state: State, theta: ThetaPair, consts: &SimConstants) -> State {
    let State { u, v } = state;
    State {
        u: consts.gamma * (u - u * u * u / 3.0 + v + consts.zeta),
        v: -(u - theta.theta0 + theta.theta1 * v) / consts.gamma,
    }
}

// Bogacki-Shampine coefficients.
const C2: f64 = 1.0 / 2.0;
const C3: f64 = 3.0 / 4.0;
const B1: f64 = 2.0 / 9.0;
const B2: f64 = 1.0 / 3.0;
const B3: f64 = 4.0 / 9.0;
// Difference between the third- and embedded second-order solutions.
const E1: f64 = 5.0 / 72.0;
const E2: f64 = -1.0 / 12.0;
const E3: f64 = -1.0 / 9.0;
const E4: f64 = 1.0 / 8.0;

const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 10.0;
const ERROR_EXPONENT: f64 = -1.0 / 3.0;

fn rms_norm(a: f64, b: f64) -> f64 {
    ((a * a + b * b) / 2.0).sqrt()
}

fn initial_step(y0: State, f0: State, theta: ThetaPair, consts: &SimConstants, tol: &Tolerances) -> f64 {
    let su = tol.atol + y0.u.abs() * tol.rtol;
    let sv = tol.atol + y0.v.abs() * tol.rtol;
    let d0 = rms_norm(y0.u / su, y0.v / sv);
    let d1 = rms_norm(f0.u / su, f0.v / sv);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let y1 = State::new(y0.u + h0 * f0.u, y0.v + h0 * f0.v);
    let f1 = fhn_rhs(y1, theta, consts);
    let d2 = rms_norm((f1.u - f0.u) / su, (f1.v - f0.v) / sv) / h0;
    let h1 = if d1 <= 1e-15 && d2 <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(1.0 / 3.0)
    };
    (100.0 * h0).min(h1)
}

fn hermite(t0: f64, h: f64, y0: f64, f0: f64, y1: f64, f1: f64, t: f64) -> f64 {
    let s = (t - t0) / h;
    let s2 = s * s;
    let s3 = s2 * s;
    let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
    let h10 = s3 - 2.0 * s2 + s;
    let h01 = -2.0 * s3 + 3.0 * s2;
    let h11 = s3 - s2;
    h00 * y0 + h10 * h * f0 + h01 * y1 + h11 * h * f1
}

/// Integrates the model and returns `u` on the uniform output grid.
pub fn integrate(theta: ThetaPair, consts: &SimConstants, tol: &Tolerances) -> Result<TimeSeries, SimError> {
    let n = consts.n_steps()?;
    let dt = consts.dt_out;
    let t_final = consts.t_end.max(n as f64 * dt);

    let mut values = Vec::with_capacity(n);
    let mut next_out = 1usize;

    let mut t = 0.0;
    let mut y = State::new(consts.u0, consts.v0);
    if !y.is_finite() {
        return Err(SimError::NonFiniteState { t });
    }
    let mut f = fhn_rhs(y, theta, consts);
    let mut h = initial_step(y, f, theta, consts, tol);
    let mut after_rejection = false;

    while next_out <= n {
        if h < tol.min_step {
            return Err(SimError::StepSizeUnderflow { t, h, min_step: tol.min_step });
        }
        let mut t_new = t + h;
        if t_new >= t_final {
            t_new = t_final;
        }
        let step = t_new - t;

        let k1 = f;
        let k2 = fhn_rhs(State::new(y.u + step * C2 * k1.u, y.v + step * C2 * k1.v), theta, consts);
        let k3 = fhn_rhs(State::new(y.u + step * C3 * k2.u, y.v + step * C3 * k2.v), theta, consts);
        let y_new = State::new(
            y.u + step * (B1 * k1.u + B2 * k2.u + B3 * k3.u),
            y.v + step * (B1 * k1.v + B2 * k2.v + B3 * k3.v),
        );
        if !y_new.is_finite() {
            return Err(SimError::NonFiniteState { t: t_new });
        }
        let k4 = fhn_rhs(y_new, theta, consts);

        let err_u = step * (E1 * k1.u + E2 * k2.u + E3 * k3.u + E4 * k4.u);
        let err_v = step * (E1 * k1.v + E2 * k2.v + E3 * k3.v + E4 * k4.v);
        let su = tol.atol + y.u.abs().max(y_new.u.abs()) * tol.rtol;
        let sv = tol.atol + y.v.abs().max(y_new.v.abs()) * tol.rtol;
        let err = rms_norm(err_u / su, err_v / sv);

        if err < 1.0 {
            let mut factor = if err == 0.0 {
                MAX_FACTOR
            } else {
                MAX_FACTOR.min(SAFETY * err.powf(ERROR_EXPONENT))
            };
            if after_rejection {
                factor = factor.min(1.0);
            }
            while next_out <= n {
                let t_out = (next_out as f64 * dt).min(t_final);
                if t_out > t_new {
                    break;
                }
                values.push(hermite(t, step, y.u, k1.u, y_new.u, k4.u, t_out));
                next_out += 1;
            }
            t = t_new;
            y = y_new;
            f = k4;
            h = step * factor;
            after_rejection = false;
        } else {
            h = step * MIN_FACTOR.max(SAFETY * err.powf(ERROR_EXPONENT));
            after_rejection = true;
        }
    }

    Ok(TimeSeries::new(dt, values))
}

/// Threshold-crossing statistics of a membrane-potential trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpikeStats {
    /// Spikes per millisecond.
    pub rate: f64,
    /// Mean super-threshold dwell time in milliseconds, 0 without spikes.
    pub mean_duration: f64,
    pub count: usize,
}

pub const DEFAULT_SPIKE_THRESHOLD: f64 = 1.5;

/// A spike starts where the trace reaches `threshold` from below (or at the
/// first sample, if it is already above) and lasts until it drops below again.
/// A spike still open at the end contributes its truncated duration.
pub fn spike_stats(series: &TimeSeries, threshold: f64) -> SpikeStats {
    let values = &series.values;
    let mut count = 0usize;
    let mut total_samples = 0usize;
    let mut start: Option<usize> = None;
    for (i, &x) in values.iter().enumerate() {
        match start {
            None if x >= threshold => {
                start = Some(i);
                count += 1;
            }
            Some(s) if x < threshold => {
                total_samples += i - s;
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        total_samples += values.len() - s;
    }
    let span = values.len() as f64 * series.dt;
    SpikeStats {
        rate: if span > 0.0 { count as f64 / span } else { 0.0 },
        mean_duration: if count > 0 {
            total_samples as f64 * series.dt / count as f64
        } else {
            0.0
        },
        count,
    }
}

/// One cell of a parameter raster. `stats` is `None` where integration failed.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikeCell {
    pub theta: ThetaPair,
    pub stats: Option<SpikeStats>,
}

/// Spike statistics on a Cartesian parameter grid.
///
/// Cells are stored row-major with `theta0` as the outer index.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikeGrid {
    pub theta0: Vec<f64>,
    pub theta1: Vec<f64>,
    pub cells: Vec<SpikeCell>,
}

impl SpikeGrid {
    pub fn cell(&self, i0: usize, i1: usize) -> &SpikeCell {
        &self.cells[i0 * self.theta1.len() + i1]
    }
}

/// `n` evenly spaced points covering `[lo, hi]` inclusively.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let step = (hi - lo) / (n - 1) as f64;
            (0..n)
                .map(|i| if i == n - 1 { hi } else { lo + i as f64 * step })
                .collect()
        }
    }
}

pub fn spike_grid(
    theta0_range: (f64, f64),
    theta1_range: (f64, f64),
    resolution: (usize, usize),
    consts: &SimConstants,
    tol: &Tolerances,
    threshold: f64,
) -> SpikeGrid {
    let theta0 = linspace(theta0_range.0, theta0_range.1, resolution.0);
    let theta1 = linspace(theta1_range.0, theta1_range.1, resolution.1);
    let mut cells = Vec::with_capacity(theta0.len() * theta1.len());
    for &a in &theta0 {
        for &b in &theta1 {
            let theta = ThetaPair::new(a, b);
            let stats = integrate(theta, consts, tol)
                .ok()
                .map(|s| spike_stats(&s, threshold));
            cells.push(SpikeCell { theta, stats });
        }
    }
    SpikeGrid { theta0, theta1, cells }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn rhs_at_origin() {
        let d = fhn_rhs(State::new(0.0, 0.0), ThetaPair::new(0.7, 0.8), &SimConstants::default());
        assert!(close(d.u, -1.2, 1e-15));
        assert!(close(d.v, 0.7 / 3.0, 1e-15));
    }

    #[test]
    fn rhs_zero_fixed_point() {
        let consts = SimConstants { gamma: 1.0, zeta: 0.0, ..Default::default() };
        let d = fhn_rhs(State::new(0.0, 0.0), ThetaPair::new(0.0, 0.0), &consts);
        assert_eq!(d, State::new(0.0, 0.0));
    }

    #[test]
    fn rhs_at_unit_state() {
        let d = fhn_rhs(State::new(1.0, 1.0), ThetaPair::new(0.7, 0.8), &SimConstants::default());
        assert!(close(d.u, 3.8, 1e-14));
        assert!(close(d.v, -1.1 / 3.0, 1e-15));
    }

    #[test]
    fn default_grid_has_1000_points() {
        let consts = SimConstants::default();
        assert_eq!(consts.n_steps().unwrap(), 1000);
        let s = integrate(ThetaPair::new(0.7, 0.8), &consts, &Tolerances::default()).unwrap();
        assert_eq!(s.len(), 1000);
        assert!(s.values.iter().all(|v| v.is_finite()));
        assert!(close(s.time(999), 200.0, 1e-9));
    }

    #[test]
    fn short_grid() {
        let consts = SimConstants { t_end: 1.0, dt_out: 0.5, ..Default::default() };
        let s = integrate(ThetaPair::new(0.7, 0.8), &consts, &Tolerances::default()).unwrap();
        assert_eq!(s.len(), 2);
    }

    #[test]
    fn equilibrium_is_exactly_zero() {
        let consts = SimConstants { gamma: 1.0, zeta: 0.0, ..Default::default() };
        for theta1 in [-0.4, 0.0, 0.3, 1.2] {
            let s = integrate(ThetaPair::new(0.0, theta1), &consts, &Tolerances::default()).unwrap();
            assert!(s.values.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn invalid_constants_rejected() {
        let bad = [
            SimConstants { gamma: 0.0, ..Default::default() },
            SimConstants { t_end: -1.0, ..Default::default() },
            SimConstants { dt_out: 0.3, t_end: 1.0, ..Default::default() },
        ];
        for c in bad {
            assert!(matches!(
                integrate(ThetaPair::new(0.7, 0.8), &c, &Tolerances::default()),
                Err(SimError::InvalidConstants(_))
            ));
        }
    }

    #[test]
    fn underflow_floor_is_reported() {
        let tol = Tolerances { rtol: 1e-14, atol: 1e-14, min_step: 1e-2 };
        let r = integrate(ThetaPair::new(0.7, 0.8), &SimConstants::default(), &tol);
        assert!(matches!(r, Err(SimError::StepSizeUnderflow { .. })));
    }

    #[test]
    fn blow_up_is_reported() {
        // Negative damping with a large initial state diverges in finite time.
        let consts = SimConstants { gamma: -3.0, u0: 50.0, ..Default::default() };
        let r = integrate(ThetaPair::new(0.7, 0.8), &consts, &Tolerances::default());
        assert!(r.is_err());
    }

    #[test]
    fn spike_stats_flat() {
        let s = TimeSeries::new(0.2, vec![0.0; 1000]);
        let st = spike_stats(&s, 1.5);
        assert_eq!(st.count, 0);
        assert_eq!(st.rate, 0.0);
        assert_eq!(st.mean_duration, 0.0);
    }

    #[test]
    fn spike_stats_hand_counted() {
        let s = TimeSeries::new(1.0, vec![0.0, 2.0, 2.0, 0.0, 2.0, 0.0]);
        let st = spike_stats(&s, 1.5);
        assert_eq!(st.count, 2);
        assert!(close(st.mean_duration, 1.5, 1e-15));
        assert!(close(st.rate, 2.0 / 6.0, 1e-15));
    }

    #[test]
    fn spike_stats_open_ends() {
        // Starts above threshold and ends above threshold.
        let s = TimeSeries::new(1.0, vec![2.0, 2.0, 0.0, 0.0, 2.0]);
        let st = spike_stats(&s, 1.5);
        assert_eq!(st.count, 2);
        assert!(close(st.mean_duration, 1.5, 1e-15));
    }

    #[test]
    fn linspace_endpoints() {
        let g = linspace(-0.2, 1.0, 7);
        assert_eq!(g.len(), 7);
        assert_eq!(g[0], -0.2);
        assert_eq!(g[6], 1.0);
    }

    #[test]
    fn small_grid_matches_pointwise_calls() {
        let consts = SimConstants::default();
        let tol = Tolerances::default();
        let grid = spike_grid((0.6, 0.8), (0.7, 0.9), (3, 3), &consts, &tol, 1.5);
        assert_eq!(grid.cells.len(), 9);
        for (i, &a) in grid.theta0.iter().enumerate() {
            for (j, &b) in grid.theta1.iter().enumerate() {
                let direct = spike_stats(&integrate(ThetaPair::new(a, b), &consts, &tol).unwrap(), 1.5);
                assert_eq!(grid.cell(i, j).stats, Some(direct));
            }
        }
    }
}
