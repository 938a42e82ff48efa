//! Karras noise-level schedules and the deterministic Heun solver for the
//! probability-flow ODE `dx/dt = (x − D(x, t))/t`.

use serde::{Deserialize, Serialize};

use crate::diffusion::Denoiser;
use crate::error::{Error, Result};
use crate::layout::{denormalize, NormStats};
use crate::motion::MotionSample;
use crate::par::{self, Exec};
use crate::seeding;

/// Lowest noise level ever evaluated by likelihood solves.
pub const LIKELIHOOD_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub n_steps: usize,
    pub rho: f64,
    pub t_min: f64,
    pub t_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { n_steps: 16, rho: 9.0, t_min: 0.02, t_max: 80.0 }
    }
}

impl ScheduleConfig {
    /// Levels for a solve costing `nfe` evaluations without a terminal step.
    pub fn for_likelihood(nfe: usize, rho: f64, t_max: f64) -> Result<Self> {
        if nfe < 2 || nfe % 2 != 0 {
            return Err(Error::InvalidConfig(format!("likelihood NFE must be even and ≥ 2, got {nfe}")));
        }
        Ok(Self { n_steps: nfe / 2 + 1, rho, t_min: LIKELIHOOD_EPS, t_max })
    }
}

/// Noise levels from `t_max` down to `t_min`, optionally followed by an
/// exact zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaSchedule {
    pub config: ScheduleConfig,
    pub terminal_zero: bool,
    pub levels: Vec<f64>,
}

pub fn build_schedule(config: ScheduleConfig, terminal_zero: bool) -> Result<SigmaSchedule> {
    let ScheduleConfig { n_steps, rho, t_min, t_max } = config;
    if n_steps < 2 {
        return Err(Error::InvalidConfig("schedule needs at least 2 steps".into()));
    }
    if !(t_min > 0.0 && t_min < t_max && t_max.is_finite()) {
        return Err(Error::InvalidConfig(format!("need 0 < t_min < t_max, got {t_min}, {t_max}")));
    }
    if !(rho > 0.0) {
        return Err(Error::InvalidConfig("rho must be positive".into()));
    }
    let a = t_max.powf(1.0 / rho);
    let b = t_min.powf(1.0 / rho);
    let mut levels: Vec<f64> = (0..n_steps)
        .map(|i| (a + i as f64 / (n_steps - 1) as f64 * (b - a)).powf(rho))
        .collect();
    levels[0] = t_max;
    levels[n_steps - 1] = t_min;
    if terminal_zero {
        levels.push(0.0);
    }
    Ok(SigmaSchedule { config, terminal_zero, levels })
}

impl SigmaSchedule {
    /// Evaluations spent by [`heun_solve`] along this schedule.
    pub fn nfe(&self) -> usize {
        let intervals = self.levels.len() - 1;
        if self.terminal_zero {
            2 * (intervals - 1) + 1
        } else {
            2 * intervals
        }
    }

    /// Levels in increasing order, for data→noise solves.
    pub fn ascending(&self) -> Vec<f64> {
        let mut l = self.levels.clone();
        l.reverse();
        l
    }
}

/// `(x − D)/t` on valid elements.
pub fn pf_ode_drift<D: Denoiser + ?Sized>(model: &D, x: &MotionSample, t: f64) -> Result<Vec<f64>> {
    if !(t > 0.0) {
        return Err(Error::NonPositiveNoise(t));
    }
    let d = model.denoise(x, t)?;
    Ok(drift_from(&d, x, t))
}

pub(crate) fn drift_from(d: &MotionSample, x: &MotionSample, t: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.frames.len()];
    for i in 0..x.valid_elements() {
        out[i] = (x.frames[i] - d.frames[i]) / t;
    }
    out
}

fn axpy(x: &MotionSample, h: f64, v: &[f64]) -> MotionSample {
    let mut out = x.clone();
    for (a, b) in out.frames[..x.valid_elements()].iter_mut().zip(v) {
        *a += h * b;
    }
    out
}

fn check_finite(x: &MotionSample, t: f64) -> Result<()> {
    if x.frames.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("ODE state at t={t}")))
    }
}

/// Integrates along `levels` in the given order. Intervals ending at an
/// exact zero take a single Euler step; all others take an Euler predictor
/// and a trapezoidal corrector.
pub fn heun_solve<D: Denoiser + ?Sized>(model: &D, x_init: &MotionSample, levels: &[f64]) -> Result<MotionSample> {
    let mut x = x_init.clone();
    for w in levels.windows(2) {
        let (t0, t1) = (w[0], w[1]);
        let h = t1 - t0;
        let d0 = pf_ode_drift(model, &x, t0)?;
        let pred = axpy(&x, h, &d0);
        if t1 == 0.0 {
            x = pred;
        } else {
            let d1 = pf_ode_drift(model, &pred, t1)?;
            let avg: Vec<f64> = d0.iter().zip(&d1).map(|(a, b)| 0.5 * (a + b)).collect();
            x = axpy(&x, h, &avg);
        }
        check_finite(&x, t1)?;
    }
    Ok(x)
}

/// Prior draws `N(0, t_max² I)` on the valid frames.
pub fn prior_sample(seed: u64, index: u64, l_max: usize, n: usize, valid_len: usize, t_max: f64) -> MotionSample {
    let mut rng = seeding::stream(seed, &[seeding::tag::GENERATE, index]);
    let mut x = MotionSample::zeros(l_max, n, valid_len);
    let eps = crate::diffusion::valid_noise(&mut rng, &x);
    for (a, e) in x.frames.iter_mut().zip(eps) {
        *a = t_max * e;
    }
    x
}

/// Generates `count` full-length sequences in the unweighted normalized
/// space.
pub fn generate_normalized<D: Denoiser + ?Sized>(
    model: &D,
    count: usize,
    l_max: usize,
    n: usize,
    seed: u64,
    schedule: &SigmaSchedule,
    exec: Exec,
) -> Result<Vec<MotionSample>> {
    if !schedule.terminal_zero {
        return Err(Error::InvalidConfig("generation schedules end at zero".into()));
    }
    let t_max = schedule.levels[0];
    par::map_indexed(exec, count, |i| {
        let x = prior_sample(seed, i as u64, l_max, n, l_max, t_max);
        heun_solve(model, &x, &schedule.levels)
    })
    .into_iter()
    .collect()
}

/// Generates and denormalizes into raw feature space.
#[allow(clippy::too_many_arguments)]
pub fn generate<D: Denoiser + ?Sized>(
    model: &D,
    stats: &NormStats,
    count: usize,
    l_max: usize,
    seed: u64,
    schedule: &SigmaSchedule,
    exec: Exec,
) -> Result<Vec<MotionSample>> {
    let xs = generate_normalized(model, count, l_max, stats.n(), seed, schedule, exec)?;
    xs.iter().map(|x| denormalize(x, stats)).collect()
}
