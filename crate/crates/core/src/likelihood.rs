//! Exact likelihoods through the instantaneous change of variables, with
//! Hutchinson divergence estimates, and round-trip reconstruction error.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::Denoiser;
use crate::error::{Error, Result};
use crate::layout::{log_abs_det_normalization, NormStats};
use crate::motion::MotionSample;
use crate::sampler::{build_schedule, drift_from, heun_solve, ScheduleConfig, LIKELIHOOD_EPS};
use crate::seeding;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NllConfig {
    pub probes: usize,
    pub schedule: ScheduleConfig,
}

impl Default for NllConfig {
    fn default() -> Self {
        Self {
            probes: 16,
            schedule: ScheduleConfig { n_steps: 65, rho: 9.0, t_min: LIKELIHOOD_EPS, t_max: 80.0 },
        }
    }
}

impl NllConfig {
    pub fn validate(&self) -> Result<()> {
        if self.probes == 0 {
            return Err(Error::InvalidConfig("at least one probe is required".into()));
        }
        if self.schedule.t_min < LIKELIHOOD_EPS {
            return Err(Error::InvalidConfig(format!("t_min below the {LIKELIHOOD_EPS} floor")));
        }
        Ok(())
    }
}

/// Rademacher vector on the first `m` entries of a length-`len` buffer.
pub fn rademacher<R: Rng + ?Sized>(rng: &mut R, len: usize, m: usize) -> Vec<f64> {
    let mut v = vec![0.0; len];
    for x in v[..m].iter_mut() {
        *x = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    }
    v
}

/// `(1/n)·Σ vᵀ J v` for Rademacher `v`, given a routine returning the
/// vector-Jacobian products `vᵀ J` for a set of probes.
pub fn divergence_estimate<R, F>(vjps: F, len: usize, m: usize, rng: &mut R, n_probes: usize) -> Result<f64>
where
    R: Rng + ?Sized,
    F: FnOnce(&[Vec<f64>]) -> Result<Vec<Vec<f64>>>,
{
    let vs: Vec<Vec<f64>> = (0..n_probes).map(|_| rademacher(rng, len, m)).collect();
    let gs = vjps(&vs)?;
    let total: f64 = vs.iter().zip(&gs).map(|(v, g)| v.iter().zip(g).map(|(a, b)| a * b).sum::<f64>()).sum();
    Ok(total / n_probes as f64)
}

/// Drift and divergence estimate of `f = (x − D)/t` at one point.
fn drift_and_divergence<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    model: &D,
    x: &MotionSample,
    t: f64,
    rng: &mut R,
    probes: usize,
) -> Result<(Vec<f64>, f64)> {
    let m = x.valid_elements();
    let mut d_out = None;
    let div_d = divergence_estimate(
        |vs| {
            let (d, gs) = model.denoise_vjps(x, t, vs)?;
            d_out = Some(d);
            Ok(gs)
        },
        x.frames.len(),
        m,
        rng,
        probes,
    )?;
    let d = d_out.expect("evaluated above");
    Ok((drift_from(&d, x, t), (m as f64 - div_d) / t))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NllResult {
    pub total: f64,
    pub per_dim: f64,
    pub dims: usize,
    pub nfe: usize,
}

/// Negative log-likelihood in the normalized space: integrates `x` from
/// `t_min` to `t_max` jointly with `∫ div f dt` and adds the prior term.
pub fn nll<D: Denoiser + ?Sized>(model: &D, x0: &MotionSample, cfg: &NllConfig, seed: u64, sample_id: u64) -> Result<NllResult> {
    cfg.validate()?;
    let schedule = build_schedule(cfg.schedule, false)?;
    let levels = schedule.ascending();
    let mut rng = seeding::stream(seed, &[seeding::tag::HUTCHINSON, sample_id]);
    let m = x0.valid_elements();
    if m == 0 {
        return Err(Error::AllMasked);
    }
    let mut x = x0.clone();
    let mut integral = 0.0;
    for w in levels.windows(2) {
        let (t0, t1) = (w[0], w[1]);
        let h = t1 - t0;
        let (f0, g0) = drift_and_divergence(model, &x, t0, &mut rng, cfg.probes)?;
        let mut pred = x.clone();
        for (a, b) in pred.frames[..m].iter_mut().zip(&f0) {
            *a += h * b;
        }
        let (f1, g1) = drift_and_divergence(model, &pred, t1, &mut rng, cfg.probes)?;
        for (i, a) in x.frames[..m].iter_mut().enumerate() {
            *a += 0.5 * h * (f0[i] + f1[i]);
        }
        integral += 0.5 * h * (g0 + g1);
        if !x.frames.iter().all(|v| v.is_finite()) || !integral.is_finite() {
            return Err(Error::NonFinite(format!("likelihood integration at t={t1}")));
        }
    }
    let t_max = cfg.schedule.t_max;
    let sq: f64 = x.frames[..m].iter().map(|v| v * v).sum();
    let log_prior = -0.5 * m as f64 * (2.0 * std::f64::consts::PI * t_max * t_max).ln() - sq / (2.0 * t_max * t_max);
    let total = -(log_prior + integral);
    Ok(NllResult { total, per_dim: total / m as f64, dims: m, nfe: schedule.nfe() })
}

/// Shifts a normalized-space result into raw feature units.
pub fn unnormalized(result: NllResult, stats: &NormStats, valid_frames: usize) -> NllResult {
    let total = result.total + log_abs_det_normalization(stats, valid_frames);
    NllResult { total, per_dim: total / result.dims as f64, ..result }
}

/// Mean absolute error after integrating data→noise with `fwd` and back
/// with `bwd`, over valid elements.
pub fn round_trip_error<D: Denoiser + ?Sized>(model: &D, x0: &MotionSample, fwd: ScheduleConfig, bwd: ScheduleConfig) -> Result<f64> {
    for s in [&fwd, &bwd] {
        if s.t_min < LIKELIHOOD_EPS {
            return Err(Error::InvalidConfig(format!("t_min below the {LIKELIHOOD_EPS} floor")));
        }
    }
    let up = build_schedule(fwd, false)?.ascending();
    let down = build_schedule(bwd, false)?.levels;
    let noise = heun_solve(model, x0, &up)?;
    let back = heun_solve(model, &noise, &down)?;
    let m = x0.valid_elements();
    if m == 0 {
        return Err(Error::AllMasked);
    }
    Ok(back.frames[..m].iter().zip(&x0.frames[..m]).map(|(a, b)| (a - b).abs()).sum::<f64>() / m as f64)
}
