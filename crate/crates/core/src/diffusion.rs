//! Variance-exploding forward process, expected-magnitude preconditioning,
//! denoiser/score conversion and the analytic Gaussian denoiser.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::MotionSample;

/// Preconditioning and training noise-level parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Preconditioner {
    /// Expected magnitude of the normalized data.
    pub sigma_data: f64,
    pub p_mean: f64,
    pub p_std: f64,
}

impl Default for Preconditioner {
    fn default() -> Self {
        Self { sigma_data: 1.0, p_mean: -1.2, p_std: 1.2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coeffs {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
    pub c_noise: f64,
    pub lambda: f64,
}

impl Preconditioner {
    pub fn new(sigma_data: f64, p_mean: f64, p_std: f64) -> Result<Self> {
        if !(sigma_data > 0.0) {
            return Err(Error::InvalidConfig("sigma_data must be positive".into()));
        }
        if !(p_std >= 0.0) {
            return Err(Error::InvalidConfig("p_std must be non-negative".into()));
        }
        Ok(Self { sigma_data, p_mean, p_std })
    }

    pub fn coeffs(&self, t: f64) -> Result<Coeffs> {
        precondition_coeffs(t, self.sigma_data)
    }
}

/// `c_in = 1/√(σ²+t²)`, `c_skip = σ²/(σ²+t²)`, `c_out = tσ/√(σ²+t²)`,
/// `λ = 1/c_out²`, `c_noise = ln(t)/4`.
pub fn precondition_coeffs(t: f64, sigma_data: f64) -> Result<Coeffs> {
    if !(t > 0.0) {
        return Err(Error::NonPositiveNoise(t));
    }
    let s2 = sigma_data * sigma_data;
    let denom = s2 + t * t;
    let root = denom.sqrt();
    let c_out = t * sigma_data / root;
    Ok(Coeffs {
        c_skip: s2 / denom,
        c_out,
        c_in: 1.0 / root,
        c_noise: t.ln() / 4.0,
        lambda: denom / (t * sigma_data).powi(2),
    })
}

/// `t = exp(P_mean + P_std·z)`, `z ~ N(0, 1)`.
pub fn sample_noise_level<R: Rng + ?Sized>(rng: &mut R, p_mean: f64, p_std: f64) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    (p_mean + p_std * z).exp()
}

/// Standard normal noise on the valid frames of `x`, zero on padding.
pub fn valid_noise<R: Rng + ?Sized>(rng: &mut R, x: &MotionSample) -> Vec<f64> {
    let mut eps = vec![0.0; x.frames.len()];
    for v in eps[..x.valid_elements()].iter_mut() {
        *v = rng.sample(StandardNormal);
    }
    eps
}

/// `x(t) = x(0) + t·ε` on valid frames.
pub fn perturb(x0: &MotionSample, t: f64, eps: &[f64]) -> Result<MotionSample> {
    if t < 0.0 {
        return Err(Error::NonPositiveNoise(t));
    }
    if eps.len() != x0.frames.len() {
        return Err(Error::DimensionMismatch { expected: x0.frames.len(), got: eps.len() });
    }
    let mut out = x0.clone();
    let m = x0.valid_elements();
    for (v, e) in out.frames[..m].iter_mut().zip(&eps[..m]) {
        *v += t * e;
    }
    Ok(out)
}

/// `(D − x)/t²`.
pub fn score_from_denoiser(d: &[f64], x: &[f64], t: f64) -> Result<Vec<f64>> {
    if !(t > 0.0) {
        return Err(Error::NonPositiveNoise(t));
    }
    if d.len() != x.len() {
        return Err(Error::DimensionMismatch { expected: x.len(), got: d.len() });
    }
    let inv = 1.0 / (t * t);
    Ok(d.iter().zip(x).map(|(d, x)| (d - x) * inv).collect())
}

/// Posterior mean of `x(0)` under `p_data = N(μ, σ²I)`:
/// `(σ²·x + t²·μ)/(σ² + t²)`.
pub fn analytic_gaussian_denoiser(x: f64, t: f64, mu: f64, sigma2: f64) -> f64 {
    (sigma2 * x + t * t * mu) / (sigma2 + t * t)
}

/// A denoiser `D(x, t)` over padded samples in the normalized space.
pub trait Denoiser: Sync {
    fn denoise(&self, x: &MotionSample, t: f64) -> Result<MotionSample>;

    /// `D(x, t)` and the vector-Jacobian products `vᵀ ∂D/∂x` for each `v`,
    /// sharing one evaluation.
    fn denoise_vjps(&self, x: &MotionSample, t: f64, vs: &[Vec<f64>]) -> Result<(MotionSample, Vec<Vec<f64>>)>;
}

/// Exact denoiser for Gaussian data with per-column mean and shared variance.
#[derive(Debug, Clone)]
pub struct GaussianOracle {
    pub mean: Vec<f64>,
    pub sigma2: f64,
}

impl GaussianOracle {
    pub fn new(mean: Vec<f64>, sigma2: f64) -> Result<Self> {
        if !(sigma2 > 0.0) {
            return Err(Error::InvalidConfig("oracle variance must be positive".into()));
        }
        Ok(Self { mean, sigma2 })
    }

    /// `∇ log N(x; μ, (σ² + t²) I)` on valid elements.
    pub fn score(&self, x: &MotionSample, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; x.frames.len()];
        let var = self.sigma2 + t * t;
        let n = x.n;
        for i in 0..x.valid_elements() {
            out[i] = (self.mean[i % n] - x.frames[i]) / var;
        }
        out
    }
}

impl Denoiser for GaussianOracle {
    fn denoise(&self, x: &MotionSample, t: f64) -> Result<MotionSample> {
        if self.mean.len() != x.n {
            return Err(Error::DimensionMismatch { expected: self.mean.len(), got: x.n });
        }
        let mut out = x.clone();
        for (i, v) in out.frames[..x.valid_elements()].iter_mut().enumerate() {
            *v = analytic_gaussian_denoiser(*v, t, self.mean[i % x.n], self.sigma2);
        }
        Ok(out)
    }

    fn denoise_vjps(&self, x: &MotionSample, t: f64, vs: &[Vec<f64>]) -> Result<(MotionSample, Vec<Vec<f64>>)> {
        let d = self.denoise(x, t)?;
        let a = self.sigma2 / (self.sigma2 + t * t);
        let m = x.valid_elements();
        let gs = vs
            .iter()
            .map(|v| {
                let mut g = vec![0.0; v.len()];
                for i in 0..m {
                    g[i] = a * v[i];
                }
                g
            })
            .collect();
        Ok((d, gs))
    }
}

/// Counts denoiser evaluations (NFEs).
pub struct CountingDenoiser<'a, D: Denoiser + ?Sized> {
    inner: &'a D,
    count: AtomicUsize,
}

impl<'a, D: Denoiser + ?Sized> CountingDenoiser<'a, D> {
    pub fn new(inner: &'a D) -> Self {
        Self { inner, count: AtomicUsize::new(0) }
    }

    pub fn count(&self) -> usize {
        self.count.load(Ordering::Relaxed)
    }
}

impl<D: Denoiser + ?Sized> Denoiser for CountingDenoiser<'_, D> {
    fn denoise(&self, x: &MotionSample, t: f64) -> Result<MotionSample> {
        self.count.fetch_add(1, Ordering::Relaxed);
        self.inner.denoise(x, t)
    }

    fn denoise_vjps(&self, x: &MotionSample, t: f64, vs: &[Vec<f64>]) -> Result<(MotionSample, Vec<Vec<f64>>)> {
        self.count.fetch_add(1, Ordering::Relaxed);
        self.inner.denoise_vjps(x, t, vs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding;

    #[test]
    fn coefficient_limits_and_closed_form() {
        let c = precondition_coeffs(1e-9, 1.2).unwrap();
        assert!((c.c_skip - 1.0).abs() < 1e-12);
        assert!(c.c_out < 1e-8);
        assert!((c.c_in - 1.0 / 1.2).abs() < 1e-12);
        let c = precondition_coeffs(1.0, 1.0).unwrap();
        assert!((c.c_skip - 0.5).abs() < 1e-15);
        assert!((c.c_out - 0.707_106_781_186_547_5).abs() < 1e-12);
        assert!((c.c_in - 0.707_106_781_186_547_5).abs() < 1e-12);
        assert!((c.lambda - 2.0).abs() < 1e-12);
        assert_eq!(c.c_noise, 0.0);
        for t in [0.002, 0.3, 1.0, 7.0, 80.0] {
            let c = precondition_coeffs(t, 1.2).unwrap();
            assert!((c.c_out * c.c_out * c.lambda - 1.0).abs() < 1e-12);
        }
        assert!(precondition_coeffs(0.0, 1.0).is_err());
        assert!(precondition_coeffs(-1.0, 1.0).is_err());
    }

    #[test]
    fn noise_level_sampling() {
        let mut rng = seeding::stream(0, &[]);
        for _ in 0..1000 {
            assert!(sample_noise_level(&mut rng, -1.2, 1.2) > 0.0);
        }
        assert_eq!(sample_noise_level(&mut rng, -1.2, 0.0), (-1.2f64).exp());
    }

    #[test]
    fn perturb_respects_padding() {
        let x0 = MotionSample::from_valid(&[1.0, 2.0, 3.0, 4.0], 2, 4).unwrap();
        let mut rng = seeding::stream(1, &[]);
        let eps = valid_noise(&mut rng, &x0);
        assert!(eps[4..].iter().all(|v| *v == 0.0));
        assert_eq!(perturb(&x0, 0.0, &eps).unwrap(), x0);
        let xt = perturb(&x0, 2.0, &eps).unwrap();
        assert!(xt.frames[4..].iter().all(|v| *v == 0.0));
        assert!(perturb(&x0, -1.0, &eps).is_err());
    }

    #[test]
    fn score_conversion() {
        assert_eq!(score_from_denoiser(&[1.0, 2.0], &[1.0, 2.0], 0.5).unwrap(), vec![0.0, 0.0]);
        let a = score_from_denoiser(&[3.0], &[1.0], 2.0).unwrap()[0];
        let b = score_from_denoiser(&[5.0], &[1.0], 2.0).unwrap()[0];
        assert_eq!(b, 2.0 * a);
        assert!(score_from_denoiser(&[1.0], &[1.0], 0.0).is_err());
    }

    #[test]
    fn gaussian_denoiser_closed_form() {
        assert_eq!(analytic_gaussian_denoiser(2.0, 1.0, 0.0, 1.0), 1.0);
        assert!((analytic_gaussian_denoiser(2.0, 1e-9, 0.5, 1.0) - 2.0).abs() < 1e-12);
        assert!((analytic_gaussian_denoiser(2.0, 1e9, 0.5, 1.0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn oracle_score_matches_gaussian_gradient() {
        let oracle = GaussianOracle::new(vec![0.3, -1.0], 0.7).unwrap();
        let x = MotionSample::from_valid(&[0.1, 0.2, -0.5, 2.0], 2, 3).unwrap();
        for t in [0.05, 0.9, 12.0] {
            let d = oracle.denoise(&x, t).unwrap();
            let s = score_from_denoiser(&d.frames, &x.frames, t).unwrap();
            let exact = oracle.score(&x, t);
            for (a, b) in s.iter().zip(&exact) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn preconditioned_input_and_target_are_standardized() {
        // non-Gaussian data with magnitude 0.7 (scaled Rademacher)
        let sigma = 0.7;
        let mut rng = seeding::stream(2, &[]);
        let x0: Vec<f64> = (0..10_000).map(|_| if rng.random_bool(0.5) { sigma } else { -sigma }).collect();
        for i in 0..20 {
            let t = (0.002f64.ln() + (80f64 / 0.002).ln() * i as f64 / 19.0).exp();
            let c = precondition_coeffs(t, sigma).unwrap();
            let (mut m_in, mut m_tgt) = (0.0, 0.0);
            for x in &x0 {
                let e: f64 = rng.sample(StandardNormal);
                let xt = x + t * e;
                m_in += (c.c_in * xt).powi(2);
                m_tgt += ((x - c.c_skip * xt) / c.c_out).powi(2);
            }
            let n = x0.len() as f64;
            assert!(((m_in / n).sqrt() - 1.0).abs() < 0.02, "input at t={t}");
            assert!(((m_tgt / n).sqrt() - 1.0).abs() < 0.02, "target at t={t}");
        }
    }

    #[test]
    fn noise_level_median_is_exp_p_mean() {
        let mut rng = seeding::stream(3, &[]);
        let mut ts: Vec<f64> = (0..20_001).map(|_| sample_noise_level(&mut rng, -1.2, 1.2)).collect();
        ts.sort_by(f64::total_cmp);
        let median = ts[10_000];
        assert!((median.ln() + 1.2).abs() < 0.03, "median {median}");
    }
}
