//! Scalar log-variance head `u_ψ(t)`.

use serde::{Deserialize, Serialize};

use super::ops::{silu, silu_grad, Conv, FourierBank, Init, ParamAlloc};
use crate::error::{Error, Result};
use crate::seeding;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub fourier: usize,
    pub fourier_scale: f64,
    pub hidden: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { fourier: 64, fourier_scale: 1.0, hidden: 32 }
    }
}

/// Fourier features of `c_noise(t)`, one hidden SiLU layer, a scalar output
/// and a learnable gain. The output layer starts at zero so `u ≡ 0`
/// initially.
#[derive(Debug, Clone)]
pub struct UncertaintyHead {
    pub config: HeadConfig,
    pub params: Vec<f64>,
    pub fourier: FourierBank,
    hidden: Conv,
    out_w: usize,
    out_b: usize,
    gain: usize,
    len: usize,
}

pub struct HeadTape {
    phi: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
    raw: f64,
}

fn layout(cfg: &HeadConfig) -> (ParamAlloc, Conv, usize, usize, usize) {
    let mut alloc = ParamAlloc::default();
    let hidden = Conv::new(&mut alloc, cfg.fourier, cfg.hidden, 1, 1, false);
    let out_w = alloc.take(cfg.hidden, Init::Zero);
    let out_b = alloc.take(1, Init::Zero);
    let gain = alloc.take(1, Init::One);
    (alloc, hidden, out_w, out_b, gain)
}

impl UncertaintyHead {
    /// Head `index` draws from its own stream so heads differ.
    pub fn new(config: HeadConfig, seed: u64, index: u64) -> Result<Self> {
        if config.fourier == 0 || config.hidden == 0 {
            return Err(Error::InvalidConfig("uncertainty head sizes must be positive".into()));
        }
        let (alloc, hidden, out_w, out_b, gain) = layout(&config);
        let mut rng = seeding::stream(seed, &[seeding::tag::INIT, 1 + index]);
        let params = alloc.init(&mut rng);
        let fourier = FourierBank::new(&mut rng, config.fourier, config.fourier_scale);
        Ok(Self { config, params, fourier, hidden, out_w, out_b, gain, len: alloc.len })
    }

    pub fn from_parts(config: HeadConfig, params: Vec<f64>, fourier: FourierBank) -> Result<Self> {
        let (alloc, hidden, out_w, out_b, gain) = layout(&config);
        if params.len() != alloc.len {
            return Err(Error::WeightCount { expected: alloc.len, got: params.len() });
        }
        if fourier.freqs.len() != config.fourier {
            return Err(Error::WeightCount { expected: config.fourier, got: fourier.freqs.len() });
        }
        Ok(Self { config, params, fourier, hidden, out_w, out_b, gain, len: alloc.len })
    }

    pub fn renormalize(&mut self) {
        self.hidden.renormalize(&mut self.params);
    }

    pub fn num_params(&self) -> usize {
        self.len
    }

    pub fn set_output(&mut self, weights: &[f64], bias: f64, gain: f64) {
        self.params[self.out_w..self.out_w + self.config.hidden].copy_from_slice(weights);
        self.params[self.out_b] = bias;
        self.params[self.gain] = gain;
    }

    pub fn forward(&self, t: f64) -> Result<(f64, HeadTape)> {
        if !(t > 0.0) {
            return Err(Error::NonPositiveNoise(t));
        }
        let phi = self.fourier.features(t.ln() / 4.0);
        let (pre, _) = self.hidden.forward(&self.params, &phi, 1);
        let act: Vec<f64> = pre.iter().map(|v| silu(*v)).collect();
        let w = &self.params[self.out_w..self.out_w + self.config.hidden];
        let raw = w.iter().zip(&act).map(|(a, b)| a * b).sum::<f64>() + self.params[self.out_b];
        Ok((self.params[self.gain] * raw, HeadTape { phi, pre, act, raw }))
    }

    pub fn u(&self, t: f64) -> Result<f64> {
        Ok(self.forward(t)?.0)
    }

    /// Parameter gradient of `du · u(t)`.
    pub fn backward(&self, tape: &HeadTape, du: f64) -> Vec<f64> {
        let mut g = vec![0.0; self.len];
        let gain = self.params[self.gain];
        g[self.gain] = du * tape.raw;
        let dr = du * gain;
        g[self.out_b] = dr;
        let w = &self.params[self.out_w..self.out_w + self.config.hidden];
        for (i, a) in tape.act.iter().enumerate() {
            g[self.out_w + i] = dr * a;
        }
        let dpre: Vec<f64> = w.iter().zip(&tape.pre).map(|(w, p)| dr * w * silu_grad(*p)).collect();
        self.hidden.backward(&self.params, &mut g, &tape.phi, &dpre, 1);
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn starts_at_zero_and_constant_with_zero_output_weights() {
        let mut h = UncertaintyHead::new(HeadConfig::default(), 0, 0).unwrap();
        for t in [0.002, 0.3, 80.0] {
            assert_eq!(h.u(t).unwrap(), 0.0);
        }
        h.set_output(&vec![0.0; 32], 0.75, 2.0);
        for t in [0.002, 0.3, 80.0] {
            assert_eq!(h.u(t).unwrap(), 1.5);
        }
        assert!(h.u(0.0).is_err());
    }

    #[test]
    fn identical_weights_identical_outputs() {
        let a = UncertaintyHead::new(HeadConfig::default(), 3, 1).unwrap();
        let b = UncertaintyHead::from_parts(a.config.clone(), a.params.clone(), a.fourier.clone()).unwrap();
        for t in [0.01, 1.0, 40.0] {
            assert_eq!(a.u(t).unwrap(), b.u(t).unwrap());
        }
        let c = UncertaintyHead::new(HeadConfig::default(), 3, 2).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn gradient_matches_finite_difference() {
        let mut h = UncertaintyHead::new(HeadConfig { fourier: 8, fourier_scale: 1.0, hidden: 5 }, 1, 0).unwrap();
        let w: Vec<f64> = (0..5).map(|i| 0.3 * (i as f64 - 2.0)).collect();
        h.set_output(&w, 0.1, 1.3);
        let t = 0.7;
        let (_, tape) = h.forward(t).unwrap();
        let g = h.backward(&tape, 1.0);
        let step = 1e-6;
        for i in 0..h.num_params() {
            let orig = h.params[i];
            h.params[i] = orig + step;
            let fp = h.u(t).unwrap();
            h.params[i] = orig - step;
            let fm = h.u(t).unwrap();
            h.params[i] = orig;
            assert!(((fp - fm) / (2.0 * step) - g[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn finite_over_schedule_range() {
        let h = UncertaintyHead::new(HeadConfig::default(), 9, 0).unwrap();
        let mut t = 1e-5;
        while t < 100.0 {
            assert!(h.u(t).unwrap().is_finite());
            t *= 1.5;
        }
    }
}
