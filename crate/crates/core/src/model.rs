//! The preconditioned denoiser `D = c_skip·x + c_out·F(c_in·w⊙x, c_noise)`
//! together with its uncertainty heads.

use crate::diffusion::{Coeffs, Denoiser, Preconditioner};
use crate::error::{Error, Result};
use crate::motion::MotionSample;
use crate::net::{DenoiserNet, Tape, UncertaintyHead};

#[derive(Debug, Clone)]
pub struct Model {
    pub net: DenoiserNet,
    pub heads: Vec<UncertaintyHead>,
    pub precond: Preconditioner,
    /// Per-column input weights; all ones unless group weights are in use.
    pub input_weights: Vec<f64>,
}

/// Forward state of one denoiser evaluation.
pub struct Evaluation {
    pub d: MotionSample,
    pub f: Vec<f64>,
    pub coeffs: Coeffs,
    pub tape: Tape,
}

impl Model {
    pub fn new(net: DenoiserNet, heads: Vec<UncertaintyHead>, precond: Preconditioner, input_weights: Vec<f64>) -> Result<Self> {
        if input_weights.len() != net.n {
            return Err(Error::DimensionMismatch { expected: net.n, got: input_weights.len() });
        }
        Ok(Self { net, heads, precond, input_weights })
    }

    pub fn n(&self) -> usize {
        self.net.n
    }

    pub fn evaluate(&self, x: &MotionSample, t: f64) -> Result<Evaluation> {
        if x.n != self.n() {
            return Err(Error::DimensionMismatch { expected: self.n(), got: x.n });
        }
        let coeffs = self.precond.coeffs(t)?;
        let n = self.n();
        let mut input = x.frames.clone();
        for (i, v) in input.iter_mut().enumerate() {
            *v *= coeffs.c_in * self.input_weights[i % n];
        }
        let (f, tape) = self.net.forward(&input, x.l_max(), x.valid_len, coeffs.c_noise)?;
        let mut d = x.clone();
        let m = x.valid_elements();
        for (i, v) in d.frames[..m].iter_mut().enumerate() {
            *v = coeffs.c_skip * *v + coeffs.c_out * f[i];
        }
        Ok(Evaluation { d, f, coeffs, tape })
    }

    /// Back-propagates `dD` (upstream gradient on `D`) through the network.
    /// Returns the network parameter gradient and `∂/∂x`.
    pub fn backward(&self, x: &MotionSample, eval: &Evaluation, dd: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let c = eval.coeffs;
        let df: Vec<f64> = dd.iter().map(|v| c.c_out * v).collect();
        let (g, dx_in) = self.net.backward(&eval.tape, &df)?;
        let n = self.n();
        let mut dx = vec![0.0; dd.len()];
        for i in 0..x.valid_elements() {
            dx[i] = c.c_skip * dd[i] + c.c_in * self.input_weights[i % n] * dx_in[i];
        }
        Ok((g, dx))
    }

    /// `u^h(t)` for every head.
    pub fn u_values(&self, t: f64) -> Result<Vec<f64>> {
        self.heads.iter().map(|h| h.u(t)).collect()
    }
}

impl Denoiser for Model {
    fn denoise(&self, x: &MotionSample, t: f64) -> Result<MotionSample> {
        Ok(self.evaluate(x, t)?.d)
    }

    fn denoise_vjps(&self, x: &MotionSample, t: f64, vs: &[Vec<f64>]) -> Result<(MotionSample, Vec<Vec<f64>>)> {
        let eval = self.evaluate(x, t)?;
        let gs = vs.iter().map(|v| Ok(self.backward(x, &eval, v)?.1)).collect::<Result<_>>()?;
        Ok((eval.d, gs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{HeadConfig, NetConfig};
    use crate::seeding;
    use rand::Rng;

    fn model(weights: Vec<f64>) -> Model {
        let net = DenoiserNet::new(NetConfig { channels: 6, blocks_per_level: 1, attention: false, fourier_scale: 1.0, weight_norm: false, column_path: true }, 3, 0).unwrap();
        let head = UncertaintyHead::new(HeadConfig::default(), 0, 0).unwrap();
        Model::new(net, vec![head], Preconditioner::new(1.0, -1.2, 1.2).unwrap(), weights).unwrap()
    }

    fn sample() -> MotionSample {
        let mut rng = seeding::stream(2, &[]);
        let v: Vec<f64> = (0..15).map(|_| rng.random_range(-2.0..2.0)).collect();
        MotionSample::from_valid(&v, 3, 8).unwrap()
    }

    #[test]
    fn zero_network_gives_skip_only() {
        let mut m = model(vec![1.0; 3]);
        m.net.set_gain(0.0);
        let x = sample();
        for t in [0.01, 1.0, 30.0] {
            let d = m.denoise(&x, t).unwrap();
            let c = m.precond.coeffs(t).unwrap();
            for (a, b) in d.frames.iter().zip(&x.frames) {
                assert_eq!(*a, c.c_skip * b);
            }
        }
    }

    #[test]
    fn small_t_returns_input() {
        let m = model(vec![1.0; 3]);
        let x = sample();
        let d = m.denoise(&x, 1e-9).unwrap();
        for (a, b) in d.frames.iter().zip(&x.frames) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn vjp_matches_finite_difference() {
        let m = model(vec![0.5, 2.0, 1.5]);
        let x = sample();
        let t = 0.8;
        let v: Vec<f64> = (0..x.frames.len()).map(|i| ((i * 7) as f64).sin()).collect();
        let (_, gs) = m.denoise_vjps(&x, t, &[v.clone()]).unwrap();
        let g = &gs[0];
        let obj = |x: &MotionSample| -> f64 { m.denoise(x, t).unwrap().frames.iter().zip(&v).map(|(a, b)| a * b).sum() };
        let h = 1e-5;
        for i in 0..x.valid_elements() {
            let mut xp = x.clone();
            xp.frames[i] += h;
            let mut xm = x.clone();
            xm.frames[i] -= h;
            let fd = (obj(&xp) - obj(&xm)) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6 * (1.0 + fd.abs()), "{i}: {fd} vs {}", g[i]);
        }
        assert!(g[x.valid_elements()..].iter().all(|v| *v == 0.0));
    }
}
