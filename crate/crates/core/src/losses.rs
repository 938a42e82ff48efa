//! Score-matching losses with uncertainty weighting, masked over valid
//! frames.
//!
//! Every loss is reduced the same way: per-element terms are summed over
//! the valid frames of the whole batch and divided by `Z = Σ_b V_b·N`,
//! where `V_b` is the valid length of sample `b`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{FeatureLayout, NormScheme};
use crate::motion::MotionSample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    /// Joint uncertainty loss, one head, baseline normalization.
    Baseline,
    /// `√λ/√e^u` weighting with a separately trained head.
    GradBalanced,
    /// One head per feature group.
    PerGroup,
    /// Per-group heads plus dimensionality weights on inputs and loss.
    Final,
}

impl LossMode {
    pub const ALL: [LossMode; 4] = [LossMode::Baseline, LossMode::GradBalanced, LossMode::PerGroup, LossMode::Final];

    pub fn name(self) -> &'static str {
        match self {
            LossMode::Baseline => "baseline",
            LossMode::GradBalanced => "grad-balanced",
            LossMode::PerGroup => "per-group",
            LossMode::Final => "final",
        }
    }

    pub fn per_group(self) -> bool {
        matches!(self, LossMode::PerGroup | LossMode::Final)
    }

    pub fn uses_group_weights(self) -> bool {
        self == LossMode::Final
    }

    pub fn num_heads(self, groups: usize) -> usize {
        if self.per_group() {
            groups
        } else {
            1
        }
    }

    pub fn norm_scheme(self) -> NormScheme {
        match self {
            LossMode::Baseline => NormScheme::Baseline,
            _ => NormScheme::Structured,
        }
    }

    /// Head used for group `k`.
    pub fn head_for(self, k: usize) -> usize {
        if self.per_group() {
            k
        } else {
            0
        }
    }
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown loss mode `{s}`")))
    }
}

/// Per-group sums of squared residuals over valid frames and the matching
/// element counts `V·N^k`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupResiduals {
    pub sums: Vec<f64>,
    pub counts: Vec<usize>,
}

impl GroupResiduals {
    pub fn total(&self) -> f64 {
        self.sums.iter().sum()
    }

    pub fn count(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn means(&self) -> Vec<f64> {
        self.sums.iter().zip(&self.counts).map(|(s, c)| s / *c as f64).collect()
    }
}

pub fn masked_residuals(d: &MotionSample, x0: &MotionSample, layout: &FeatureLayout) -> Result<GroupResiduals> {
    if d.frames.len() != x0.frames.len() || d.n != layout.n() || x0.n != layout.n() {
        return Err(Error::DimensionMismatch { expected: x0.frames.len(), got: d.frames.len() });
    }
    if d.valid_len != x0.valid_len {
        return Err(Error::DimensionMismatch { expected: x0.valid_len, got: d.valid_len });
    }
    let g = layout.num_groups();
    let ranges: Vec<_> = (0..g).map(|k| layout.range(k)).collect();
    let mut sums = vec![0.0; g];
    for (fd, fx) in d.valid_frames().zip(x0.valid_frames()) {
        for (k, r) in ranges.iter().enumerate() {
            let mut s = 0.0;
            for (a, b) in fd[r.clone()].iter().zip(&fx[r.clone()]) {
                s += (a - b) * (a - b);
            }
            sums[k] += s;
        }
    }
    let counts = layout.groups.iter().map(|gs| gs.dim * x0.valid_len).collect();
    Ok(GroupResiduals { sums, counts })
}

/// Per-sample summary entering every loss.
#[derive(Debug, Clone)]
pub struct SampleLoss {
    pub t: f64,
    pub lambda: f64,
    pub residuals: GroupResiduals,
    /// One value per head.
    pub u: Vec<f64>,
}

/// Contribution of one sample: loss values and the gradients needed for the
/// backward pass.
#[derive(Debug, Clone)]
pub struct Weighting {
    /// `∂L_θ/∂D = 2·a^k·(D − x̂0)` on group `k`.
    pub a: Vec<f64>,
    /// `∂L_ψ/∂u^h` per head (the joint loss under `Baseline`).
    pub du: Vec<f64>,
    pub theta: f64,
    pub psi: f64,
}

/// Sum of `V_b·N` over the batch.
pub fn normalizer(samples: &[SampleLoss]) -> Result<f64> {
    let z: usize = samples.iter().map(|s| s.residuals.count()).sum();
    if z == 0 {
        return Err(Error::AllMasked);
    }
    Ok(z as f64)
}

pub fn sample_weighting(mode: LossMode, s: &SampleLoss, z: f64, group_w: &[f64]) -> Result<Weighting> {
    let g = s.residuals.sums.len();
    let heads = mode.num_heads(g);
    if s.u.len() != heads {
        return Err(Error::DimensionMismatch { expected: heads, got: s.u.len() });
    }
    if group_w.len() != g {
        return Err(Error::WeightCount { expected: g, got: group_w.len() });
    }
    let sq = s.lambda.sqrt();
    let res = &s.residuals;
    let vn = res.count() as f64;
    match mode {
        LossMode::Baseline => {
            let u = s.u[0];
            let scale = s.lambda * (-u).exp();
            let total = res.total();
            let value = (scale * total + u * vn) / z;
            Ok(Weighting { a: vec![scale / z; g], du: vec![(vn - scale * total) / z], theta: value, psi: value })
        }
        LossMode::GradBalanced => {
            let u = s.u[0];
            let total = res.total();
            let a = sq * (-0.5 * u).exp() / z;
            let psi = (total * (-u).exp() + u * vn) / z;
            Ok(Weighting { a: vec![a; g], du: vec![(vn - total * (-u).exp()) / z], theta: a * total, psi })
        }
        LossMode::PerGroup | LossMode::Final => {
            let mut a = Vec::with_capacity(g);
            let mut du = Vec::with_capacity(g);
            let (mut theta, mut psi) = (0.0, 0.0);
            for k in 0..g {
                let u = s.u[k];
                let w = if mode == LossMode::Final { group_w[k] } else { 1.0 };
                let ak = w * sq * (-0.5 * u).exp() / z;
                let nk = res.counts[k] as f64;
                a.push(ak);
                theta += ak * res.sums[k];
                psi += (res.sums[k] * (-u).exp() + u * nk) / z;
                du.push((nk - res.sums[k] * (-u).exp()) / z);
            }
            Ok(Weighting { a, du, theta, psi })
        }
    }
}

/// `∂L/∂D` for one sample given its per-group coefficients.
pub fn residual_gradient(d: &MotionSample, x0: &MotionSample, layout: &FeatureLayout, a: &[f64]) -> Vec<f64> {
    let cols = layout.column_groups();
    let n = layout.n();
    let m = x0.valid_elements();
    let mut g = vec![0.0; d.frames.len()];
    for i in 0..m {
        g[i] = 2.0 * a[cols[i % n]] * (d.frames[i] - x0.frames[i]);
    }
    g
}

/// Batch-level loss summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossBreakdown {
    /// Per-group masked mean squared residual.
    pub group_mse: Vec<f64>,
    /// Per-head mean `u` over the batch.
    pub u_mean: Vec<f64>,
    pub theta: f64,
    pub psi: f64,
}

pub fn breakdown(mode: LossMode, samples: &[SampleLoss], group_w: &[f64]) -> Result<(LossBreakdown, Vec<Weighting>)> {
    let z = normalizer(samples)?;
    let g = samples[0].residuals.sums.len();
    let heads = mode.num_heads(g);
    let mut sums = vec![0.0; g];
    let mut counts = vec![0usize; g];
    let mut u_mean = vec![0.0; heads];
    let mut weights = Vec::with_capacity(samples.len());
    let (mut theta, mut psi) = (0.0, 0.0);
    for s in samples {
        let w = sample_weighting(mode, s, z, group_w)?;
        theta += w.theta;
        psi += w.psi;
        for k in 0..g {
            sums[k] += s.residuals.sums[k];
            counts[k] += s.residuals.counts[k];
        }
        for (m, u) in u_mean.iter_mut().zip(&s.u) {
            *m += u / samples.len() as f64;
        }
        weights.push(w);
    }
    if !theta.is_finite() || !psi.is_finite() {
        return Err(Error::NonFinite(format!("loss theta={theta} psi={psi}")));
    }
    let group_mse = sums.iter().zip(&counts).map(|(s, c)| s / *c as f64).collect();
    Ok((LossBreakdown { group_mse, u_mean, theta, psi }, weights))
}

/// Joint θ/ψ loss of the baseline configuration.
pub fn loss_baseline(samples: &[SampleLoss]) -> Result<f64> {
    let g = samples.first().map_or(0, |s| s.residuals.sums.len());
    Ok(breakdown(LossMode::Baseline, samples, &vec![1.0; g])?.0.theta)
}

/// Head loss with the residual term treated as a constant.
pub fn loss_u_heads(mode: LossMode, samples: &[SampleLoss]) -> Result<f64> {
    let g = samples.first().map_or(0, |s| s.residuals.sums.len());
    Ok(breakdown(mode, samples, &vec![1.0; g])?.0.psi)
}

/// Denoiser loss with the head values treated as constants.
pub fn loss_theta(mode: LossMode, samples: &[SampleLoss], group_w: &[f64]) -> Result<f64> {
    Ok(breakdown(mode, samples, group_w)?.0.theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{GroupSpec, NormKind};

    fn layout() -> FeatureLayout {
        FeatureLayout::new(
            vec![
                GroupSpec { name: "a".into(), dim: 2, kind: NormKind::ElementwiseZScore, mirror: None },
                GroupSpec { name: "b".into(), dim: 1, kind: NormKind::ElementwiseZScore, mirror: None },
            ],
            4,
        )
        .unwrap()
    }

    fn term(lambda: f64, sums: [f64; 2], valid: usize, u: Vec<f64>) -> SampleLoss {
        SampleLoss { t: 1.0, lambda, residuals: GroupResiduals { sums: sums.to_vec(), counts: vec![2 * valid, valid] }, u }
    }

    #[test]
    fn residuals_zero_for_perfect_prediction_and_padding_ignored() {
        let lay = layout();
        let x = MotionSample::from_valid(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 3, 4).unwrap();
        let r = masked_residuals(&x, &x, &lay).unwrap();
        assert_eq!(r.sums, vec![0.0, 0.0]);
        assert_eq!(r.counts, vec![4, 2]);
        let mut d = x.clone();
        d.frames[2] += 0.5;
        let r = masked_residuals(&d, &x, &lay).unwrap();
        assert_eq!(r.sums, vec![0.0, 0.25]);
        assert_eq!(r.means()[1], 0.125);
    }

    #[test]
    fn single_element_mean() {
        let lay = FeatureLayout::new(vec![GroupSpec { name: "a".into(), dim: 1, kind: NormKind::ElementwiseZScore, mirror: None }], 4).unwrap();
        let x = MotionSample::from_valid(&[0.0], 1, 4).unwrap();
        let d = MotionSample::from_valid(&[0.3], 1, 4).unwrap();
        let r = masked_residuals(&d, &x, &lay).unwrap();
        assert!((r.means()[0] - 0.09).abs() < 1e-15);
    }

    #[test]
    fn all_masked_batch_is_an_error() {
        let s = term(1.0, [0.0, 0.0], 0, vec![0.0]);
        assert!(matches!(normalizer(&[s]), Err(Error::AllMasked)));
    }

    #[test]
    fn baseline_value_and_gradients_match_finite_differences() {
        let samples = vec![term(2.0, [1.5, 0.2], 3, vec![0.3]), term(0.5, [0.4, 0.9], 2, vec![-0.7])];
        let value = loss_baseline(&samples).unwrap();
        let z = 15.0;
        let direct = (2.0 * (-0.3f64).exp() * 1.7 + 0.3 * 9.0 + 0.5 * (0.7f64).exp() * 1.3 - 0.7 * 6.0) / z;
        assert!((value - direct).abs() < 1e-14);
        let (_, w) = breakdown(LossMode::Baseline, &samples, &[1.0, 1.0]).unwrap();
        let h = 1e-6;
        for b in 0..2 {
            let mut p = samples.clone();
            p[b].u[0] += h;
            let mut m = samples.clone();
            m[b].u[0] -= h;
            let fd = (loss_baseline(&p).unwrap() - loss_baseline(&m).unwrap()) / (2.0 * h);
            assert!((fd - w[b].du[0]).abs() < 1e-8);
            for k in 0..2 {
                let mut p = samples.clone();
                p[b].residuals.sums[k] += h;
                let mut m = samples.clone();
                m[b].residuals.sums[k] -= h;
                let fd = (loss_baseline(&p).unwrap() - loss_baseline(&m).unwrap()) / (2.0 * h);
                assert!((fd - w[b].a[k]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn baseline_u_optimum_matches_closed_form() {
        // frozen residual table at one t: optimum e^u = E[λ S] / E[V N]
        let table = [(1.3, [2.0, 0.1], 4), (1.3, [0.5, 0.7], 3), (1.3, [3.0, 0.2], 2)];
        let build = |u: f64| -> Vec<SampleLoss> { table.iter().map(|(l, s, v)| term(*l, *s, *v, vec![u])).collect() };
        let mut u = 0.0;
        for _ in 0..200 {
            let (_, w) = breakdown(LossMode::Baseline, &build(u), &[1.0, 1.0]).unwrap();
            let g: f64 = w.iter().map(|w| w.du[0]).sum();
            let hess: f64 = build(u).iter().map(|s| s.lambda * (-u).exp() * s.residuals.total()).sum::<f64>() / 27.0;
            u -= g / hess;
        }
        let closed = (1.3 * (2.1 + 1.2 + 3.2) / 27.0f64).ln();
        assert!((u - closed).abs() < 1e-10);
    }

    #[test]
    fn head_loss_optimum_is_per_group_mean() {
        let sums = [[0.8, 0.05], [1.2, 0.01], [0.4, 0.09]];
        let valid = [4, 2, 3];
        let mut u = vec![0.0, 0.0];
        for _ in 0..20_000 {
            let s: Vec<SampleLoss> = (0..3).map(|b| term(1.0, sums[b], valid[b], u.clone())).collect();
            let (_, w) = breakdown(LossMode::PerGroup, &s, &[1.0, 1.0]).unwrap();
            for k in 0..2 {
                u[k] -= 0.5 * w.iter().map(|w| w.du[k]).sum::<f64>();
            }
        }
        let mean_a = (0.8 + 1.2 + 0.4) / (2.0 * 9.0);
        let mean_b = (0.05 + 0.01 + 0.09) / 9.0;
        assert!((u[0].exp() / mean_a - 1.0).abs() < 1e-6);
        assert!((u[1].exp() / mean_b - 1.0).abs() < 1e-6);
    }

    #[test]
    fn constant_residual_converges_to_constant() {
        let c = 0.37;
        let mut u = 0.0;
        for _ in 0..5000 {
            let s = vec![term(5.0, [c * 8.0, c * 4.0], 4, vec![u])];
            u -= 0.5 * breakdown(LossMode::GradBalanced, &s, &[1.0, 1.0]).unwrap().1[0].du[0];
        }
        assert!((u.exp() / c - 1.0).abs() < 0.01);
    }

    #[test]
    fn theta_coefficients_and_head_gradient_separation() {
        let s = term(4.0, [1.0, 2.0], 2, vec![0.6]);
        let w = sample_weighting(LossMode::GradBalanced, &s, 6.0, &[1.0, 1.0]).unwrap();
        let a = 2.0 * (-0.3f64).exp() / 6.0;
        assert!((w.a[0] - a).abs() < 1e-15 && (w.a[1] - a).abs() < 1e-15);
        assert!((w.theta - 3.0 * a).abs() < 1e-15);
        // du is the derivative of the head loss only
        let h = 1e-6;
        let at = |u: f64| sample_weighting(LossMode::GradBalanced, &term(4.0, [1.0, 2.0], 2, vec![u]), 6.0, &[1.0, 1.0]).unwrap();
        let fd_psi = (at(0.6 + h).psi - at(0.6 - h).psi) / (2.0 * h);
        let fd_theta = (at(0.6 + h).theta - at(0.6 - h).theta) / (2.0 * h);
        assert!((fd_psi - w.du[0]).abs() < 1e-8);
        assert!(fd_theta.abs() > 0.1);
        // the head loss does not depend on λ, so it carries no denoiser weighting
        let w2 = sample_weighting(LossMode::GradBalanced, &term(9.0, [1.0, 2.0], 2, vec![0.6]), 6.0, &[1.0, 1.0]).unwrap();
        assert_eq!(w.psi, w2.psi);
        assert_eq!(w.du, w2.du);
    }

    #[test]
    fn final_with_unit_weights_equals_per_group() {
        let s = term(2.5, [0.3, 0.8], 3, vec![0.1, -0.4]);
        let pg = sample_weighting(LossMode::PerGroup, &s, 9.0, &[1.0, 1.0]).unwrap();
        let fi = sample_weighting(LossMode::Final, &s, 9.0, &[1.0, 1.0]).unwrap();
        assert_eq!(pg.a, fi.a);
        assert_eq!(pg.theta, fi.theta);
        let fw = sample_weighting(LossMode::Final, &s, 9.0, &[2.0, 0.5]).unwrap();
        assert_eq!(fw.a[0], 2.0 * pg.a[0]);
        assert_eq!(fw.a[1], 0.5 * pg.a[1]);
    }

    #[test]
    fn mode_parsing() {
        for m in LossMode::ALL {
            assert_eq!(m.name().parse::<LossMode>().unwrap(), m);
        }
        assert!("nope".parse::<LossMode>().is_err());
        assert_eq!(LossMode::Final.num_heads(4), 4);
        assert_eq!(LossMode::GradBalanced.num_heads(4), 1);
    }
}
