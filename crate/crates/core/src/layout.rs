//! Grouped feature space: layout, structure-preserving normalization and
//! dimensionality-balancing group weights.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::motion::MotionSample;

/// Normalization applied to one feature group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormKind {
    /// Unit column vectors scaled by √3, no shift.
    Rotation6D,
    /// Scalar mean and std shared by all coordinates of the group.
    IsotropicZScore,
    /// Per-element mean and std.
    ElementwiseZScore,
    /// Per-element mean with the group's average per-element std (HumanML3D style).
    Baseline,
}

/// Which statistics `fit_stats` produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormScheme {
    /// Each group uses its own [`NormKind`].
    #[default]
    Structured,
    /// Every group uses [`NormKind::Baseline`].
    Baseline,
}

/// `out[i] = signs[i] * in[perm[i]]` within a group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MirrorMap {
    pub perm: Vec<usize>,
    pub signs: Vec<f64>,
}

impl MirrorMap {
    pub fn identity(dim: usize) -> Self {
        Self { perm: (0..dim).collect(), signs: vec![1.0; dim] }
    }

    pub fn apply(&self, input: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.signs[i] * input[self.perm[i]];
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub name: String,
    pub dim: usize,
    pub kind: NormKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mirror: Option<MirrorMap>,
}

/// Ordered groups of a per-frame feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub groups: Vec<GroupSpec>,
    pub l_max: usize,
}

impl FeatureLayout {
    pub fn new(groups: Vec<GroupSpec>, l_max: usize) -> Result<Self> {
        let layout = Self { groups, l_max };
        layout.validate()?;
        Ok(layout)
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups.is_empty() {
            return Err(Error::InvalidLayout("no groups".into()));
        }
        if self.l_max == 0 {
            return Err(Error::InvalidLayout("l_max must be positive".into()));
        }
        for g in &self.groups {
            if g.dim == 0 {
                return Err(Error::InvalidLayout(format!("group `{}` has zero dim", g.name)));
            }
            if g.kind == NormKind::Rotation6D && g.dim % 6 != 0 {
                return Err(Error::InvalidLayout(format!(
                    "rotation group `{}` has dim {} not divisible by 6",
                    g.name, g.dim
                )));
            }
            if let Some(m) = &g.mirror {
                if m.perm.len() != g.dim || m.signs.len() != g.dim || m.perm.iter().any(|&p| p >= g.dim) {
                    return Err(Error::InvalidLayout(format!("bad mirror map for `{}`", g.name)));
                }
            }
        }
        Ok(())
    }

    /// Per-frame dimensionality.
    pub fn n(&self) -> usize {
        self.groups.iter().map(|g| g.dim).sum()
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.groups
            .iter()
            .map(|g| {
                let o = acc;
                acc += g.dim;
                o
            })
            .collect()
    }

    /// Half-open column range of group `k`.
    pub fn range(&self, k: usize) -> std::ops::Range<usize> {
        let start: usize = self.groups[..k].iter().map(|g| g.dim).sum();
        start..start + self.groups[k].dim
    }

    /// Group index of every column.
    pub fn column_groups(&self) -> Vec<usize> {
        self.groups.iter().enumerate().flat_map(|(k, g)| std::iter::repeat(k).take(g.dim)).collect()
    }

    pub fn group_index(&self, name: &str) -> Option<usize> {
        self.groups.iter().position(|g| g.name == name)
    }

    pub fn hash(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("layout serializes");
        Sha256::digest(&json).into()
    }

    /// Layout of the articulated-motion features: joint rotations `J`,
    /// global orientation `Phi`, translation `tau` and shape `beta`.
    ///
    /// `pairs` lists left/right joint pairs as indices into the non-root
    /// joint list.
    pub fn motion(num_joints: usize, pairs: &[(usize, usize)], n_beta: usize, l_max: usize) -> Result<Self> {
        if num_joints < 2 {
            return Err(Error::InvalidLayout("need at least two joints".into()));
        }
        let slots = num_joints - 1;
        let mut partner: Vec<usize> = (0..slots).collect();
        for &(a, b) in pairs {
            partner[a] = b;
            partner[b] = a;
        }
        let mut j_perm = Vec::with_capacity(slots * 6);
        let mut j_signs = Vec::with_capacity(slots * 6);
        for &p in &partner {
            for e in 0..6 {
                j_perm.push(p * 6 + e);
                j_signs.push(REFLECT_6D[e]);
            }
        }
        Self::new(
            vec![
                GroupSpec {
                    name: "J".into(),
                    dim: slots * 6,
                    kind: NormKind::Rotation6D,
                    mirror: Some(MirrorMap { perm: j_perm, signs: j_signs }),
                },
                GroupSpec {
                    name: "Phi".into(),
                    dim: 6,
                    kind: NormKind::Rotation6D,
                    mirror: Some(MirrorMap { perm: (0..6).collect(), signs: REFLECT_6D.to_vec() }),
                },
                GroupSpec {
                    name: "tau".into(),
                    dim: 3,
                    kind: NormKind::IsotropicZScore,
                    mirror: Some(MirrorMap { perm: vec![0, 1, 2], signs: vec![-1.0, 1.0, 1.0] }),
                },
                GroupSpec { name: "beta".into(), dim: n_beta, kind: NormKind::ElementwiseZScore, mirror: None },
            ],
            l_max,
        )
    }
}

/// Sign pattern of a 6D block under reflection through the x = 0 plane,
/// `R ↦ S R S` with `S = diag(-1, 1, 1)`.
pub const REFLECT_6D: [f64; 6] = [1.0, -1.0, -1.0, -1.0, 1.0, 1.0];


/// Fitted statistics for one group. The denormalization map is
/// `x = std[i] * x̂ + mean[i]`; rotation groups store only `scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub kind: NormKind,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub scale: f64,
    #[serde(skip)]
    pub dim: usize,
}

impl GroupStats {
    fn element(&self, i: usize) -> (f64, f64) {
        match self.kind {
            NormKind::Rotation6D => (0.0, 1.0 / self.scale),
            NormKind::IsotropicZScore => (self.mean[0], self.std[0]),
            NormKind::ElementwiseZScore | NormKind::Baseline => (self.mean[i], self.std[i]),
        }
    }

    fn check(&self, name: &str) -> Result<()> {
        let want = match self.kind {
            NormKind::Rotation6D => 0,
            NormKind::IsotropicZScore => 1,
            NormKind::ElementwiseZScore | NormKind::Baseline => self.dim,
        };
        if self.mean.len() != want || self.std.len() != want {
            return Err(Error::Format(format!("group `{name}` stats have wrong length")));
        }
        if self.kind == NormKind::Rotation6D && !(self.scale > 0.0) {
            return Err(Error::Format(format!("group `{name}` has non-positive scale")));
        }
        if self.std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Format(format!("group `{name}` has non-positive std")));
        }
        Ok(())
    }
}

/// Normalization statistics, one entry per group in layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub names: Vec<String>,
    pub groups: Vec<GroupStats>,
}

impl NormStats {
    /// Per-column `(mean, std)` of the denormalization map.
    pub fn affine(&self) -> (Vec<f64>, Vec<f64>) {
        let mut means = Vec::new();
        let mut stds = Vec::new();
        for g in &self.groups {
            for i in 0..g.dim {
                let (m, s) = g.element(i);
                means.push(m);
                stds.push(s);
            }
        }
        (means, stds)
    }

    pub fn n(&self) -> usize {
        self.groups.iter().map(|g| g.dim).sum()
    }

    /// JSON object: group name → `{kind, mean, std, scale}`.
    pub fn to_json(&self) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        for (name, g) in self.names.iter().zip(&self.groups) {
            map.insert(name.clone(), serde_json::to_value(g).expect("stats serialize"));
        }
        serde_json::Value::Object(map)
    }

    pub fn from_json(value: &serde_json::Value, layout: &FeatureLayout) -> Result<Self> {
        let obj = value.as_object().ok_or_else(|| Error::Format("stats must be a JSON object".into()))?;
        if obj.len() != layout.num_groups() {
            return Err(Error::DimensionMismatch { expected: layout.num_groups(), got: obj.len() });
        }
        let mut names = Vec::new();
        let mut groups = Vec::new();
        for spec in &layout.groups {
            let v = obj
                .get(&spec.name)
                .ok_or_else(|| Error::Format(format!("missing stats for group `{}`", spec.name)))?;
            let mut g: GroupStats = serde_json::from_value(v.clone())?;
            g.dim = spec.dim;
            g.check(&spec.name)?;
            names.push(spec.name.clone());
            groups.push(g);
        }
        Ok(Self { names, groups })
    }
}

fn check_sample(x: &MotionSample, n: usize) -> Result<()> {
    if x.n != n {
        return Err(Error::DimensionMismatch { expected: n, got: x.n });
    }
    Ok(())
}

/// Fit normalization statistics on the valid frames of `samples`.
pub fn fit_stats(samples: &[MotionSample], layout: &FeatureLayout, scheme: NormScheme) -> Result<NormStats> {
    let n = layout.n();
    let frames: usize = samples.iter().map(|s| s.valid_len).sum();
    if samples.is_empty() || frames == 0 {
        return Err(Error::EmptyDataset);
    }
    for s in samples {
        check_sample(s, n)?;
    }
    let count = frames as f64;
    let mut mean = vec![0.0; n];
    for s in samples {
        for f in s.valid_frames() {
            for (m, v) in mean.iter_mut().zip(f) {
                *m += v;
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0; n];
    for s in samples {
        for f in s.valid_frames() {
            for ((acc, v), m) in var.iter_mut().zip(f).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
    }
    var.iter_mut().for_each(|v| *v /= count);

    let degenerate = |std: f64, mean: f64| !(std > 1e-12 * (1.0 + mean.abs()));
    let mut groups = Vec::with_capacity(layout.num_groups());
    for (k, spec) in layout.groups.iter().enumerate() {
        let r = layout.range(k);
        let kind = match scheme {
            NormScheme::Structured => spec.kind,
            NormScheme::Baseline => NormKind::Baseline,
        };
        let stats = match kind {
            NormKind::Rotation6D => {
                GroupStats { kind, mean: vec![], std: vec![], scale: 3f64.sqrt(), dim: spec.dim }
            }
            NormKind::IsotropicZScore => {
                let mu = mean[r.clone()].iter().sum::<f64>() / spec.dim as f64;
                // pooled second moment about the shared mean
                let mut acc = 0.0;
                for s in samples {
                    for f in s.valid_frames() {
                        acc += f[r.clone()].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
                    }
                }
                let sigma = (acc / (count * spec.dim as f64)).sqrt();
                if degenerate(sigma, mu) {
                    return Err(Error::DegenerateStd { group: spec.name.clone(), element: 0 });
                }
                GroupStats { kind, mean: vec![mu], std: vec![sigma], scale: 1.0, dim: spec.dim }
            }
            NormKind::ElementwiseZScore => {
                let m = mean[r.clone()].to_vec();
                let s: Vec<f64> = var[r.clone()].iter().map(|v| v.sqrt()).collect();
                if let Some(i) = s.iter().zip(&m).position(|(s, m)| degenerate(*s, *m)) {
                    return Err(Error::DegenerateStd { group: spec.name.clone(), element: i });
                }
                GroupStats { kind, mean: m, std: s, scale: 1.0, dim: spec.dim }
            }
            NormKind::Baseline => {
                let m = mean[r.clone()].to_vec();
                let avg = var[r.clone()].iter().map(|v| v.sqrt()).sum::<f64>() / spec.dim as f64;
                if degenerate(avg, 0.0) {
                    return Err(Error::DegenerateStd { group: spec.name.clone(), element: 0 });
                }
                GroupStats { kind, mean: m, std: vec![avg; spec.dim], scale: 1.0, dim: spec.dim }
            }
        };
        groups.push(stats);
    }
    Ok(NormStats { names: layout.groups.iter().map(|g| g.name.clone()).collect(), groups })
}

/// Map raw features to the normalized space. Padding stays zero.
pub fn normalize(x: &MotionSample, stats: &NormStats) -> Result<MotionSample> {
    check_sample(x, stats.n())?;
    let (mean, std) = stats.affine();
    let mut out = x.clone();
    for f in out.valid_frames_mut() {
        for ((v, m), s) in f.iter_mut().zip(&mean).zip(&std) {
            *v = (*v - m) / s;
        }
    }
    Ok(out)
}

/// Exact inverse of [`normalize`].
pub fn denormalize(x: &MotionSample, stats: &NormStats) -> Result<MotionSample> {
    check_sample(x, stats.n())?;
    let (mean, std) = stats.affine();
    let mut out = x.clone();
    for f in out.valid_frames_mut() {
        for ((v, m), s) in f.iter_mut().zip(&mean).zip(&std) {
            *v = *v * s + m;
        }
    }
    Ok(out)
}

/// Root-mean-square of each group over the valid frames of `samples`.
pub fn group_magnitudes(samples: &[MotionSample], layout: &FeatureLayout) -> Vec<f64> {
    let cols = layout.column_groups();
    let g = layout.num_groups();
    let mut sq = vec![0.0; g];
    let mut cnt = vec![0usize; g];
    for s in samples {
        for f in s.valid_frames() {
            for (v, &k) in f.iter().zip(&cols) {
                sq[k] += v * v;
                cnt[k] += 1;
            }
        }
    }
    sq.iter().zip(&cnt).map(|(s, &c)| if c == 0 { 0.0 } else { (s / c as f64).sqrt() }).collect()
}

/// Root-mean-square over all valid elements.
pub fn overall_magnitude(samples: &[MotionSample]) -> f64 {
    let mut sq = 0.0;
    let mut cnt = 0usize;
    for s in samples {
        for f in s.valid_frames() {
            sq += f.iter().map(|v| v * v).sum::<f64>();
            cnt += f.len();
        }
    }
    if cnt == 0 {
        0.0
    } else {
        (sq / cnt as f64).sqrt()
    }
}

/// Weights `w^k = sqrt(N / G) / sqrt(N^k)` giving every group the same
/// share of a standardized concatenation.
pub fn group_weights(layout: &FeatureLayout) -> Vec<f64> {
    let total = layout.n() as f64;
    let g = layout.num_groups() as f64;
    layout.groups.iter().map(|spec| (total / g).sqrt() / (spec.dim as f64).sqrt()).collect()
}

/// Per-column expansion of group weights.
pub fn column_weights(layout: &FeatureLayout, w: &[f64]) -> Result<Vec<f64>> {
    if w.len() != layout.num_groups() {
        return Err(Error::WeightCount { expected: layout.num_groups(), got: w.len() });
    }
    Ok(layout.column_groups().into_iter().map(|k| w[k]).collect())
}

fn scale_columns(x: &MotionSample, layout: &FeatureLayout, w: &[f64], invert: bool) -> Result<MotionSample> {
    check_sample(x, layout.n())?;
    let cw = column_weights(layout, w)?;
    let mut out = x.clone();
    for f in out.valid_frames_mut() {
        for (v, c) in f.iter_mut().zip(&cw) {
            if invert {
                *v /= c;
            } else {
                *v *= c;
            }
        }
    }
    Ok(out)
}

pub fn apply_group_weights(x: &MotionSample, layout: &FeatureLayout, w: &[f64]) -> Result<MotionSample> {
    scale_columns(x, layout, w, false)
}

pub fn remove_group_weights(x: &MotionSample, layout: &FeatureLayout, w: &[f64]) -> Result<MotionSample> {
    scale_columns(x, layout, w, true)
}

/// `Σ log std_i` over every element of `valid_frames` frames, i.e. the log
/// absolute Jacobian determinant of the denormalization map in nats.
pub fn log_abs_det_normalization(stats: &NormStats, valid_frames: usize) -> f64 {
    let (_, std) = stats.affine();
    valid_frames as f64 * std.iter().map(|s| s.ln()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn two_group_layout() -> FeatureLayout {
        FeatureLayout::new(
            vec![
                GroupSpec { name: "rot".into(), dim: 6, kind: NormKind::Rotation6D, mirror: None },
                GroupSpec { name: "tau".into(), dim: 3, kind: NormKind::IsotropicZScore, mirror: None },
            ],
            4,
        )
        .unwrap()
    }

    fn sample(frames: Vec<[f64; 9]>, l_max: usize) -> MotionSample {
        let valid = frames.len();
        let mut data = vec![0.0; l_max * 9];
        for (i, f) in frames.iter().enumerate() {
            data[i * 9..(i + 1) * 9].copy_from_slice(f);
        }
        MotionSample::new(data, valid, 9).unwrap()
    }

    #[test]
    fn layout_rejects_bad_rotation_dims() {
        let err = FeatureLayout::new(
            vec![GroupSpec { name: "r".into(), dim: 5, kind: NormKind::Rotation6D, mirror: None }],
            4,
        );
        assert!(err.is_err());
        let layout = two_group_layout();
        assert_eq!(layout.n(), 9);
        assert_eq!(layout.offsets(), vec![0, 6]);
    }

    #[test]
    fn constant_translation_is_degenerate() {
        let layout = two_group_layout();
        let f = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 5.0, 5.0, 5.0];
        let s = sample(vec![f, f, f], 4);
        match fit_stats(&[s], &layout, NormScheme::Structured) {
            Err(Error::DegenerateStd { group, .. }) => assert_eq!(group, "tau"),
            other => panic!("expected degenerate std, got {other:?}"),
        }
    }

    #[test]
    fn symmetric_translation_gives_unit_stats() {
        let layout = two_group_layout();
        let a = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, -1.0, -1.0, -1.0];
        let b = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 1.0];
        let stats = fit_stats(&[sample(vec![a, b], 4)], &layout, NormScheme::Structured).unwrap();
        assert_eq!(stats.groups[1].mean, vec![0.0]);
        assert_eq!(stats.groups[1].std, vec![1.0]);
        assert!(fit_stats(&[], &layout, NormScheme::Structured).is_err());
    }

    #[test]
    fn rotation_column_scaled_by_sqrt3() {
        let layout = two_group_layout();
        let a = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, -1.0, 2.0, 0.5];
        let b = [0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let s = sample(vec![a, b], 4);
        let stats = fit_stats(&[s.clone()], &layout, NormScheme::Structured).unwrap();
        let x = normalize(&s, &stats).unwrap();
        let r3 = 3f64.sqrt();
        for (a, b) in x.frame(0)[0..3].iter().zip([r3, 0.0, 0.0]) {
            assert!((a - b).abs() < 1e-15);
        }
        // padding untouched
        assert!(x.frame(2).iter().chain(x.frame(3)).all(|v| *v == 0.0));
        let back = denormalize(&x, &stats).unwrap();
        assert_eq!(&back.frame(0)[0..3], &[1.0, 0.0, 0.0]);
        // per-column magnitude of a normalized unit column is one
        let m = (x.frame(0)[0..3].iter().map(|v| v * v).sum::<f64>() / 3.0).sqrt();
        assert!((m - 1.0).abs() < 1e-15);
    }

    #[test]
    fn translation_mean_frame_maps_to_zero() {
        let layout = two_group_layout();
        let a = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 2.0, 4.0];
        let b = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 3.0, 8.0];
        let stats = fit_stats(&[sample(vec![a, b], 4)], &layout, NormScheme::Structured).unwrap();
        let mu = stats.groups[1].mean[0];
        let s = sample(vec![[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, mu, mu, mu]], 4);
        let x = normalize(&s, &stats).unwrap();
        assert_eq!(&x.frame(0)[6..9], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let layout = two_group_layout();
        let a = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, -1.0, -1.0, -1.0];
        let b = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 1.0];
        let stats = fit_stats(&[sample(vec![a, b], 4)], &layout, NormScheme::Structured).unwrap();
        let wrong = MotionSample::new(vec![0.0; 8], 1, 2).unwrap();
        assert!(normalize(&wrong, &stats).is_err());
        assert!(denormalize(&wrong, &stats).is_err());
    }

    #[test]
    fn paper_dims_group_weights() {
        let layout = FeatureLayout::new(
            ["J", "Phi", "tau", "beta"]
                .iter()
                .zip([126, 6, 3, 10])
                .map(|(n, d)| GroupSpec { name: n.to_string(), dim: d, kind: NormKind::ElementwiseZScore, mirror: None })
                .collect(),
            4,
        )
        .unwrap();
        let w = group_weights(&layout);
        // sqrt(145/4)/sqrt(N^k), evaluated independently
        let expected = [0.536_367, 2.457_980, 3.476_109, 1.903_943];
        for (a, b) in w.iter().zip(expected) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn single_and_equal_groups_have_unit_weight() {
        let one = FeatureLayout::new(
            vec![GroupSpec { name: "a".into(), dim: 7, kind: NormKind::ElementwiseZScore, mirror: None }],
            1,
        )
        .unwrap();
        assert_eq!(group_weights(&one), vec![1.0]);
        let two = FeatureLayout::new(
            vec![
                GroupSpec { name: "a".into(), dim: 3, kind: NormKind::ElementwiseZScore, mirror: None },
                GroupSpec { name: "b".into(), dim: 3, kind: NormKind::ElementwiseZScore, mirror: None },
            ],
            1,
        )
        .unwrap();
        assert_eq!(group_weights(&two), vec![1.0, 1.0]);
    }

    #[test]
    fn two_group_weights_match_mp_concat_at_half() {
        // magnitude-preserving concat with alpha = 1/2:
        // sqrt((Na+Nb)/((1-a)^2+a^2)) * (1-a)/sqrt(Na)  (per-element factor)
        for (na, nb) in [(3usize, 10usize), (126, 6), (1, 1)] {
            let layout = FeatureLayout::new(
                vec![
                    GroupSpec { name: "a".into(), dim: na, kind: NormKind::ElementwiseZScore, mirror: None },
                    GroupSpec { name: "b".into(), dim: nb, kind: NormKind::ElementwiseZScore, mirror: None },
                ],
                1,
            )
            .unwrap();
            let w = group_weights(&layout);
            let alpha: f64 = 0.5;
            let c = ((na + nb) as f64 / ((1.0 - alpha).powi(2) + alpha.powi(2))).sqrt();
            assert!((w[0] - c * (1.0 - alpha) / (na as f64).sqrt()).abs() < 1e-12);
            assert!((w[1] - c * alpha / (nb as f64).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn weighted_concat_is_standardized_monte_carlo() {
        let layout = FeatureLayout::new(
            vec![
                GroupSpec { name: "a".into(), dim: 2, kind: NormKind::ElementwiseZScore, mirror: None },
                GroupSpec { name: "b".into(), dim: 2, kind: NormKind::ElementwiseZScore, mirror: None },
            ],
            1,
        )
        .unwrap();
        let cw = column_weights(&layout, &group_weights(&layout)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let draws = 100_000;
        let mut sq = 0.0;
        for _ in 0..draws {
            for w in &cw {
                let z: f64 = rng.sample(StandardNormal);
                sq += (w * z).powi(2);
            }
        }
        let m = (sq / (draws * cw.len()) as f64).sqrt();
        assert!((m - 1.0).abs() < 0.01, "{m}");
    }

    #[test]
    fn weights_round_trip_and_count_check() {
        let layout = two_group_layout();
        let s = sample(vec![[0.3, -0.2, 0.1, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0]], 4);
        let w = [0.7, 1.9];
        let a = apply_group_weights(&s, &layout, &w).unwrap();
        let back = remove_group_weights(&a, &layout, &w).unwrap();
        for (x, y) in s.frames.iter().zip(&back.frames) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
        assert_eq!(apply_group_weights(&s, &layout, &[1.0, 1.0]).unwrap(), s);
        assert!(matches!(apply_group_weights(&s, &layout, &[1.0]), Err(Error::WeightCount { .. })));
        assert!(a.frame(1).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn log_det_closed_forms() {
        let unit = NormStats {
            names: vec!["a".into()],
            groups: vec![GroupStats {
                kind: NormKind::ElementwiseZScore,
                mean: vec![0.0; 3],
                std: vec![1.0; 3],
                scale: 1.0,
                dim: 3,
            }],
        };
        assert_eq!(log_abs_det_normalization(&unit, 10), 0.0);
        let rot = NormStats {
            names: vec!["r".into()],
            groups: vec![GroupStats { kind: NormKind::Rotation6D, mean: vec![], std: vec![], scale: 3f64.sqrt(), dim: 6 }],
        };
        // one frame of six rotation elements, each log(1/sqrt 3)
        let per_element = log_abs_det_normalization(&rot, 1) / 6.0;
        assert!((per_element - (-0.549_306_144_334_054_8)).abs() < 1e-12);
        let iso = NormStats {
            names: vec!["t".into()],
            groups: vec![GroupStats { kind: NormKind::IsotropicZScore, mean: vec![0.5], std: vec![2.0], scale: 1.0, dim: 3 }],
        };
        assert!((log_abs_det_normalization(&iso, 10) - 30.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn stats_json_round_trip() {
        let layout = two_group_layout();
        let a = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, -1.0, 0.0, 1.0];
        let b = [0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 2.0, 1.0];
        let stats = fit_stats(&[sample(vec![a, b], 4)], &layout, NormScheme::Structured).unwrap();
        let json = stats.to_json();
        assert_eq!(json["rot"]["scale"], serde_json::json!(3f64.sqrt()));
        assert_eq!(json["tau"]["kind"], serde_json::json!("IsotropicZScore"));
        let back = NormStats::from_json(&json, &layout).unwrap();
        assert_eq!(back, stats);
    }

    fn rotation_frames(seed: u64, count: usize) -> Vec<[f64; 9]> {
        use crate::motion::rotation::{axis_angle, matrix_to_rot6d};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let w = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
                let r6 = matrix_to_rot6d(&axis_angle(&w));
                let mut f = [0.0; 9];
                f[..6].copy_from_slice(&r6);
                for v in &mut f[6..] {
                    *v = rng.random_range(-2.0..2.0);
                }
                f
            })
            .collect()
    }

    proptest::proptest! {
        #[test]
        fn round_trips_are_exact(seed in 0u64..1000, valid in 1usize..=4, w0 in 0.1f64..4.0, w1 in 0.1f64..4.0) {
            use crate::motion::rotation::rot6d_to_matrix;
            let layout = two_group_layout();
            let fit = sample(rotation_frames(seed, 4), 4);
            let stats = fit_stats(&[fit], &layout, NormScheme::Structured).unwrap();
            let x = sample(rotation_frames(seed + 1, valid), 4);
            let back = denormalize(&normalize(&x, &stats).unwrap(), &stats).unwrap();
            for (a, b) in back.frames.iter().zip(&x.frames) {
                proptest::prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
            for i in 0..valid {
                let (ra, rb) = (rot6d_to_matrix(&back.frame(i)[..6]).unwrap(), rot6d_to_matrix(&x.frame(i)[..6]).unwrap());
                for (p, q) in ra.iter().flatten().zip(rb.iter().flatten()) {
                    proptest::prop_assert!((p - q).abs() <= 1e-12);
                }
            }
            let w = [w0, w1];
            let wb = remove_group_weights(&apply_group_weights(&x, &layout, &w).unwrap(), &layout, &w).unwrap();
            for (a, b) in wb.frames.iter().zip(&x.frames) {
                proptest::prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }
}
