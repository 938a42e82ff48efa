//! Limb-length stability, foot skating, diversity and a Fréchet distance in
//! a frozen PCA embedding.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::layout::{normalize, FeatureLayout, NormStats};
use crate::motion::rotation::{norm, sub, Vec3};
use crate::motion::skeleton::sequence_positions;
use crate::motion::{MotionSample, Skeleton};
use crate::par::{self, Exec};

/// Joint positions per valid frame of every sequence.
pub type Positions = Vec<Vec<Vec3>>;

pub fn positions(samples: &[MotionSample], skeleton: &Skeleton, exec: Exec) -> Result<Vec<Positions>> {
    par::map_slice(exec, samples, |s| sequence_positions(s, skeleton)).into_iter().collect()
}

/// Mean over limbs and sequences of the temporal standard deviation of each
/// parent–child distance, in millimetres.
pub fn limb_sigma_positions(seqs: &[Positions], parents: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for seq in seqs {
        if seq.is_empty() {
            continue;
        }
        for j in 1..parents.len() {
            let lens: Vec<f64> = seq.iter().map(|f| norm(&sub(&f[j], &f[parents[j]]))).collect();
            let mean = lens.iter().sum::<f64>() / lens.len() as f64;
            let var = lens.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / lens.len() as f64;
            total += var.sqrt();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(1000.0 * total / count as f64)
}

pub fn limb_sigma(samples: &[MotionSample], skeleton: &Skeleton, exec: Exec) -> Result<f64> {
    limb_sigma_positions(&positions(samples, skeleton, exec)?, &skeleton.parents)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SkatingThresholds {
    /// Contact height (m).
    pub height: f64,
    /// Horizontal displacement per frame above which a contact skates (m).
    pub velocity: f64,
}

impl Default for SkatingThresholds {
    fn default() -> Self {
        Self { height: 0.05, velocity: 0.0025 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FootSkating {
    pub percent: f64,
    pub contact_frames: usize,
    pub skating_frames: usize,
    /// Set when no foot frame was in contact; `percent` is then 0.
    pub no_contacts: bool,
}

/// Pooled over feet and sequences: the share of contact frames (height
/// below threshold) whose horizontal displacement to the next frame exceeds
/// the velocity threshold.
pub fn foot_skating_positions(seqs: &[Positions], feet: &[usize], th: SkatingThresholds) -> FootSkating {
    let mut contact = 0usize;
    let mut skating = 0usize;
    for seq in seqs {
        for f in 0..seq.len().saturating_sub(1) {
            for &foot in feet {
                let p = seq[f][foot];
                if p[2] < th.height {
                    contact += 1;
                    let q = seq[f + 1][foot];
                    if (q[0] - p[0]).hypot(q[1] - p[1]) > th.velocity {
                        skating += 1;
                    }
                }
            }
        }
    }
    if contact == 0 {
        log::warn!("no foot contact frames; foot skating reported as 0");
        return FootSkating { percent: 0.0, contact_frames: 0, skating_frames: 0, no_contacts: true };
    }
    FootSkating { percent: 100.0 * skating as f64 / contact as f64, contact_frames: contact, skating_frames: skating, no_contacts: false }
}

pub fn foot_skating(samples: &[MotionSample], skeleton: &Skeleton, th: SkatingThresholds, exec: Exec) -> Result<FootSkating> {
    Ok(foot_skating_positions(&positions(samples, skeleton, exec)?, &skeleton.feet, th))
}

/// Mean Euclidean distance over `n_pairs` disjoint random pairs.
pub fn diversity<R: Rng + ?Sized>(embeddings: &[Vec<f64>], n_pairs: usize, rng: &mut R) -> Result<f64> {
    if n_pairs == 0 || embeddings.len() < 2 * n_pairs {
        return Err(Error::InsufficientSamples { need: 2 * n_pairs.max(1), have: embeddings.len() });
    }
    // canonical order first, so the result does not depend on input order
    let mut idx: Vec<usize> = (0..embeddings.len()).collect();
    idx.sort_by(|&a, &b| {
        embeddings[a].iter().zip(&embeddings[b]).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
    });
    idx.shuffle(rng);
    let total: f64 = idx[..2 * n_pairs]
        .chunks(2)
        .map(|p| embeddings[p[0]].iter().zip(&embeddings[p[1]]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
        .sum();
    Ok(total / n_pairs as f64)
}

fn gaussian_fit(x: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let d = x[0].len();
    let n = x.len() as f64;
    let mut mu = DVector::zeros(d);
    for v in x {
        mu += DVector::from_column_slice(v);
    }
    mu /= n;
    let mut cov = DMatrix::zeros(d, d);
    for v in x {
        let c = DVector::from_column_slice(v) - &mu;
        cov += &c * c.transpose();
    }
    cov /= n - 1.0;
    (mu, cov)
}

/// Relative tolerance for negative eigenvalues in the matrix square root.
const PSD_TOL: f64 = 1e-8;

fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < -PSD_TOL * scale {
            return Err(Error::NotPsd(*v));
        }
        *v = v.max(0.0).sqrt();
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose())
}

/// `|μ₁−μ₂|² + tr(Σ₁ + Σ₂ − 2(Σ₁Σ₂)^{1/2})` between Gaussians fitted to two
/// embedding sets.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let d = a.first().map_or(0, |v| v.len());
    for set in [a, b] {
        if set.len() < d + 1 || d == 0 {
            return Err(Error::InsufficientSamples { need: d + 1, have: set.len() });
        }
        if set.iter().any(|v| v.len() != d) {
            return Err(Error::DimensionMismatch { expected: d, got: set.iter().map(|v| v.len()).find(|&l| l != d).unwrap_or(0) });
        }
    }
    let (m1, s1) = gaussian_fit(a);
    let (m2, s2) = gaussian_fit(b);
    let r1 = psd_sqrt(&s1)?;
    let cross = psd_sqrt(&(&r1 * &s2 * &r1))?;
    let value = (m1 - m2).norm_squared() + s1.trace() + s2.trace() - 2.0 * cross.trace();
    if !value.is_finite() {
        return Err(Error::NonFinite("Fréchet distance".into()));
    }
    Ok(value.max(0.0))
}

/// Per-sequence features: temporal mean and std of every normalized column,
/// projected onto the leading principal directions of the fitting set.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedder {
    pub layout: FeatureLayout,
    pub stats: NormStats,
    pub mean: Vec<f64>,
    /// Row-major `dims × features`.
    pub components: Vec<f64>,
    pub dims: usize,
}

pub const EMBED_DIMS: usize = 32;

pub fn sequence_features(x: &MotionSample, stats: &NormStats) -> Result<Vec<f64>> {
    let z = normalize(x, stats)?;
    let n = z.n;
    let v = z.valid_len.max(1) as f64;
    let mut mean = vec![0.0; n];
    let mut sq = vec![0.0; n];
    for f in z.valid_frames() {
        for i in 0..n {
            mean[i] += f[i];
            sq[i] += f[i] * f[i];
        }
    }
    let mut out = Vec::with_capacity(2 * n);
    for m in mean.iter_mut() {
        *m /= v;
    }
    out.extend_from_slice(&mean);
    for i in 0..n {
        out.push((sq[i] / v - mean[i] * mean[i]).max(0.0).sqrt());
    }
    Ok(out)
}

/// Fits the embedder on `train`; the dimensionality drops below `dims` when
/// the features are rank deficient.
pub fn build_embedder(train: &[MotionSample], layout: &FeatureLayout, stats: &NormStats, dims: usize, exec: Exec) -> Result<Embedder> {
    let feats: Vec<Vec<f64>> = par::map_slice(exec, train, |s| sequence_features(s, stats)).into_iter().collect::<Result<_>>()?;
    if feats.len() < 2 {
        return Err(Error::InsufficientSamples { need: 2, have: feats.len() });
    }
    let (mu, cov) = gaussian_fit(&feats);
    let f = mu.len();
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..f).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let rank = order.iter().filter(|&&i| eig.eigenvalues[i] > 1e-12 * top).count();
    let keep = dims.min(rank);
    if keep < dims {
        log::warn!("embedding features have rank {rank}; using {keep} dimensions instead of {dims}");
    }
    if keep == 0 {
        return Err(Error::InsufficientSamples { need: dims, have: 0 });
    }
    let mut components = Vec::with_capacity(keep * f);
    for &i in &order[..keep] {
        let col = eig.eigenvectors.column(i);
        // fix the sign so the largest-magnitude entry is positive
        let big = col.iter().fold(0.0f64, |a, v| if v.abs() > a.abs() { *v } else { a });
        let s = if big < 0.0 { -1.0 } else { 1.0 };
        components.extend(col.iter().map(|v| s * v));
    }
    Ok(Embedder { layout: layout.clone(), stats: stats.clone(), mean: mu.as_slice().to_vec(), components, dims: keep })
}

#[derive(Serialize, Deserialize)]
struct EmbedderJson {
    layout: FeatureLayout,
    stats: serde_json::Value,
    mean: Vec<f64>,
    components: Vec<f64>,
    dims: usize,
}

impl Embedder {
    pub fn to_json(&self) -> serde_json::Value {
        let j = EmbedderJson {
            layout: self.layout.clone(),
            stats: self.stats.to_json(),
            mean: self.mean.clone(),
            components: self.components.clone(),
            dims: self.dims,
        };
        serde_json::to_value(j).expect("embedder serializes")
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        let j: EmbedderJson = serde_json::from_value(v.clone())?;
        j.layout.validate()?;
        let stats = NormStats::from_json(&j.stats, &j.layout)?;
        if j.mean.len() != 2 * j.layout.n() || j.components.len() != j.dims * j.mean.len() {
            return Err(Error::Format("embedder shape mismatch".into()));
        }
        Ok(Self { layout: j.layout, stats, mean: j.mean, components: j.components, dims: j.dims })
    }

    pub fn embed(&self, x: &MotionSample) -> Result<Vec<f64>> {
        let feat = sequence_features(x, &self.stats)?;
        let f = self.mean.len();
        Ok((0..self.dims)
            .map(|d| self.components[d * f..(d + 1) * f].iter().zip(feat.iter().zip(&self.mean)).map(|(c, (v, m))| c * (v - m)).sum())
            .collect())
    }

    pub fn embed_all(&self, xs: &[MotionSample], exec: Exec) -> Result<Vec<Vec<f64>>> {
        par::map_slice(exec, xs, |x| self.embed(x)).into_iter().collect()
    }

    pub fn hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update((self.dims as u64).to_le_bytes());
        for v in self.mean.iter().chain(&self.components) {
            h.update(v.to_le_bytes());
        }
        let (m, s) = self.stats.affine();
        for v in m.iter().chain(&s) {
            h.update(v.to_le_bytes());
        }
        h.finalize().into()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub frechet: f64,
    pub diversity: f64,
    pub foot_skating_pct: f64,
    pub foot_skating_no_contacts: bool,
    pub limb_sigma_mm: f64,
    pub n_generated: usize,
    pub n_reference: usize,
    pub diversity_pairs: usize,
    pub thresholds: SkatingThresholds,
    pub embedder_hash: String,
}

impl MetricsReport {
    pub fn csv_header() -> &'static str {
        "frechet,diversity,foot_skating,limb_sigma,n_generated,n_reference"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{:e},{:e},{:e},{:e},{},{}",
            self.frechet, self.diversity, self.foot_skating_pct, self.limb_sigma_mm, self.n_generated, self.n_reference
        )
    }
}

/// Scores raw-space `generated` sequences against raw-space `reference`.
pub fn evaluate(
    generated: &[MotionSample],
    reference: &[MotionSample],
    embedder: &Embedder,
    skeleton: &Skeleton,
    th: SkatingThresholds,
    pairs: usize,
    seed: u64,
    exec: Exec,
) -> Result<MetricsReport> {
    let eg = embedder.embed_all(generated, exec)?;
    let er = embedder.embed_all(reference, exec)?;
    let frechet = frechet_distance(&eg, &er)?;
    let mut rng = crate::seeding::stream(seed, &[crate::seeding::tag::METRICS]);
    let pairs = pairs.min(eg.len() / 2);
    let diversity = diversity(&eg, pairs, &mut rng)?;
    let pos = positions(generated, skeleton, exec)?;
    let skate = foot_skating_positions(&pos, &skeleton.feet, th);
    let limb = limb_sigma_positions(&pos, &skeleton.parents)?;
    let report = MetricsReport {
        frechet,
        diversity,
        foot_skating_pct: skate.percent,
        foot_skating_no_contacts: skate.no_contacts,
        limb_sigma_mm: limb,
        n_generated: generated.len(),
        n_reference: reference.len(),
        diversity_pairs: pairs,
        thresholds: th,
        embedder_hash: crate::motion::io::hex(&embedder.hash()),
    };
    for v in [report.frechet, report.diversity, report.foot_skating_pct, report.limb_sigma_mm] {
        if !v.is_finite() {
            return Err(Error::NonFinite("metrics".into()));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{fit_stats, NormScheme};
    use crate::motion::{generate_dataset, rotate_up_axis, SynthConfig};
    use crate::seeding;
    use rand_distr::{Distribution, StandardNormal};

    fn gauss(seed: u64, n: usize, d: usize, shift: f64) -> Vec<Vec<f64>> {
        let mut rng = seeding::stream(seed, &[]);
        (0..n).map(|_| (0..d).map(|_| { let z: f64 = StandardNormal.sample(&mut rng); z + shift }).collect()).collect()
    }

    #[test]
    fn limb_sigma_two_point_closed_form() {
        let parents = [0, 0];
        let seq: Positions = (0..10).map(|i| vec![[0.0; 3], [0.0, 0.0, if i % 2 == 0 { 1.0 } else { 1.2 }]]).collect();
        let v = limb_sigma_positions(&[seq], &parents).unwrap();
        assert!((v - 100.0).abs() < 1e-9, "{v}");
    }

    #[test]
    fn skating_extremes() {
        let pinned: Positions = (0..5).map(|_| vec![[0.0; 3], [0.3, 0.0, 0.0]]).collect();
        assert_eq!(foot_skating_positions(&[pinned], &[1], SkatingThresholds::default()).percent, 0.0);
        let slide: Positions = (0..5).map(|i| vec![[0.0; 3], [0.01 * i as f64, 0.0, 0.0]]).collect();
        assert_eq!(foot_skating_positions(&[slide], &[1], SkatingThresholds::default()).percent, 100.0);
        let air: Positions = (0..5).map(|_| vec![[0.0; 3], [0.0, 0.0, 1.0]]).collect();
        let r = foot_skating_positions(&[air], &[1], SkatingThresholds::default());
        assert!(r.no_contacts && r.percent == 0.0);
    }

    #[test]
    fn synthetic_data_metrics() {
        let ds = generate_dataset(&SynthConfig { n_train: 40, n_val: 4, n_test: 4, ..Default::default() }, 0).unwrap();
        let sk = &ds.skeleton;
        let train = &ds.train.batch.samples;
        let limb = limb_sigma(train, sk, Exec::default()).unwrap();
        assert!(limb < 1e-6 * 450.0, "{limb}");
        let th = SkatingThresholds::default();
        let skate = foot_skating(train, sk, th, Exec::default()).unwrap();
        let scripted = crate::motion::synth::scripted_skate_ratio(&ds.train, sk, th.height).unwrap();
        assert!((skate.percent - scripted).abs() <= 1.0, "{} vs {scripted}", skate.percent);
        let rotated: Vec<_> = train.iter().map(|s| rotate_up_axis(s, &ds.layout, 1.1)).collect();
        assert!((limb_sigma(&rotated, sk, Exec::default()).unwrap() - limb).abs() < 1e-9);
        let rs = foot_skating(&rotated, sk, th, Exec::default()).unwrap();
        assert_eq!(rs.contact_frames, skate.contact_frames);
        assert!((rs.percent - skate.percent).abs() < 1e-9);
    }

    #[test]
    fn diversity_cases() {
        let same = vec![vec![1.0, 2.0]; 10];
        let mut rng = seeding::stream(0, &[]);
        assert_eq!(diversity(&same, 5, &mut rng).unwrap(), 0.0);
        assert!(diversity(&same, 6, &mut rng).is_err());
        // two clusters of equal size: a random pair straddles them with
        // probability n/(2n−1) per pair on average
        let mut two = vec![vec![0.0]; 500];
        two.extend(vec![vec![3.0]; 500]);
        let mut acc = 0.0;
        for s in 0..40 {
            acc += diversity(&two, 500, &mut seeding::stream(s, &[])).unwrap();
        }
        let expect = 3.0 * 500.0 / 999.0;
        assert!((acc / 40.0 - expect).abs() < 0.03, "{}", acc / 40.0);
        let a = diversity(&two, 100, &mut seeding::stream(9, &[])).unwrap();
        let b = diversity(&two, 100, &mut seeding::stream(9, &[])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn frechet_closed_forms() {
        let a = gauss(1, 400, 3, 0.0);
        assert!(frechet_distance(&a, &a).unwrap() <= 1e-8);
        // with the empirical fits the mean term is exact; covariances equal
        let b: Vec<Vec<f64>> = a.iter().map(|v| vec![v[0] + 1.0, v[1], v[2]]).collect();
        assert!((frechet_distance(&a, &b).unwrap() - 1.0).abs() < 1e-8);
        let x = gauss(2, 20000, 1, 0.0);
        let y = gauss(3, 20000, 1, 1.0);
        assert!((frechet_distance(&x, &y).unwrap() - 1.0).abs() < 0.05);
        assert!(frechet_distance(&a[..3], &a).is_err());
    }

    #[test]
    fn frechet_symmetric_and_rotation_invariant() {
        let a = gauss(4, 300, 2, 0.0);
        let b: Vec<Vec<f64>> = gauss(5, 300, 2, 0.0).iter().map(|v| vec![2.0 * v[0] + 0.5, 0.5 * v[1] + v[0]]).collect();
        let d = frechet_distance(&a, &b).unwrap();
        assert!((d - frechet_distance(&b, &a).unwrap()).abs() < 1e-9 * d.max(1.0));
        let (c, s) = (0.6f64, 0.8f64);
        let rot = |v: &Vec<f64>| vec![c * v[0] - s * v[1], s * v[0] + c * v[1]];
        let ra: Vec<_> = a.iter().map(rot).collect();
        let rb: Vec<_> = b.iter().map(rot).collect();
        assert!((frechet_distance(&ra, &rb).unwrap() - d).abs() < 1e-9 * d.max(1.0));
    }

    #[test]
    fn non_psd_is_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.5]);
        assert!(matches!(psd_sqrt(&m), Err(Error::NotPsd(_))));
    }

    #[test]
    fn embedder_is_centered_and_stable() {
        let ds = generate_dataset(&SynthConfig { n_train: 80, n_val: 4, n_test: 4, ..Default::default() }, 0).unwrap();
        let train = &ds.train.batch.samples;
        let stats = fit_stats(train, &ds.layout, NormScheme::Structured).unwrap();
        let e = build_embedder(train, &ds.layout, &stats, EMBED_DIMS, Exec::default()).unwrap();
        let e2 = build_embedder(train, &ds.layout, &stats, EMBED_DIMS, Exec::Sequential).unwrap();
        assert_eq!(e.hash(), e2.hash());
        let emb = e.embed_all(train, Exec::default()).unwrap();
        for d in 0..e.dims {
            let m: f64 = emb.iter().map(|v| v[d]).sum::<f64>() / emb.len() as f64;
            assert!(m.abs() < 1e-8, "{d}: {m}");
        }
        let back = Embedder::from_json(&e.to_json()).unwrap();
        assert_eq!(back.hash(), e.hash());
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(8))]
        #[test]
        fn metrics_ignore_sample_order(seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            let ds = generate_dataset(&SynthConfig { n_train: 48, n_val: 40, n_test: 1, ..Default::default() }, 1).unwrap();
            let fit = fit_stats(&ds.train.batch.samples, &ds.layout, NormScheme::Structured).unwrap();
            let emb = build_embedder(&ds.train.batch.samples, &ds.layout, &fit, 8, Exec::Sequential).unwrap();
            let gen = &ds.train.batch.samples[..40];
            let reference = &ds.val.batch.samples;
            let a = evaluate(gen, reference, &emb, &ds.skeleton, SkatingThresholds::default(), 10, 0, Exec::Sequential).unwrap();
            let mut g2 = gen.to_vec();
            let mut r2 = reference.to_vec();
            let mut rng = seeding::stream(seed, &[]);
            g2.shuffle(&mut rng);
            r2.shuffle(&mut rng);
            let b = evaluate(&g2, &r2, &emb, &ds.skeleton, SkatingThresholds::default(), 10, 0, Exec::Sequential).unwrap();
            proptest::prop_assert_eq!(a.diversity, b.diversity);
            proptest::prop_assert!((a.frechet - b.frechet).abs() <= 1e-9 * a.frechet.max(1.0));
            proptest::prop_assert!((a.limb_sigma_mm - b.limb_sigma_mm).abs() <= 1e-9 * a.limb_sigma_mm.max(1.0));
            proptest::prop_assert!((a.foot_skating_pct - b.foot_skating_pct).abs() <= 1e-9);
        }
    }
}
