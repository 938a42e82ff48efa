//! Procedural motions on the default skeleton.
//!
//! Each sequence alternates between *plant* and *move* segments. During a
//! plant segment the legs, root orientation and translation are frozen, so
//! feet in contact do not move at all. During a move segment the body
//! translates along a fixed heading while the legs swing; the translation
//! speed is bounded well above the swing speed, so every contact frame
//! followed by a move frame slides. This gives a known skating ratio.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::rotation::{self, axis_angle, mat_mul, matrix_to_rot6d, rot_z, Mat3};
use super::skeleton::{forward_kinematics_with_shape, sequence_positions, Skeleton};
use super::{MotionBatch, MotionSample};
use crate::error::{Error, Result};
use crate::layout::FeatureLayout;
use crate::par::{self, Exec};
use crate::seeding;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_joints: usize,
    pub fps: f64,
    /// Raw lengths are drawn uniformly from `[min_raw_len, max_raw_len]`.
    pub min_raw_len: usize,
    pub max_raw_len: usize,
    pub l_max: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_joints: 8,
            fps: 30.0,
            min_raw_len: 24,
            max_raw_len: 100,
            l_max: 64,
            n_train: 2000,
            n_val: 200,
            n_test: 200,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_joints < 2 {
            return Err(Error::InvalidConfig("need at least two joints".into()));
        }
        if self.num_joints != 8 {
            return Err(Error::InvalidConfig(format!("only the 8-joint skeleton is available, got {}", self.num_joints)));
        }
        if self.n_train == 0 {
            return Err(Error::InvalidConfig("count must be positive".into()));
        }
        if self.l_max < 32 || self.l_max % 16 != 0 {
            return Err(Error::InvalidConfig("l_max must be a multiple of 16 and at least 32".into()));
        }
        if self.min_raw_len == 0 || self.min_raw_len > self.max_raw_len || self.max_raw_len < 32 {
            return Err(Error::InvalidConfig("bad raw length range".into()));
        }
        if !(self.fps > 0.0) {
            return Err(Error::InvalidConfig("fps must be positive".into()));
        }
        Ok(())
    }
}

/// Result of [`crop_and_pad`].
#[derive(Debug, Clone, PartialEq)]
pub enum CropOutcome {
    Kept(MotionSample),
    /// Shorter than 32 frames.
    Dropped,
}

/// Crop to `l_max` when longer, otherwise down to a multiple of 16; pad with
/// zeros to `l_max`. Sequences shorter than 32 frames are dropped.
pub fn crop_and_pad(raw: &[f64], n: usize, l_max: usize) -> Result<CropOutcome> {
    if n == 0 || raw.len() % n != 0 || raw.is_empty() {
        return Err(Error::DimensionMismatch { expected: n, got: raw.len() });
    }
    let len = raw.len() / n;
    if len < 32 {
        return Ok(CropOutcome::Dropped);
    }
    let keep = if len > l_max { l_max } else { len / 16 * 16 };
    Ok(CropOutcome::Kept(MotionSample::from_valid(&raw[..keep * n], n, l_max)?))
}

/// One split with the generator's per-frame "moved since previous frame"
/// flags (cropped to the valid length).
#[derive(Debug, Clone)]
pub struct Split {
    pub batch: MotionBatch,
    pub moving: Vec<Vec<bool>>,
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub skeleton: Skeleton,
    pub layout: FeatureLayout,
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

struct RawMotion {
    frames: Vec<f64>,
    moving: Vec<bool>,
}

#[derive(Clone, Copy)]
struct Wave {
    amp: f64,
    freq: f64,
    phase: f64,
}

impl Wave {
    fn random<R: Rng>(rng: &mut R, amp: (f64, f64), freq: (f64, f64)) -> Self {
        Self {
            amp: rng.random_range(amp.0..amp.1),
            freq: rng.random_range(freq.0..freq.1),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
        }
    }

    fn at(&self, t: f64) -> f64 {
        self.amp * (std::f64::consts::TAU * self.freq * t + self.phase).sin()
    }
}

/// Smooth axis-angle signal: two band-limited sinusoids per axis.
struct Rotor {
    waves: [[Wave; 2]; 3],
}

impl Rotor {
    fn random<R: Rng>(rng: &mut R, amp: f64) -> Self {
        let mut w = || Wave::random(rng, (0.2 * amp, amp), (0.2, 1.5));
        Self { waves: [[w(), w()], [w(), w()], [w(), w()]] }
    }

    fn at(&self, t: f64) -> Mat3 {
        let v = [0, 1, 2].map(|a| self.waves[a][0].at(t) + self.waves[a][1].at(t));
        axis_angle(&v)
    }
}

fn generate_raw<R: Rng>(skeleton: &Skeleton, cfg: &SynthConfig, rng: &mut R) -> Result<RawMotion> {
    let len = rng.random_range(cfg.min_raw_len..=cfg.max_raw_len);
    let n = skeleton.feature_dim();
    let k = skeleton.num_joints();
    let cols = skeleton.columns();
    let dt = 1.0 / cfg.fps;
    let std_normal = Normal::<f64>::new(0.0, 1.0).expect("unit normal");

    let beta: Vec<f64> = (0..skeleton.n_beta).map(|_| std_normal.sample(rng).clamp(-2.5, 2.5)).collect();
    let yaw = rng.random_range(0.0..std::f64::consts::TAU);
    let speed = rng.random_range(1.5..2.0);
    let heading = rotation::mat_vec(&rot_z(yaw), &[0.0, 1.0, 0.0]);

    // plant/move script
    let mut moving = vec![false; len];
    let mut state = rng.random_bool(0.5);
    let mut f = 0;
    while f < len {
        let dur = rng.random_range(8..=24);
        for m in moving.iter_mut().skip(f).take(dur) {
            *m = state;
        }
        f += dur;
        state = !state;
    }
    moving[0] = false;

    // leg swing: knees antiphase about the lateral axis, feet follow
    let swing = Wave::random(rng, (0.1, 0.25), (0.6, 1.0));
    let ankle = Wave::random(rng, (0.05, 0.15), (0.6, 1.0));
    let pitch = Wave::random(rng, (0.01, 0.04), (0.6, 1.0));
    let roll = Wave::random(rng, (0.01, 0.04), (0.6, 1.0));
    let upper: Vec<Rotor> = (0..k).map(|_| Rotor::random(rng, 0.25)).collect();

    let mut frames = vec![0.0; len * n];
    let mut leg_clock = 0.0;
    let mut horizontal = [0.0, 0.0];
    for (i, frame) in frames.chunks_exact_mut(n).enumerate() {
        if moving[i] {
            leg_clock += dt;
            horizontal[0] += speed * dt * heading[0];
            horizontal[1] += speed * dt * heading[1];
        }
        let t = i as f64 * dt;
        for j in 1..k {
            let local = match skeleton.names[j].as_str() {
                "l_knee" => axis_angle(&[swing.at(leg_clock), 0.0, 0.0]),
                "r_knee" => axis_angle(&[-swing.at(leg_clock), 0.0, 0.0]),
                "l_foot" => axis_angle(&[ankle.at(leg_clock), 0.0, 0.0]),
                "r_foot" => axis_angle(&[-ankle.at(leg_clock), 0.0, 0.0]),
                _ => upper[j].at(t),
            };
            frame[(j - 1) * 6..j * 6].copy_from_slice(&matrix_to_rot6d(&local));
        }
        let sway = mat_mul(&axis_angle(&[pitch.at(leg_clock), 0.0, 0.0]), &axis_angle(&[0.0, roll.at(leg_clock), 0.0]));
        let root = mat_mul(&rot_z(yaw), &sway);
        frame[cols.phi..cols.phi + 6].copy_from_slice(&matrix_to_rot6d(&root));
        frame[cols.beta..cols.beta + skeleton.n_beta].copy_from_slice(&beta);
        // pelvis height keeps the lowest foot on the ground plane
        frame[cols.tau..cols.tau + 3].copy_from_slice(&[0.0, 0.0, 0.0]);
        let pos = forward_kinematics_with_shape(frame, skeleton, &beta)?;
        let lowest = skeleton.feet.iter().map(|&j| pos[j][2]).fold(f64::INFINITY, f64::min);
        frame[cols.tau..cols.tau + 3].copy_from_slice(&[horizontal[0], horizontal[1], -lowest]);
    }
    Ok(RawMotion { frames, moving })
}

const SPLIT_TAGS: [u64; 3] = [0, 1, 2];

fn generate_split(skeleton: &Skeleton, cfg: &SynthConfig, seed: u64, split: usize, count: usize) -> Result<Split> {
    let n = skeleton.feature_dim();
    let mut samples = Vec::with_capacity(count);
    let mut moving = Vec::with_capacity(count);
    let mut attempt = 0usize;
    while samples.len() < count {
        let chunk = (count - samples.len()) * 2 + 4;
        let raws = par::map_indexed(Exec::default(), chunk, |i| {
            let mut rng = seeding::stream(seed, &[seeding::tag::SYNTH, SPLIT_TAGS[split], (attempt + i) as u64]);
            generate_raw(skeleton, cfg, &mut rng)
        });
        attempt += chunk;
        for raw in raws {
            let raw = raw?;
            if samples.len() == count {
                break;
            }
            if let CropOutcome::Kept(s) = crop_and_pad(&raw.frames, n, cfg.l_max)? {
                moving.push(raw.moving[..s.valid_len].to_vec());
                samples.push(s);
            }
        }
    }
    Ok(Split { batch: MotionBatch::new(samples)?, moving })
}

/// Deterministic synthetic train/val/test splits.
pub fn generate_dataset(cfg: &SynthConfig, seed: u64) -> Result<SynthDataset> {
    cfg.validate()?;
    let skeleton = Skeleton::default_k8();
    skeleton.validate()?;
    let layout = skeleton.layout(cfg.l_max)?;
    let train = generate_split(&skeleton, cfg, seed, 0, cfg.n_train)?;
    let val = generate_split(&skeleton, cfg, seed, 1, cfg.n_val)?;
    let test = generate_split(&skeleton, cfg, seed, 2, cfg.n_test)?;
    Ok(SynthDataset { skeleton, layout, train, val, test })
}

/// Skating percentage implied by the generator's script: a foot frame in
/// contact skates exactly when the next frame is a move frame.
pub fn scripted_skate_ratio(split: &Split, skeleton: &Skeleton, h_thresh: f64) -> Result<f64> {
    let mut contact = 0usize;
    let mut skating = 0usize;
    for (s, moving) in split.batch.samples.iter().zip(&split.moving) {
        let pos = sequence_positions(s, skeleton)?;
        for f in 0..pos.len().saturating_sub(1) {
            for &foot in &skeleton.feet {
                if pos[f][foot][2] < h_thresh {
                    contact += 1;
                    if moving[f + 1] {
                        skating += 1;
                    }
                }
            }
        }
    }
    Ok(if contact == 0 { 0.0 } else { 100.0 * skating as f64 / contact as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig { n_train: 24, n_val: 4, n_test: 4, ..Default::default() }
    }

    #[test]
    fn crop_rules() {
        let n = 2;
        let raw = |len: usize| vec![1.0; len * n];
        match crop_and_pad(&raw(200), n, 192).unwrap() {
            CropOutcome::Kept(s) => assert_eq!(s.valid_len, 192),
            _ => panic!(),
        }
        match crop_and_pad(&raw(50), n, 192).unwrap() {
            CropOutcome::Kept(s) => {
                assert_eq!(s.valid_len, 48);
                assert_eq!(s.l_max(), 192);
                assert!(s.frames[48 * n..].iter().all(|v| *v == 0.0));
            }
            _ => panic!(),
        }
        assert_eq!(crop_and_pad(&raw(31), n, 192).unwrap(), CropOutcome::Dropped);
        assert!(crop_and_pad(&[], n, 192).is_err());
    }

    #[test]
    fn zero_count_is_rejected() {
        let cfg = SynthConfig { n_train: 0, ..Default::default() };
        assert!(generate_dataset(&cfg, 0).is_err());
        let cfg = SynthConfig { num_joints: 1, ..Default::default() };
        assert!(generate_dataset(&cfg, 0).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_dataset(&small(), 0).unwrap();
        let b = generate_dataset(&small(), 0).unwrap();
        assert_eq!(a.train.batch, b.train.batch);
        assert_eq!(a.test.batch, b.test.batch);
        let c = generate_dataset(&small(), 1).unwrap();
        assert_ne!(a.train.batch, c.train.batch);
    }

    #[test]
    fn samples_satisfy_invariants() {
        let d = generate_dataset(&small(), 5).unwrap();
        let cols = d.skeleton.columns();
        for s in &d.train.batch.samples {
            assert!(s.valid_len >= 32 && s.valid_len % 16 == 0 && s.valid_len <= 64);
            let f0 = s.frame(0);
            assert_eq!((f0[cols.tau], f0[cols.tau + 1]), (0.0, 0.0));
            assert!(f0[cols.tau + 2] > 0.5);
            // shape replicated per frame
            for f in s.valid_frames() {
                assert_eq!(&f[cols.beta..], &f0[cols.beta..]);
            }
        }
    }

    #[test]
    fn normalized_fit_set_is_standardized_and_invertible() {
        use crate::layout::{denormalize, fit_stats, group_magnitudes, normalize, NormScheme};
        let d = generate_dataset(&small(), 2).unwrap();
        let stats = fit_stats(&d.train.batch.samples, &d.layout, NormScheme::Structured).unwrap();
        let norm: Vec<MotionSample> = d.train.batch.samples.iter().map(|s| normalize(s, &stats).unwrap()).collect();
        for m in group_magnitudes(&norm, &d.layout) {
            assert!((m - 1.0).abs() < 1e-6, "group magnitude {m}");
        }
        for (x, z) in d.train.batch.samples.iter().zip(&norm) {
            let back = denormalize(z, &stats).unwrap();
            for (a, b) in back.frames.iter().zip(&x.frames) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn augmentation_preserves_limbs_and_foot_heights() {
        let d = generate_dataset(&SynthConfig { n_train: 100, n_val: 1, n_test: 1, ..Default::default() }, 3).unwrap();
        let sk = &d.skeleton;
        let mut rng = seeding::stream(9, &[]);
        for x in &d.train.batch.samples {
            let y = crate::motion::augment(x, &d.layout, &mut rng);
            let (px, py) = (sequence_positions(x, sk).unwrap(), sequence_positions(&y, sk).unwrap());
            for (fx, fy) in px.iter().zip(&py) {
                for j in 1..sk.num_joints() {
                    let p = sk.parents[j];
                    let lx = rotation::norm(&rotation::sub(&fx[j], &fx[p]));
                    let ly = rotation::norm(&rotation::sub(&fy[j], &fy[p]));
                    assert!((lx - ly).abs() < 1e-9);
                }
                let mut hx: Vec<f64> = sk.feet.iter().map(|&f| fx[f][2]).collect();
                let mut hy: Vec<f64> = sk.feet.iter().map(|&f| fy[f][2]).collect();
                hx.sort_by(f64::total_cmp);
                hy.sort_by(f64::total_cmp);
                for (a, b) in hx.iter().zip(&hy) {
                    assert!((a - b).abs() < 1e-9);
                }
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn cropped_samples_satisfy_invariants(len in 1usize..300, n in 1usize..4, l_max in 32usize..200) {
            let raw: Vec<f64> = (0..len * n).map(|i| 1.0 + i as f64).collect();
            match crop_and_pad(&raw, n, l_max).unwrap() {
                CropOutcome::Dropped => proptest::prop_assert!(len < 32),
                CropOutcome::Kept(s) => {
                    proptest::prop_assert!(len >= 32);
                    proptest::prop_assert_eq!(s.l_max(), l_max);
                    proptest::prop_assert!(s.valid_len <= l_max && s.valid_len <= len);
                    proptest::prop_assert!(s.valid_len == l_max || s.valid_len % 16 == 0);
                    proptest::prop_assert!(s.frames[s.valid_len * n..].iter().all(|v| *v == 0.0));
                    proptest::prop_assert_eq!(&s.frames[..s.valid_len * n], &raw[..s.valid_len * n]);
                    proptest::prop_assert!(MotionSample::new(s.frames.clone(), s.valid_len, n).is_ok());
                }
            }
        }
    }
}
