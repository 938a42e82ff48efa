//! Articulated-motion data: padded samples, the synthetic skeleton, forward
//! kinematics, augmentation and the on-disk dataset container.

pub mod augment;
pub mod io;
pub mod rotation;
pub mod skeleton;
pub mod synth;

use crate::error::{Error, Result};

pub use augment::{augment, mirror, rotate_up_axis};
pub use rotation::{rot6d_to_matrix, Mat3, Vec3};
pub use skeleton::{forward_kinematics, Skeleton};
pub use synth::{crop_and_pad, generate_dataset, CropOutcome, SynthConfig, SynthDataset};

/// A zero-padded `l_max × n` frame sequence. Frames at and beyond
/// `valid_len` are exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSample {
    pub frames: Vec<f64>,
    pub valid_len: usize,
    pub n: usize,
}

impl MotionSample {
    pub fn new(frames: Vec<f64>, valid_len: usize, n: usize) -> Result<Self> {
        if n == 0 || frames.len() % n != 0 {
            return Err(Error::DimensionMismatch { expected: n, got: frames.len() });
        }
        let l_max = frames.len() / n;
        if valid_len > l_max {
            return Err(Error::InvalidConfig(format!("valid_len {valid_len} exceeds l_max {l_max}")));
        }
        if frames[valid_len * n..].iter().any(|v| *v != 0.0) {
            return Err(Error::InvalidConfig("padded frames must be zero".into()));
        }
        Ok(Self { frames, valid_len, n })
    }

    pub fn zeros(l_max: usize, n: usize, valid_len: usize) -> Self {
        Self { frames: vec![0.0; l_max * n], valid_len, n }
    }

    /// Pad `valid` frames (row-major, `n` per frame) with zeros up to `l_max`.
    pub fn from_valid(valid: &[f64], n: usize, l_max: usize) -> Result<Self> {
        if n == 0 || valid.len() % n != 0 {
            return Err(Error::DimensionMismatch { expected: n, got: valid.len() });
        }
        let valid_len = valid.len() / n;
        if valid_len > l_max {
            return Err(Error::InvalidConfig(format!("valid_len {valid_len} exceeds l_max {l_max}")));
        }
        let mut frames = vec![0.0; l_max * n];
        frames[..valid.len()].copy_from_slice(valid);
        Ok(Self { frames, valid_len, n })
    }

    pub fn l_max(&self) -> usize {
        self.frames.len() / self.n
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        &self.frames[i * self.n..(i + 1) * self.n]
    }

    pub fn frame_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.frames[i * self.n..(i + 1) * self.n]
    }

    pub fn valid_frames(&self) -> std::slice::ChunksExact<'_, f64> {
        self.frames[..self.valid_len * self.n].chunks_exact(self.n)
    }

    pub fn valid_frames_mut(&mut self) -> std::slice::ChunksExactMut<'_, f64> {
        let end = self.valid_len * self.n;
        self.frames[..end].chunks_exact_mut(self.n)
    }

    /// Number of valid scalar elements.
    pub fn valid_elements(&self) -> usize {
        self.valid_len * self.n
    }

    /// Per-frame validity: 1 on valid frames, 0 on padding.
    pub fn mask(&self) -> Vec<f64> {
        (0..self.l_max()).map(|i| if i < self.valid_len { 1.0 } else { 0.0 }).collect()
    }

    /// The valid frames only, as a sample with `l_max == valid_len`.
    pub fn trimmed(&self) -> Self {
        Self { frames: self.frames[..self.valid_elements()].to_vec(), valid_len: self.valid_len, n: self.n }
    }
}

/// Samples padded to a common length.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionBatch {
    pub samples: Vec<MotionSample>,
}

impl MotionBatch {
    pub fn new(samples: Vec<MotionSample>) -> Result<Self> {
        if let Some(first) = samples.first() {
            let (l, n) = (first.l_max(), first.n);
            if let Some(bad) = samples.iter().find(|s| s.l_max() != l || s.n != n) {
                return Err(Error::DimensionMismatch { expected: l * n, got: bad.frames.len() });
            }
        }
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Per-sample, per-frame validity mask.
    pub fn mask(&self) -> Vec<Vec<f64>> {
        self.samples.iter().map(|s| s.mask()).collect()
    }
}
