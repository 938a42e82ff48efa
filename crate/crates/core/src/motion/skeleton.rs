use serde::{Deserialize, Serialize};

use super::rotation::{self, mat_mul, mat_vec, Mat3, Vec3};
use super::MotionSample;
use crate::error::{Error, Result};
use crate::layout::FeatureLayout;

/// Kinematic tree with rest-pose offsets (meters, z up).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    pub names: Vec<String>,
    /// Parent of each joint; the root is its own parent.
    pub parents: Vec<usize>,
    pub offsets: Vec<Vec3>,
    pub feet: Vec<usize>,
    /// Left/right joint pairs swapped by mirroring.
    pub pairs: Vec<(usize, usize)>,
    /// Shape component (1-based index into beta, 0 = none) that scales each
    /// joint's offset in addition to the global size component beta[0].
    pub limb_shape: Vec<usize>,
    pub n_beta: usize,
}

impl Skeleton {
    /// Eight joints: pelvis, chest, two two-joint legs ending in feet, and a
    /// hand on each side of the chest.
    pub fn default_k8() -> Self {
        let names = ["pelvis", "chest", "l_knee", "l_foot", "r_knee", "r_foot", "l_hand", "r_hand"];
        Self {
            names: names.iter().map(|s| s.to_string()).collect(),
            parents: vec![0, 0, 0, 2, 0, 4, 1, 1],
            offsets: vec![
                [0.0, 0.0, 0.0],
                [0.0, 0.0, 0.45],
                [0.1, 0.0, -0.45],
                [0.0, 0.02, -0.45],
                [-0.1, 0.0, -0.45],
                [0.0, 0.02, -0.45],
                [0.25, 0.05, -0.15],
                [-0.25, 0.05, -0.15],
            ],
            feet: vec![3, 5],
            pairs: vec![(2, 4), (3, 5), (6, 7)],
            limb_shape: vec![0, 4, 2, 2, 2, 2, 3, 3],
            n_beta: 4,
        }
    }

    pub fn num_joints(&self) -> usize {
        self.parents.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_joints();
        if k < 2 {
            return Err(Error::InvalidConfig("skeleton needs at least two joints".into()));
        }
        if self.parents[0] != 0 || self.offsets.len() != k || self.limb_shape.len() != k {
            return Err(Error::InvalidConfig("malformed skeleton".into()));
        }
        for j in 1..k {
            // parents precede children, so the tree is rooted at joint 0
            if self.parents[j] >= j {
                return Err(Error::InvalidConfig(format!("joint {j} has invalid parent")));
            }
            if rotation::norm(&self.offsets[j]) == 0.0 {
                return Err(Error::InvalidConfig(format!("joint {j} has zero offset")));
            }
        }
        if self.feet.iter().chain(self.pairs.iter().flat_map(|(a, b)| [a, b])).any(|&j| j == 0 || j >= k) {
            return Err(Error::InvalidConfig("feet/pairs must reference non-root joints".into()));
        }
        Ok(())
    }

    /// Feature layout matching this skeleton.
    pub fn layout(&self, l_max: usize) -> Result<FeatureLayout> {
        let slot_pairs: Vec<(usize, usize)> = self.pairs.iter().map(|&(a, b)| (a - 1, b - 1)).collect();
        FeatureLayout::motion(self.num_joints(), &slot_pairs, self.n_beta, l_max)
    }

    /// Per-frame feature width.
    pub fn feature_dim(&self) -> usize {
        (self.num_joints() - 1) * 6 + 6 + 3 + self.n_beta
    }

    /// Offset of joint `j` after applying shape `beta`.
    pub fn shaped_offset(&self, j: usize, beta: &[f64]) -> Vec3 {
        let global = 1.0 + 0.1 * beta.first().copied().unwrap_or(0.0);
        let limb = match self.limb_shape[j] {
            0 => 1.0,
            c => 1.0 + 0.05 * beta.get(c - 1).copied().unwrap_or(0.0),
        };
        rotation::scale(&self.offsets[j], global * limb)
    }

    /// Column offsets of the J, Phi, tau and beta groups.
    pub fn columns(&self) -> FeatureColumns {
        let j = (self.num_joints() - 1) * 6;
        FeatureColumns { phi: j, tau: j + 6, beta: j + 9 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FeatureColumns {
    pub phi: usize,
    pub tau: usize,
    pub beta: usize,
}

/// Joint positions of one frame: `p_root = tau`,
/// `p_child = p_parent + R_global(parent) · offset_child`.
pub fn forward_kinematics(frame: &[f64], skeleton: &Skeleton) -> Result<Vec<Vec3>> {
    let cols = skeleton.columns();
    if frame.len() != skeleton.feature_dim() {
        return Err(Error::DimensionMismatch { expected: skeleton.feature_dim(), got: frame.len() });
    }
    forward_kinematics_with_shape(frame, skeleton, &frame[cols.beta..])
}

/// As [`forward_kinematics`] but with an explicit shape vector.
pub fn forward_kinematics_with_shape(frame: &[f64], skeleton: &Skeleton, beta: &[f64]) -> Result<Vec<Vec3>> {
    let cols = skeleton.columns();
    let k = skeleton.num_joints();
    let mut global: Vec<Mat3> = Vec::with_capacity(k);
    let mut pos: Vec<Vec3> = Vec::with_capacity(k);
    global.push(rotation::rot6d_to_matrix(&frame[cols.phi..cols.phi + 6])?);
    pos.push([frame[cols.tau], frame[cols.tau + 1], frame[cols.tau + 2]]);
    for j in 1..k {
        let p = skeleton.parents[j];
        let local = rotation::rot6d_to_matrix(&frame[(j - 1) * 6..j * 6])?;
        let offset = mat_vec(&global[p], &skeleton.shaped_offset(j, beta));
        pos.push(rotation::add(&pos[p], &offset));
        global.push(mat_mul(&global[p], &local));
    }
    Ok(pos)
}

/// Joint positions for every valid frame, with the shape averaged over
/// valid frames first.
pub fn sequence_positions(sample: &MotionSample, skeleton: &Skeleton) -> Result<Vec<Vec<Vec3>>> {
    let cols = skeleton.columns();
    let nb = skeleton.n_beta;
    let mut beta = vec![0.0; nb];
    for f in sample.valid_frames() {
        for (b, v) in beta.iter_mut().zip(&f[cols.beta..cols.beta + nb]) {
            *b += v;
        }
    }
    let denom = sample.valid_len.max(1) as f64;
    beta.iter_mut().for_each(|b| *b /= denom);
    sample.valid_frames().map(|f| forward_kinematics_with_shape(f, skeleton, &beta)).collect()
}
