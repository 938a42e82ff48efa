//! Up-axis rotation and left/right mirroring of raw motion features.

use rand::Rng;

use super::rotation::{mat_vec, rot_z};
use super::MotionSample;
use crate::layout::FeatureLayout;

/// Rotate the whole motion rigidly about the up axis: the global
/// orientation and translation are both left-multiplied by `Rz(angle)`.
pub fn rotate_up_axis(x: &MotionSample, layout: &FeatureLayout, angle: f64) -> MotionSample {
    let rz = rot_z(angle);
    let phi = layout.group_index("Phi").map(|k| layout.range(k).start);
    let tau = layout.group_index("tau").map(|k| layout.range(k).start);
    let mut out = x.clone();
    for f in out.valid_frames_mut() {
        if let Some(p) = phi {
            for c in 0..2 {
                let col = [f[p + 3 * c], f[p + 3 * c + 1], f[p + 3 * c + 2]];
                f[p + 3 * c..p + 3 * c + 3].copy_from_slice(&mat_vec(&rz, &col));
            }
        }
        if let Some(t) = tau {
            let v = [f[t], f[t + 1], f[t + 2]];
            f[t..t + 3].copy_from_slice(&mat_vec(&rz, &v));
        }
    }
    out
}

/// Reflect through the x = 0 plane, swapping left and right joints.
pub fn mirror(x: &MotionSample, layout: &FeatureLayout) -> MotionSample {
    let mut out = x.clone();
    let ranges: Vec<_> = (0..layout.num_groups()).map(|k| layout.range(k)).collect();
    let mut scratch = vec![0.0; x.n];
    for f in out.valid_frames_mut() {
        scratch.copy_from_slice(f);
        for (spec, r) in layout.groups.iter().zip(&ranges) {
            if let Some(m) = &spec.mirror {
                m.apply(&scratch[r.clone()], &mut f[r.clone()]);
            }
        }
    }
    out
}

/// Random up-axis rotation (uniform angle) followed by mirroring with
/// probability 1/2. Padding is untouched.
pub fn augment<R: Rng + ?Sized>(x: &MotionSample, layout: &FeatureLayout, rng: &mut R) -> MotionSample {
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let flip = rng.random_bool(0.5);
    let rotated = rotate_up_axis(x, layout, angle);
    if flip {
        mirror(&rotated, layout)
    } else {
        rotated
    }
}
