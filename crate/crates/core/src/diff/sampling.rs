//! Labelled posed-space point sets for training and evaluation.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::math::{Aabb, Mat34, Vec3};
use crate::skeleton::Pose;
use crate::synthetic::SyntheticBody;

/// One posed training or evaluation frame.
#[derive(Clone, Debug)]
pub struct Frame {
    pub pose: Pose,
    pub bones: Vec<Mat34>,
    pub points: Vec<Vec3>,
    /// Ground-truth occupancy in `{0, 1}`.
    pub labels: Vec<f64>,
}

impl Frame {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Fraction of the posed box's diagonal added on each side before uniform
/// sampling.
pub const BBOX_PADDING: f64 = 0.05;

/// Near-surface noise in units of the canonical box's longest side.
pub const SURFACE_NOISE: f64 = 0.01;

pub fn padded_posed_bbox(body: &SyntheticBody, pose: &Pose) -> Result<Aabb> {
    let bb = body.posed_bbox(pose)?;
    Ok(bb.padded(BBOX_PADDING * bb.diagonal()))
}

pub fn uniform_points(bbox: &Aabb, n: usize, rng: &mut impl Rng) -> Vec<Vec3> {
    let e = bbox.extent();
    (0..n)
        .map(|_| bbox.min + Vec3::new(rng.random::<f64>() * e.x, rng.random::<f64>() * e.y, rng.random::<f64>() * e.z))
        .collect()
}

/// `n` points: half uniform in the padded posed box, half posed surface
/// samples jittered by isotropic Gaussian noise.
pub fn sample_frame(body: &SyntheticBody, pose: &Pose, n: usize, rng: &mut impl Rng) -> Result<Frame> {
    let n_uniform = n / 2;
    let mut points = uniform_points(&padded_posed_bbox(body, pose)?, n_uniform, rng);
    let sigma = SURFACE_NOISE * body.canonical_bbox().extent().max();
    let noise = Normal::new(0.0, sigma).expect("positive deviation");
    for s in body.posed_surface_samples(pose, n - n_uniform, rng)? {
        points.push(s + Vec3::new(noise.sample(rng), noise.sample(rng), noise.sample(rng)));
    }
    labelled(body, pose, points)
}

/// `n` points uniform in the padded posed box.
pub fn sample_uniform_frame(body: &SyntheticBody, pose: &Pose, n: usize, rng: &mut impl Rng) -> Result<Frame> {
    let points = uniform_points(&padded_posed_bbox(body, pose)?, n, rng);
    labelled(body, pose, points)
}

fn labelled(body: &SyntheticBody, pose: &Pose, points: Vec<Vec3>) -> Result<Frame> {
    Ok(Frame {
        pose: pose.clone(),
        bones: body.bones(pose)?,
        labels: body.posed_labels(pose, &points)?,
        points,
    })
}

/// Intersection over union of thresholded predictions against `{0, 1}`
/// labels; 1 when both are empty.
pub fn iou(pred: &[f64], labels: &[f64], threshold: f64) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &y) in pred.iter().zip(labels) {
        let (a, b) = (p >= threshold, y >= 0.5);
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn frame_composition() {
        let body = SyntheticBody::arm(3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pose = body.random_pose(1.0, &mut rng);
        let f = sample_frame(&body, &pose, 2000, &mut rng).unwrap();
        assert_eq!(f.len(), 2000);
        assert!(f.labels.iter().all(|&y| y == 0.0 || y == 1.0));
        let bb = padded_posed_bbox(&body, &pose).unwrap();
        assert!(f.points[..1000].iter().all(|p| bb.contains(p)));
        // Jittered surface points straddle the boundary roughly evenly.
        let inside = f.labels[1000..].iter().sum::<f64>() / 1000.0;
        assert!((0.3..0.7).contains(&inside), "{inside}");
    }

    #[test]
    fn iou_values() {
        assert_eq!(iou(&[1.0, 0.0], &[1.0, 0.0], 0.5), 1.0);
        assert_eq!(iou(&[1.0, 1.0], &[1.0, 0.0], 0.5), 0.5);
        assert_eq!(iou(&[0.0], &[0.0], 0.5), 1.0);
    }
}
