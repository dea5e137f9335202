//! Occupancy cross-entropy and the two first-epoch bootstrap terms, each
//! with the gradient used by training.

use rand::Rng;

use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::shape::{CanonicalOccupancy, OccupancyMlp};
use crate::skeleton::Skeleton;
use crate::skinning::{softmax_in_place, softmax_vjp, SkinningField, SkinningMlp};

/// Predictions are clamped to `[PRED_CLAMP, 1 − PRED_CLAMP]` before the log.
pub const PRED_CLAMP: f64 = 1e-7;

pub fn loss_bce(pred: f64, label: f64) -> f64 {
    let p = pred.clamp(PRED_CLAMP, 1.0 - PRED_CLAMP);
    -(label * p.ln() + (1.0 - label) * (1.0 - p).ln())
}

/// `∂ loss_bce / ∂ pred`; zero where the clamp is active.
pub fn bce_grad(pred: f64, label: f64) -> f64 {
    if !(PRED_CLAMP..=1.0 - PRED_CLAMP).contains(&pred) {
        return 0.0;
    }
    (pred - label) / (pred * (1.0 - pred))
}

/// `∂ loss_bce(σ(z)) / ∂z`; zero where the clamp is active.
pub fn bce_logit_grad(pred: f64, label: f64) -> f64 {
    if !(PRED_CLAMP..=1.0 - PRED_CLAMP).contains(&pred) {
        return 0.0;
    }
    pred - label
}

/// Points drawn uniformly by arc length along the canonical bone segments.
pub fn sample_bone_points(skeleton: &Skeleton, n: usize, rng: &mut impl Rng) -> Vec<Vec3> {
    let segs = skeleton.segments();
    let lengths: Vec<f64> = segs.iter().map(|(a, b)| (b - a).norm()).collect();
    let total: f64 = lengths.iter().sum();
    (0..n)
        .map(|_| {
            let mut s = rng.random::<f64>() * total;
            let mut i = 0;
            while i + 1 < segs.len() && s >= lengths[i] {
                s -= lengths[i];
                i += 1;
            }
            let (a, b) = segs[i];
            let t = if lengths[i] > 0.0 { (s / lengths[i]).min(1.0) } else { 0.0 };
            a + (b - a) * t
        })
        .collect()
}

/// Mean cross-entropy pulling the occupancy of bone points to one.
pub fn loss_bone_occupancy(
    field: &(impl CanonicalOccupancy + ?Sized),
    skeleton: &Skeleton,
    n_samples: usize,
    pose: &[f64],
    rng: &mut impl Rng,
) -> f64 {
    let pts = sample_bone_points(skeleton, n_samples, rng);
    if pts.is_empty() {
        return 0.0;
    }
    let occ = field.occupancy_batch(&pts, pose);
    occ.iter().map(|&p| loss_bce(p, 1.0)).sum::<f64>() / pts.len() as f64
}

/// [`loss_bone_occupancy`] on given points, scaled by `weight`, with its
/// parameter gradient accumulated into `grad`.
pub fn bone_occupancy_grad(
    field: &OccupancyMlp,
    points: &[Vec3],
    pose: &[f64],
    weight: f64,
    grad: &mut [f64],
) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let mut rows = Vec::new();
    for p in points {
        field.input_row(p, pose, &mut rows);
    }
    let cache = field.mlp().forward_batch(&rows);
    let n = points.len() as f64;
    let mut loss = 0.0;
    let d: Vec<f64> = cache
        .output()
        .iter()
        .map(|&z| {
            let p = crate::shape::sigmoid(z);
            loss += loss_bce(p, 1.0);
            weight * bce_logit_grad(p, 1.0) / n
        })
        .collect();
    field.mlp().backward_batch(&cache, &d, grad, None);
    weight * loss / n
}

/// Positions whose skinning should be one-hot: every joint, owned by its
/// parent bone (the root joint by its own bone), and every leaf tip, owned
/// by its bone.
pub fn joint_targets(skeleton: &Skeleton) -> Vec<(Vec3, usize)> {
    let mut out: Vec<(Vec3, usize)> = skeleton
        .bones()
        .iter()
        .enumerate()
        .map(|(i, b)| (b.joint(), skeleton.joint_owner(i)))
        .collect();
    for (i, b) in skeleton.bones().iter().enumerate() {
        if skeleton.is_leaf(i) {
            out.push((b.tip(), i));
        }
    }
    out
}

/// Mean cross-entropy over joints and bone components between skinning
/// weights and one-hot targets, plus its gradient on the weights.
pub fn joint_skinning_terms(weights: &[f64], targets: &[usize], n_bones: usize) -> (f64, Vec<f64>) {
    let count = (targets.len() * n_bones) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; weights.len()];
    for (j, &t) in targets.iter().enumerate() {
        for b in 0..n_bones {
            let y = if b == t { 1.0 } else { 0.0 };
            let w = weights[j * n_bones + b];
            loss += loss_bce(w, y);
            grad[j * n_bones + b] = bce_grad(w, y) / count;
        }
    }
    (loss / count, grad)
}

pub fn loss_joint_skinning(field: &(impl SkinningField + ?Sized), skeleton: &Skeleton) -> Result<f64> {
    let nb = field.num_bones();
    if nb != skeleton.num_bones() {
        return Err(Error::dims("skinning bones", skeleton.num_bones(), nb));
    }
    let targets = joint_targets(skeleton);
    let pts: Vec<Vec3> = targets.iter().map(|t| t.0).collect();
    let owners: Vec<usize> = targets.iter().map(|t| t.1).collect();
    Ok(joint_skinning_terms(&field.weights_batch(&pts), &owners, nb).0)
}

/// [`loss_joint_skinning`] scaled by `weight`, with its parameter gradient
/// accumulated into `grad`.
pub fn joint_skinning_grad(mlp: &SkinningMlp, skeleton: &Skeleton, weight: f64, grad: &mut [f64]) -> Result<f64> {
    let nb = mlp.num_bones();
    if nb != skeleton.num_bones() {
        return Err(Error::dims("skinning bones", skeleton.num_bones(), nb));
    }
    let targets = joint_targets(skeleton);
    let rows: Vec<f64> = targets.iter().flat_map(|t| t.0.iter().cloned().collect::<Vec<_>>()).collect();
    let cache = mlp.mlp().forward_batch(&rows);
    let mut w = cache.output().to_vec();
    for row in w.chunks_exact_mut(nb) {
        softmax_in_place(row);
    }
    let owners: Vec<usize> = targets.iter().map(|t| t.1).collect();
    let (loss, gw) = joint_skinning_terms(&w, &owners, nb);
    let mut dz = vec![0.0; w.len()];
    for ((d, wr), gr) in dz.chunks_exact_mut(nb).zip(w.chunks_exact(nb)).zip(gw.chunks_exact(nb)) {
        softmax_vjp(wr, gr, d);
        d.iter_mut().for_each(|v| *v *= weight);
    }
    mlp.mlp().backward_batch(&cache, &dz, grad, None);
    Ok(weight * loss)
}
