//! Supervised fitting of a skinning network to a known weight field.

use rand::Rng;

use crate::error::{Error, Result};
use crate::math::{Aabb, Vec3};
use crate::mlp::Sgd;
use crate::skinning::{softmax_in_place, SkinningField, SkinningMlp};

/// Minimizes the cross-entropy between `mlp` and `target` on fresh uniform
/// samples of `bbox` each step. Returns the loss of the last step.
pub fn fit_skinning(
    mlp: &mut SkinningMlp,
    target: &(impl SkinningField + ?Sized),
    bbox: &Aabb,
    steps: usize,
    batch: usize,
    learning_rate: f64,
    rng: &mut impl Rng,
) -> Result<f64> {
    let nb = mlp.num_bones();
    if target.num_bones() != nb {
        return Err(Error::dims("target bones", nb, target.num_bones()));
    }
    let mut opt = Sgd::new(mlp.num_params(), learning_rate, 0.9);
    let e = bbox.extent();
    let mut last = f64::NAN;
    for _ in 0..steps {
        let pts: Vec<Vec3> = (0..batch)
            .map(|_| bbox.min + Vec3::new(rng.random::<f64>() * e.x, rng.random::<f64>() * e.y, rng.random::<f64>() * e.z))
            .collect();
        let t = target.weights_batch(&pts);
        let rows: Vec<f64> = pts.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
        let cache = mlp.mlp().forward_batch(&rows);
        let mut w = cache.output().to_vec();
        let mut loss = 0.0;
        for (wr, tr) in w.chunks_exact_mut(nb).zip(t.chunks_exact(nb)) {
            softmax_in_place(wr);
            for (a, b) in wr.iter_mut().zip(tr) {
                loss -= b * a.max(1e-300).ln();
                // Cross-entropy through softmax: dz = w − t.
                *a = (*a - b) / batch as f64;
            }
        }
        last = loss / batch as f64;
        let mut grad = vec![0.0; mlp.num_params()];
        mlp.mlp().backward_batch(&cache, &w, &mut grad, None);
        opt.step(mlp.mlp_mut().params_mut(), &grad);
    }
    Ok(last)
}
