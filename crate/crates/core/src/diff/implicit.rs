//! Derivatives of canonical roots with respect to skinning-network
//! parameters, from the root condition `d(x*, σ) = x'`.

use crate::deformer::{FieldDeformer, ForwardMap};
use crate::error::{Error, Result};
use crate::math::{affine_apply, Mat3, Mat34, Vec3};
use crate::skinning::{softmax_vjp, SkinningField, SkinningMlp};

/// Roots whose `|det ∂d/∂x|` is at or below this are reported singular.
pub const SINGULAR_ROOT_DET: f64 = 1e-10;

/// A `3 x P` Jacobian of a canonical point with respect to `P` parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamJacobian {
    num_params: usize,
    data: Vec<f64>,
}

impl ParamJacobian {
    pub fn zeros(num_params: usize) -> Self {
        ParamJacobian {
            num_params,
            data: vec![0.0; 3 * num_params],
        }
    }

    pub fn num_params(&self) -> usize {
        self.num_params
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.data[k * self.num_params..(k + 1) * self.num_params]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Directional derivative `J u`.
    pub fn apply(&self, u: &[f64]) -> Vec3 {
        Vec3::from_fn(|k, _| self.row(k).iter().zip(u).map(|(a, b)| a * b).sum())
    }

    /// `M J` for a `3 x 3` matrix `M`.
    pub fn left_mul(&self, m: &Mat3) -> ParamJacobian {
        let mut out = ParamJacobian::zeros(self.num_params);
        for r in 0..3 {
            for k in 0..3 {
                let f = m[(r, k)];
                if f == 0.0 {
                    continue;
                }
                let src = &self.data[k * self.num_params..(k + 1) * self.num_params];
                let dst = &mut out.data[r * self.num_params..(r + 1) * self.num_params];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += f * s;
                }
            }
        }
        out
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|v| *v == 0.0)
    }
}

/// Upstream gradient on the skinning weights at `x` for a vector `v` applied
/// to `∂d/∂w`: `c_b = v · (B_b x)`.
pub fn weight_upstream(v: &Vec3, x: &Vec3, bones: &[Mat34]) -> Vec<f64> {
    bones.iter().map(|b| v.dot(&affine_apply(b, x))).collect()
}

/// `∂d/∂σ` at `x`: how the forward map moves under skinning-parameter
/// changes, through the softmax head and the bone matrices.
pub fn deform_param_jacobian(x: &Vec3, bones: &[Mat34], mlp: &SkinningMlp) -> Result<ParamJacobian> {
    let nb = mlp.num_bones();
    if bones.len() != nb {
        return Err(Error::dims("bone transforms", nb, bones.len()));
    }
    let net = mlp.mlp();
    let cache = net.forward_batch(x.as_slice());
    let mut w = cache.output().to_vec();
    crate::skinning::softmax_in_place(&mut w);
    let y: Vec<Vec3> = bones.iter().map(|b| affine_apply(b, x)).collect();
    let mut out = ParamJacobian::zeros(net.num_params());
    let mut dlogit = vec![0.0; nb];
    for k in 0..3 {
        let c: Vec<f64> = y.iter().map(|v| v[k]).collect();
        softmax_vjp(&w, &c, &mut dlogit);
        let p = net.num_params();
        net.backward_batch(&cache, &dlogit, &mut out.data[k * p..(k + 1) * p], None);
    }
    Ok(out)
}

/// `∂x*/∂σ = −(∂d/∂x)⁻¹ ∂d/∂σ` at a converged root.
pub fn implicit_grad_exact(x_star: &Vec3, bones: &[Mat34], mlp: &SkinningMlp) -> Result<ParamJacobian> {
    let map = FieldDeformer::new(mlp, bones)?;
    let (_, jac) = map.deform_with_jacobian(x_star);
    let det = jac.determinant();
    if !(det.abs() > SINGULAR_ROOT_DET) {
        return Err(Error::SingularRoot { det });
    }
    let inv = jac.try_inverse().ok_or(Error::SingularRoot { det })?;
    Ok(deform_param_jacobian(x_star, bones, mlp)?.left_mul(&(-inv)))
}

/// `∂x*/∂σ ≈ −J̃ ∂d/∂σ` using the search's inverse-Jacobian estimate.
pub fn implicit_grad_approx(
    x_star: &Vec3,
    j_tilde: &Mat3,
    bones: &[Mat34],
    mlp: &SkinningMlp,
) -> Result<ParamJacobian> {
    Ok(deform_param_jacobian(x_star, bones, mlp)?.left_mul(&(-j_tilde)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correspondence::{broyden_search, SearchOptions};
    use crate::deformer::precompute_transform_grid;
    use crate::math::{cosine_similarity, identity34, Aabb};
    use crate::skeleton::RigidTransform;
    use crate::skinning::SkinningVoxelGrid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bbox() -> Aabb {
        Aabb::new(Vec3::new(-0.5, -0.5, -0.5), Vec3::new(2.5, 0.5, 0.5)).unwrap()
    }

    fn bent() -> Vec<Mat34> {
        vec![
            RigidTransform::from_axis_angle(&Vec3::z(), 0.2).to_matrix(),
            RigidTransform::rotation_about(&Vec3::x(), &Vec3::z(), 0.9).to_matrix(),
        ]
    }

    #[test]
    fn rest_pose_and_single_bone_gradients_vanish() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = SkinningMlp::new(2, &bbox(), &mut rng).unwrap();
        let x = Vec3::new(0.7, 0.1, 0.0);
        let ids = [identity34(); 2];
        assert!(implicit_grad_exact(&x, &ids, &m).unwrap().as_slice().iter().all(|v| v.abs() < 1e-14));
        assert!(implicit_grad_approx(&x, &Mat3::identity(), &ids, &m)
            .unwrap()
            .as_slice()
            .iter()
            .all(|v| v.abs() < 1e-14));

        let single = SkinningMlp::new(1, &bbox(), &mut rng).unwrap();
        let b = [bent()[1]];
        assert!(implicit_grad_exact(&x, &b, &single).unwrap().is_zero());
    }

    #[test]
    fn exact_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = SkinningMlp::new(2, &bbox(), &mut rng).unwrap();
        let bones = bent();
        let map = FieldDeformer::new(&m, &bones).unwrap();
        let canonical = Vec3::new(1.1, 0.15, -0.05);
        let q = map.deform(&canonical);
        let opts = SearchOptions {
            conv_eps: 1e-13,
            max_iters: 200,
            ..SearchOptions::for_bbox(&bbox())
        };
        let root_near = |mlp: &SkinningMlp| {
            let map = FieldDeformer::new(mlp, &bones).unwrap();
            let set = broyden_search(&q, &map, &bones, &opts);
            set.roots
                .iter()
                .min_by(|a, b| (a.point - canonical).norm().total_cmp(&(b.point - canonical).norm()))
                .unwrap()
                .point
        };
        let x_star = root_near(&m);
        let jac = implicit_grad_exact(&x_star, &bones, &m).unwrap();
        let u: Vec<f64> = (0..m.num_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        let u: Vec<f64> = u.iter().map(|v| v / norm).collect();
        let h = 1e-4;
        let shifted = |s: f64| {
            let mut p = m.clone();
            for (a, b) in p.mlp_mut().params_mut().iter_mut().zip(&u) {
                *a += s * b;
            }
            root_near(&p)
        };
        let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
        let an = jac.apply(&u);
        assert!((fd - an).norm() <= 1e-3 * an.norm().max(1e-6), "{fd} vs {an}");
    }

    #[test]
    fn approximate_gradient_aligns_with_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = SkinningMlp::new(2, &bbox(), &mut rng).unwrap();
        let bones = bent();
        let map = FieldDeformer::new(&m, &bones).unwrap();
        let opts = SearchOptions::for_bbox(&bbox());
        let mut sims = Vec::new();
        for _ in 0..20 {
            let c = Vec3::new(rng.random_range(0.0..2.0), rng.random_range(-0.2..0.2), 0.0);
            let q = map.deform(&c);
            for r in broyden_search(&q, &map, &bones, &opts).roots {
                let ex = implicit_grad_exact(&r.point, &bones, &m).unwrap();
                let ap = implicit_grad_approx(&r.point, &r.inv_jacobian, &bones, &m).unwrap();
                sims.push(cosine_similarity(ex.as_slice(), ap.as_slice()));
            }
        }
        let mean = sims.iter().sum::<f64>() / sims.len() as f64;
        assert!(mean > 0.9, "mean cosine {mean}");
    }

    #[test]
    fn rigid_region_estimate_is_exact() {
        let grid = SkinningVoxelGrid::from_fn([4, 3, 3], bbox(), 2, |_| vec![1.0, 0.0]).unwrap();
        let rigid = RigidTransform::from_axis_angle(&Vec3::new(0.3, 0.2, 1.0), 0.7)
            .compose(&RigidTransform::from_translation(Vec3::new(0.2, 0.0, 0.1)));
        let bones = [rigid.to_matrix(), identity34()];
        let tg = precompute_transform_grid(&grid, &bones).unwrap();
        let q = rigid.apply(&Vec3::new(0.4, 0.1, 0.0));
        let opts = SearchOptions::for_bbox(&bbox());
        let set = broyden_search(&q, &tg, &bones[..1], &opts);
        assert!((set.roots[0].inv_jacobian - rigid.rotation.transpose()).abs().max() < 1e-12);
    }

    #[test]
    fn singular_root_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = SkinningMlp::new(2, &bbox(), &mut rng).unwrap();
        let mut flat = identity34();
        flat[(2, 2)] = 0.0;
        let err = implicit_grad_exact(&Vec3::x(), &[flat, flat], &m).unwrap_err();
        assert!(matches!(err, Error::SingularRoot { .. }));
    }
}
