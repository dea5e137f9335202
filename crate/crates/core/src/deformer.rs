//! Linear blend skinning and the per-pose transform grid.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::math::{affine_apply, affine_linear, Mat3, Mat34, Vec3};
use crate::skinning::{corner_weight_gradients, corner_weights, GridGeometry, SkinningField, SkinningVoxelGrid};

/// Convex combination `Σ w_i B_i` of bone matrices.
pub fn lbs_blend(weights: &[f64], bones: &[Mat34]) -> Result<Mat34> {
    if weights.len() != bones.len() {
        return Err(Error::dims("blend weights", bones.len(), weights.len()));
    }
    Ok(blend_unchecked(weights, bones))
}

#[inline]
pub(crate) fn blend_unchecked(weights: &[f64], bones: &[Mat34]) -> Mat34 {
    let mut t = Mat34::zeros();
    for (w, b) in weights.iter().zip(bones) {
        t += b * *w;
    }
    t
}

/// `d(x) = (Σ w_i(x) B_i) x` for any skinning field.
pub fn forward_deform(x: &Vec3, field: &(impl SkinningField + ?Sized), bones: &[Mat34]) -> Result<Vec3> {
    if field.num_bones() != bones.len() {
        return Err(Error::dims("bone transforms", field.num_bones(), bones.len()));
    }
    let w = field.weights(x);
    Ok(affine_apply(&blend_unchecked(&w, bones), x))
}

/// A canonical-to-posed map the correspondence search can iterate on.
pub trait ForwardMap: Sync {
    fn deform(&self, x: &Vec3) -> Vec3;

    /// `d(x)` together with `∂d/∂x`.
    fn deform_with_jacobian(&self, x: &Vec3) -> (Vec3, Mat3);
}

/// Forward map evaluated through a skinning field: weights, blend, apply.
pub struct FieldDeformer<'a, F: SkinningField + ?Sized> {
    field: &'a F,
    bones: Vec<Mat34>,
}

impl<'a, F: SkinningField + ?Sized> FieldDeformer<'a, F> {
    pub fn new(field: &'a F, bones: &[Mat34]) -> Result<Self> {
        if field.num_bones() != bones.len() {
            return Err(Error::dims("bone transforms", field.num_bones(), bones.len()));
        }
        Ok(FieldDeformer {
            field,
            bones: bones.to_vec(),
        })
    }

    pub fn field(&self) -> &F {
        self.field
    }

    pub fn bones(&self) -> &[Mat34] {
        &self.bones
    }
}

impl<F: SkinningField + ?Sized> ForwardMap for FieldDeformer<'_, F> {
    fn deform(&self, x: &Vec3) -> Vec3 {
        let mut w = [0.0; 16];
        let mut heap;
        let w: &mut [f64] = if self.bones.len() <= 16 {
            &mut w[..self.bones.len()]
        } else {
            heap = vec![0.0; self.bones.len()];
            &mut heap
        };
        self.field.weights_into(x, w);
        affine_apply(&blend_unchecked(w, &self.bones), x)
    }

    fn deform_with_jacobian(&self, x: &Vec3) -> (Vec3, Mat3) {
        let nb = self.bones.len();
        let mut w = vec![0.0; nb];
        let mut g = vec![0.0; nb * 3];
        self.field.weights_and_gradient(x, &mut w, &mut g);
        let t = blend_unchecked(&w, &self.bones);
        let mut jac = affine_linear(&t);
        for (b, bone) in self.bones.iter().enumerate() {
            let y = affine_apply(bone, x);
            for a in 0..3 {
                jac.column_mut(a).axpy(g[b * 3 + a], &y, 1.0);
            }
        }
        (affine_apply(&t, x), jac)
    }
}

/// Blended transforms `T_v = Σ_i w_{v,i} B_i` at every vertex of a skinning
/// grid, for one pose.
#[derive(Clone, Debug)]
pub struct TransformGrid {
    geometry: GridGeometry,
    transforms: Vec<Mat34>,
}

/// Blends every grid vertex against `bones`; cost is independent of any query
/// count.
pub fn precompute_transform_grid(grid: &SkinningVoxelGrid, bones: &[Mat34]) -> Result<TransformGrid> {
    let nb = grid.num_bones();
    if bones.len() != nb {
        return Err(Error::dims("bone transforms", nb, bones.len()));
    }
    let transforms = grid
        .raw_weights()
        .par_chunks(nb)
        .map(|w| blend_unchecked(w, bones))
        .collect();
    Ok(TransformGrid {
        geometry: *grid.geometry(),
        transforms,
    })
}

impl TransformGrid {
    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn transforms(&self) -> &[Mat34] {
        &self.transforms
    }

    pub fn vertex_transform(&self, i: usize, j: usize, k: usize) -> &Mat34 {
        &self.transforms[self.geometry.index(i, j, k)]
    }

    /// Entry-wise tri-linear interpolation of the 8 surrounding matrices, with
    /// the same clamping as the weight grid.
    #[inline]
    pub fn trilerp_transform(&self, x: &Vec3) -> Mat34 {
        let loc = self.geometry.locate(x);
        let idx = self.geometry.corner_indices(loc.base);
        let cw = corner_weights(loc.t);
        let mut t = Mat34::zeros();
        for (c, &v) in idx.iter().enumerate() {
            t += self.transforms[v] * cw[c];
        }
        t
    }
}

/// Free-function form of [`TransformGrid::trilerp_transform`].
pub fn trilerp_transform(tgrid: &TransformGrid, x: &Vec3) -> Mat34 {
    tgrid.trilerp_transform(x)
}

impl ForwardMap for TransformGrid {
    #[inline]
    fn deform(&self, x: &Vec3) -> Vec3 {
        affine_apply(&self.trilerp_transform(x), x)
    }

    fn deform_with_jacobian(&self, x: &Vec3) -> (Vec3, Mat3) {
        let loc = self.geometry.locate(x);
        let idx = self.geometry.corner_indices(loc.base);
        let cw = corner_weights(loc.t);
        let cg = corner_weight_gradients(&loc);
        let mut t = Mat34::zeros();
        let mut jac = Mat3::zeros();
        for (c, &v) in idx.iter().enumerate() {
            let tv = &self.transforms[v];
            t += tv * cw[c];
            let y = affine_apply(tv, x);
            for a in 0..3 {
                jac.column_mut(a).axpy(cg[c][a], &y, 1.0);
            }
        }
        jac += affine_linear(&t);
        (affine_apply(&t, x), jac)
    }
}
