//! Small fixed-size linear algebra shared by every module.

use nalgebra::{Matrix3, Matrix3x4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
/// Affine map stored as a 3x4 matrix `[A | t]`; the homogeneous row is implicit.
pub type Mat34 = Matrix3x4<f64>;

/// `A x + t` for an affine 3x4 matrix.
#[inline(always)]
pub fn affine_apply(m: &Mat34, x: &Vec3) -> Vec3 {
    Vec3::new(
        m[(0, 0)] * x.x + m[(0, 1)] * x.y + m[(0, 2)] * x.z + m[(0, 3)],
        m[(1, 0)] * x.x + m[(1, 1)] * x.y + m[(1, 2)] * x.z + m[(1, 3)],
        m[(2, 0)] * x.x + m[(2, 1)] * x.y + m[(2, 2)] * x.z + m[(2, 3)],
    )
}

/// The linear part `A` of an affine 3x4 matrix.
#[inline(always)]
pub fn affine_linear(m: &Mat34) -> Mat3 {
    m.fixed_view::<3, 3>(0, 0).into_owned()
}

pub fn identity34() -> Mat34 {
    Mat34::identity()
}

/// Axis-aligned bounding box with strictly positive extent on every axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self> {
        let b = Aabb { min, max };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            let ext = self.max[a] - self.min[a];
            if !(ext > 0.0) || !ext.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "bounding box has non-positive extent on axis {a}"
                )));
            }
        }
        Ok(())
    }

    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a Vec3>) -> Option<Self> {
        let mut it = points.into_iter();
        let first = *it.next()?;
        let (mut lo, mut hi) = (first, first);
        for p in it {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        Some(Aabb { min: lo, max: hi })
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn diagonal(&self) -> f64 {
        self.extent().norm()
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    /// Grows every side by `margin` (absolute units).
    pub fn padded(&self, margin: f64) -> Self {
        let m = Vec3::repeat(margin);
        Aabb {
            min: self.min - m,
            max: self.max + m,
        }
    }

    pub fn contains(&self, x: &Vec3) -> bool {
        (0..3).all(|a| x[a] >= self.min[a] && x[a] <= self.max[a])
    }

    pub fn clamp(&self, x: &Vec3) -> Vec3 {
        x.sup(&self.min).inf(&self.max)
    }

    pub fn union(&self, other: &Aabb) -> Aabb {
        Aabb {
            min: self.min.inf(&other.min),
            max: self.max.sup(&other.max),
        }
    }

    pub fn as_array(&self) -> [f64; 6] {
        [
            self.min.x, self.min.y, self.min.z, self.max.x, self.max.y, self.max.z,
        ]
    }
}

/// Closest point on segment `[a, b]` to `x`.
pub fn closest_on_segment(a: &Vec3, b: &Vec3, x: &Vec3) -> Vec3 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 == 0.0 {
        return *a;
    }
    let t = ((x - a).dot(&ab) / len2).clamp(0.0, 1.0);
    a + ab * t
}

pub fn segment_distance(a: &Vec3, b: &Vec3, x: &Vec3) -> f64 {
    (x - closest_on_segment(a, b, x)).norm()
}

/// Cosine similarity of two flat vectors; zero when either is zero.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}
