//! Articulated skeleton, pose parameterization and forward kinematics.
//!
//! Every joint is a single revolute hinge: bone `i` rotates by
//! `pose.angles[i]` about its hinge axis passing through its rest-pose joint
//! position, on top of whatever its parent did. The resulting per-bone
//! transforms map canonical (rest) space into posed space.

use std::path::Path;

use nalgebra::{Rotation3, Unit};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{Mat3, Mat34, Vec3};

/// Rigid-body motion `x -> R x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn from_translation(t: Vec3) -> Self {
        RigidTransform {
            rotation: Mat3::identity(),
            translation: t,
        }
    }

    /// Rotation by `angle` radians about `axis` through the origin.
    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        let rot = Rotation3::from_axis_angle(&Unit::new_normalize(*axis), angle);
        RigidTransform {
            rotation: *rot.matrix(),
            translation: Vec3::zeros(),
        }
    }

    /// Rotation by `angle` about the line through `pivot` along `axis`.
    pub fn rotation_about(pivot: &Vec3, axis: &Vec3, angle: f64) -> Self {
        let r = Self::from_axis_angle(axis, angle);
        RigidTransform {
            translation: pivot - r.rotation * pivot,
            rotation: r.rotation,
        }
    }

    /// Builds a transform from a 3x4 matrix, checking that its linear part is a
    /// proper rotation (`||RᵀR − I||_F ≤ 1e-6`, `det R > 0`).
    pub fn from_matrix(m: &Mat34) -> Result<Self> {
        let t = RigidTransform {
            rotation: m.fixed_view::<3, 3>(0, 0).into_owned(),
            translation: m.column(3).into_owned(),
        };
        if t.orthonormality_error() > 1e-6 || t.rotation.determinant() <= 0.0 {
            return Err(Error::InvalidArgument(
                "matrix is not a rigid transform".into(),
            ));
        }
        Ok(t)
    }

    pub fn apply(&self, x: &Vec3) -> Vec3 {
        self.rotation * x + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Frobenius norm of `RᵀR − I`.
    pub fn orthonormality_error(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Mat3::identity()).norm()
    }

    pub fn to_matrix(&self) -> Mat34 {
        let mut m = Mat34::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.set_column(3, &self.translation);
        m
    }
}

/// Free-function form of [`RigidTransform::inverse`].
pub fn invert(t: &RigidTransform) -> RigidTransform {
    t.inverse()
}

/// Free-function form of [`RigidTransform::apply`].
pub fn apply(t: &RigidTransform, x: &Vec3) -> Vec3 {
    t.apply(x)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bone {
    pub name: String,
    pub parent: Option<usize>,
    /// Rest-pose joint position (the bone's pivot) in canonical space.
    pub joint: [f64; 3],
    /// Rest-pose bone direction; the bone segment runs from `joint` to
    /// `joint + length * axis`.
    pub axis: [f64; 3],
    pub length: f64,
    /// Hinge rotation axis of the joint. Defaults to +z.
    #[serde(default = "default_hinge")]
    pub hinge: [f64; 3],
}

fn default_hinge() -> [f64; 3] {
    [0.0, 0.0, 1.0]
}

impl Bone {
    pub fn joint(&self) -> Vec3 {
        Vec3::from(self.joint)
    }

    pub fn axis(&self) -> Vec3 {
        Vec3::from(self.axis).normalize()
    }

    pub fn hinge(&self) -> Vec3 {
        Vec3::from(self.hinge).normalize()
    }

    /// Far end of the bone segment in canonical space.
    pub fn tip(&self) -> Vec3 {
        self.joint() + self.axis() * self.length
    }
}

/// A validated forest of bones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SkeletonFile", into = "SkeletonFile")]
pub struct Skeleton {
    bones: Vec<Bone>,
    /// Bone indices ordered so every parent precedes its children.
    order: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct SkeletonFile {
    bones: Vec<Bone>,
}

impl TryFrom<SkeletonFile> for Skeleton {
    type Error = Error;
    fn try_from(f: SkeletonFile) -> Result<Self> {
        Skeleton::new(f.bones)
    }
}

impl From<Skeleton> for SkeletonFile {
    fn from(s: Skeleton) -> Self {
        SkeletonFile { bones: s.bones }
    }
}

impl Skeleton {
    pub fn new(bones: Vec<Bone>) -> Result<Self> {
        let n = bones.len();
        if n == 0 {
            return Err(Error::InvalidArgument("skeleton has no bones".into()));
        }
        for (i, b) in bones.iter().enumerate() {
            if let Some(p) = b.parent {
                if p >= n || p == i {
                    return Err(Error::InvalidArgument(format!(
                        "bone {i} ({}) has invalid parent {p}",
                        b.name
                    )));
                }
            }
            let axis = Vec3::from(b.axis);
            let hinge = Vec3::from(b.hinge);
            if !(b.length > 0.0) || !b.length.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "bone {i} ({}) must have positive length",
                    b.name
                )));
            }
            if !(axis.norm() > 0.0) || !(hinge.norm() > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "bone {i} ({}) has a zero axis or hinge",
                    b.name
                )));
            }
        }
        // Kahn-style ordering; anything left over sits on a cycle.
        let mut order = Vec::with_capacity(n);
        let mut placed = vec![false; n];
        while order.len() < n {
            let before = order.len();
            for i in 0..n {
                if !placed[i] && bones[i].parent.is_none_or(|p| placed[p]) {
                    placed[i] = true;
                    order.push(i);
                }
            }
            if order.len() == before {
                return Err(Error::InvalidArgument(
                    "bone parents form a cycle".into(),
                ));
            }
        }
        Ok(Skeleton { bones, order })
    }

    pub fn bones(&self) -> &[Bone] {
        &self.bones
    }

    pub fn num_bones(&self) -> usize {
        self.bones.len()
    }

    /// Degrees of freedom: one hinge angle per bone.
    pub fn dof(&self) -> usize {
        self.bones.len()
    }

    /// Bone whose skinning weight should be one at the given bone's joint: its
    /// parent, or itself for a root.
    pub fn joint_owner(&self, bone: usize) -> usize {
        self.bones[bone].parent.unwrap_or(bone)
    }

    pub fn is_leaf(&self, bone: usize) -> bool {
        !self.bones.iter().any(|b| b.parent == Some(bone))
    }

    /// Canonical bone segments `(joint, tip)`.
    pub fn segments(&self) -> Vec<(Vec3, Vec3)> {
        self.bones.iter().map(|b| (b.joint(), b.tip())).collect()
    }

    /// Local hinge transform of one bone for the given angle.
    pub fn local_transform(&self, bone: usize, angle: f64) -> RigidTransform {
        let b = &self.bones[bone];
        RigidTransform::rotation_about(&b.joint(), &b.hinge(), angle)
    }

    pub fn from_json_str(s: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text).map_err(|e| json_error(path, e))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("skeleton serializes")
    }
}

pub(crate) fn json_error(path: &Path, e: serde_json::Error) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: format!("column {}: {e}", e.column()),
    }
}

/// Joint angles for one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Pose {
    pub angles: Vec<f64>,
}

impl Pose {
    pub fn new(angles: Vec<f64>) -> Self {
        Pose { angles }
    }

    pub fn zero(skeleton: &Skeleton) -> Self {
        Pose {
            angles: vec![0.0; skeleton.dof()],
        }
    }
}

/// Reads a pose file: a JSON array of per-frame angle vectors.
pub fn load_poses(path: &Path) -> Result<Vec<Pose>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| json_error(path, e))
}

pub fn poses_to_json(poses: &[Pose]) -> String {
    serde_json::to_string(poses).expect("poses serialize")
}

/// One transform per bone, mapping canonical space to posed space.
pub fn forward_kinematics(skeleton: &Skeleton, pose: &Pose) -> Result<Vec<RigidTransform>> {
    if pose.angles.len() != skeleton.dof() {
        return Err(Error::dims("pose angles", skeleton.dof(), pose.angles.len()));
    }
    let mut out = vec![RigidTransform::identity(); skeleton.num_bones()];
    for &i in &skeleton.order {
        let local = skeleton.local_transform(i, pose.angles[i]);
        out[i] = match skeleton.bones[i].parent {
            Some(p) => out[p].compose(&local),
            None => local,
        };
    }
    Ok(out)
}

pub fn to_matrices(bones: &[RigidTransform]) -> Vec<Mat34> {
    bones.iter().map(RigidTransform::to_matrix).collect()
}
