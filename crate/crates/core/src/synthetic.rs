//! Analytic articulated bodies: a chain of capsules along +x with revolute
//! joints about z. They supply ground-truth shape, skinning, and poses for
//! tests and training.

use rand::Rng;

use crate::correspondence::SearchOptions;
use crate::error::Result;
use crate::math::{affine_apply, Aabb, Mat34, Vec3};
use crate::shape::{Capsule, CapsuleBody};
use crate::skeleton::{forward_kinematics, to_matrices, Bone, Pose, RigidTransform, Skeleton};
use crate::skinning::AnalyticSkinning;

#[derive(Clone, Debug)]
pub struct SyntheticBody {
    pub skeleton: Skeleton,
    pub body: CapsuleBody,
    pub skinning: AnalyticSkinning,
    /// Largest training-distribution angle per joint.
    pub pose_range: Vec<f64>,
}

impl SyntheticBody {
    pub const RADIUS: f64 = 0.25;
    pub const TEMPERATURE: f64 = 0.1;
    pub const ROOT_RANGE: f64 = 0.6;
    pub const JOINT_RANGE: f64 = 1.2;

    /// `n_bones` unit-length bones along +x, each hinged about z at its
    /// joint, with capsules of radius [`Self::RADIUS`].
    pub fn arm(n_bones: usize) -> Result<Self> {
        Self::arm_with(n_bones, Self::RADIUS, 0.0)
    }

    pub fn arm_with(n_bones: usize, radius: f64, radius_modulation: f64) -> Result<Self> {
        let bones = (0..n_bones)
            .map(|i| Bone {
                name: format!("bone{i}"),
                parent: i.checked_sub(1),
                joint: [i as f64, 0.0, 0.0],
                axis: [1.0, 0.0, 0.0],
                length: 1.0,
                hinge: [0.0, 0.0, 1.0],
            })
            .collect();
        let skeleton = Skeleton::new(bones)?;
        Self::from_skeleton(skeleton, radius, radius_modulation)
    }

    pub fn from_skeleton(skeleton: Skeleton, radius: f64, radius_modulation: f64) -> Result<Self> {
        let segments = skeleton.segments();
        let capsules = segments.iter().map(|&(a, b)| Capsule { a, b, radius }).collect();
        let body = CapsuleBody::new(capsules, radius_modulation)?;
        let skinning = AnalyticSkinning::new(segments, Self::TEMPERATURE)?;
        let pose_range = (0..skeleton.dof())
            .map(|i| if i == 0 { Self::ROOT_RANGE } else { Self::JOINT_RANGE })
            .collect();
        Ok(SyntheticBody {
            skeleton,
            body,
            skinning,
            pose_range,
        })
    }

    pub fn num_bones(&self) -> usize {
        self.skeleton.num_bones()
    }

    /// Canonical box: the rest-pose capsules padded by one radius.
    pub fn canonical_bbox(&self) -> Aabb {
        let r = self.body.capsules().iter().map(|c| c.radius).fold(0.0, f64::max);
        self.body.bbox(&[]).padded(r)
    }

    /// Default search thresholds for this body.
    pub fn search_options(&self) -> SearchOptions {
        SearchOptions::for_bbox(&self.canonical_bbox())
    }

    /// Uniform angles within `scale` times the training range.
    pub fn random_pose(&self, scale: f64, rng: &mut impl Rng) -> Pose {
        Pose::new(
            self.pose_range
                .iter()
                .map(|r| rng.random_range(-1.0..=1.0) * r * scale)
                .collect(),
        )
    }

    /// Second joint folded far enough that the forearm overlaps the upper arm.
    pub fn contact_pose(&self) -> Pose {
        let mut angles = vec![0.0; self.skeleton.dof()];
        if angles.len() > 1 {
            angles[1] = 2.8;
        }
        Pose::new(angles)
    }

    pub fn bones(&self, pose: &Pose) -> Result<Vec<Mat34>> {
        Ok(to_matrices(&forward_kinematics(&self.skeleton, pose)?))
    }

    /// Whether `x'` is inside the posed body: some capsule, carried rigidly by
    /// its bone, contains it.
    pub fn posed_contains(&self, bones: &[RigidTransform], pose: &Pose, x: &Vec3) -> bool {
        bones.iter().enumerate().any(|(i, b)| {
            let local = b.inverse().apply(x);
            self.body.capsules()[i].distance_to_axis(&local) <= self.body.radius(i, &pose.angles)
        })
    }

    /// Ground-truth posed occupancy labels in `{0, 1}`.
    pub fn posed_labels(&self, pose: &Pose, points: &[Vec3]) -> Result<Vec<f64>> {
        use rayon::prelude::*;
        let bones = forward_kinematics(&self.skeleton, pose)?;
        let inv: Vec<RigidTransform> = bones.iter().map(|b| b.inverse()).collect();
        let radii: Vec<f64> = (0..bones.len()).map(|i| self.body.radius(i, &pose.angles)).collect();
        Ok(points
            .par_iter()
            .map(|x| {
                let hit = inv.iter().enumerate().any(|(i, b)| {
                    self.body.capsules()[i].distance_to_axis(&b.apply(x)) <= radii[i]
                });
                if hit {
                    1.0
                } else {
                    0.0
                }
            })
            .collect())
    }

    /// Box around the rigidly posed capsules.
    pub fn posed_bbox(&self, pose: &Pose) -> Result<Aabb> {
        let bones = self.bones(pose)?;
        let mut bb: Option<Aabb> = None;
        for (i, (c, b)) in self.body.capsules().iter().zip(&bones).enumerate() {
            let r = Vec3::repeat(self.body.radius(i, &pose.angles));
            let (a, e) = (affine_apply(b, &c.a), affine_apply(b, &c.b));
            let cb = Aabb {
                min: a.inf(&e) - r,
                max: a.sup(&e) + r,
            };
            bb = Some(bb.map_or(cb, |x| x.union(&cb)));
        }
        Ok(bb.expect("at least one bone"))
    }

    /// Uniform samples of the posed body's boundary: a point on one capsule,
    /// carried by its bone, kept unless strictly inside another posed capsule.
    pub fn posed_surface_samples(&self, pose: &Pose, n: usize, rng: &mut impl Rng) -> Result<Vec<Vec3>> {
        let bones = forward_kinematics(&self.skeleton, pose)?;
        let inv: Vec<RigidTransform> = bones.iter().map(|b| b.inverse()).collect();
        let single: Vec<CapsuleBody> = self
            .body
            .capsules()
            .iter()
            .enumerate()
            .map(|(i, c)| {
                CapsuleBody::new(
                    vec![Capsule {
                        radius: self.body.radius(i, &pose.angles),
                        ..*c
                    }],
                    0.0,
                )
            })
            .collect::<Result<_>>()?;
        let areas: Vec<f64> = single.iter().map(|b| b.capsules()[0].surface_area(b.capsules()[0].radius)).collect();
        let total: f64 = areas.iter().sum();
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let mut pick = rng.random::<f64>() * total;
            let mut i = 0;
            while i + 1 < areas.len() && pick >= areas[i] {
                pick -= areas[i];
                i += 1;
            }
            let local = single[i].sample_surface(1, &[], rng)[0].0;
            let x = bones[i].apply(&local);
            let buried = inv.iter().enumerate().any(|(j, b)| {
                j != i && single[j].capsules()[0].distance_to_axis(&b.apply(&x)) < single[j].capsules()[0].radius
            });
            if !buried {
                out.push(x);
            }
        }
        Ok(out)
    }
}
