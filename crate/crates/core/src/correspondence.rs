//! Posed-to-canonical correspondence search.
//!
//! For a posed point `x'` every bone seeds one quasi-Newton solve of
//! `d(x) = x'` from `B_i⁻¹ x'`. Each solve runs in a single fused loop with
//! its own state (iterate, residual, inverse-Jacobian estimate); converged
//! solutions are then deduplicated in seed order.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::deformer::ForwardMap;
use crate::error::{Error, Result};
use crate::math::{Aabb, Mat3, Mat34, Vec3};

/// Which forward map the search iterates on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Evaluate the skinning network at every iterate.
    Mlp,
    /// Interpolate a precomputed transform grid.
    Voxel,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(Variant::Mlp),
            "voxel" => Ok(Variant::Voxel),
            other => Err(Error::InvalidArgument(format!(
                "unknown variant {other:?}, expected mlp or voxel"
            ))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Mlp => "mlp",
            Variant::Voxel => "voxel",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchOptions {
    pub max_iters: usize,
    pub conv_eps: f64,
    pub div_eps: f64,
    pub dedup_dist: f64,
    pub variant: Variant,
}

/// Initial Jacobians with `|det|` below this fall back to the identity.
pub const SINGULAR_INIT_DET: f64 = 1e-8;

impl SearchOptions {
    /// Defaults scaled by the canonical bounding-box diagonal.
    pub fn for_bbox(bbox: &Aabb) -> Self {
        let diag = bbox.diagonal();
        SearchOptions {
            max_iters: 50,
            conv_eps: 1e-5 * diag,
            div_eps: 0.5 * diag,
            dedup_dist: 1e-2 * diag,
            variant: Variant::Voxel,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.conv_eps, self.div_eps, self.dedup_dist]
            .iter()
            .all(|v| *v > 0.0 && v.is_finite());
        if self.max_iters == 0 || !positive {
            return Err(Error::InvalidArgument(
                "search thresholds and max_iters must be positive".into(),
            ));
        }
        if self.conv_eps >= self.div_eps {
            return Err(Error::InvalidArgument(format!(
                "conv_eps {} must be below div_eps {}",
                self.conv_eps, self.div_eps
            )));
        }
        if self.dedup_dist <= self.conv_eps {
            return Err(Error::InvalidArgument(format!(
                "dedup_dist {} must exceed conv_eps {}",
                self.dedup_dist, self.conv_eps
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Root {
    pub point: Vec3,
    pub residual: f64,
    /// Final inverse-Jacobian estimate of the solve that produced this root.
    pub inv_jacobian: Mat3,
    /// Bone whose rigid inverse seeded the solve.
    pub source_bone: usize,
    pub iterations: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrespondenceSet {
    pub query: Vec3,
    pub roots: Vec<Root>,
}

impl CorrespondenceSet {
    pub fn is_empty(&self) -> bool {
        self.roots.is_empty()
    }

    pub fn len(&self) -> usize {
        self.roots.len()
    }

    /// One dump line: `qx qy qz -> n; (x y z residual bone) ...`.
    pub fn dump_line(&self) -> String {
        let q = &self.query;
        let mut s = format!("{} {} {} -> {};", q.x, q.y, q.z, self.roots.len());
        for r in &self.roots {
            let p = &r.point;
            let _ = write!(s, " ({} {} {} {} {})", p.x, p.y, p.z, r.residual, r.source_bone);
        }
        s
    }
}

/// Starting iterate and inverse-Jacobian estimate for one seed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitState {
    pub x: Vec3,
    pub inv_jacobian: Mat3,
}

fn rigid_inverse_apply(b: &Mat34, x: &Vec3) -> Vec3 {
    let r = b.fixed_view::<3, 3>(0, 0);
    let t = b.column(3);
    r.transpose() * (x - t)
}

/// Inverse of `∂d/∂x`, or the identity when the Jacobian is near-singular.
pub fn initial_inverse_jacobian(jac: &Mat3) -> Mat3 {
    if jac.determinant().abs() < SINGULAR_INIT_DET {
        return Mat3::identity();
    }
    jac.try_inverse().unwrap_or_else(Mat3::identity)
}

/// One seed per bone: `x⁰_i = B_i⁻¹ x'` with the inverse of the analytic
/// Jacobian there. Bones must be rigid.
pub fn init_states(x_prime: &Vec3, bones: &[Mat34], map: &impl ForwardMap) -> Vec<InitState> {
    bones
        .iter()
        .map(|b| init_state(x_prime, b, map))
        .collect()
}

fn init_state(x_prime: &Vec3, bone: &Mat34, map: &impl ForwardMap) -> InitState {
    let x = rigid_inverse_apply(bone, x_prime);
    let (_, jac) = map.deform_with_jacobian(&x);
    InitState {
        x,
        inv_jacobian: initial_inverse_jacobian(&jac),
    }
}

/// Outcome of a single seeded solve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SolveOutcome {
    Converged(Root),
    Diverged { iterations: usize },
    Exhausted { residual: f64 },
}

/// Fused quasi-Newton solve from one seed: step `x ← x − J̃ g`, then the
/// "good" rank-one update of `J̃`. Stops on convergence, divergence, or the
/// iteration budget.
pub fn solve_from(
    init: &InitState,
    x_prime: &Vec3,
    map: &impl ForwardMap,
    opts: &SearchOptions,
    source_bone: usize,
) -> SolveOutcome {
    let mut x = init.x;
    let mut j = init.inv_jacobian;
    let mut g = map.deform(&x) - x_prime;
    let mut r = g.norm();
    let mut iters = 0;
    loop {
        if !r.is_finite() || r > opts.div_eps {
            return SolveOutcome::Diverged { iterations: iters };
        }
        if r < opts.conv_eps {
            return SolveOutcome::Converged(Root {
                point: x,
                residual: r,
                inv_jacobian: j,
                source_bone,
                iterations: iters,
            });
        }
        if iters == opts.max_iters {
            return SolveOutcome::Exhausted { residual: r };
        }
        let dx = -(j * g);
        let x_new = x + dx;
        let g_new = map.deform(&x_new) - x_prime;
        let dg = g_new - g;
        let u = j * dg;
        let denom = dx.dot(&u);
        if denom.abs() > f64::MIN_POSITIVE {
            let row = dx.transpose() * j;
            j += (dx - u) * row / denom;
        }
        x = x_new;
        g = g_new;
        r = g.norm();
        iters += 1;
    }
}

/// Greedy in-order deduplication: a root survives iff it is at least
/// `dedup_dist` from every root kept before it.
pub fn dedup_roots(roots: Vec<Root>, dedup_dist: f64) -> Vec<Root> {
    let mut kept: Vec<Root> = Vec::with_capacity(roots.len());
    for r in roots {
        if kept.iter().all(|k| (k.point - r.point).norm() >= dedup_dist) {
            kept.push(r);
        }
    }
    kept
}

/// All canonical correspondences of `x_prime` under the forward map `map`
/// posed by `bones`.
pub fn broyden_search(
    x_prime: &Vec3,
    map: &impl ForwardMap,
    bones: &[Mat34],
    opts: &SearchOptions,
) -> CorrespondenceSet {
    let mut roots = Vec::with_capacity(bones.len());
    for (i, b) in bones.iter().enumerate() {
        let init = init_state(x_prime, b, map);
        if let SolveOutcome::Converged(root) = solve_from(&init, x_prime, map, opts, i) {
            roots.push(root);
        }
    }
    CorrespondenceSet {
        query: *x_prime,
        roots: dedup_roots(roots, opts.dedup_dist),
    }
}

/// [`broyden_search`] over many queries in parallel; output order and
/// contents match the sequential map regardless of worker count.
pub fn batch_search(
    queries: &[Vec3],
    map: &impl ForwardMap,
    bones: &[Mat34],
    opts: &SearchOptions,
) -> Vec<CorrespondenceSet> {
    queries
        .par_iter()
        .with_min_len(64)
        .map(|q| broyden_search(q, map, bones, opts))
        .collect()
}

/// Writes one [`CorrespondenceSet::dump_line`] per set.
pub fn write_dump(sets: &[CorrespondenceSet], mut out: impl std::io::Write) -> std::io::Result<()> {
    for s in sets {
        writeln!(out, "{}", s.dump_line())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deformer::{precompute_transform_grid, FieldDeformer};
    use crate::math::identity34;
    use crate::skeleton::RigidTransform;
    use crate::skinning::{distill, AnalyticSkinning, SkinningVoxelGrid};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bbox() -> Aabb {
        Aabb::new(Vec3::new(-0.5, -0.5, -0.5), Vec3::new(2.5, 0.5, 0.5)).unwrap()
    }

    fn arm() -> AnalyticSkinning {
        AnalyticSkinning::new(
            vec![(Vec3::zeros(), Vec3::x()), (Vec3::x(), Vec3::new(2.0, 0.0, 0.0))],
            0.15,
        )
        .unwrap()
    }

    fn root_at(x: f64, bone: usize) -> Root {
        Root {
            point: Vec3::new(x, 0.0, 0.0),
            residual: 0.0,
            inv_jacobian: Mat3::identity(),
            source_bone: bone,
            iterations: 0,
        }
    }

    #[test]
    fn options_validation() {
        let o = SearchOptions::for_bbox(&bbox());
        o.validate().unwrap();
        assert!((o.conv_eps - 1e-5 * bbox().diagonal()).abs() < 1e-18);
        assert!(SearchOptions { conv_eps: 1.0, div_eps: 0.5, ..o }.validate().is_err());
        assert!(SearchOptions { dedup_dist: o.conv_eps, ..o }.validate().is_err());
        assert_eq!("voxel".parse::<Variant>().unwrap(), Variant::Voxel);
        assert!("gpu".parse::<Variant>().is_err());
    }

    #[test]
    fn init_examples() {
        let f = arm();
        let ids = [identity34(); 2];
        let map = FieldDeformer::new(&f, &ids).unwrap();
        let q = Vec3::new(0.4, 0.1, 0.0);
        for s in init_states(&q, &ids, &map) {
            assert_eq!(s.x, q);
            assert!((s.inv_jacobian - Mat3::identity()).abs().max() < 1e-12);
        }
        let bones = [
            RigidTransform::from_translation(Vec3::x()).to_matrix(),
            identity34(),
        ];
        let map = FieldDeformer::new(&f, &bones).unwrap();
        let s = init_states(&Vec3::new(1.5, 0.0, 0.0), &bones, &map);
        assert_eq!(s[0].x, Vec3::new(0.5, 0.0, 0.0));
        assert_eq!(s[1].x, Vec3::new(1.5, 0.0, 0.0));
    }

    #[test]
    fn init_in_rigid_region_inverts_rotation() {
        let onehot = SkinningVoxelGrid::uniform([3, 3, 3], bbox(), 1).unwrap();
        let b = RigidTransform::from_axis_angle(&Vec3::new(1.0, 2.0, 0.5), 0.8)
            .compose(&RigidTransform::from_translation(Vec3::new(0.1, 0.2, 0.3)));
        let bones = [b.to_matrix()];
        let tg = precompute_transform_grid(&onehot, &bones).unwrap();
        let s = init_states(&Vec3::new(0.3, 0.1, 0.2), &bones, &tg);
        assert!((s[0].inv_jacobian - b.rotation.transpose()).abs().max() < 1e-12);
    }

    #[test]
    fn singular_jacobian_falls_back_to_identity() {
        let j = Mat3::from_diagonal(&Vec3::new(1.0, 1.0, 1e-9));
        assert_eq!(initial_inverse_jacobian(&j), Mat3::identity());
        let j = Mat3::from_diagonal(&Vec3::new(2.0, 1.0, 1.0));
        assert!((initial_inverse_jacobian(&j)[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn identity_pose_returns_query() {
        let f = arm();
        let ids = [identity34(); 2];
        let grid = distill(&f, [16, 8, 8], &bbox()).unwrap();
        let tg = precompute_transform_grid(&grid, &ids).unwrap();
        let opts = SearchOptions::for_bbox(&bbox());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let queries: Vec<Vec3> = (0..1000)
            .map(|_| Vec3::new(rng.random_range(-0.5..2.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)))
            .collect();
        let sets = batch_search(&queries, &tg, &ids, &opts);
        assert_eq!(sets.len(), 1000);
        for (s, q) in sets.iter().zip(&queries) {
            assert_eq!(s.roots.len(), 1);
            assert!((s.roots[0].point - q).norm() < 1e-12);
            assert!(s.roots[0].residual < 1e-12);
            assert!(s.roots[0].iterations <= 1);
        }
        assert!(batch_search(&[], &tg, &ids, &opts).is_empty());
    }

    #[test]
    fn single_rigid_bone_recovers_preimage() {
        let single = AnalyticSkinning::new(vec![(Vec3::zeros(), Vec3::x())], 0.2).unwrap();
        let b = RigidTransform::from_axis_angle(&Vec3::new(0.3, 1.0, 0.2), 1.3)
            .compose(&RigidTransform::from_translation(Vec3::new(0.5, -0.2, 0.1)));
        let bones = [b.to_matrix()];
        let map = FieldDeformer::new(&single, &bones).unwrap();
        let opts = SearchOptions::for_bbox(&bbox());
        let y = Vec3::new(0.7, -0.2, 0.3);
        let set = broyden_search(&b.apply(&y), &map, &bones, &opts);
        assert_eq!(set.roots.len(), 1);
        assert!((set.roots[0].point - y).norm() < opts.conv_eps);
    }

    #[test]
    fn bent_arm_roots_are_sound_on_both_variants() {
        let f = arm();
        let bones = [
            identity34(),
            RigidTransform::rotation_about(&Vec3::x(), &Vec3::z(), 1.2).to_matrix(),
        ];
        let grid = distill(&f, [64, 32, 32], &bbox()).unwrap();
        let tg = precompute_transform_grid(&grid, &bones).unwrap();
        let fd = FieldDeformer::new(&f, &bones).unwrap();
        let opts = SearchOptions::for_bbox(&bbox());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut found = 0;
        for _ in 0..300 {
            let c = Vec3::new(rng.random_range(0.0..2.0), rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2));
            let q = fd.deform(&c);
            let a = broyden_search(&q, &fd, &bones, &opts);
            let b = broyden_search(&q, &tg, &bones, &opts);
            for r in &a.roots {
                assert!((fd.deform(&r.point) - q).norm() < opts.conv_eps);
            }
            for r in &b.roots {
                assert!((tg.deform(&r.point) - q).norm() < opts.conv_eps);
            }
            if a.roots.iter().any(|r| (r.point - c).norm() < 1e-3) {
                found += 1;
            }
        }
        assert!(found >= 290, "found {found}");
    }

    #[test]
    fn dedup_examples() {
        let r = dedup_roots(vec![root_at(0.0, 0), root_at(0.0, 1)], 0.1);
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].source_bone, 0);
        assert_eq!(dedup_roots(vec![root_at(0.0, 0), root_at(0.2, 1)], 0.1).len(), 2);
        let mut cluster: Vec<Root> = (0..5).map(|i| root_at(0.01 * i as f64, i)).collect();
        cluster.push(root_at(3.0, 5));
        let r = dedup_roots(cluster, 0.1);
        assert_eq!(r.iter().map(|r| r.source_bone).collect::<Vec<_>>(), vec![0, 5]);
    }

    #[test]
    fn dump_line_format() {
        let set = CorrespondenceSet {
            query: Vec3::new(1.0, 2.0, 3.5),
            roots: vec![root_at(0.5, 1)],
        };
        assert_eq!(set.dump_line(), "1 2 3.5 -> 1; (0.5 0 0 0 1)");
        let empty = CorrespondenceSet { query: Vec3::zeros(), roots: vec![] };
        assert_eq!(empty.dump_line(), "0 0 0 -> 0;");
    }
}
