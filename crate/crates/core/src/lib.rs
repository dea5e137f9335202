//! Differentiable forward skinning.
//!
//! Canonical shapes are posed by linear blend skinning `d(x) = Σ w_i(x) B_i x`.
//! Posed queries are mapped back to canonical space by solving `d(x) = x'`
//! from one seed per bone, either through the skinning network directly or
//! through a per-pose grid of blended transforms.

pub mod bench;
pub mod correspondence;
pub mod deformer;
pub mod diff;
pub mod error;
pub mod io;
pub mod math;
pub mod mesh;
pub mod mlp;
pub mod shape;
pub mod skeleton;
pub mod skinning;
pub mod synthetic;

pub use correspondence::{
    batch_search, broyden_search, dedup_roots, init_states, CorrespondenceSet, Root, SearchOptions, Variant,
};
pub use deformer::{
    forward_deform, lbs_blend, precompute_transform_grid, trilerp_transform, FieldDeformer, ForwardMap,
    TransformGrid,
};
pub use error::{Error, Result};
pub use math::{Aabb, Mat3, Mat34, Vec3};
pub use mesh::Mesh;
pub use shape::{
    capsule_occupancy, extract_mesh, posed_occupancy, query_occupancy, CanonicalOccupancy, Capsule, CapsuleBody,
    OccupancyMlp,
};
pub use skeleton::{forward_kinematics, Bone, Pose, RigidTransform, Skeleton};
pub use synthetic::SyntheticBody;
pub use skinning::{
    distill, mlp_weights, trilerp_weights, weight_spatial_gradient, AnalyticSkinning, SkinningField, SkinningMlp,
    SkinningVoxelGrid,
};

/// Runs `f` on a dedicated pool of `workers` threads (0 = available
/// parallelism).
pub fn with_workers<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}
