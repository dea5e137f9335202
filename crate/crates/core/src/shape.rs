//! Canonical occupancy fields and their composition into posed occupancy.

use rand::Rng;
use rayon::prelude::*;

use crate::correspondence::{batch_search, CorrespondenceSet, SearchOptions};
use crate::deformer::ForwardMap;
use crate::error::{Error, Result};
use crate::math::{closest_on_segment, Aabb, Mat34, Vec3};
use crate::mesh::{extract_isosurface, Mesh};
use crate::mlp::Mlp;
use crate::skeleton::Skeleton;

/// A canonical occupancy field `f(x, p) ∈ [0, 1]`.
pub trait CanonicalOccupancy: Send + Sync {
    /// Width of the pose vector the field expects; 0 when unconditioned.
    fn pose_dims(&self) -> usize;

    /// Occupancy at `x`. `pose` must have [`Self::pose_dims`] entries, except
    /// that fields which ignore the pose accept any length.
    fn occupancy(&self, x: &Vec3, pose: &[f64]) -> f64;

    fn occupancy_batch(&self, points: &[Vec3], pose: &[f64]) -> Vec<f64> {
        points.par_iter().map(|x| self.occupancy(x, pose)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Capsule {
    pub a: Vec3,
    pub b: Vec3,
    pub radius: f64,
}

impl Capsule {
    pub fn distance_to_axis(&self, x: &Vec3) -> f64 {
        (x - closest_on_segment(&self.a, &self.b, x)).norm()
    }

    pub fn surface_area(&self, radius: f64) -> f64 {
        let h = (self.b - self.a).norm();
        2.0 * std::f64::consts::PI * radius * h + 4.0 * std::f64::consts::PI * radius * radius
    }

    pub fn volume(&self, radius: f64) -> f64 {
        let h = (self.b - self.a).norm();
        std::f64::consts::PI * radius * radius * (h + 4.0 / 3.0 * radius)
    }
}

/// One capsule per bone, with an optional pose-dependent radius
/// `r_i(p) = r_i (1 + κ |p_i|)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CapsuleBody {
    capsules: Vec<Capsule>,
    radius_modulation: f64,
}

impl CapsuleBody {
    pub fn new(capsules: Vec<Capsule>, radius_modulation: f64) -> Result<Self> {
        if capsules.is_empty() {
            return Err(Error::InvalidArgument("capsule body needs at least one capsule".into()));
        }
        if capsules.iter().any(|c| !(c.radius > 0.0)) {
            return Err(Error::InvalidArgument("capsule radii must be positive".into()));
        }
        if !radius_modulation.is_finite() || radius_modulation < 0.0 {
            return Err(Error::InvalidArgument("radius modulation must be non-negative".into()));
        }
        Ok(CapsuleBody {
            capsules,
            radius_modulation,
        })
    }

    /// A capsule of `radius` around every bone of `skeleton`.
    pub fn from_skeleton(skeleton: &Skeleton, radius: f64) -> Result<Self> {
        let capsules = skeleton
            .segments()
            .into_iter()
            .map(|(a, b)| Capsule { a, b, radius })
            .collect();
        Self::new(capsules, 0.0)
    }

    pub fn capsules(&self) -> &[Capsule] {
        &self.capsules
    }

    pub fn radius_modulation(&self) -> f64 {
        self.radius_modulation
    }

    /// Radius of capsule `i` under `pose` (rest radius for an empty pose).
    pub fn radius(&self, i: usize, pose: &[f64]) -> f64 {
        let angle = pose.get(i).copied().unwrap_or(0.0);
        self.capsules[i].radius * (1.0 + self.radius_modulation * angle.abs())
    }

    /// Whether `x` lies in the closed union of capsules under `pose`.
    pub fn contains(&self, x: &Vec3, pose: &[f64]) -> bool {
        (0..self.capsules.len()).any(|i| self.capsules[i].distance_to_axis(x) <= self.radius(i, pose))
    }

    /// Bounding box of the capsules at their `pose` radii.
    pub fn bbox(&self, pose: &[f64]) -> Aabb {
        let mut bb: Option<Aabb> = None;
        for (i, c) in self.capsules.iter().enumerate() {
            let r = Vec3::repeat(self.radius(i, pose));
            let cb = Aabb {
                min: c.a.inf(&c.b) - r,
                max: c.a.sup(&c.b) + r,
            };
            bb = Some(bb.map_or(cb, |b| b.union(&cb)));
        }
        bb.expect("non-empty body")
    }

    /// Uniform samples of the union's boundary under `pose`: area-weighted
    /// capsule choice, uniform point on that capsule, rejected when strictly
    /// inside another capsule. Returns points and the capsule each lies on.
    pub fn sample_surface(&self, n: usize, pose: &[f64], rng: &mut impl Rng) -> Vec<(Vec3, usize)> {
        let areas: Vec<f64> = (0..self.capsules.len())
            .map(|i| self.capsules[i].surface_area(self.radius(i, pose)))
            .collect();
        let total: f64 = areas.iter().sum();
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let mut pick = rng.random::<f64>() * total;
            let mut i = 0;
            while i + 1 < areas.len() && pick >= areas[i] {
                pick -= areas[i];
                i += 1;
            }
            let p = sample_capsule_surface(&self.capsules[i], self.radius(i, pose), rng);
            let buried = (0..self.capsules.len())
                .any(|j| j != i && self.capsules[j].distance_to_axis(&p) < self.radius(j, pose));
            if !buried {
                out.push((p, i));
            }
        }
        out
    }
}

/// Uniform point on a capsule's surface.
fn sample_capsule_surface(c: &Capsule, r: f64, rng: &mut impl Rng) -> Vec3 {
    let axis = c.b - c.a;
    let h = axis.norm();
    let dir = if h > 0.0 { axis / h } else { Vec3::x() };
    let helper = if dir.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let u = dir.cross(&helper).normalize();
    let v = dir.cross(&u);
    let side = 2.0 * std::f64::consts::PI * r * h;
    let caps = 4.0 * std::f64::consts::PI * r * r;
    if rng.random::<f64>() * (side + caps) < side {
        let phi = rng.random::<f64>() * std::f64::consts::TAU;
        c.a + dir * (rng.random::<f64>() * h) + (u * phi.cos() + v * phi.sin()) * r
    } else {
        let z: f64 = rng.random_range(-1.0..1.0);
        let phi = rng.random::<f64>() * std::f64::consts::TAU;
        let s = (1.0 - z * z).sqrt();
        let n = u * (s * phi.cos()) + v * (s * phi.sin()) + dir * z;
        let center = if z >= 0.0 { c.b } else { c.a };
        center + n * r
    }
}

impl CanonicalOccupancy for CapsuleBody {
    fn pose_dims(&self) -> usize {
        0
    }

    fn occupancy(&self, x: &Vec3, pose: &[f64]) -> f64 {
        if self.contains(x, pose) {
            1.0
        } else {
            0.0
        }
    }
}

/// `1` iff `x` is within the rest radius of some capsule axis.
pub fn capsule_occupancy(body: &CapsuleBody, x: &Vec3) -> f64 {
    body.occupancy(x, &[])
}

/// Occupancy network `(x, p) → σ(logit)`; pose entries are concatenated to
/// the position without encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyMlp {
    mlp: Mlp,
    pose_dims: usize,
}

impl OccupancyMlp {
    pub const HIDDEN: [usize; 3] = [96, 96, 96];
    pub const BETA: f64 = 10.0;

    pub fn new(hidden: &[usize], beta: f64, pose_dims: usize, bbox: &Aabb, rng: &mut impl Rng) -> Result<Self> {
        let mut sizes = vec![3 + pose_dims];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let mut mlp = Mlp::new(&sizes, beta, rng)?;
        let c = bbox.center();
        let e = bbox.extent();
        let mut shift = vec![c.x, c.y, c.z];
        let mut scale = vec![2.0 / e.x, 2.0 / e.y, 2.0 / e.z];
        shift.resize(3 + pose_dims, 0.0);
        scale.resize(3 + pose_dims, 1.0);
        mlp.set_input_normalization(&shift, &scale);
        Ok(OccupancyMlp { mlp, pose_dims })
    }

    pub fn from_mlp(mlp: Mlp) -> Result<Self> {
        if mlp.input_dim() < 3 || mlp.output_dim() != 1 {
            return Err(Error::InvalidArgument(format!(
                "occupancy network must map 3+n_p inputs to 1 output, got {:?}",
                mlp.sizes()
            )));
        }
        let pose_dims = mlp.input_dim() - 3;
        Ok(OccupancyMlp { mlp, pose_dims })
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.mlp
    }

    /// Network input row for one point.
    pub fn input_row(&self, x: &Vec3, pose: &[f64], row: &mut Vec<f64>) {
        row.extend_from_slice(x.as_slice());
        row.extend_from_slice(&pose[..self.pose_dims]);
    }

    /// Checked query.
    pub fn query(&self, x: &Vec3, pose: &[f64]) -> Result<f64> {
        if pose.len() != self.pose_dims {
            return Err(Error::dims("occupancy pose condition", self.pose_dims, pose.len()));
        }
        Ok(self.occupancy(x, pose))
    }
}

/// Checked occupancy query of a network.
pub fn query_occupancy(field: &OccupancyMlp, x: &Vec3, pose: &[f64]) -> Result<f64> {
    field.query(x, pose)
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl CanonicalOccupancy for OccupancyMlp {
    fn pose_dims(&self) -> usize {
        self.pose_dims
    }

    fn occupancy(&self, x: &Vec3, pose: &[f64]) -> f64 {
        let mut row = Vec::with_capacity(3 + self.pose_dims);
        self.input_row(x, pose, &mut row);
        let mut out = [0.0];
        self.mlp.forward_point(&row, &mut out);
        sigmoid(out[0])
    }

    fn occupancy_batch(&self, points: &[Vec3], pose: &[f64]) -> Vec<f64> {
        const CHUNK: usize = 2048;
        let mut out = vec![0.0; points.len()];
        out.par_chunks_mut(CHUNK)
            .zip(points.par_chunks(CHUNK))
            .for_each(|(o, pts)| {
                let mut rows = Vec::with_capacity(pts.len() * (3 + self.pose_dims));
                for p in pts {
                    self.input_row(p, pose, &mut rows);
                }
                let logits = self.mlp.forward_batch_output(&rows);
                for (o, z) in o.iter_mut().zip(logits) {
                    *o = sigmoid(z);
                }
            });
        out
    }
}

/// Max over the canonical occupancies of all correspondences; an empty set
/// is unoccupied.
pub fn posed_occupancy(
    set: &CorrespondenceSet,
    pose: &[f64],
    field: &(impl CanonicalOccupancy + ?Sized),
) -> f64 {
    set.roots
        .iter()
        .map(|r| field.occupancy(&r.point, pose))
        .fold(0.0, f64::max)
}

/// Searches every query and composes its posed occupancy.
pub fn posed_occupancy_batch(
    queries: &[Vec3],
    map: &impl ForwardMap,
    bones: &[Mat34],
    opts: &SearchOptions,
    pose: &[f64],
    field: &(impl CanonicalOccupancy + ?Sized),
) -> Vec<f64> {
    let sets = batch_search(queries, map, bones, opts);
    let roots: Vec<Vec3> = sets.iter().flat_map(|s| s.roots.iter().map(|r| r.point)).collect();
    let occ = field.occupancy_batch(&roots, pose);
    let mut k = 0;
    sets.iter()
        .map(|s| {
            let v = occ[k..k + s.roots.len()].iter().cloned().fold(0.0, f64::max);
            k += s.roots.len();
            v
        })
        .collect()
}

/// Vertex positions of a `res³` lattice spanning `bbox`, x-fastest.
pub fn lattice_points(bbox: &Aabb, res: usize) -> Vec<Vec3> {
    let mut pts = Vec::with_capacity(res * res * res);
    let e = bbox.extent();
    let step = |a: usize, i: usize| bbox.min[a] + e[a] * i as f64 / (res - 1) as f64;
    for k in 0..res {
        for j in 0..res {
            for i in 0..res {
                pts.push(Vec3::new(step(0, i), step(1, j), step(2, k)));
            }
        }
    }
    pts
}

/// Iso-0.5 surface of the posed occupancy over `bbox` sampled at `res`
/// vertices per axis.
pub fn extract_mesh(
    map: &impl ForwardMap,
    bones: &[Mat34],
    opts: &SearchOptions,
    pose: &[f64],
    field: &(impl CanonicalOccupancy + ?Sized),
    bbox: &Aabb,
    res: usize,
) -> Result<Mesh> {
    check_resolution(res)?;
    let values = posed_occupancy_batch(&lattice_points(bbox, res), map, bones, opts, pose, field);
    extract_isosurface(&values, [res; 3], bbox, 0.5)
}

/// Iso-0.5 surface of an arbitrary scalar field.
pub fn extract_field_mesh(f: impl Fn(&Vec3) -> f64 + Sync, bbox: &Aabb, res: usize) -> Result<Mesh> {
    check_resolution(res)?;
    let values: Vec<f64> = lattice_points(bbox, res).par_iter().map(&f).collect();
    extract_isosurface(&values, [res; 3], bbox, 0.5)
}

fn check_resolution(res: usize) -> Result<()> {
    if res < 16 {
        return Err(Error::InvalidArgument(format!(
            "mesh resolution must be at least 16, got {res}"
        )));
    }
    Ok(())
}
