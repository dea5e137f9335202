//! Canonical skinning-weight fields.
//!
//! Three interchangeable representations implement [`SkinningField`]:
//! a trainable [`SkinningMlp`], a dense [`SkinningVoxelGrid`] queried by
//! tri-linear interpolation, and a closed-form [`AnalyticSkinning`] used as
//! ground truth for the synthetic bodies. [`distill`] samples any field onto a
//! grid.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::math::{closest_on_segment, Aabb, Vec3};
use crate::mlp::Mlp;

/// Vertex lattice over a bounding box; vertices span the box inclusively and
/// are stored x-fastest.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridGeometry {
    dims: [usize; 3],
    bbox: Aabb,
}

/// Where a point falls in the lattice.
#[derive(Clone, Copy, Debug)]
pub struct CellLocation {
    /// Lower corner vertex of the containing cell.
    pub base: [usize; 3],
    /// Local coordinates in `[0, 1]^3` within the cell.
    pub t: [f64; 3],
    /// `d t / d x` per axis; zero on axes where the query was clamped.
    pub dt_dx: [f64; 3],
}

impl GridGeometry {
    pub fn new(dims: [usize; 3], bbox: Aabb) -> Result<Self> {
        if dims.iter().any(|&d| d < 2) {
            return Err(Error::InvalidArgument(format!(
                "grid dims must be at least 2 per axis, got {dims:?}"
            )));
        }
        bbox.validate()?;
        Ok(GridGeometry { dims, bbox })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn bbox(&self) -> &Aabb {
        &self.bbox
    }

    pub fn num_vertices(&self) -> usize {
        self.dims.iter().product()
    }

    #[inline(always)]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn vertex_position(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let ext = self.bbox.extent();
        let f = |a: usize, idx: usize| {
            self.bbox.min[a] + ext[a] * (idx as f64 / (self.dims[a] - 1) as f64)
        };
        Vec3::new(f(0, i), f(1, j), f(2, k))
    }

    /// All vertex positions in storage order.
    pub fn vertex_positions(&self) -> Vec<Vec3> {
        let [nx, ny, nz] = self.dims;
        let mut out = Vec::with_capacity(self.num_vertices());
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    out.push(self.vertex_position(i, j, k));
                }
            }
        }
        out
    }

    /// Containing cell of `x`, clamping to the box. A point on a cell face
    /// belongs to the cell on the lower-index side.
    #[inline(always)]
    pub fn locate(&self, x: &Vec3) -> CellLocation {
        let mut base = [0usize; 3];
        let mut t = [0.0; 3];
        let mut dt_dx = [0.0; 3];
        for a in 0..3 {
            let cells = (self.dims[a] - 1) as f64;
            let scale = cells / (self.bbox.max[a] - self.bbox.min[a]);
            let u_raw = (x[a] - self.bbox.min[a]) * scale;
            let u = u_raw.clamp(0.0, cells);
            let cell = (u.ceil() - 1.0).clamp(0.0, cells - 1.0);
            base[a] = cell as usize;
            t[a] = u - cell;
            dt_dx[a] = if u_raw == u { scale } else { 0.0 };
        }
        CellLocation { base, t, dt_dx }
    }

    /// Storage indices of the 8 cell corners; corner `c` is offset by
    /// `(c & 1, (c >> 1) & 1, (c >> 2) & 1)`.
    #[inline(always)]
    pub fn corner_indices(&self, base: [usize; 3]) -> [usize; 8] {
        let i0 = self.index(base[0], base[1], base[2]);
        let sx = 1;
        let sy = self.dims[0];
        let sz = self.dims[0] * self.dims[1];
        [
            i0,
            i0 + sx,
            i0 + sy,
            i0 + sx + sy,
            i0 + sz,
            i0 + sx + sz,
            i0 + sy + sz,
            i0 + sx + sy + sz,
        ]
    }
}

/// Tri-linear corner weights for local coordinates `t`.
#[inline(always)]
pub fn corner_weights(t: [f64; 3]) -> [f64; 8] {
    let [x, y, z] = t;
    let (ax, ay, az) = (1.0 - x, 1.0 - y, 1.0 - z);
    [
        ax * ay * az,
        x * ay * az,
        ax * y * az,
        x * y * az,
        ax * ay * z,
        x * ay * z,
        ax * y * z,
        x * y * z,
    ]
}

/// Spatial gradients of the tri-linear corner weights.
#[inline(always)]
pub fn corner_weight_gradients(loc: &CellLocation) -> [[f64; 3]; 8] {
    let [x, y, z] = loc.t;
    let [sx, sy, sz] = loc.dt_dx;
    let mut g = [[0.0; 3]; 8];
    for (c, gc) in g.iter_mut().enumerate() {
        let (bx, by, bz) = (c & 1 == 1, c & 2 == 2, c & 4 == 4);
        let fx = if bx { x } else { 1.0 - x };
        let fy = if by { y } else { 1.0 - y };
        let fz = if bz { z } else { 1.0 - z };
        let dx = if bx { 1.0 } else { -1.0 };
        let dy = if by { 1.0 } else { -1.0 };
        let dz = if bz { 1.0 } else { -1.0 };
        *gc = [dx * fy * fz * sx, fx * dy * fz * sy, fx * fy * dz * sz];
    }
    g
}

/// A field assigning every canonical point a probability vector over bones.
pub trait SkinningField: Send + Sync {
    fn num_bones(&self) -> usize;

    fn weights_into(&self, x: &Vec3, out: &mut [f64]);

    /// Weights plus their spatial gradient, `grad` being `n_b x 3` row-major.
    fn weights_and_gradient(&self, x: &Vec3, w: &mut [f64], grad: &mut [f64]);

    /// Weights for many points, `n x n_b` row-major.
    fn weights_batch(&self, points: &[Vec3]) -> Vec<f64> {
        let nb = self.num_bones();
        let mut out = vec![0.0; points.len() * nb];
        out.par_chunks_mut(nb)
            .zip(points.par_iter())
            .for_each(|(o, x)| self.weights_into(x, o));
        out
    }

    fn weights(&self, x: &Vec3) -> Vec<f64> {
        let mut w = vec![0.0; self.num_bones()];
        self.weights_into(x, &mut w);
        w
    }
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in v.iter_mut() {
        *x /= s;
    }
}

/// Softmax Jacobian applied to logit gradients: `dw = (diag w − w wᵀ) dz`,
/// `dz` being `n x k` row-major, written back in place.
fn softmax_jacobian_in_place(w: &[f64], dz: &mut [f64], k: usize) {
    for a in 0..k {
        let mean: f64 = w.iter().enumerate().map(|(b, wb)| wb * dz[b * k + a]).sum();
        for (b, wb) in w.iter().enumerate() {
            dz[b * k + a] = wb * (dz[b * k + a] - mean);
        }
    }
}

/// Vector-Jacobian product through softmax: logit gradient for an upstream
/// gradient `g` on the weights.
pub fn softmax_vjp(w: &[f64], g: &[f64], out: &mut [f64]) {
    let dot: f64 = w.iter().zip(g).map(|(a, b)| a * b).sum();
    for ((o, wi), gi) in out.iter_mut().zip(w).zip(g) {
        *o = wi * (gi - dot);
    }
}

/// Skinning MLP `R³ → Δ^{n_b}`: softplus hidden layers and a softmax head.
#[derive(Clone, Debug, PartialEq)]
pub struct SkinningMlp {
    mlp: Mlp,
}

impl SkinningMlp {
    pub const HIDDEN: [usize; 3] = [64, 64, 64];
    pub const BETA: f64 = 1.0;

    /// Default `3 → 64 → 64 → 64 → n_b` network with inputs normalized to
    /// `[-1, 1]` over `bbox`.
    pub fn new(n_bones: usize, bbox: &Aabb, rng: &mut impl Rng) -> Result<Self> {
        Self::with_hidden(&Self::HIDDEN, n_bones, Self::BETA, bbox, rng)
    }

    pub fn with_hidden(
        hidden: &[usize],
        n_bones: usize,
        beta: f64,
        bbox: &Aabb,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut sizes = vec![3];
        sizes.extend_from_slice(hidden);
        sizes.push(n_bones);
        let mut mlp = Mlp::new(&sizes, beta, rng)?;
        let c = bbox.center();
        let e = bbox.extent();
        mlp.set_input_normalization(&[c.x, c.y, c.z], &[2.0 / e.x, 2.0 / e.y, 2.0 / e.z]);
        Ok(SkinningMlp { mlp })
    }

    pub fn from_mlp(mlp: Mlp) -> Result<Self> {
        if mlp.input_dim() != 3 {
            return Err(Error::dims("skinning network input", 3, mlp.input_dim()));
        }
        Ok(SkinningMlp { mlp })
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.mlp
    }

    pub fn num_params(&self) -> usize {
        self.mlp.num_params()
    }
}

impl SkinningField for SkinningMlp {
    fn num_bones(&self) -> usize {
        self.mlp.output_dim()
    }

    fn weights_into(&self, x: &Vec3, out: &mut [f64]) {
        self.mlp.forward_point(x.as_slice(), out);
        softmax_in_place(out);
    }

    fn weights_and_gradient(&self, x: &Vec3, w: &mut [f64], grad: &mut [f64]) {
        self.mlp.forward_point_jacobian(x.as_slice(), 3, w, grad);
        softmax_in_place(w);
        softmax_jacobian_in_place(w, grad, 3);
    }

    fn weights_batch(&self, points: &[Vec3]) -> Vec<f64> {
        const CHUNK: usize = 2048;
        let nb = self.num_bones();
        let mut out = vec![0.0; points.len() * nb];
        out.par_chunks_mut(CHUNK * nb)
            .zip(points.par_chunks(CHUNK))
            .for_each(|(o, pts)| {
                let flat: Vec<f64> = pts.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
                o.copy_from_slice(&self.mlp.forward_batch_output(&flat));
                o.chunks_exact_mut(nb).for_each(softmax_in_place);
            });
        out
    }
}

/// Free-function form of the MLP skinning query.
pub fn mlp_weights(mlp: &SkinningMlp, x: &Vec3) -> Vec<f64> {
    mlp.weights(x)
}

/// Closed-form smooth weights: softmax of `−dist(x, bone)² / (2τ²)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AnalyticSkinning {
    pub segments: Vec<(Vec3, Vec3)>,
    pub temperature: f64,
}

impl AnalyticSkinning {
    pub fn new(segments: Vec<(Vec3, Vec3)>, temperature: f64) -> Result<Self> {
        if segments.is_empty() || !(temperature > 0.0) {
            return Err(Error::InvalidArgument(
                "analytic skinning needs bones and a positive temperature".into(),
            ));
        }
        Ok(AnalyticSkinning {
            segments,
            temperature,
        })
    }

    /// Index of the closest bone segment (lowest index on ties).
    pub fn nearest_bone(&self, x: &Vec3) -> usize {
        nearest_segment(&self.segments, x)
    }
}

pub(crate) fn nearest_segment(segments: &[(Vec3, Vec3)], x: &Vec3) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (i, (a, b)) in segments.iter().enumerate() {
        let d = (x - closest_on_segment(a, b, x)).norm_squared();
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}

impl SkinningField for AnalyticSkinning {
    fn num_bones(&self) -> usize {
        self.segments.len()
    }

    fn weights_into(&self, x: &Vec3, out: &mut [f64]) {
        let s = 0.5 / (self.temperature * self.temperature);
        for (o, (a, b)) in out.iter_mut().zip(&self.segments) {
            *o = -(x - closest_on_segment(a, b, x)).norm_squared() * s;
        }
        softmax_in_place(out);
    }

    fn weights_and_gradient(&self, x: &Vec3, w: &mut [f64], grad: &mut [f64]) {
        let inv_t2 = 1.0 / (self.temperature * self.temperature);
        for (b, (a, e)) in self.segments.iter().enumerate() {
            let diff = x - closest_on_segment(a, e, x);
            w[b] = -0.5 * diff.norm_squared() * inv_t2;
            for k in 0..3 {
                grad[b * 3 + k] = -diff[k] * inv_t2;
            }
        }
        softmax_in_place(w);
        softmax_jacobian_in_place(w, grad, 3);
    }
}

/// Dense per-vertex skinning weights over a canonical bounding box.
#[derive(Clone, Debug, PartialEq)]
pub struct SkinningVoxelGrid {
    geometry: GridGeometry,
    n_bones: usize,
    weights: Vec<f64>,
}

const GRID_MAGIC: &[u8; 4] = b"SKNV";
const GRID_VERSION: u32 = 1;

impl SkinningVoxelGrid {
    /// Validates that every vertex holds a non-negative vector summing to one
    /// (to 1e-5).
    pub fn new(dims: [usize; 3], bbox: Aabb, n_bones: usize, weights: Vec<f64>) -> Result<Self> {
        let geometry = GridGeometry::new(dims, bbox)?;
        if n_bones == 0 {
            return Err(Error::InvalidArgument("grid needs at least one bone".into()));
        }
        let expected = geometry.num_vertices() * n_bones;
        if weights.len() != expected {
            return Err(Error::dims("grid weights", expected, weights.len()));
        }
        for (v, w) in weights.chunks_exact(n_bones).enumerate() {
            let sum: f64 = w.iter().sum();
            if w.iter().any(|x| !(*x >= 0.0)) || (sum - 1.0).abs() > 1e-5 {
                return Err(Error::InvalidArgument(format!(
                    "vertex {v} weights are not a probability vector"
                )));
            }
        }
        Ok(SkinningVoxelGrid {
            geometry,
            n_bones,
            weights,
        })
    }

    pub fn uniform(dims: [usize; 3], bbox: Aabb, n_bones: usize) -> Result<Self> {
        let geometry = GridGeometry::new(dims, bbox)?;
        let n = geometry.num_vertices() * n_bones;
        Self::new(dims, bbox, n_bones, vec![1.0 / n_bones as f64; n])
    }

    /// Fills every vertex from `f(position)`.
    pub fn from_fn(
        dims: [usize; 3],
        bbox: Aabb,
        n_bones: usize,
        f: impl FnMut(&Vec3) -> Vec<f64>,
    ) -> Result<Self> {
        let geometry = GridGeometry::new(dims, bbox)?;
        let weights = geometry.vertex_positions().iter().flat_map(f).collect();
        Self::new(dims, bbox, n_bones, weights)
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims
    }

    pub fn bbox(&self) -> &Aabb {
        &self.geometry.bbox
    }

    pub fn num_bones(&self) -> usize {
        self.n_bones
    }

    /// Flat storage: x-fastest vertices, bone index innermost.
    pub fn raw_weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn vertex_weights(&self, i: usize, j: usize, k: usize) -> &[f64] {
        let v = self.geometry.index(i, j, k);
        &self.weights[v * self.n_bones..(v + 1) * self.n_bones]
    }

    pub fn trilerp_weights(&self, x: &Vec3) -> Vec<f64> {
        let mut out = vec![0.0; self.n_bones];
        self.trilerp_into(x, &mut out);
        out
    }

    fn trilerp_into(&self, x: &Vec3, out: &mut [f64]) {
        let loc = self.geometry.locate(x);
        let idx = self.geometry.corner_indices(loc.base);
        let cw = corner_weights(loc.t);
        let nb = self.n_bones;
        out.fill(0.0);
        for (c, &v) in idx.iter().enumerate() {
            let src = &self.weights[v * nb..(v + 1) * nb];
            for (o, s) in out.iter_mut().zip(src) {
                *o += cw[c] * s;
            }
        }
    }

    /// Exact gradient of the interpolant, `n_b x 3` row-major. Zero along axes
    /// on which `x` lies outside the box.
    pub fn weight_spatial_gradient(&self, x: &Vec3) -> Vec<f64> {
        let mut g = vec![0.0; self.n_bones * 3];
        let loc = self.geometry.locate(x);
        let idx = self.geometry.corner_indices(loc.base);
        let cg = corner_weight_gradients(&loc);
        let nb = self.n_bones;
        for (c, &v) in idx.iter().enumerate() {
            for b in 0..nb {
                let w = self.weights[v * nb + b];
                for k in 0..3 {
                    g[b * 3 + k] += cg[c][k] * w;
                }
            }
        }
        g
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        let [nx, ny, nz] = self.dims();
        w.write_all(GRID_MAGIC)?;
        w.write_u32::<LittleEndian>(GRID_VERSION)?;
        for d in [nx, ny, nz, self.n_bones] {
            w.write_u32::<LittleEndian>(d as u32)?;
        }
        for v in self.bbox().as_array() {
            w.write_f32::<LittleEndian>(v as f32)?;
        }
        for &v in &self.weights {
            w.write_f32::<LittleEndian>(v as f32)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        buf
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let fmt = |e: std::io::Error| Error::Format(format!("voxel grid: {e}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(fmt)?;
        if &magic != GRID_MAGIC {
            return Err(Error::Format("voxel grid: bad magic".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(fmt)?;
        if version != GRID_VERSION {
            return Err(Error::Format(format!("voxel grid: unsupported version {version}")));
        }
        let mut d = [0usize; 4];
        for v in &mut d {
            *v = r.read_u32::<LittleEndian>().map_err(fmt)? as usize;
        }
        let mut bb = [0.0f64; 6];
        for v in &mut bb {
            *v = r.read_f32::<LittleEndian>().map_err(fmt)? as f64;
        }
        let count = d[0]
            .checked_mul(d[1])
            .and_then(|v| v.checked_mul(d[2]))
            .and_then(|v| v.checked_mul(d[3]))
            .ok_or_else(|| Error::Format("voxel grid: dims overflow".into()))?;
        let mut weights = Vec::with_capacity(count.min(1 << 28));
        for _ in 0..count {
            weights.push(r.read_f32::<LittleEndian>().map_err(fmt)? as f64);
        }
        let bbox = Aabb {
            min: Vec3::new(bb[0], bb[1], bb[2]),
            max: Vec3::new(bb[3], bb[4], bb[5]),
        };
        Self::new([d[0], d[1], d[2]], bbox, d[3], weights)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(bytes.as_slice())
    }
}

impl SkinningField for SkinningVoxelGrid {
    fn num_bones(&self) -> usize {
        self.n_bones
    }

    fn weights_into(&self, x: &Vec3, out: &mut [f64]) {
        self.trilerp_into(x, out);
    }

    fn weights_and_gradient(&self, x: &Vec3, w: &mut [f64], grad: &mut [f64]) {
        self.trilerp_into(x, w);
        grad.copy_from_slice(&self.weight_spatial_gradient(x));
    }
}

/// Free-function form of [`SkinningVoxelGrid::trilerp_weights`].
pub fn trilerp_weights(grid: &SkinningVoxelGrid, x: &Vec3) -> Vec<f64> {
    grid.trilerp_weights(x)
}

/// Free-function form of [`SkinningVoxelGrid::weight_spatial_gradient`].
pub fn weight_spatial_gradient(grid: &SkinningVoxelGrid, x: &Vec3) -> Vec<f64> {
    grid.weight_spatial_gradient(x)
}

/// Samples `field` at every vertex of a `dims` lattice spanning `bbox`.
pub fn distill(
    field: &dyn SkinningField,
    dims: [usize; 3],
    bbox: &Aabb,
) -> Result<SkinningVoxelGrid> {
    let geometry = GridGeometry::new(dims, *bbox)?;
    let weights = field.weights_batch(&geometry.vertex_positions());
    Ok(SkinningVoxelGrid {
        geometry,
        n_bones: field.num_bones(),
        weights,
    })
}
