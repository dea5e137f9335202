//! Triangle meshes and iso-surface extraction.
//!
//! The extractor walks the faces of every cube: each face contributes
//! directed segments between its edge crossings, the segments of one cube
//! chain into closed loops, and each loop is fan-triangulated. Faces with two
//! diagonal inside corners are resolved by the face-center average, computed
//! identically from both neighbouring cubes, so the surface is closed.

use std::io::Write;
use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};

use crate::error::{Error, Result};
use crate::math::{Aabb, Vec3};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
}

impl Mesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn area(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let [a, b, c] = t.map(|i| self.vertices[i as usize]);
                0.5 * (b - a).cross(&(c - a)).norm()
            })
            .sum()
    }

    /// Enclosed volume; positive when triangles wind counter-clockwise seen
    /// from outside.
    pub fn signed_volume(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let [a, b, c] = t.map(|i| self.vertices[i as usize]);
                a.dot(&b.cross(&c)) / 6.0
            })
            .sum()
    }

    /// Every directed edge is matched by exactly one opposite edge.
    pub fn is_watertight(&self) -> bool {
        use std::collections::HashMap;
        let mut count: HashMap<(u32, u32), i32> = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *count.entry((a, b)).or_default() += 1;
            }
        }
        count.iter().all(|(&(a, b), &n)| n == 1 && count.get(&(b, a)) == Some(&1))
    }

    pub fn write_obj(&self, mut w: impl Write) -> std::io::Result<()> {
        for v in &self.vertices {
            writeln!(w, "v {} {} {}", v.x, v.y, v.z)?;
        }
        for t in &self.triangles {
            writeln!(w, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
        }
        Ok(())
    }

    pub fn write_ply(&self, mut w: impl Write) -> std::io::Result<()> {
        write!(
            w,
            "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nelement face {}\nproperty list uchar int vertex_indices\nend_header\n",
            self.vertices.len(),
            self.triangles.len()
        )?;
        for v in &self.vertices {
            for c in v.iter() {
                w.write_f32::<LittleEndian>(*c as f32)?;
            }
        }
        for t in &self.triangles {
            w.write_u8(3)?;
            for i in t {
                w.write_i32::<LittleEndian>(*i as i32)?;
            }
        }
        Ok(())
    }

    pub fn save_obj(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_obj(&mut buf).expect("writing to memory");
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn save_ply(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_ply(&mut buf).expect("writing to memory");
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }
}

/// Corner `c` of a cube sits at offset `(c & 1, (c >> 1) & 1, (c >> 2) & 1)`.
/// Faces list their corners counter-clockwise as seen from outside the cube.
const FACES: [[usize; 4]; 6] = [
    [0, 4, 6, 2],
    [1, 3, 7, 5],
    [0, 1, 5, 4],
    [2, 6, 7, 3],
    [0, 2, 3, 1],
    [4, 5, 7, 6],
];

/// Whether two edges of one cube (given by their local corner pairs) lie on a
/// common face.
fn share_face(e1: (usize, usize), e2: (usize, usize)) -> bool {
    let (ax1, ax2) = (e1.0 ^ e1.1, e2.0 ^ e2.1);
    (0..3).any(|b| {
        let bit = 1 << b;
        bit != ax1 && bit != ax2 && (e1.0 & bit) == (e2.0 & bit)
    })
}

/// Triangulates one closed ring of crossings. A fan is used when some apex
/// has no diagonal lying on a cube face (such a diagonal could coincide with
/// one from the neighbouring cube); otherwise the ring is coned to its
/// centroid.
fn triangulate_ring(ring: &[(u32, (usize, usize))], mesh: &mut Mesh) {
    let n = ring.len();
    let apex = (0..n).find(|&a| {
        (2..n - 1).all(|d| !share_face(ring[a].1, ring[(a + d) % n].1))
    });
    match apex {
        Some(a) => {
            for t in 1..n - 1 {
                let (p, q) = (ring[(a + t) % n].0, ring[(a + t + 1) % n].0);
                mesh.triangles.push([ring[a].0, p, q]);
            }
        }
        None => {
            let c = ring.iter().map(|r| mesh.vertices[r.0 as usize]).sum::<Vec3>() / n as f64;
            let ci = mesh.vertices.len() as u32;
            mesh.vertices.push(c);
            for t in 0..n {
                mesh.triangles.push([ci, ring[t].0, ring[(t + 1) % n].0]);
            }
        }
    }
}

/// Surface `{x : f(x) = iso}` of samples on a vertex lattice spanning `bbox`
/// (x-fastest). Points with `f ≥ iso` are inside. The lattice is treated as
/// surrounded by one layer of outside samples so the result is always closed.
pub fn extract_isosurface(values: &[f64], dims: [usize; 3], bbox: &Aabb, iso: f64) -> Result<Mesh> {
    let n: usize = dims.iter().product();
    if values.len() != n {
        return Err(Error::dims("lattice samples", n, values.len()));
    }
    if dims.iter().any(|&d| d < 2) {
        return Err(Error::InvalidArgument(format!("lattice dims must be at least 2, got {dims:?}")));
    }
    bbox.validate()?;

    // Padded lattice: one ghost layer on each side, below the iso level.
    let pd = [dims[0] + 2, dims[1] + 2, dims[2] + 2];
    let ghost = iso - 1.0;
    let pidx = |i: usize, j: usize, k: usize| i + pd[0] * (j + pd[1] * k);
    let mut pv = vec![ghost; pd[0] * pd[1] * pd[2]];
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            let src = dims[0] * (j + dims[1] * k);
            let dst = pidx(1, j + 1, k + 1);
            pv[dst..dst + dims[0]].copy_from_slice(&values[src..src + dims[0]]);
        }
    }
    let ext = bbox.extent();
    let cell = Vec3::from_fn(|a, _| ext[a] / (dims[a] - 1) as f64);
    let pos = |i: usize, j: usize, k: usize| {
        bbox.min + Vec3::new(
            (i as f64 - 1.0) * cell.x,
            (j as f64 - 1.0) * cell.y,
            (k as f64 - 1.0) * cell.z,
        )
    };

    let np = pv.len();
    // Vertex id per lattice edge, keyed by lower endpoint and axis.
    let mut edge_vertex = vec![u32::MAX; np * 3];
    let mut mesh = Mesh::default();

    for k in 0..pd[2] - 1 {
        for j in 0..pd[1] - 1 {
            for i in 0..pd[0] - 1 {
                let corner_idx: [usize; 8] =
                    std::array::from_fn(|c| pidx(i + (c & 1), j + ((c >> 1) & 1), k + ((c >> 2) & 1)));
                let v: [f64; 8] = corner_idx.map(|ci| pv[ci]);
                let inside: [bool; 8] = v.map(|x| x >= iso);
                if inside.iter().all(|&b| b) || inside.iter().all(|&b| !b) {
                    continue;
                }
                // Per cube edge (a, b) with a < b: mesh vertex id.
                let mut vertex_of = |a: usize, b: usize| -> u32 {
                    let (lo, hi) = if corner_idx[a] < corner_idx[b] { (a, b) } else { (b, a) };
                    let axis = (lo ^ hi).trailing_zeros() as usize;
                    let key = corner_idx[lo] * 3 + axis;
                    if edge_vertex[key] == u32::MAX {
                        let (vl, vh) = (v[lo], v[hi]);
                        let t = ((iso - vl) / (vh - vl)).clamp(0.0, 1.0);
                        let pl = pos(i + (lo & 1), j + ((lo >> 1) & 1), k + ((lo >> 2) & 1));
                        let ph = pos(i + (hi & 1), j + ((hi >> 1) & 1), k + ((hi >> 2) & 1));
                        edge_vertex[key] = mesh.vertices.len() as u32;
                        mesh.vertices.push(pl + (ph - pl) * t);
                    }
                    edge_vertex[key]
                };

                // Directed segments between crossings, as (vertex id, cube edge).
                type Crossing = (u32, (usize, usize));
                let mut segs: Vec<(Crossing, Crossing)> = Vec::with_capacity(12);
                for face in FACES {
                    let mut crossings: Vec<(Crossing, bool)> = Vec::with_capacity(4);
                    for e in 0..4 {
                        let (a, b) = (face[e], face[(e + 1) % 4]);
                        if inside[a] != inside[b] {
                            crossings.push(((vertex_of(a, b), (a.min(b), a.max(b))), inside[b]));
                        }
                    }
                    match crossings.len() {
                        0 => {}
                        2 => {
                            let (s, e) = if crossings[0].1 {
                                (crossings[0].0, crossings[1].0)
                            } else {
                                (crossings[1].0, crossings[0].0)
                            };
                            segs.push((s, e));
                        }
                        4 => {
                            let mut fv = face.map(|c| v[c]);
                            fv.sort_by(|a, b| a.total_cmp(b));
                            let center_inside = (fv[0] + fv[1] + fv[2] + fv[3]) / 4.0 >= iso;
                            for p in 0..4 {
                                if crossings[p].1 {
                                    let q = if center_inside { (p + 3) % 4 } else { (p + 1) % 4 };
                                    segs.push((crossings[p].0, crossings[q].0));
                                }
                            }
                        }
                        _ => unreachable!("a face has an even number of crossings"),
                    }
                }

                let mut used = vec![false; segs.len()];
                for s0 in 0..segs.len() {
                    if used[s0] {
                        continue;
                    }
                    let mut ring = vec![segs[s0].0];
                    used[s0] = true;
                    let mut cur = segs[s0].1;
                    while cur.0 != ring[0].0 {
                        ring.push(cur);
                        let next = (0..segs.len())
                            .find(|&s| !used[s] && segs[s].0 .0 == cur.0)
                            .expect("segments close into loops");
                        used[next] = true;
                        cur = segs[next].1;
                    }
                    triangulate_ring(&ring, &mut mesh);
                }
            }
        }
    }
    Ok(mesh)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere_values(res: usize, r: f64) -> (Vec<f64>, Aabb) {
        let bbox = Aabb::new(Vec3::repeat(-1.0), Vec3::repeat(1.0)).unwrap();
        let mut v = Vec::new();
        for k in 0..res {
            for j in 0..res {
                for i in 0..res {
                    let p = Vec3::new(i as f64, j as f64, k as f64) * (2.0 / (res - 1) as f64) - Vec3::repeat(1.0);
                    v.push(r - p.norm() + 0.5);
                }
            }
        }
        (v, bbox)
    }

    #[test]
    fn sphere_is_closed_outward_and_accurate() {
        let (v, bbox) = sphere_values(33, 0.7);
        let m = extract_isosurface(&v, [33; 3], &bbox, 0.5).unwrap();
        assert!(m.is_watertight());
        let vol = m.signed_volume();
        let exact = 4.0 / 3.0 * std::f64::consts::PI * 0.7f64.powi(3);
        assert!(vol > 0.0);
        assert!((vol - exact).abs() / exact < 0.03, "{vol} vs {exact}");
        for p in &m.vertices {
            assert!((p.norm() - 0.7).abs() < 1e-2);
        }
    }

    #[test]
    fn boundary_touching_field_is_closed() {
        let v = vec![1.0; 27];
        let bbox = Aabb::new(Vec3::zeros(), Vec3::repeat(1.0)).unwrap();
        let m = extract_isosurface(&v, [3; 3], &bbox, 0.5).unwrap();
        assert!(m.is_watertight());
        assert!(m.signed_volume() > 0.0);
    }

    #[test]
    fn random_fields_are_always_closed() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let bbox = Aabb::new(Vec3::zeros(), Vec3::repeat(1.0)).unwrap();
        for _ in 0..20 {
            let v: Vec<f64> = (0..6 * 5 * 4).map(|_| rng.random::<f64>()).collect();
            let m = extract_isosurface(&v, [6, 5, 4], &bbox, 0.5).unwrap();
            assert!(m.is_watertight());
        }
    }

    #[test]
    fn empty_field_and_vertex_order_is_deterministic() {
        let bbox = Aabb::new(Vec3::zeros(), Vec3::repeat(1.0)).unwrap();
        let m = extract_isosurface(&vec![0.0; 64], [4; 3], &bbox, 0.5).unwrap();
        assert!(m.is_empty() && m.vertices.is_empty());
        let (v, bbox) = sphere_values(17, 0.5);
        let a = extract_isosurface(&v, [17; 3], &bbox, 0.5).unwrap();
        let b = extract_isosurface(&v, [17; 3], &bbox, 0.5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn obj_and_ply_layout() {
        let (v, bbox) = sphere_values(9, 0.5);
        let m = extract_isosurface(&v, [9; 3], &bbox, 0.5).unwrap();
        let mut obj = Vec::new();
        m.write_obj(&mut obj).unwrap();
        let text = String::from_utf8(obj).unwrap();
        assert_eq!(text.lines().filter(|l| l.starts_with("v ")).count(), m.vertices.len());
        assert_eq!(text.lines().filter(|l| l.starts_with("f ")).count(), m.triangles.len());
        let mut ply = Vec::new();
        m.write_ply(&mut ply).unwrap();
        let header_end = ply.windows(11).position(|w| w == b"end_header\n").unwrap() + 11;
        assert_eq!(ply.len() - header_end, m.vertices.len() * 12 + m.triangles.len() * 13);
    }
}
