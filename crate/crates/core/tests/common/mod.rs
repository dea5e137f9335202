//! Brute-force reference for correspondence search: sample the forward map
//! on a dense canonical lattice, keep lattice local minima of the residual,
//! and polish each with Newton steps on the exact Jacobian.

#![allow(dead_code)]

use fwdskin::deformer::ForwardMap;
use fwdskin::{Aabb, Vec3};
use rayon::prelude::*;

pub struct DenseOracle {
    res: usize,
    bbox: Aabb,
    step: Vec3,
    /// Deformed lattice vertices, x-fastest.
    posed: Vec<[f32; 3]>,
}

impl DenseOracle {
    pub fn build(map: &impl ForwardMap, bbox: &Aabb, res: usize) -> Self {
        let e = bbox.extent();
        let step = e / (res - 1) as f64;
        let posed = (0..res * res * res)
            .into_par_iter()
            .map(|i| {
                let (x, y, z) = (i % res, (i / res) % res, i / (res * res));
                let p = bbox.min + Vec3::new(x as f64 * step.x, y as f64 * step.y, z as f64 * step.z);
                let d = map.deform(&p);
                [d.x as f32, d.y as f32, d.z as f32]
            })
            .collect();
        DenseOracle {
            res,
            bbox: *bbox,
            step,
            posed,
        }
    }

    fn vertex(&self, i: usize) -> Vec3 {
        let r = self.res;
        let (x, y, z) = (i % r, (i / r) % r, i / (r * r));
        self.bbox.min + Vec3::new(x as f64 * self.step.x, y as f64 * self.step.y, z as f64 * self.step.z)
    }

    fn residual(&self, i: usize, q: &[f32; 3]) -> f32 {
        let p = &self.posed[i];
        let d = [p[0] - q[0], p[1] - q[1], p[2] - q[2]];
        (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
    }

    fn is_local_min(&self, i: usize, q: &[f32; 3]) -> bool {
        let r = self.res as isize;
        let (x, y, z) = ((i as isize) % r, (i as isize / r) % r, i as isize / (r * r));
        let here = self.residual(i, q);
        for dz in -1..=1 {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (a, b, c) = (x + dx, y + dy, z + dz);
                    if (dx, dy, dz) == (0, 0, 0) || a < 0 || b < 0 || c < 0 || a >= r || b >= r || c >= r {
                        continue;
                    }
                    let j = (a + r * (b + r * c)) as usize;
                    let other = self.residual(j, q);
                    // Ties break by index so flat plateaus keep one vertex.
                    if other < here || (other == here && j < i) {
                        return false;
                    }
                }
            }
        }
        true
    }

    /// Distinct canonical points with `‖d(x) − q‖ < conv_eps` inside the
    /// lattice box, separated by at least `dedup_dist`.
    pub fn roots(&self, map: &impl ForwardMap, q: &Vec3, conv_eps: f64, dedup_dist: f64) -> Vec<Vec3> {
        let qf = [q.x as f32, q.y as f32, q.z as f32];
        // A lattice minimum near a root sits within half a cell diagonal of
        // it; the map stretches lengths by at most a small factor.
        let tau = 3.0 * self.step.norm() as f32;
        let minima: Vec<usize> = (0..self.posed.len())
            .into_par_iter()
            .filter(|&i| self.residual(i, &qf) < tau && self.is_local_min(i, &qf))
            .collect();
        let mut roots: Vec<Vec3> = Vec::new();
        for i in minima {
            let Some(x) = newton(map, self.vertex(i), q, conv_eps, 4.0 * self.step.norm()) else {
                continue;
            };
            if !self.bbox.contains(&x) {
                continue;
            }
            if roots.iter().all(|r| (r - x).norm() >= dedup_dist) {
                roots.push(x);
            }
        }
        roots
    }
}

/// Newton iteration from `start`; gives up if it leaves the `reach` ball.
fn newton(map: &impl ForwardMap, start: Vec3, q: &Vec3, conv_eps: f64, reach: f64) -> Option<Vec3> {
    let mut x = start;
    for _ in 0..50 {
        let (d, j) = map.deform_with_jacobian(&x);
        let r = d - q;
        if r.norm() < 1e-3 * conv_eps {
            break;
        }
        x -= j.try_inverse()? * r;
        if (x - start).norm() > reach {
            return None;
        }
    }
    (map.deform(&x) - q).norm().lt(&conv_eps).then_some(x)
}

/// Number of `reference` points that have a `found` point within `tol`.
pub fn matched(reference: &[Vec3], found: &[Vec3], tol: f64) -> usize {
    reference
        .iter()
        .filter(|r| found.iter().any(|f| (*r - f).norm() <= tol))
        .count()
}
