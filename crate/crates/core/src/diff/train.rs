//! Joint fitting of the occupancy and skinning networks from posed,
//! labelled point sets.
//!
//! Every iteration samples the skinning network on a voxel grid, blends one
//! transform grid per frame, finds the canonical roots of every batch point,
//! and scores each point by its most occupied root. The loss gradient flows
//! into the occupancy network at that root and, through the root condition
//! `d(x*) = x'` with the search's inverse-Jacobian estimate, into the grid
//! weights and from there into the skinning network.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::correspondence::{batch_search, SearchOptions};
use crate::deformer::precompute_transform_grid;
use crate::diff::loss::{
    bce_logit_grad, bone_occupancy_grad, joint_skinning_grad, joint_skinning_terms, joint_targets, loss_bce,
    sample_bone_points,
};
use crate::diff::sampling::{iou, sample_frame, sample_uniform_frame, Frame};
use crate::error::{Error, Result};
use crate::math::{affine_apply, Aabb, Vec3};
use crate::mlp::{BatchCache, Mlp, Sgd};
use crate::shape::{posed_occupancy_batch, sigmoid, OccupancyMlp};
use crate::skeleton::Pose;
use crate::skinning::{
    corner_weights, softmax_in_place, softmax_vjp, GridGeometry, SkinningField, SkinningMlp, SkinningVoxelGrid,
};
use crate::synthetic::SyntheticBody;

/// Rows per parallel network chunk. Fixed so reductions do not depend on
/// the worker count.
const CHUNK: usize = 1024;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Step size for the skinning parameters.
    pub skinning_learning_rate: f64,
    pub momentum: f64,
    /// Both step sizes are multiplied by this after every epoch.
    pub lr_decay: f64,
    /// Frames per iteration.
    pub batch_frames: usize,
    /// Points per frame per iteration.
    pub batch_points: usize,
    pub points_per_frame: usize,
    /// Epochs during which the bone-occupancy and joint-skinning terms apply.
    pub bootstrap_epochs: usize,
    pub grid_dims: [usize; 3],
    /// Sample a skinning network onto the grid each iteration; when false the
    /// grid weights are optimized directly under a smoothness penalty.
    pub distill: bool,
    pub bce_weight: f64,
    pub bone_weight: f64,
    pub joint_weight: f64,
    /// Squared-difference penalty between neighbouring grid vertices, used
    /// only when the grid is optimized directly.
    pub smoothness_weight: f64,
    pub bone_samples: usize,
    /// Feed the pose angles to the occupancy network.
    pub pose_conditioned: bool,
    pub occupancy_hidden: Vec<usize>,
    pub occupancy_beta: f64,
    pub skinning_hidden: Vec<usize>,
    /// Uniform points per validation frame.
    pub val_points: usize,
    /// Canonical surface samples for the skinning accuracy metric.
    pub skinning_samples: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            learning_rate: 1e-3,
            skinning_learning_rate: 1e-3,
            momentum: 0.9,
            lr_decay: 1.0,
            batch_frames: 4,
            batch_points: 2000,
            points_per_frame: 20_000,
            bootstrap_epochs: 1,
            grid_dims: [64, 16, 16],
            distill: true,
            bce_weight: 1.0,
            bone_weight: 1.0,
            joint_weight: 1.0,
            smoothness_weight: 1.0,
            bone_samples: 1000,
            pose_conditioned: false,
            occupancy_hidden: OccupancyMlp::HIDDEN.to_vec(),
            occupancy_beta: OccupancyMlp::BETA,
            skinning_hidden: SkinningMlp::HIDDEN.to_vec(),
            val_points: 5000,
            skinning_samples: 2000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(format!("training {what} must be positive")));
        let positive = [
            ("learning_rate", self.learning_rate),
            ("skinning_learning_rate", self.skinning_learning_rate),
            ("occupancy_beta", self.occupancy_beta),
            ("lr_decay", self.lr_decay),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return bad(name);
            }
        }
        let non_negative = [
            ("bce_weight", self.bce_weight),
            ("bone_weight", self.bone_weight),
            ("joint_weight", self.joint_weight),
            ("smoothness_weight", self.smoothness_weight),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("training {name} must be non-negative")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument("training momentum must lie in [0, 1)".into()));
        }
        let counts = [
            ("epochs", self.epochs),
            ("batch_frames", self.batch_frames),
            ("batch_points", self.batch_points),
            ("points_per_frame", self.points_per_frame),
            ("val_points", self.val_points),
            ("skinning_samples", self.skinning_samples),
        ];
        for (name, v) in counts {
            if v == 0 {
                return bad(name);
            }
        }
        if self.grid_dims.iter().any(|&d| d < 2) {
            return Err(Error::InvalidArgument("training grid needs at least 2 vertices per axis".into()));
        }
        if self.occupancy_hidden.is_empty() || self.occupancy_hidden.contains(&0) {
            return bad("occupancy_hidden");
        }
        if self.skinning_hidden.is_empty() || self.skinning_hidden.contains(&0) {
            return bad("skinning_hidden");
        }
        Ok(())
    }
}

/// Wall-clock seconds spent per stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub distill: f64,
    pub precompute: f64,
    pub search: f64,
    pub shape_query: f64,
    pub backward: f64,
    pub evaluate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub iterations: usize,
    /// Mean total loss over the epoch's iterations.
    pub loss: f64,
    pub bce: f64,
    pub bootstrap: f64,
    /// Mean held-out IoU over the validation frames.
    pub val_iou: f64,
    /// Fraction of canonical surface samples whose strongest bone is the
    /// nearest one.
    pub skinning_accuracy: f64,
    /// Occupied training points that had no root this epoch.
    pub rootless_occupied: usize,
    pub seconds: f64,
}

impl EpochMetrics {
    pub const CSV_HEADER: &'static str =
        "epoch,iterations,loss,bce,bootstrap,val_iou,skinning_accuracy,rootless_occupied";

    /// Timing is left out so reruns compare byte for byte.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.iterations,
            self.loss,
            self.bce,
            self.bootstrap,
            self.val_iou,
            self.skinning_accuracy,
            self.rootless_occupied
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub occupancy: OccupancyMlp,
    /// Absent when the grid was optimized directly.
    pub skinning: Option<SkinningMlp>,
    pub grid: SkinningVoxelGrid,
    pub metrics: Vec<EpochMetrics>,
    /// Total loss of every iteration.
    pub losses: Vec<f64>,
    pub timings: PhaseTimings,
    pub warnings: Vec<String>,
}

/// Per-vertex skinning logits optimized without a network.
#[derive(Clone, Debug)]
struct GridLogits {
    geometry: GridGeometry,
    n_bones: usize,
    logits: Vec<f64>,
}

enum Skinner {
    Network(SkinningMlp),
    Grid(GridLogits),
}

/// The grid of one iteration plus what is needed to push vertex-weight
/// gradients back to the parameters.
struct Materialized {
    grid: SkinningVoxelGrid,
    caches: Vec<BatchCache>,
}

impl Skinner {
    fn num_params(&self) -> usize {
        match self {
            Skinner::Network(m) => m.num_params(),
            Skinner::Grid(g) => g.logits.len(),
        }
    }

    fn params_mut(&mut self) -> &mut [f64] {
        match self {
            Skinner::Network(m) => m.mlp_mut().params_mut(),
            Skinner::Grid(g) => &mut g.logits,
        }
    }

    fn materialize(&self, geometry: &GridGeometry, vertices: &[f64]) -> Result<Materialized> {
        match self {
            Skinner::Network(m) => {
                let nb = m.num_bones();
                let caches = forward_chunks(m.mlp(), vertices);
                let mut weights: Vec<f64> = caches.iter().flat_map(|c| c.output().iter().cloned()).collect();
                weights.par_chunks_mut(nb).for_each(softmax_in_place);
                let grid = SkinningVoxelGrid::new(geometry.dims(), *geometry.bbox(), nb, weights)?;
                Ok(Materialized { grid, caches })
            }
            Skinner::Grid(g) => {
                let mut weights = g.logits.clone();
                weights.par_chunks_mut(g.n_bones).for_each(softmax_in_place);
                let grid = SkinningVoxelGrid::new(g.geometry.dims(), *g.geometry.bbox(), g.n_bones, weights)?;
                Ok(Materialized {
                    grid,
                    caches: Vec::new(),
                })
            }
        }
    }

    /// Parameter gradient from a gradient on the grid's vertex weights.
    fn backward(&self, mat: &Materialized, vertex_grad: &[f64]) -> Vec<f64> {
        let nb = mat.grid.num_bones();
        let w = mat.grid.raw_weights();
        let mut dz = vec![0.0; w.len()];
        dz.par_chunks_mut(nb)
            .zip(w.par_chunks(nb).zip(vertex_grad.par_chunks(nb)))
            .for_each(|(d, (w, g))| softmax_vjp(w, g, d));
        match self {
            Skinner::Network(m) => backward_chunks(m.mlp(), &mat.caches, &dz, None),
            Skinner::Grid(_) => dz,
        }
    }
}

fn forward_chunks(mlp: &Mlp, rows: &[f64]) -> Vec<BatchCache> {
    rows.par_chunks(CHUNK * mlp.input_dim())
        .map(|c| mlp.forward_batch(c))
        .collect()
}

/// Backward pass over chunked caches; per-chunk gradients are summed in
/// chunk order.
fn backward_chunks(mlp: &Mlp, caches: &[BatchCache], d_out: &[f64], d_input: Option<&mut [f64]>) -> Vec<f64> {
    let (o, i) = (mlp.output_dim(), mlp.input_dim());
    let offsets: Vec<usize> = caches
        .iter()
        .scan(0, |acc, c| {
            let s = *acc;
            *acc += c.len();
            Some(s)
        })
        .collect();
    let mut d_in_chunks: Vec<Vec<f64>> = caches.iter().map(|c| vec![0.0; c.len() * i]).collect();
    let want_input = d_input.is_some();
    let grads: Vec<Vec<f64>> = caches
        .par_iter()
        .zip(offsets.par_iter())
        .zip(d_in_chunks.par_iter_mut())
        .map(|((cache, &off), din)| {
            let mut g = vec![0.0; mlp.num_params()];
            let d = &d_out[off * o..(off + cache.len()) * o];
            if d.iter().any(|v| *v != 0.0) {
                mlp.backward_batch(cache, d, &mut g, want_input.then_some(din.as_mut_slice()));
            }
            g
        })
        .collect();
    if let Some(out) = d_input {
        for (chunk, &off) in d_in_chunks.iter().zip(&offsets) {
            out[off * i..off * i + chunk.len()].copy_from_slice(chunk);
        }
    }
    let mut total = vec![0.0; mlp.num_params()];
    for g in grads {
        for (t, v) in total.iter_mut().zip(g) {
            *t += v;
        }
    }
    total
}

/// Mean squared difference between neighbouring vertex weights, scaled by
/// `weight`, with its gradient added to `grad`.
fn smoothness_terms(grid: &SkinningVoxelGrid, weight: f64, grad: &mut [f64]) -> f64 {
    let [nx, ny, nz] = grid.dims();
    let nb = grid.num_bones();
    let w = grid.raw_weights();
    let geo = grid.geometry();
    let edges = (nx - 1) * ny * nz + nx * (ny - 1) * nz + nx * ny * (nz - 1);
    let scale = weight / edges as f64;
    let mut loss = 0.0;
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let u = geo.index(i, j, k);
                let mut pair = |v: usize| {
                    for b in 0..nb {
                        let d = w[u * nb + b] - w[v * nb + b];
                        loss += d * d;
                        grad[u * nb + b] += 2.0 * scale * d;
                        grad[v * nb + b] -= 2.0 * scale * d;
                    }
                };
                if i + 1 < nx {
                    pair(geo.index(i + 1, j, k));
                }
                if j + 1 < ny {
                    pair(geo.index(i, j + 1, k));
                }
                if k + 1 < nz {
                    pair(geo.index(i, j, k + 1));
                }
            }
        }
    }
    loss * scale
}

/// Adds `c` at `x` into the vertex-weight gradient through trilinear
/// interpolation.
fn scatter_weight_grad(geo: &GridGeometry, nb: usize, x: &Vec3, c: &[f64], grad: &mut [f64]) {
    let loc = geo.locate(x);
    let cw = corner_weights(loc.t);
    for (v, f) in geo.corner_indices(loc.base).iter().zip(cw) {
        for b in 0..nb {
            grad[v * nb + b] += f * c[b];
        }
    }
}

fn pose_input(pose: &Pose, conditioned: bool) -> &[f64] {
    if conditioned {
        &pose.angles
    } else {
        &[]
    }
}

/// Trains on `train_poses` and reports held-out metrics on `val_poses`
/// after every epoch.
pub fn train(
    config: &TrainConfig,
    body: &SyntheticBody,
    train_poses: &[Pose],
    val_poses: &[Pose],
) -> Result<TrainOutput> {
    train_with_progress(config, body, train_poses, val_poses, |_| {})
}

/// [`train`] with a callback after each epoch.
pub fn train_with_progress(
    config: &TrainConfig,
    body: &SyntheticBody,
    train_poses: &[Pose],
    val_poses: &[Pose],
    mut progress: impl FnMut(&EpochMetrics),
) -> Result<TrainOutput> {
    config.validate()?;
    if train_poses.is_empty() {
        return Err(Error::InvalidArgument("training needs at least one pose".into()));
    }
    let mut warnings = Vec::new();
    let distinct = {
        let mut seen: Vec<&Pose> = Vec::new();
        for p in train_poses {
            if !seen.iter().any(|q| q.angles == p.angles) {
                seen.push(p);
            }
        }
        seen.len()
    };
    if distinct < 2 {
        warnings.push(
            "only one distinct training pose: skinning weights are not identifiable and their accuracy is not meaningful"
                .to_string(),
        );
    }

    let nb = body.num_bones();
    let bbox: Aabb = body.canonical_bbox();
    let opts: SearchOptions = body.search_options();
    let geometry = GridGeometry::new(config.grid_dims, bbox)?;
    let vertices: Vec<f64> = geometry.vertex_positions().iter().flat_map(|p| [p.x, p.y, p.z]).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let pose_dims = if config.pose_conditioned { body.skeleton.dof() } else { 0 };
    let mut occupancy = OccupancyMlp::new(
        &config.occupancy_hidden,
        config.occupancy_beta,
        pose_dims,
        &bbox,
        &mut rng,
    )?;
    let mut skinner = if config.distill {
        let mut m = SkinningMlp::with_hidden(&config.skinning_hidden, nb, SkinningMlp::BETA, &bbox, &mut rng)?;
        m.mlp_mut().zero_output_layer();
        Skinner::Network(m)
    } else {
        Skinner::Grid(GridLogits {
            geometry: geometry.clone(),
            n_bones: nb,
            logits: vec![0.0; geometry.num_vertices() * nb],
        })
    };
    let mut occ_opt = Sgd::new(occupancy.mlp().num_params(), config.learning_rate, config.momentum);
    let mut skin_opt = Sgd::new(skinner.num_params(), config.skinning_learning_rate, config.momentum);

    let frames: Vec<Frame> = train_poses
        .iter()
        .map(|p| sample_frame(body, p, config.points_per_frame, &mut rng))
        .collect::<Result<_>>()?;
    let val_frames: Vec<Frame> = val_poses
        .iter()
        .map(|p| sample_uniform_frame(body, p, config.val_points, &mut rng))
        .collect::<Result<_>>()?;
    let skin_probe: Vec<(Vec3, usize)> = body
        .body
        .sample_surface(config.skinning_samples, &[], &mut rng)
        .into_iter()
        .map(|(x, _)| (x, body.skinning.nearest_bone(&x)))
        .collect();
    let joints = joint_targets(&body.skeleton);

    let mut timings = PhaseTimings::default();
    let mut metrics = Vec::new();
    let mut losses = Vec::new();
    let mut last_grid = None;
    let occ_in = 3 + pose_dims;

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let bootstrap = epoch < config.bootstrap_epochs;
        // Work units: a fixed-size slice of one frame's shuffled points.
        let mut units: Vec<(usize, Vec<usize>)> = Vec::new();
        for (f, frame) in frames.iter().enumerate() {
            let mut order: Vec<usize> = (0..frame.len()).collect();
            order.shuffle(&mut rng);
            for chunk in order.chunks(config.batch_points) {
                units.push((f, chunk.to_vec()));
            }
        }
        units.shuffle(&mut rng);

        let (mut sum_loss, mut sum_bce, mut sum_boot) = (0.0, 0.0, 0.0);
        let mut rootless = 0usize;
        let mut iterations = 0usize;
        for batch in units.chunks(config.batch_frames) {
            let t = Instant::now();
            let mat = skinner.materialize(&geometry, &vertices)?;
            timings.distill += t.elapsed().as_secs_f64();

            // Roots of every batch point.
            let mut searched = Vec::with_capacity(batch.len());
            for (f, idx) in batch {
                let frame = &frames[*f];
                let t = Instant::now();
                let tg = precompute_transform_grid(&mat.grid, &frame.bones)?;
                timings.precompute += t.elapsed().as_secs_f64();
                let t = Instant::now();
                let queries: Vec<Vec3> = idx.iter().map(|&i| frame.points[i]).collect();
                let sets = batch_search(&queries, &tg, &frame.bones, &opts);
                timings.search += t.elapsed().as_secs_f64();
                searched.push(sets);
            }

            // Occupancy at every root, scored by the best root per point.
            let t = Instant::now();
            let mut rows = Vec::new();
            for ((f, _), sets) in batch.iter().zip(&searched) {
                let pose = pose_input(&frames[*f].pose, config.pose_conditioned);
                for s in sets {
                    for r in &s.roots {
                        occupancy.input_row(&r.point, pose, &mut rows);
                    }
                }
            }
            let caches = forward_chunks(occupancy.mlp(), &rows);
            let logits: Vec<f64> = caches.iter().flat_map(|c| c.output().iter().cloned()).collect();
            timings.shape_query += t.elapsed().as_secs_f64();

            let t = Instant::now();
            let n_points: usize = batch.iter().map(|(_, idx)| idx.len()).sum();
            let mut d_logit = vec![0.0; logits.len()];
            let mut bce = 0.0;
            let mut k = 0;
            for ((f, idx), sets) in batch.iter().zip(&searched) {
                for (&i, s) in idx.iter().zip(sets) {
                    let y = frames[*f].labels[i];
                    let best = (0..s.roots.len()).max_by(|&a, &b| logits[k + a].total_cmp(&logits[k + b]));
                    match best {
                        Some(r) => {
                            let p = sigmoid(logits[k + r]);
                            bce += loss_bce(p, y);
                            d_logit[k + r] = config.bce_weight * bce_logit_grad(p, y) / n_points as f64;
                        }
                        None => {
                            bce += loss_bce(0.0, y);
                            if y > 0.5 {
                                rootless += 1;
                            }
                        }
                    }
                    k += s.roots.len();
                }
            }
            bce /= n_points as f64;
            let mut d_rows = vec![0.0; rows.len()];
            let mut occ_grad = backward_chunks(occupancy.mlp(), &caches, &d_logit, Some(&mut d_rows));

            // Root displacement → grid vertex weights → skinning parameters.
            let mut vertex_grad = vec![0.0; mat.grid.raw_weights().len()];
            let mut k = 0;
            let mut c = vec![0.0; nb];
            for ((f, _), sets) in batch.iter().zip(&searched) {
                let bones = &frames[*f].bones;
                for s in sets {
                    for r in &s.roots {
                        if d_logit[k] != 0.0 {
                            let g = Vec3::from_row_slice(&d_rows[k * occ_in..k * occ_in + 3]);
                            let v = -(r.inv_jacobian.transpose() * g);
                            for (cb, b) in c.iter_mut().zip(bones) {
                                *cb = v.dot(&affine_apply(b, &r.point));
                            }
                            scatter_weight_grad(&geometry, nb, &r.point, &c, &mut vertex_grad);
                        }
                        k += 1;
                    }
                }
            }

            let mut boot = 0.0;
            if !config.distill && config.smoothness_weight > 0.0 {
                boot += smoothness_terms(&mat.grid, config.smoothness_weight, &mut vertex_grad);
            }
            let mut skin_grad = skinner.backward(&mat, &vertex_grad);
            if bootstrap {
                let pts = sample_bone_points(&body.skeleton, config.bone_samples, &mut rng);
                let zero = Pose::zero(&body.skeleton);
                boot += bone_occupancy_grad(
                    &occupancy,
                    &pts,
                    pose_input(&zero, config.pose_conditioned),
                    config.bone_weight,
                    &mut occ_grad,
                );
                match &skinner {
                    Skinner::Network(m) => {
                        boot += joint_skinning_grad(m, &body.skeleton, config.joint_weight, &mut skin_grad)?;
                    }
                    Skinner::Grid(_) => {
                        let w: Vec<f64> = joints.iter().flat_map(|(x, _)| mat.grid.trilerp_weights(x)).collect();
                        let owners: Vec<usize> = joints.iter().map(|j| j.1).collect();
                        let (l, gw) = joint_skinning_terms(&w, &owners, nb);
                        let mut jg = vec![0.0; vertex_grad.len()];
                        for ((x, _), g) in joints.iter().zip(gw.chunks_exact(nb)) {
                            let scaled: Vec<f64> = g.iter().map(|v| v * config.joint_weight).collect();
                            scatter_weight_grad(&geometry, nb, x, &scaled, &mut jg);
                        }
                        for (s, v) in skin_grad.iter_mut().zip(skinner.backward(&mat, &jg)) {
                            *s += v;
                        }
                        boot += config.joint_weight * l;
                    }
                }
            }
            let loss = config.bce_weight * bce + boot;
            if !loss.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "training diverged at epoch {} (non-finite loss)",
                    epoch + 1
                )));
            }
            occ_opt.step(occupancy.mlp_mut().params_mut(), &occ_grad);
            skin_opt.step(skinner.params_mut(), &skin_grad);
            timings.backward += t.elapsed().as_secs_f64();

            losses.push(loss);
            sum_loss += loss;
            sum_bce += bce;
            sum_boot += boot;
            iterations += 1;
        }

        let t = Instant::now();
        let grid = skinner.materialize(&geometry, &vertices)?.grid;
        let val_iou = evaluate_iou(&occupancy, &grid, &val_frames, &opts, config.pose_conditioned)?;
        let skinning_accuracy = match &skinner {
            Skinner::Network(m) => skinning_accuracy(m, &skin_probe),
            Skinner::Grid(_) => skinning_accuracy(&grid, &skin_probe),
        };
        timings.evaluate += t.elapsed().as_secs_f64();
        last_grid = Some(grid);

        let n = iterations.max(1) as f64;
        let m = EpochMetrics {
            epoch: epoch + 1,
            iterations,
            loss: sum_loss / n,
            bce: sum_bce / n,
            bootstrap: sum_boot / n,
            val_iou,
            skinning_accuracy,
            rootless_occupied: rootless,
            seconds: started.elapsed().as_secs_f64(),
        };
        progress(&m);
        metrics.push(m);
        occ_opt.lr *= config.lr_decay;
        skin_opt.lr *= config.lr_decay;
    }

    let grid = match last_grid {
        Some(g) => g,
        None => skinner.materialize(&geometry, &vertices)?.grid,
    };
    Ok(TrainOutput {
        occupancy,
        skinning: match skinner {
            Skinner::Network(m) => Some(m),
            Skinner::Grid(_) => None,
        },
        grid,
        metrics,
        losses,
        timings,
        warnings,
    })
}

/// Mean IoU of the thresholded posed occupancy over uniform validation
/// frames; NaN without frames.
pub fn evaluate_iou(
    occupancy: &OccupancyMlp,
    grid: &SkinningVoxelGrid,
    frames: &[Frame],
    opts: &SearchOptions,
    pose_conditioned: bool,
) -> Result<f64> {
    if frames.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for f in frames {
        let tg = precompute_transform_grid(grid, &f.bones)?;
        let pred = posed_occupancy_batch(
            &f.points,
            &tg,
            &f.bones,
            opts,
            pose_input(&f.pose, pose_conditioned),
            occupancy,
        );
        total += iou(&pred, &f.labels, 0.5);
    }
    Ok(total / frames.len() as f64)
}

/// Fraction of probes whose strongest skinning weight is on the labelled bone.
pub fn skinning_accuracy(field: &(impl SkinningField + ?Sized), probes: &[(Vec3, usize)]) -> f64 {
    if probes.is_empty() {
        return f64::NAN;
    }
    let pts: Vec<Vec3> = probes.iter().map(|p| p.0).collect();
    let nb = field.num_bones();
    let w = field.weights_batch(&pts);
    let hits = w
        .chunks_exact(nb)
        .zip(probes)
        .filter(|(w, (_, label))| {
            let best = (0..nb).max_by(|&a, &b| w[a].total_cmp(&w[b])).unwrap_or(0);
            best == *label
        })
        .count();
    hits as f64 / probes.len() as f64
}

/// Random poses within `scale` times the body's training range.
pub fn random_poses(body: &SyntheticBody, n: usize, scale: f64, rng: &mut impl Rng) -> Vec<Pose> {
    (0..n).map(|_| body.random_pose(scale, rng)).collect()
}
