//! The five subcommands.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fwdskin::bench::{bench_case, BenchRow, BenchSetup};
use fwdskin::diff::sampling::{padded_posed_bbox, uniform_points};
use fwdskin::diff::train::random_poses;
use fwdskin::diff::{fit_skinning, train_with_progress, Checkpoint, EpochMetrics, TrainConfig};
use fwdskin::io::read_points;
use fwdskin::skeleton::{load_poses, poses_to_json};
use fwdskin::{
    batch_search, distill, extract_mesh, precompute_transform_grid, Aabb, AnalyticSkinning, CanonicalOccupancy,
    CorrespondenceSet, FieldDeformer, Mat34, OccupancyMlp, Pose, SearchOptions, Skeleton, SkinningField,
    SkinningMlp, SkinningVoxelGrid, SyntheticBody, Variant, Vec3,
};

use crate::config::RunConfig;
use crate::manifest::RunManifest;

/// Paths and flag values shared by every command.
#[derive(Clone, Debug, Default)]
pub struct Inputs {
    pub skeleton: Option<PathBuf>,
    pub pose: Option<PathBuf>,
    pub points: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Set when `--grid-dims` was given explicitly.
    pub grid_dims_flag: bool,
    pub out: PathBuf,
}

fn require<'a>(p: &'a Option<PathBuf>, flag: &str, command: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| anyhow!("{command} needs {flag}"))
}

fn body_from(cfg: &RunConfig, inputs: &Inputs, manifest: &mut RunManifest) -> Result<SyntheticBody> {
    let s = &cfg.settings;
    let skeleton = match &inputs.skeleton {
        Some(p) => {
            manifest.add_input(p)?;
            Skeleton::load(p)?
        }
        None => SyntheticBody::arm(s.bones)?.skeleton,
    };
    let mut body = SyntheticBody::from_skeleton(skeleton, s.radius, s.radius_modulation)?;
    body.skinning = AnalyticSkinning::new(body.skeleton.segments(), s.temperature)?;
    Ok(body)
}

fn poses_from(path: &Path, body: &SyntheticBody, manifest: &mut RunManifest) -> Result<Vec<Pose>> {
    manifest.add_input(path)?;
    let poses = load_poses(path)?;
    for (i, p) in poses.iter().enumerate() {
        if p.angles.len() != body.skeleton.dof() {
            bail!(
                "{}: pose {i} has {} angles, the skeleton has {} joints",
                path.display(),
                p.angles.len(),
                body.skeleton.dof()
            );
        }
    }
    Ok(poses)
}

enum Occupancy {
    Capsules,
    Network(OccupancyMlp),
}

/// Canonical shape and skinning, either analytic or from a checkpoint.
struct Model {
    body: SyntheticBody,
    skinning: Option<Box<dyn SkinningField>>,
    grid: Option<SkinningVoxelGrid>,
    occupancy: Occupancy,
    bbox: Aabb,
}

impl Model {
    fn load(cfg: &RunConfig, inputs: &Inputs, manifest: &mut RunManifest) -> Result<Model> {
        let body = body_from(cfg, inputs, manifest)?;
        match &inputs.checkpoint {
            None => Ok(Model {
                skinning: Some(Box::new(body.skinning.clone())),
                grid: None,
                occupancy: Occupancy::Capsules,
                bbox: body.canonical_bbox(),
                body,
            }),
            Some(path) => {
                manifest.add_input(path)?;
                let ck = Checkpoint::load(path)?;
                if ck.grid.num_bones() != body.num_bones() {
                    bail!(
                        "{}: checkpoint skins {} bones, the skeleton has {}",
                        path.display(),
                        ck.grid.num_bones(),
                        body.num_bones()
                    );
                }
                let pd = ck.occupancy.pose_dims();
                if pd != 0 && pd != body.skeleton.dof() {
                    bail!("{}: occupancy network expects {pd} pose values", path.display());
                }
                Ok(Model {
                    skinning: ck.skinning.map(|s| Box::new(s) as Box<dyn SkinningField>),
                    bbox: *ck.grid.bbox(),
                    grid: Some(ck.grid),
                    occupancy: Occupancy::Network(ck.occupancy),
                    body,
                })
            }
        }
    }

    fn field(&self) -> &dyn CanonicalOccupancy {
        match &self.occupancy {
            Occupancy::Capsules => &self.body.body,
            Occupancy::Network(n) => n,
        }
    }

    /// Pose values handed to the canonical occupancy.
    fn condition<'p>(&self, pose: &'p Pose) -> &'p [f64] {
        match &self.occupancy {
            Occupancy::Capsules => &pose.angles,
            Occupancy::Network(n) => &pose.angles[..n.pose_dims()],
        }
    }

    fn options(&self, cfg: &RunConfig) -> Result<SearchOptions> {
        let mut o = SearchOptions::for_bbox(&self.bbox);
        if cfg.settings.eps > 0.0 {
            o.conv_eps = cfg.settings.eps;
        }
        o.max_iters = cfg.settings.max_iters;
        o.variant = cfg.settings.variant;
        o.validate()?;
        Ok(o)
    }

    /// The voxel grid to search through: the checkpoint's unless a
    /// resolution was requested explicitly.
    fn grid(&self, cfg: &RunConfig, inputs: &Inputs, manifest: &mut RunManifest) -> Result<SkinningVoxelGrid> {
        if let (Some(g), false) = (&self.grid, inputs.grid_dims_flag) {
            return Ok(g.clone());
        }
        let field = self
            .skinning
            .as_deref()
            .ok_or_else(|| anyhow!("checkpoint has no skinning network to sample at a new resolution"))?;
        Ok(manifest.timed("distill", || distill(field, cfg.train.grid_dims, &self.bbox))?)
    }

    fn search(
        &self,
        grid: Option<&SkinningVoxelGrid>,
        bones: &[Mat34],
        queries: &[Vec3],
        opts: &SearchOptions,
        manifest: &mut RunManifest,
    ) -> Result<Vec<CorrespondenceSet>> {
        match (opts.variant, grid) {
            (Variant::Voxel, Some(grid)) => {
                let tg = manifest.timed("precompute", || precompute_transform_grid(grid, bones))?;
                Ok(manifest.timed("search", || batch_search(queries, &tg, bones, opts)))
            }
            (Variant::Voxel, None) => unreachable!("voxel search without a grid"),
            (Variant::Mlp, _) => {
                let field = self
                    .skinning
                    .as_deref()
                    .ok_or_else(|| anyhow!("the mlp variant needs a skinning network in the checkpoint"))?;
                let map = FieldDeformer::new(field, bones)?;
                Ok(manifest.timed("search", || batch_search(queries, &map, bones, opts)))
            }
        }
    }
}

fn create_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_file(dir: &Path, name: &str, bytes: &[u8], manifest: &mut RunManifest) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
    manifest.outputs.push(name.to_string());
    Ok(())
}

/// Canonical correspondences and posed occupancy of every query point, one
/// pair of files per pose.
pub fn deform(cfg: &RunConfig, inputs: &Inputs, manifest: &mut RunManifest) -> Result<()> {
    let pose_path = require(&inputs.pose, "--pose", "deform")?;
    let points_path = require(&inputs.points, "--points", "deform")?;
    let model = Model::load(cfg, inputs, manifest)?;
    let poses = poses_from(pose_path, &model.body, manifest)?;
    manifest.add_input(points_path)?;
    let queries = read_points(points_path)?;
    let opts = model.options(cfg)?;
    let grid = match opts.variant {
        Variant::Voxel => Some(model.grid(cfg, inputs, manifest)?),
        Variant::Mlp => None,
    };
    create_out(&inputs.out)?;
    for (i, pose) in poses.iter().enumerate() {
        let bones = model.body.bones(pose)?;
        let sets = model.search(grid.as_ref(), &bones, &queries, &opts, manifest)?;
        let occ = manifest.timed("shape_query", || posed_values(&sets, model.condition(pose), model.field()));
        let mut dump = Vec::new();
        fwdskin::correspondence::write_dump(&sets, &mut dump)?;
        write_file(&inputs.out, &format!("correspondences_{i:03}.txt"), &dump, manifest)?;
        let text: String = occ.iter().map(|v| format!("{v}\n")).collect();
        write_file(&inputs.out, &format!("occupancy_{i:03}.txt"), text.as_bytes(), manifest)?;
    }
    Ok(())
}

/// Max canonical occupancy over each set's roots; zero for empty sets.
fn posed_values(sets: &[CorrespondenceSet], pose: &[f64], field: &dyn CanonicalOccupancy) -> Vec<f64> {
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

/// Training and validation poses: the pose file (if any) for training,
/// random draws from the seed otherwise.
fn training_poses(cfg: &RunConfig, inputs: &Inputs, body: &SyntheticBody, manifest: &mut RunManifest) -> Result<(Vec<Pose>, Vec<Pose>)> {
    let s = &cfg.settings;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed.wrapping_add(0x5eed));
    let train = match &inputs.pose {
        Some(p) => poses_from(p, body, manifest)?,
        None => random_poses(body, s.train_poses, s.pose_scale, &mut rng),
    };
    let val = random_poses(body, s.val_poses, s.pose_scale, &mut rng);
    Ok((train, val))
}

fn train_once(
    train: &TrainConfig,
    body: &SyntheticBody,
    poses: &(Vec<Pose>, Vec<Pose>),
    manifest: &mut RunManifest,
) -> Result<fwdskin::diff::TrainOutput> {
    let out = train_with_progress(train, body, &poses.0, &poses.1, |m: &EpochMetrics| {
        eprintln!(
            "epoch {:>3}  loss {:.4}  val IoU {:.4}  skinning {:.4}  ({:.1}s)",
            m.epoch, m.loss, m.val_iou, m.skinning_accuracy, m.seconds
        );
    })?;
    let t = &out.timings;
    for (k, v) in [
        ("distill", t.distill),
        ("precompute", t.precompute),
        ("search", t.search),
        ("shape_query", t.shape_query),
        ("backward", t.backward),
        ("evaluate", t.evaluate),
    ] {
        manifest.time(k, v);
    }
    manifest.warnings.extend(out.warnings.iter().cloned());
    for w in &out.warnings {
        eprintln!("warning: {w}");
    }
    Ok(out)
}

fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let mut s = format!("{}\n", EpochMetrics::CSV_HEADER);
    for m in metrics {
        s.push_str(&m.csv_row());
        s.push('\n');
    }
    s
}

pub fn train(cfg: &RunConfig, inputs: &Inputs, manifest: &mut RunManifest) -> Result<()> {
    let body = body_from(cfg, inputs, manifest)?;
    let poses = training_poses(cfg, inputs, &body, manifest)?;
    create_out(&inputs.out)?;
    let out = train_once(&cfg.train, &body, &poses, manifest)?;
    let ck = Checkpoint {
        occupancy: out.occupancy,
        skinning: out.skinning,
        grid: out.grid,
    };
    write_file(&inputs.out, "checkpoint.fsnf", &ck.to_bytes(), manifest)?;
    write_file(&inputs.out, "metrics.csv", metrics_csv(&out.metrics).as_bytes(), manifest)?;
    write_file(&inputs.out, "train_poses.json", poses_to_json(&poses.0).as_bytes(), manifest)?;
    write_file(&inputs.out, "val_poses.json", poses_to_json(&poses.1).as_bytes(), manifest)?;
    Ok(())
}

/// One mesh of the posed iso-surface per pose.
pub fn extract(cfg: &RunConfig, inputs: &Inputs, manifest: &mut RunManifest) -> Result<()> {
    let pose_path = require(&inputs.pose, "--pose", "extract")?;
    let model = Model::load(cfg, inputs, manifest)?;
    let poses = poses_from(pose_path, &model.body, manifest)?;
    let opts = model.options(cfg)?;
    let grid = match opts.variant {
        Variant::Voxel => Some(model.grid(cfg, inputs, manifest)?),
        Variant::Mlp => None,
    };
    let format = cfg.settings.mesh_format.as_str();
    if format != "obj" && format != "ply" {
        bail!("mesh_format must be obj or ply, got `{format}`");
    }
    create_out(&inputs.out)?;
    for (i, pose) in poses.iter().enumerate() {
        let bones = model.body.bones(pose)?;
        let bbox = padded_posed_bbox(&model.body, pose)?;
        let cond = model.condition(pose);
        let mesh = match &grid {
            Some(g) => {
                let tg = manifest.timed("precompute", || precompute_transform_grid(g, &bones))?;
                manifest.timed("search", || {
                    extract_mesh(&tg, &bones, &opts, cond, model.field(), &bbox, cfg.settings.resolution)
                })?
            }
            None => {
                let field = model
                    .skinning
                    .as_deref()
                    .ok_or_else(|| anyhow!("the mlp variant needs a skinning network in the checkpoint"))?;
                let map = FieldDeformer::new(field, &bones)?;
                manifest.timed("search", || {
                    extract_mesh(&map, &bones, &opts, cond, model.field(), &bbox, cfg.settings.resolution)
                })?
            }
        };
        let name = format!("mesh_{i:03}.{format}");
        let path = inputs.out.join(&name);
        match format {
            "obj" => mesh.save_obj(&path)?,
            _ => mesh.save_ply(&path)?,
        }
        manifest.outputs.push(name);
    }
    Ok(())
}

pub fn bench(cfg: &RunConfig, inputs: &Inputs, manifest: &mut RunManifest) -> Result<()> {
    let s = &cfg.settings;
    if s.bench_runs < 5 {
        bail!("bench_runs must be at least 5, got {}", s.bench_runs);
    }
    let model = Model::load(cfg, inputs, manifest)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let fitted;
    let skinning: &SkinningMlp = match &inputs.checkpoint {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            fitted = ck
                .skinning
                .ok_or_else(|| anyhow!("{}: checkpoint has no skinning network to benchmark", p.display()))?;
            &fitted
        }
        None => {
            let mut m = SkinningMlp::new(model.body.num_bones(), &model.bbox, &mut rng)?;
            manifest.timed("fit", || {
                fit_skinning(&mut m, &model.body.skinning, &model.bbox, s.bench_fit_steps, 1024, 0.05, &mut rng)
            })?;
            fitted = m;
            &fitted
        }
    };
    let pose = match &inputs.pose {
        Some(p) => poses_from(p, &model.body, manifest)?
            .into_iter()
            .next()
            .ok_or_else(|| anyhow!("{}: no poses", p.display()))?,
        None => model.body.random_pose(s.pose_scale, &mut rng),
    };
    let n_max = s.bench_points.iter().copied().max().unwrap_or(0);
    let queries = match &inputs.points {
        Some(p) => {
            manifest.add_input(p)?;
            read_points(p)?
        }
        None => uniform_points(&padded_posed_bbox(&model.body, &pose)?, n_max, &mut rng),
    };
    let setup = BenchSetup {
        skinning,
        occupancy: model.field(),
        pose: model.condition(&pose).to_vec(),
        bones: model.body.bones(&pose)?,
        bbox: model.bbox,
        opts: model.options(cfg)?,
        queries,
    };
    let grids = if inputs.grid_dims_flag {
        vec![cfg.train.grid_dims]
    } else {
        s.bench_grid_dims.clone()
    };
    let mut rows: Vec<BenchRow> = Vec::new();
    for &n in &s.bench_points {
        for &variant in &s.bench_variants {
            let dims_list: &[[usize; 3]] = match variant {
                Variant::Voxel => &grids,
                Variant::Mlp => &grids[..1.min(grids.len())],
            };
            for &dims in dims_list {
                let row = bench_case(&setup, variant, dims, n, s.bench_runs, s.bench_warmup)?;
                eprintln!("{}", row.csv_row());
                let m = &row.median;
                manifest.time("distill", m.distill);
                manifest.time("precompute", m.precompute);
                manifest.time("search", m.search);
                manifest.time("shape_query", m.shape_query);
                rows.push(row);
            }
        }
    }
    create_out(&inputs.out)?;
    let mut csv = format!("{}\n", BenchRow::CSV_HEADER);
    let mut report = String::new();
    for r in &rows {
        csv.push_str(&r.csv_row());
        csv.push('\n');
        let m = &r.median;
        let _ = writeln!(
            report,
            "{:<6} {:<10} n={:<8} search {:>10.2} ms  total {:>10.2} ms  ({:.0} queries/s, stages {:.1}% of total)",
            r.variant.to_string(),
            r.grid_dims.map(|d| format!("{}x{}x{}", d[0], d[1], d[2])).unwrap_or_else(|| "-".into()),
            r.n_points,
            m.search * 1e3,
            m.total * 1e3,
            r.search_throughput,
            100.0 * m.stage_sum() / m.total.max(1e-12)
        );
    }
    for n in &s.bench_points {
        let mlp = rows.iter().find(|r| r.variant == Variant::Mlp && r.n_points == *n);
        for v in rows.iter().filter(|r| r.variant == Variant::Voxel && r.n_points == *n) {
            if let (Some(m), Some(d)) = (mlp, v.grid_dims) {
                let _ = writeln!(
                    report,
                    "voxel {}x{}x{} / mlp search throughput at n={n}: {:.1}x",
                    d[0],
                    d[1],
                    d[2],
                    v.search_throughput / m.search_throughput
                );
            }
        }
    }
    print!("{report}");
    write_file(&inputs.out, "bench.csv", csv.as_bytes(), manifest)?;
    write_file(&inputs.out, "bench.txt", report.as_bytes(), manifest)?;
    Ok(())
}

/// Trains once per grid resolution and distillation setting and tabulates
/// the held-out results.
pub fn ablate(cfg: &RunConfig, inputs: &Inputs, manifest: &mut RunManifest) -> Result<()> {
    let body = body_from(cfg, inputs, manifest)?;
    let poses = training_poses(cfg, inputs, &body, manifest)?;
    let s = &cfg.settings;
    let grids = if inputs.grid_dims_flag {
        vec![cfg.train.grid_dims]
    } else {
        s.ablate_grid_dims.clone()
    };
    create_out(&inputs.out)?;
    let mut csv = String::from("grid_dims,distill,val_iou,skinning_accuracy,final_loss\n");
    for &dims in &grids {
        for &d in &s.ablate_distill {
            let label = format!("{}x{}x{}_{}", dims[0], dims[1], dims[2], if d { "distill" } else { "direct" });
            eprintln!("== {label}");
            let tc = TrainConfig {
                grid_dims: dims,
                distill: d,
                ..cfg.train.clone()
            };
            let out = train_once(&tc, &body, &poses, manifest)?;
            let last = out.metrics.last().expect("at least one epoch");
            let _ = writeln!(
                csv,
                "{}x{}x{},{},{},{},{}",
                dims[0], dims[1], dims[2], d, last.val_iou, last.skinning_accuracy, last.loss
            );
            write_file(&inputs.out, &format!("metrics_{label}.csv"), metrics_csv(&out.metrics).as_bytes(), manifest)?;
        }
    }
    write_file(&inputs.out, "ablation.csv", csv.as_bytes(), manifest)?;
    Ok(())
}
