//! Stage timings for posed occupancy queries through either search variant.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::correspondence::{batch_search, SearchOptions, Variant};
use crate::deformer::{precompute_transform_grid, FieldDeformer};
use crate::error::{Error, Result};
use crate::math::{Aabb, Mat34, Vec3};
use crate::shape::CanonicalOccupancy;
use crate::skinning::{distill, SkinningMlp};

/// Everything one timed run needs.
pub struct BenchSetup<'a> {
    pub skinning: &'a SkinningMlp,
    pub occupancy: &'a dyn CanonicalOccupancy,
    pub pose: Vec<f64>,
    pub bones: Vec<Mat34>,
    /// Canonical box the grid spans.
    pub bbox: Aabb,
    pub opts: SearchOptions,
    pub queries: Vec<Vec3>,
}

/// Seconds per stage of one run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimes {
    pub distill: f64,
    pub precompute: f64,
    pub search: f64,
    pub shape_query: f64,
    pub total: f64,
}

impl StageTimes {
    pub fn stage_sum(&self) -> f64 {
        self.distill + self.precompute + self.search + self.shape_query
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub variant: Variant,
    /// Grid resolution; absent for the network variant.
    pub grid_dims: Option<[usize; 3]>,
    pub n_points: usize,
    pub runs: usize,
    /// Per-stage medians over the timed runs.
    pub median: StageTimes,
    /// Queries per second of the median search stage.
    pub search_throughput: f64,
    /// Roots found in the last run.
    pub roots: usize,
}

impl BenchRow {
    pub const CSV_HEADER: &'static str =
        "variant,grid_dims,n_points,runs,distill_ms,precompute_ms,search_ms,shape_query_ms,total_ms,search_qps,roots";

    pub fn csv_row(&self) -> String {
        let dims = self
            .grid_dims
            .map(|d| format!("{}x{}x{}", d[0], d[1], d[2]))
            .unwrap_or_else(|| "-".into());
        let m = &self.median;
        format!(
            "{},{},{},{},{:.3},{:.3},{:.3},{:.3},{:.3},{:.1},{}",
            self.variant,
            dims,
            self.n_points,
            self.runs,
            m.distill * 1e3,
            m.precompute * 1e3,
            m.search * 1e3,
            m.shape_query * 1e3,
            m.total * 1e3,
            self.search_throughput,
            self.roots
        )
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// One end-to-end pass over `queries`: optional distillation and transform
/// precomputation, root search, and the canonical occupancy of every root.
pub fn run_once(
    setup: &BenchSetup,
    variant: Variant,
    grid_dims: [usize; 3],
    queries: &[Vec3],
) -> Result<(StageTimes, usize)> {
    let start = Instant::now();
    let mut t = StageTimes::default();
    let sets = match variant {
        Variant::Voxel => {
            let s = Instant::now();
            let grid = distill(setup.skinning, grid_dims, &setup.bbox)?;
            t.distill = s.elapsed().as_secs_f64();
            let s = Instant::now();
            let tg = precompute_transform_grid(&grid, &setup.bones)?;
            t.precompute = s.elapsed().as_secs_f64();
            let s = Instant::now();
            let sets = batch_search(queries, &tg, &setup.bones, &setup.opts);
            t.search = s.elapsed().as_secs_f64();
            sets
        }
        Variant::Mlp => {
            let map = FieldDeformer::new(setup.skinning, &setup.bones)?;
            let s = Instant::now();
            let sets = batch_search(queries, &map, &setup.bones, &setup.opts);
            t.search = s.elapsed().as_secs_f64();
            sets
        }
    };
    let s = Instant::now();
    let roots: Vec<Vec3> = sets.iter().flat_map(|s| s.roots.iter().map(|r| r.point)).collect();
    let occ = setup.occupancy.occupancy_batch(&roots, &setup.pose);
    let mut k = 0;
    let _posed: Vec<f64> = sets
        .iter()
        .map(|s| {
            let v = occ[k..k + s.roots.len()].iter().cloned().fold(0.0, f64::max);
            k += s.roots.len();
            v
        })
        .collect();
    t.shape_query = s.elapsed().as_secs_f64();
    t.total = start.elapsed().as_secs_f64();
    Ok((t, roots.len()))
}

/// Times `runs` passes after one discarded warm-up pass over the first
/// `warmup` queries, reporting per-stage medians.
pub fn bench_case(
    setup: &BenchSetup,
    variant: Variant,
    grid_dims: [usize; 3],
    n_points: usize,
    runs: usize,
    warmup: usize,
) -> Result<BenchRow> {
    if runs == 0 {
        return Err(Error::InvalidArgument("benchmark needs at least one timed run".into()));
    }
    if n_points > setup.queries.len() {
        return Err(Error::InvalidArgument(format!(
            "benchmark asked for {n_points} queries but only {} were generated",
            setup.queries.len()
        )));
    }
    let queries = &setup.queries[..n_points];
    run_once(setup, variant, grid_dims, &queries[..warmup.min(n_points)])?;
    let mut all = Vec::with_capacity(runs);
    let mut roots = 0;
    for _ in 0..runs {
        let (t, r) = run_once(setup, variant, grid_dims, queries)?;
        all.push(t);
        roots = r;
    }
    let pick = |f: fn(&StageTimes) -> f64| median(&mut all.iter().map(f).collect::<Vec<_>>());
    let m = StageTimes {
        distill: pick(|t| t.distill),
        precompute: pick(|t| t.precompute),
        search: pick(|t| t.search),
        shape_query: pick(|t| t.shape_query),
        total: pick(|t| t.total),
    };
    Ok(BenchRow {
        variant,
        grid_dims: (variant == Variant::Voxel).then_some(grid_dims),
        n_points,
        runs,
        search_throughput: n_points as f64 / m.search.max(1e-12),
        median: m,
        roots,
    })
}
