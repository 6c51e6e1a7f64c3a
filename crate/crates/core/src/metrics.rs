//! Surface and volume agreement metrics: HD90, ASSD, Chamfer distance and IoU.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{dist, sample_surface_points, ImplicitShape, MeshOccupancy, Point3, TriMesh};
use crate::rng;
use crate::sampling::CoordinateFrame;
use crate::volume::VolumeGrid;

/// Uniform hash grid over a point set for exact nearest-neighbor queries.
pub struct PointIndex<'a> {
    points: &'a [Point3],
    lo: Point3,
    cell: f64,
    dims: [usize; 3],
    starts: Vec<u32>,
    order: Vec<u32>,
}

impl<'a> PointIndex<'a> {
    /// Cell size is the largest bounding-box extent divided by `clamp(∛n, 1, 32)`.
    pub fn new(points: &'a [Point3]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("nearest-neighbor index over an empty point set"));
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
        let per_axis = (points.len() as f64).cbrt().ceil().clamp(1.0, 32.0);
        let cell = if extent > 0.0 { extent / per_axis } else { 1.0 };
        let cap = per_axis as usize + 1;
        let dims: [usize; 3] = std::array::from_fn(|a| (((hi[a] - lo[a]) / cell).floor() as usize + 1).min(cap));
        let mut counts = vec![0u32; dims.iter().product::<usize>() + 1];
        let mut keys = Vec::with_capacity(points.len());
        for p in points {
            let c = Self::cell_of(lo, cell, dims, *p);
            let k = (c[2] * dims[1] + c[1]) * dims[0] + c[0];
            counts[k + 1] += 1;
            keys.push(k);
        }
        for i in 1..counts.len() {
            counts[i] += counts[i - 1];
        }
        let mut fill = counts.clone();
        let mut order = vec![0u32; points.len()];
        for (i, &k) in keys.iter().enumerate() {
            order[fill[k] as usize] = i as u32;
            fill[k] += 1;
        }
        Ok(Self {
            points,
            lo,
            cell,
            dims,
            starts: counts,
            order,
        })
    }

    fn cell_of(lo: Point3, cell: f64, dims: [usize; 3], p: Point3) -> [usize; 3] {
        std::array::from_fn(|a| (((p[a] - lo[a]) / cell).floor().max(0.0) as usize).min(dims[a] - 1))
    }

    /// Distance from `q` to its nearest indexed point, by expanding rings of
    /// cells until no unvisited cell can hold anything closer.
    pub fn nearest(&self, q: Point3) -> f64 {
        let c = Self::cell_of(self.lo, self.cell, self.dims, q);
        let max_r = (0..3).map(|a| c[a].max(self.dims[a] - 1 - c[a])).max().unwrap();
        let mut best = f64::INFINITY;
        for r in 0..=max_r {
            let lo: [usize; 3] = std::array::from_fn(|a| c[a].saturating_sub(r));
            let hi: [usize; 3] = std::array::from_fn(|a| (c[a] + r).min(self.dims[a] - 1));
            for z in lo[2]..=hi[2] {
                let z_shell = z.abs_diff(c[2]) == r;
                for y in lo[1]..=hi[1] {
                    let mut visit = |x: usize| {
                        let k = (z * self.dims[1] + y) * self.dims[0] + x;
                        for &i in &self.order[self.starts[k] as usize..self.starts[k + 1] as usize] {
                            best = best.min(dist(q, self.points[i as usize]));
                        }
                    };
                    if z_shell || y.abs_diff(c[1]) == r {
                        (lo[0]..=hi[0]).for_each(&mut visit);
                    } else {
                        if c[0] >= r {
                            visit(c[0] - r);
                        }
                        if r > 0 && c[0] + r < self.dims[0] {
                            visit(c[0] + r);
                        }
                    }
                }
            }
            if best <= self.unvisited_bound(q, c, r) {
                break;
            }
        }
        best
    }

    /// Lower bound on the distance from `q` to any cell outside the ring-`r` block.
    fn unvisited_bound(&self, q: Point3, c: [usize; 3], r: usize) -> f64 {
        let mut bound = f64::INFINITY;
        for a in 0..3 {
            if c[a] > r {
                let face = self.lo[a] + (c[a] - r) as f64 * self.cell;
                bound = bound.min((q[a] - face).max(0.0));
            }
            if c[a] + r + 1 < self.dims[a] {
                let face = self.lo[a] + (c[a] + r + 1) as f64 * self.cell;
                bound = bound.min((face - q[a]).max(0.0));
            }
        }
        bound
    }
}

/// Nearest-neighbor distance from every point of `from` to the set `to`.
pub fn directed_distances(from: &[Point3], to: &[Point3]) -> Result<Vec<f64>> {
    if from.is_empty() {
        return Err(Error::invalid("distance metric on an empty point set"));
    }
    let index = PointIndex::new(to)?;
    Ok(from.iter().map(|&p| index.nearest(p)).collect())
}

/// Nearest-rank percentile: the `ceil(q·n)`-th smallest value.
pub fn nearest_rank(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let k = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[k - 1]
}

/// 90th-percentile symmetric Hausdorff distance.
pub fn hd90(a: &[Point3], b: &[Point3]) -> Result<f64> {
    let ab = directed_distances(a, b)?;
    let ba = directed_distances(b, a)?;
    Ok(nearest_rank(&ab, 0.9).max(nearest_rank(&ba, 0.9)))
}

/// Average symmetric surface distance.
pub fn assd(a: &[Point3], b: &[Point3]) -> Result<f64> {
    let ab = directed_distances(a, b)?;
    let ba = directed_distances(b, a)?;
    Ok((ab.iter().sum::<f64>() + ba.iter().sum::<f64>()) / (a.len() + b.len()) as f64)
}

/// Chamfer distance with squared nearest-neighbor distances, summed over both directions.
pub fn chamfer(a: &[Point3], b: &[Point3]) -> Result<f64> {
    let ab = directed_distances(a, b)?;
    let ba = directed_distances(b, a)?;
    let mean_sq = |d: &[f64]| d.iter().map(|x| x * x).sum::<f64>() / d.len() as f64;
    Ok(mean_sq(&ab) + mean_sq(&ba))
}

/// Intersection over union in percent of two grids binarized at 0.5; both empty gives 100.
pub fn iou(pred: &VolumeGrid, gt: &VolumeGrid) -> Result<f64> {
    if !pred.same_frame(gt) {
        return Err(Error::FrameMismatch(format!(
            "IoU grids differ: {:?} vs {:?}",
            pred.frame(),
            gt.frame()
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.values().iter().zip(gt.values()) {
        let (p, g) = (p >= 0.5, g >= 0.5);
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 { 100.0 } else { 100.0 * inter as f64 / union as f64 })
}

/// Binary mask of a closed mesh (world coordinates) at the voxel centers of `frame`.
pub fn voxelize_mesh(mesh: &TriMesh, frame: &CoordinateFrame) -> Result<VolumeGrid> {
    if mesh.is_empty() {
        return VolumeGrid::filled(frame.dims, frame.spacing, frame.origin, 0.0);
    }
    let oracle = MeshOccupancy::new(mesh)?;
    VolumeGrid::from_fn(frame.dims, frame.spacing, frame.origin, |ijk| {
        let w = std::array::from_fn(|a| frame.origin[a] + ijk[a] as f64 * frame.spacing[a]);
        oracle.contains(w) as u8 as f32
    })
}

/// HD90, ASSD and Chamfer of two point sets from one pair of directed passes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceDistances {
    pub hd90: f64,
    pub assd: f64,
    pub chamfer: f64,
}

impl SurfaceDistances {
    pub fn between(a: &[Point3], b: &[Point3]) -> Result<Self> {
        let ab = directed_distances(a, b)?;
        let ba = directed_distances(b, a)?;
        let mean_sq = |d: &[f64]| d.iter().map(|x| x * x).sum::<f64>() / d.len() as f64;
        Ok(Self {
            hd90: nearest_rank(&ab, 0.9).max(nearest_rank(&ba, 0.9)),
            assd: (ab.iter().sum::<f64>() + ba.iter().sum::<f64>()) / (a.len() + b.len()) as f64,
            chamfer: mean_sq(&ab) + mean_sq(&ba),
        })
    }

    /// Distances between `n` area-uniform samples of each surface.
    pub fn between_meshes(a: &TriMesh, b: &TriMesh, n: usize, seed: u64) -> Result<Self> {
        let mut rng = rng::stream(seed, &[0x6576_616c]);
        let pb = sample_surface_points(b, n, &[(1.0, 0.0)], &mut rng)?;
        let pa = sample_surface_points(a, n, &[(1.0, 0.0)], &mut rng)?;
        Self::between(&pa, &pb)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub n_surface_points: usize,
    pub voxel_dims: [usize; 3],
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_surface_points: 10_000,
            voxel_dims: [64; 3],
            seed: 0,
        }
    }
}

/// Ground truth for one organ: its mesh and, when known, the analytic shape
/// (in the normalized coordinates of the scene frame).
pub struct Reference<'a> {
    pub name: &'a str,
    pub mesh: &'a TriMesh,
    pub shape: Option<&'a dyn ImplicitShape>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrganMetrics {
    pub name: String,
    pub hd90: f64,
    pub assd: f64,
    pub chamfer: f64,
    pub iou: f64,
    pub surface_points: usize,
    pub voxels: usize,
    /// The prediction had no surface; distances hold the frame diagonal.
    pub empty_prediction: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub organs: Vec<OrganMetrics>,
    pub n_surface_points: usize,
    pub voxel_dims: [usize; 3],
    pub seed: u64,
    pub units: String,
    pub chamfer_convention: String,
    pub hd_convention: String,
    pub fingerprint: Option<String>,
}

impl MetricsReport {
    pub fn new(organs: Vec<OrganMetrics>, cfg: &EvalConfig, fingerprint: Option<String>) -> Self {
        Self {
            organs,
            n_surface_points: cfg.n_surface_points,
            voxel_dims: cfg.voxel_dims,
            seed: cfg.seed,
            units: "hd90/assd mm, chamfer mm^2, iou %".into(),
            chamfer_convention: "squared nearest-neighbor distances, mean per direction, summed".into(),
            hd_convention: "max of directed nearest-rank 90th percentiles, ceil(0.9 n)".into(),
            fingerprint,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned text table with Chamfer shown ×10⁻³.
    pub fn to_table(&self) -> String {
        let mut s = format!("{:<12} {:>10} {:>10} {:>10} {:>14}\n", "organ", "HD90 mm", "ASSD mm", "IoU %", "CD mm² ×1e-3");
        for o in &self.organs {
            s += &format!(
                "{:<12} {:>10.3} {:>10.3} {:>10.2} {:>14.4}\n",
                o.name,
                o.hd90,
                o.assd,
                o.iou,
                o.chamfer / 1e3
            );
        }
        s
    }
}

/// Scores one predicted organ surface against its reference.
///
/// Distances use `n_surface_points` area-uniform samples per surface. IoU uses
/// voxelizations at `voxel_dims` over `frame`'s world extent: the reference by
/// its analytic sign when available (else mesh parity), the prediction by the
/// thresholded occupancy grid when its dims match (else mesh parity).
pub fn evaluate(
    pred: &TriMesh,
    pred_occupancy: Option<&VolumeGrid>,
    reference: &Reference<'_>,
    frame: &CoordinateFrame,
    cfg: &EvalConfig,
) -> Result<OrganMetrics> {
    let grid = frame.rescaled(cfg.voxel_dims);
    let gt_mask = match reference.shape {
        Some(shape) => crate::sampling::voxelize_shape(shape, &grid)?,
        None => voxelize_mesh(reference.mesh, &grid)?,
    };
    let pred_mask = match pred_occupancy {
        Some(o) if o.dims() == cfg.voxel_dims => {
            VolumeGrid::new(grid.dims, grid.spacing, grid.origin, o.values().to_vec())?
        }
        _ => voxelize_mesh(pred, &grid)?,
    };
    let iou = iou(&pred_mask, &gt_mask)?;
    let voxels = cfg.voxel_dims.iter().product();
    let mut rng = rng::stream(cfg.seed, &[0x6576_616c]);
    let gt_pts = sample_surface_points(reference.mesh, cfg.n_surface_points, &[(1.0, 0.0)], &mut rng)?;
    if pred.is_empty() {
        let diag = (0..3)
            .map(|a| (frame.dims[a] as f64 * frame.spacing[a]).powi(2))
            .sum::<f64>()
            .sqrt();
        return Ok(OrganMetrics {
            name: reference.name.to_string(),
            hd90: diag,
            assd: diag,
            chamfer: 2.0 * diag * diag,
            iou,
            surface_points: cfg.n_surface_points,
            voxels,
            empty_prediction: true,
        });
    }
    let pred_pts = sample_surface_points(pred, cfg.n_surface_points, &[(1.0, 0.0)], &mut rng)?;
    let d = SurfaceDistances::between(&pred_pts, &gt_pts)?;
    Ok(OrganMetrics {
        name: reference.name.to_string(),
        hd90: d.hd90,
        assd: d.assd,
        chamfer: d.chamfer,
        iou,
        surface_points: cfg.n_surface_points,
        voxels,
        empty_prediction: false,
    })
}
