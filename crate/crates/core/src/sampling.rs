//! Query-point datasets and coordinate conventions.
//!
//! Three coordinate systems are in play: world (mm), continuous voxel index,
//! and normalized `[-1, 1]³` where voxel `i` of an axis with `D` voxels sits at
//! `(2i + 1) / D - 1`. Patches are treated as independent images with their own
//! normalized frame.

use std::fs;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, ImplicitShape, TriMesh};
use crate::rng::Rng;
use crate::volume::{self, continuous_index, Provenance, VolumeGrid};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoordinateFrame {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl CoordinateFrame {
    pub fn voxel_center_normalized(&self, ijk: [usize; 3]) -> [f64; 3] {
        std::array::from_fn(|a| (2 * ijk[a] + 1) as f64 / self.dims[a] as f64 - 1.0)
    }

    pub fn normalized_to_index(&self, p: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| continuous_index(p[a], self.dims[a]))
    }

    pub fn index_to_normalized(&self, c: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| (2.0 * c[a] + 1.0) / self.dims[a] as f64 - 1.0)
    }

    pub fn world_to_normalized(&self, w: [f64; 3]) -> [f64; 3] {
        let c = std::array::from_fn(|a| (w[a] - self.origin[a]) / self.spacing[a]);
        self.index_to_normalized(c)
    }

    pub fn normalized_to_world(&self, p: [f64; 3]) -> [f64; 3] {
        let c = self.normalized_to_index(p);
        std::array::from_fn(|a| self.origin[a] + c[a] * self.spacing[a])
    }

    /// Half-width of the volume in world units per axis (normalized 1 ↦ this many mm).
    pub fn half_extent(&self) -> [f64; 3] {
        std::array::from_fn(|a| 0.5 * self.dims[a] as f64 * self.spacing[a])
    }

    /// Same physical box sampled with `dims` voxels.
    pub fn rescaled(&self, dims: [usize; 3]) -> CoordinateFrame {
        let spacing: [f64; 3] =
            std::array::from_fn(|a| self.spacing[a] * self.dims[a] as f64 / dims[a] as f64);
        let origin = std::array::from_fn(|a| self.origin[a] - 0.5 * self.spacing[a] + 0.5 * spacing[a]);
        CoordinateFrame { dims, spacing, origin }
    }

    pub fn approx_eq(&self, other: &CoordinateFrame, tol: f64) -> bool {
        self.dims == other.dims
            && (0..3).all(|a| {
                (self.spacing[a] - other.spacing[a]).abs() <= tol
                    && (self.origin[a] - other.origin[a]).abs() <= tol
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum SourceTag {
    Volume = 0,
    Boundary = 1,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet {
    pub coords: Vec<[f64; 3]>,
    /// Row-major `len() × organs` occupancy labels in {0, 1}.
    pub labels: Vec<u8>,
    pub organs: usize,
    pub tags: Vec<SourceTag>,
}

impl QuerySet {
    pub fn empty(organs: usize) -> Self {
        Self {
            coords: Vec::new(),
            labels: Vec::new(),
            organs,
            tags: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn label(&self, point: usize, organ: usize) -> u8 {
        self.labels[point * self.organs + organ]
    }

    pub fn point_labels(&self, point: usize) -> &[u8] {
        &self.labels[point * self.organs..(point + 1) * self.organs]
    }

    pub fn push(&mut self, p: [f64; 3], labels: &[u8], tag: SourceTag) {
        debug_assert_eq!(labels.len(), self.organs);
        self.coords.push(p);
        self.labels.extend_from_slice(labels);
        self.tags.push(tag);
    }

    /// Keeps the points for which `keep` returns a new coordinate.
    pub fn filter_map(&self, mut keep: impl FnMut([f64; 3]) -> Option<[f64; 3]>) -> QuerySet {
        let mut out = QuerySet::empty(self.organs);
        for i in 0..self.len() {
            if let Some(q) = keep(self.coords[i]) {
                out.push(q, self.point_labels(i), self.tags[i]);
            }
        }
        out
    }

    pub fn subset(&self, indices: &[usize]) -> QuerySet {
        let mut out = QuerySet::empty(self.organs);
        for &i in indices {
            out.push(self.coords[i], self.point_labels(i), self.tags[i]);
        }
        out
    }

    pub fn extend(&mut self, other: &QuerySet) {
        assert_eq!(self.organs, other.organs);
        self.coords.extend_from_slice(&other.coords);
        self.labels.extend_from_slice(&other.labels);
        self.tags.extend_from_slice(&other.tags);
    }
}

/// Point budget for `build_queryset`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct QueryBudget {
    pub volume_points: usize,
    /// Boundary points per organ.
    pub boundary_points: usize,
    /// `(fraction, sigma)` displacement partitions, sigma in normalized units.
    pub sigmas: Vec<(f64, f64)>,
}

impl QueryBudget {
    pub fn new(volume_points: usize, boundary_points: usize) -> Self {
        Self {
            volume_points,
            boundary_points,
            sigmas: vec![(0.5, 0.1), (0.5, 0.01)],
        }
    }
}

/// Normalized voxel centers of `n` voxels drawn uniformly from the non-background voxels.
pub fn sample_volume_points(v: &VolumeGrid, n: usize, rng: &mut Rng) -> Result<Vec<[f64; 3]>> {
    let candidates: Vec<usize> = match v.fill() {
        Some(fill) => (0..v.len()).filter(|&i| v.values()[i] != fill).collect(),
        None => (0..v.len()).collect(),
    };
    if candidates.is_empty() {
        return Err(Error::DegenerateInput(
            "volume contains only background voxels".into(),
        ));
    }
    let [dx, dy, _] = v.dims();
    let frame = v.frame();
    Ok((0..n)
        .map(|_| {
            let flat = candidates[rng.random_range(0..candidates.len())];
            let ijk = [flat % dx, (flat / dx) % dy, flat / (dx * dy)];
            frame.voxel_center_normalized(ijk)
        })
        .collect())
}

fn clamp_unit(p: [f64; 3]) -> [f64; 3] {
    p.map(|x| x.clamp(-1.0, 1.0))
}

fn labels_for(shapes: &[&dyn ImplicitShape], p: [f64; 3]) -> Vec<u8> {
    shapes.iter().map(|s| (s.sdf(p) < 0.0) as u8).collect()
}

/// Volume points followed by per-organ boundary points, labeled against the
/// analytic shapes. Shapes live in normalized coordinates of `v`; meshes in world
/// coordinates.
pub fn build_queryset(
    shapes: &[&dyn ImplicitShape],
    meshes: &[TriMesh],
    v: &VolumeGrid,
    budget: &QueryBudget,
    rng: &mut Rng,
) -> Result<QuerySet> {
    if shapes.is_empty() || shapes.len() != meshes.len() {
        return Err(Error::invalid(format!(
            "need one mesh per organ shape, got {} shapes and {} meshes",
            shapes.len(),
            meshes.len()
        )));
    }
    if budget.volume_points == 0 || budget.boundary_points == 0 {
        return Err(Error::invalid("query budgets must be positive"));
    }
    let mut q = QuerySet::empty(shapes.len());
    for p in sample_volume_points(v, budget.volume_points, rng)? {
        q.push(p, &labels_for(shapes, p), SourceTag::Volume);
    }
    let frame = v.frame();
    for mesh in meshes {
        let normalized = mesh.map_vertices(|w| frame.world_to_normalized(w));
        let pts = geometry::sample_surface_points(&normalized, budget.boundary_points, &budget.sigmas, rng)?;
        for p in pts {
            let p = clamp_unit(p);
            q.push(p, &labels_for(shapes, p), SourceTag::Boundary);
        }
    }
    Ok(q)
}

/// Maps a parent-normalized point into the normalized frame of a patch, or
/// `None` when it falls outside the patch's half-open voxel box.
pub fn parent_to_patch(
    p: [f64; 3],
    patch_offset: [usize; 3],
    patch_size: [usize; 3],
    parent: &CoordinateFrame,
) -> Option<[f64; 3]> {
    let mut out = [0.0; 3];
    for a in 0..3 {
        let c = ((p[a] + 1.0) * parent.dims[a] as f64 - 1.0) * 0.5 - patch_offset[a] as f64;
        if c < -0.5 || c >= patch_size[a] as f64 - 0.5 {
            return None;
        }
        out[a] = (2.0 * c + 1.0) / patch_size[a] as f64 - 1.0;
    }
    Some(out)
}

pub fn patch_to_parent(
    p: [f64; 3],
    patch_offset: [usize; 3],
    patch_size: [usize; 3],
    parent: &CoordinateFrame,
) -> [f64; 3] {
    std::array::from_fn(|a| {
        let c = ((p[a] + 1.0) * patch_size[a] as f64 - 1.0) * 0.5 + patch_offset[a] as f64;
        (2.0 * c + 1.0) / parent.dims[a] as f64 - 1.0
    })
}

pub fn to_patch_frame(
    q: &QuerySet,
    patch_offset: [usize; 3],
    patch_size: [usize; 3],
    parent: &CoordinateFrame,
) -> QuerySet {
    q.filter_map(|p| parent_to_patch(p, patch_offset, patch_size, parent))
}

/// Labels under both regimes: exact analytic occupancy and nearest-voxel
/// lookup in a low-resolution binary mask.
pub fn points_with_occupancy_from_highres(
    shape: &dyn ImplicitShape,
    lowres_mask: &VolumeGrid,
    points: &[[f64; 3]],
) -> (Vec<u8>, Vec<u8>) {
    let exact = points.iter().map(|&p| (shape.sdf(p) < 0.0) as u8).collect();
    let from_mask = points.iter().map(|&p| mask_label(lowres_mask, p)).collect();
    (exact, from_mask)
}

/// Nearest-voxel lookup of a binary mask at a normalized point.
pub fn mask_label(mask: &VolumeGrid, p: [f64; 3]) -> u8 {
    let dims = mask.dims();
    let ijk = std::array::from_fn(|a| {
        let c = continuous_index(p[a], dims[a]).round();
        c.clamp(0.0, (dims[a] - 1) as f64) as usize
    });
    (mask.get(ijk) >= 0.5) as u8
}

/// Voxelizes an implicit shape at the voxel centers of `frame` (1 inside, 0 outside).
pub fn voxelize_shape(shape: &dyn ImplicitShape, frame: &CoordinateFrame) -> Result<VolumeGrid> {
    VolumeGrid::from_fn(frame.dims, frame.spacing, frame.origin, |ijk| {
        (shape.sdf(frame.voxel_center_normalized(ijk)) < 0.0) as u8 as f32
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct FieldSpec {
    name: String,
    dtype: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct QueryHeader {
    n: usize,
    c: usize,
    fields: Vec<FieldSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fingerprint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

/// Writes a JSON header at `path` and the little-endian payload next to it:
/// coords (f32, n×3), then labels (u8, n×c), then tags (u8, n).
pub fn write_queryset(q: &QuerySet, path: &Path, provenance: &Provenance) -> Result<()> {
    let n = q.len();
    let header = QueryHeader {
        n,
        c: q.organs,
        fields: vec![
            FieldSpec { name: "coords".into(), dtype: "f32".into(), shape: vec![n, 3] },
            FieldSpec { name: "labels".into(), dtype: "u8".into(), shape: vec![n, q.organs] },
            FieldSpec { name: "tags".into(), dtype: "u8".into(), shape: vec![n] },
        ],
        fingerprint: provenance.fingerprint.clone(),
        seed: provenance.seed,
    };
    let text = serde_json::to_string_pretty(&header).map_err(|e| Error::json(path, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::with_capacity(n * (12 + q.organs + 1));
    for p in &q.coords {
        for x in p {
            bytes.extend_from_slice(&(*x as f32).to_le_bytes());
        }
    }
    bytes.extend_from_slice(&q.labels);
    bytes.extend(q.tags.iter().map(|&t| t as u8));
    let raw = volume::payload_path(path);
    fs::write(&raw, bytes).map_err(|e| Error::io(&raw, e))
}

pub fn read_queryset(path: &Path) -> Result<(QuerySet, Provenance)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let h: QueryHeader = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    let raw = volume::payload_path(path);
    let bytes = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    let expect = h.n * (12 + h.c + 1);
    let bad = |reason: String| Error::Format { path: raw.clone(), reason };
    if bytes.len() != expect {
        return Err(bad(format!("expected {expect} bytes, found {}", bytes.len())));
    }
    let coords = bytes[..h.n * 12]
        .chunks_exact(12)
        .map(|c| std::array::from_fn(|a| f32::from_le_bytes(c[4 * a..4 * a + 4].try_into().unwrap()) as f64))
        .collect();
    let labels = bytes[h.n * 12..h.n * (12 + h.c)].to_vec();
    if labels.iter().any(|&l| l > 1) {
        return Err(bad("labels must be 0 or 1".into()));
    }
    let tags = bytes[h.n * (12 + h.c)..]
        .iter()
        .map(|&t| match t {
            0 => Ok(SourceTag::Volume),
            1 => Ok(SourceTag::Boundary),
            other => Err(bad(format!("unknown source tag {other}"))),
        })
        .collect::<Result<_>>()?;
    Ok((
        QuerySet { coords, labels, organs: h.c, tags },
        Provenance { fingerprint: h.fingerprint, seed: h.seed },
    ))
}
