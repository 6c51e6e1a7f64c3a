//! Scalar voxel grids: normalization, padding, resampling and patch geometry.
//!
//! Values are stored x-fastest (`x + dx * (y + dy * z)`). The world position of
//! voxel `(i, j, k)` is `origin + (i, j, k) * spacing`, and its normalized
//! coordinate is `(2i + 1) / D - 1` per axis.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::CoordinateFrame;

#[derive(Debug, Clone, PartialEq)]
pub struct VolumeGrid {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    values: Vec<f32>,
    /// Background/padding value, when known. Voxels equal to it count as background.
    fill: Option<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchLayout {
    pub patch_size: [usize; 3],
    pub stride: [usize; 3],
    /// Patch origins in voxel units of the padded volume, z-y-x lexicographic.
    pub offsets: Vec<[usize; 3]>,
    pub padded_dims: [usize; 3],
}

impl VolumeGrid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3], values: Vec<f32>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!("volume dims must be positive, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid(format!("spacing must be positive, got {spacing:?}")));
        }
        let n = dims[0] * dims[1] * dims[2];
        if values.len() != n {
            return Err(Error::invalid(format!(
                "volume of dims {dims:?} needs {n} values, got {}",
                values.len()
            )));
        }
        Ok(Self {
            dims,
            spacing,
            origin,
            values,
            fill: None,
        })
    }

    pub fn filled(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3], value: f32) -> Result<Self> {
        let n = dims.iter().product();
        Self::new(dims, spacing, origin, vec![value; n])
    }

    /// Builds a grid by evaluating `f` at every voxel index.
    pub fn from_fn(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        mut f: impl FnMut([usize; 3]) -> f32,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(dims.iter().product());
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    values.push(f([x, y, z]));
                }
            }
        }
        Self::new(dims, spacing, origin, values)
    }

    pub fn with_fill(mut self, fill: Option<f32>) -> Self {
        self.fill = fill;
        self
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn fill(&self) -> Option<f32> {
        self.fill
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn frame(&self) -> CoordinateFrame {
        CoordinateFrame {
            dims: self.dims,
            spacing: self.spacing,
            origin: self.origin,
        }
    }

    #[inline]
    pub fn index(&self, [x, y, z]: [usize; 3]) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, ijk: [usize; 3]) -> f32 {
        self.values[self.index(ijk)]
    }

    #[inline]
    pub fn set(&mut self, ijk: [usize; 3], v: f32) {
        let i = self.index(ijk);
        self.values[i] = v;
    }

    pub fn world_of_voxel(&self, ijk: [usize; 3]) -> [f64; 3] {
        std::array::from_fn(|a| self.origin[a] + ijk[a] as f64 * self.spacing[a])
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.values
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Value used for padding and out-of-volume samples: the recorded fill,
    /// otherwise the minimum intensity.
    pub fn background(&self) -> f32 {
        self.fill.unwrap_or_else(|| self.min_max().0)
    }

    pub fn same_frame(&self, other: &VolumeGrid) -> bool {
        self.frame().approx_eq(&other.frame(), 1e-9)
    }

    /// Trilinear sample at a normalized coordinate, clamping to the edge voxels.
    pub fn sample(&self, p: [f64; 3]) -> f64 {
        let (base, frac) = self.cell_of(p, true);
        self.blend(base, frac)
    }

    /// Trilinear sample that extends the boundary cells linearly beyond the
    /// outermost voxel centers instead of clamping. Affine fields are reproduced
    /// exactly everywhere.
    pub fn sample_extrapolated(&self, p: [f64; 3]) -> f64 {
        let (base, frac) = self.cell_of(p, false);
        self.blend(base, frac)
    }

    fn cell_of(&self, p: [f64; 3], clamp: bool) -> ([usize; 3], [f64; 3]) {
        let mut base = [0usize; 3];
        let mut frac = [0f64; 3];
        for a in 0..3 {
            let d = self.dims[a];
            if d == 1 {
                continue;
            }
            let mut c = continuous_index(p[a], d);
            if clamp {
                c = c.clamp(0.0, (d - 1) as f64);
            }
            let i0 = (c.floor().max(0.0) as usize).min(d - 2);
            base[a] = i0;
            frac[a] = c - i0 as f64;
        }
        (base, frac)
    }

    fn blend(&self, base: [usize; 3], frac: [f64; 3]) -> f64 {
        let step = |a: usize| if self.dims[a] > 1 { 1 } else { 0 };
        let mut acc = 0.0;
        for corner in 0..8 {
            let mut w = 1.0;
            let mut ijk = base;
            for a in 0..3 {
                if corner >> a & 1 == 1 {
                    w *= frac[a];
                    ijk[a] += step(a);
                } else {
                    w *= 1.0 - frac[a];
                }
            }
            if w != 0.0 {
                acc += w * self.get(ijk) as f64;
            }
        }
        acc
    }
}

/// Continuous voxel index of a normalized coordinate along an axis of `d` voxels.
/// Values within 1e-10 of an integer snap to it so voxel centers sample exactly.
#[inline]
pub fn continuous_index(n: f64, d: usize) -> f64 {
    let c = ((n + 1.0) * d as f64 - 1.0) * 0.5;
    let r = c.round();
    if (c - r).abs() < 1e-10 {
        r
    } else {
        c
    }
}

pub fn normalize(v: &VolumeGrid) -> Result<(VolumeGrid, NormStats)> {
    if v.is_empty() {
        return Err(Error::DegenerateInput("empty volume".into()));
    }
    let n = v.len() as f64;
    let mean = v.values.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = v.values.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std > 1e-12 * mean.abs().max(1.0)) {
        return Err(Error::DegenerateInput(
            "constant volume cannot be normalized".into(),
        ));
    }
    let values = v
        .values
        .iter()
        .map(|&x| ((x as f64 - mean) / std) as f32)
        .collect();
    let fill = v.fill.map(|f| ((f as f64 - mean) / std) as f32);
    let out = VolumeGrid {
        values,
        fill,
        ..v.clone()
    };
    Ok((out, NormStats { mean, std }))
}

/// Corner offset at which `pad_to_cube` places the original volume.
pub fn cube_pad_offset(dims: [usize; 3], side: usize) -> [usize; 3] {
    std::array::from_fn(|a| (side - dims[a]) / 2)
}

/// Pads to a `side`³ cube, centering the original and keeping its world coordinates.
pub fn pad_to_cube(v: &VolumeGrid, side: usize, fill: f32) -> Result<VolumeGrid> {
    if v.dims.iter().any(|&d| d > side) {
        return Err(Error::invalid(format!(
            "cannot pad dims {:?} to a cube of side {side}",
            v.dims
        )));
    }
    let offset = cube_pad_offset(v.dims, side);
    pad(v, offset, [side; 3], fill)
}

/// Embeds `v` at `offset` inside a grid of `dims`, filling the rest with `fill`.
pub fn pad(v: &VolumeGrid, offset: [usize; 3], dims: [usize; 3], fill: f32) -> Result<VolumeGrid> {
    if (0..3).any(|a| offset[a] + v.dims[a] > dims[a]) {
        return Err(Error::invalid(format!(
            "volume {:?} at offset {offset:?} does not fit in {dims:?}",
            v.dims
        )));
    }
    let origin = std::array::from_fn(|a| v.origin[a] - offset[a] as f64 * v.spacing[a]);
    let mut out = VolumeGrid::filled(dims, v.spacing, origin, fill)?;
    for z in 0..v.dims[2] {
        for y in 0..v.dims[1] {
            let src = v.index([0, y, z]);
            let dst = out.index([offset[0], y + offset[1], z + offset[2]]);
            out.values[dst..dst + v.dims[0]].copy_from_slice(&v.values[src..src + v.dims[0]]);
        }
    }
    out.fill = Some(fill);
    Ok(out)
}

/// Trilinear resampling to `new_dims`, preserving the physical extent.
pub fn resample(v: &VolumeGrid, new_dims: [usize; 3]) -> Result<VolumeGrid> {
    if new_dims.iter().any(|&d| d == 0) {
        return Err(Error::invalid("resample dims must be positive"));
    }
    let frame = v.frame().rescaled(new_dims);
    let out = VolumeGrid::from_fn(new_dims, frame.spacing, frame.origin, |ijk| {
        let p = frame.voxel_center_normalized(ijk);
        v.sample_extrapolated(p) as f32
    })?;
    Ok(out.with_fill(v.fill))
}

/// Smallest length ≥ max(dim, patch) that patches of `patch` at `stride` tile exactly.
fn padded_len(dim: usize, patch: usize, stride: usize) -> usize {
    let need = dim.max(patch);
    patch + (need - patch).div_ceil(stride) * stride
}

pub fn plan_patches(dims: [usize; 3], patch_size: [usize; 3], stride: [usize; 3]) -> Result<PatchLayout> {
    for a in 0..3 {
        if stride[a] == 0 || patch_size[a] == 0 {
            return Err(Error::invalid("patch size and stride must be positive"));
        }
        if stride[a] > patch_size[a] {
            return Err(Error::invalid(format!(
                "stride {stride:?} exceeds patch size {patch_size:?}"
            )));
        }
    }
    let padded_dims: [usize; 3] = std::array::from_fn(|a| padded_len(dims[a], patch_size[a], stride[a]));
    let counts: [usize; 3] = std::array::from_fn(|a| (padded_dims[a] - patch_size[a]) / stride[a] + 1);
    let mut offsets = Vec::with_capacity(counts.iter().product());
    for z in 0..counts[2] {
        for y in 0..counts[1] {
            for x in 0..counts[0] {
                offsets.push([x * stride[0], y * stride[1], z * stride[2]]);
            }
        }
    }
    Ok(PatchLayout {
        patch_size,
        stride,
        offsets,
        padded_dims,
    })
}

pub fn extract_patch(v: &VolumeGrid, offset: [usize; 3], size: [usize; 3]) -> Result<VolumeGrid> {
    if size.iter().any(|&s| s == 0) || (0..3).any(|a| offset[a] + size[a] > v.dims[a]) {
        return Err(Error::invalid(format!(
            "patch at {offset:?} of size {size:?} exceeds volume {:?}",
            v.dims
        )));
    }
    let origin = v.world_of_voxel(offset);
    let mut values = Vec::with_capacity(size.iter().product());
    for z in 0..size[2] {
        for y in 0..size[1] {
            let start = v.index([offset[0], offset[1] + y, offset[2] + z]);
            values.extend_from_slice(&v.values[start..start + size[0]]);
        }
    }
    Ok(VolumeGrid::new(size, v.spacing, origin, values)?.with_fill(v.fill))
}

pub fn is_background_patch(p: &VolumeGrid) -> bool {
    let (lo, hi) = p.min_max();
    lo == hi
}

#[derive(Debug, Serialize, Deserialize)]
struct VolHeader {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    dtype: String,
    order: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fill: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fingerprint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

/// Provenance stamped into artifact headers.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Provenance {
    pub fingerprint: Option<String>,
    pub seed: Option<u64>,
}

/// Path of the raw payload that accompanies a `.vol` header.
pub fn payload_path(header: &Path) -> PathBuf {
    header.with_extension("raw")
}

/// Writes `path` (JSON header) and its `.raw` payload (little-endian f32, x fastest).
pub fn write_vol(v: &VolumeGrid, path: &Path, provenance: &Provenance) -> Result<()> {
    let header = VolHeader {
        dims: v.dims,
        spacing: v.spacing,
        origin: v.origin,
        dtype: "f32".into(),
        order: "z-major".into(),
        fill: v.fill,
        fingerprint: provenance.fingerprint.clone(),
        seed: provenance.seed,
    };
    let text = serde_json::to_string_pretty(&header).map_err(|e| Error::json(path, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::with_capacity(v.len() * 4);
    for x in &v.values {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    let raw = payload_path(path);
    fs::write(&raw, bytes).map_err(|e| Error::io(&raw, e))
}

pub fn read_vol(path: &Path) -> Result<(VolumeGrid, Provenance)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header: VolHeader = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    if header.dtype != "f32" || header.order != "z-major" {
        return Err(Error::Format {
            path: path.into(),
            reason: format!("unsupported dtype/order {}/{}", header.dtype, header.order),
        });
    }
    let raw = payload_path(path);
    let bytes = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    let n: usize = header.dims.iter().product();
    if bytes.len() != n * 4 {
        return Err(Error::Format {
            path: raw,
            reason: format!("expected {} bytes, found {}", n * 4, bytes.len()),
        });
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let v = VolumeGrid::new(header.dims, header.spacing, header.origin, values)?.with_fill(header.fill);
    Ok((
        v,
        Provenance {
            fingerprint: header.fingerprint,
            seed: header.seed,
        },
    ))
}
