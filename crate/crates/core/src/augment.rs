//! Paired affine augmentation of a volume and its query points.
//!
//! The image is pulled back through `A⁻¹` while points are pushed forward by
//! `A`, so the warped image sampled at `A·p` sees what the original image held
//! at `p` and point labels stay valid without recomputation.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Aabb, ImplicitShape, Point3};
use crate::rng::Rng;
use crate::sampling::QuerySet;
use crate::volume::VolumeGrid;

pub type Mat4 = [[f64; 4]; 4];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Maximum |translation| per axis as a fraction of the normalized extent (2).
    pub translation: f64,
    /// Maximum |rotation| per axis in degrees.
    pub rotation_deg: f64,
    /// Uniform scale range `[lo, hi]`, applied isotropically.
    pub scale: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            translation: 0.1,
            rotation_deg: 15.0,
            scale: (0.9, 1.1),
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            translation: 0.0,
            rotation_deg: 0.0,
            scale: (1.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale;
        if !(self.translation >= 0.0 && self.rotation_deg >= 0.0 && lo > 0.0 && hi >= lo) {
            return Err(Error::Config(format!("invalid augmentation ranges {self:?}")));
        }
        Ok(())
    }
}

/// A homogeneous transform `T·R·S` on normalized coordinates, with its components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineAugment {
    pub matrix: Mat4,
    pub translation: [f64; 3],
    /// Rotation angles about x, y, z in degrees; `R = Rz·Ry·Rx`.
    pub rotation_deg: [f64; 3],
    pub scale: [f64; 3],
}

fn matmul4(a: &Mat4, b: &Mat4) -> Mat4 {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..4).map(|k| a[i][k] * b[k][j]).sum()))
}

fn identity4() -> Mat4 {
    std::array::from_fn(|i| std::array::from_fn(|j| (i == j) as u8 as f64))
}

impl AffineAugment {
    pub fn identity() -> Self {
        Self::compose([0.0; 3], [0.0; 3], [1.0; 3])
    }

    pub fn compose(translation: [f64; 3], rotation_deg: [f64; 3], scale: [f64; 3]) -> Self {
        let mut t = identity4();
        for a in 0..3 {
            t[a][3] = translation[a];
        }
        let [ax, ay, az] = rotation_deg.map(f64::to_radians);
        let (sx, cx) = ax.sin_cos();
        let (sy, cy) = ay.sin_cos();
        let (sz, cz) = az.sin_cos();
        let rx = [[1.0, 0.0, 0.0, 0.0], [0.0, cx, -sx, 0.0], [0.0, sx, cx, 0.0], [0.0, 0.0, 0.0, 1.0]];
        let ry = [[cy, 0.0, sy, 0.0], [0.0, 1.0, 0.0, 0.0], [-sy, 0.0, cy, 0.0], [0.0, 0.0, 0.0, 1.0]];
        let rz = [[cz, -sz, 0.0, 0.0], [sz, cz, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]];
        let mut s = identity4();
        for a in 0..3 {
            s[a][a] = scale[a];
        }
        let r = matmul4(&rz, &matmul4(&ry, &rx));
        Self {
            matrix: matmul4(&t, &matmul4(&r, &s)),
            translation,
            rotation_deg,
            scale,
        }
    }

    /// Inverse matrix, via the inverse of the linear 3×3 block.
    pub fn inverse(&self) -> Result<Mat4> {
        let m = &self.matrix;
        let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
        if !det.is_finite() || det.abs() < 1e-12 {
            return Err(Error::invalid(format!("affine transform is singular (det {det:e})")));
        }
        let mut inv = identity4();
        let cof = |r: usize, c: usize| {
            let rows: Vec<usize> = (0..3).filter(|&i| i != r).collect();
            let cols: Vec<usize> = (0..3).filter(|&j| j != c).collect();
            m[rows[0]][cols[0]] * m[rows[1]][cols[1]] - m[rows[0]][cols[1]] * m[rows[1]][cols[0]]
        };
        for i in 0..3 {
            for j in 0..3 {
                let sign = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
                inv[i][j] = sign * cof(j, i) / det;
            }
        }
        for i in 0..3 {
            inv[i][3] = -(0..3).map(|k| inv[i][k] * m[k][3]).sum::<f64>();
        }
        Ok(inv)
    }
}

pub fn apply(m: &Mat4, p: Point3) -> Point3 {
    std::array::from_fn(|i| m[i][0] * p[0] + m[i][1] * p[1] + m[i][2] * p[2] + m[i][3])
}

fn uniform(rng: &mut Rng, half: f64) -> f64 {
    if half > 0.0 {
        rng.random_range(-half..=half)
    } else {
        0.0
    }
}

/// Draws translation, rotation, and scale uniformly within `cfg` and composes `T·R·S`.
pub fn sample_affine(cfg: &AugmentConfig, rng: &mut Rng) -> Result<AffineAugment> {
    cfg.validate()?;
    let translation = std::array::from_fn(|_| uniform(rng, 2.0 * cfg.translation));
    let rotation = std::array::from_fn(|_| uniform(rng, cfg.rotation_deg));
    let (lo, hi) = cfg.scale;
    let s = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    Ok(AffineAugment::compose(translation, rotation, [s; 3]))
}

/// Pull-back resampling: output voxel at normalized `q` holds `v(A⁻¹q)`;
/// preimages outside `[−1, 1]³` take the background fill.
pub fn warp_volume(v: &VolumeGrid, a: &AffineAugment) -> Result<VolumeGrid> {
    let inv = a.inverse()?;
    let frame = v.frame();
    let bg = v.background();
    let out = VolumeGrid::from_fn(v.dims(), v.spacing(), v.origin(), |ijk| {
        let p = apply(&inv, frame.voxel_center_normalized(ijk));
        if p.iter().all(|c| (-1.0..=1.0).contains(c)) {
            v.sample_extrapolated(p) as f32
        } else {
            bg
        }
    })?;
    Ok(out.with_fill(v.fill()))
}

pub fn transform_points(points: &[Point3], a: &AffineAugment) -> Vec<Point3> {
    points.iter().map(|&p| apply(&a.matrix, p)).collect()
}

/// Warps the volume and transforms the query points with one shared draw.
/// Labels are kept; points leaving `[−1, 1]³` are dropped.
pub fn apply_paired(
    v: &VolumeGrid,
    q: &QuerySet,
    cfg: &AugmentConfig,
    rng: &mut Rng,
) -> Result<(VolumeGrid, QuerySet, AffineAugment)> {
    let a = sample_affine(cfg, rng)?;
    let warped = warp_volume(v, &a)?;
    let moved = q.filter_map(|p| {
        let t = apply(&a.matrix, p);
        t.iter().all(|c| (-1.0..=1.0).contains(c)).then_some(t)
    });
    Ok((warped, moved, a))
}

/// A shape moved by `A`: `sdf(A⁻¹p)` keeps the sign of the original shape.
pub struct TransformedShape<'a> {
    pub inner: &'a dyn ImplicitShape,
    pub forward: Mat4,
    pub inverse: Mat4,
}

impl<'a> TransformedShape<'a> {
    pub fn new(inner: &'a dyn ImplicitShape, a: &AffineAugment) -> Result<Self> {
        Ok(Self {
            inner,
            forward: a.matrix,
            inverse: a.inverse()?,
        })
    }
}

impl ImplicitShape for TransformedShape<'_> {
    fn sdf(&self, p: Point3) -> f64 {
        self.inner.sdf(apply(&self.inverse, p))
    }

    fn bounds(&self) -> Aabb {
        let b = self.inner.bounds();
        let mut out = Aabb::empty();
        for k in 0..8 {
            let c = std::array::from_fn(|a| if k >> a & 1 == 1 { b.max[a] } else { b.min[a] });
            out.grow(apply(&self.forward, c));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Sphere;
    use crate::sampling::SourceTag;

    fn linear_volume(n: usize) -> VolumeGrid {
        let c = |i: usize| (2 * i + 1) as f64 / n as f64 - 1.0;
        VolumeGrid::from_fn([n; 3], [1.0; 3], [0.0; 3], |[x, y, z]| (0.5 * c(x) - 0.25 * c(y) + 0.75 * c(z) + 2.0) as f32)
            .unwrap()
    }

    fn f(p: Point3) -> f64 {
        0.5 * p[0] - 0.25 * p[1] + 0.75 * p[2] + 2.0
    }

    #[test]
    fn identity_draw_is_identity_matrix() {
        let mut rng = crate::rng::seeded(1);
        let a = sample_affine(&AugmentConfig::identity(), &mut rng).unwrap();
        assert_eq!(a.matrix, identity4());
        let v = linear_volume(8);
        assert_eq!(warp_volume(&v, &a).unwrap().values(), v.values());
    }

    #[test]
    fn pure_translation_has_identity_linear_part() {
        let a = AffineAugment::compose([0.1, -0.2, 0.3], [0.0; 3], [1.0; 3]);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(a.matrix[i][j], (i == j) as u8 as f64);
            }
        }
        assert_eq!([a.matrix[0][3], a.matrix[1][3], a.matrix[2][3]], [0.1, -0.2, 0.3]);
        assert_eq!(a.matrix[3], [0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn samples_stay_within_ranges() {
        let cfg = AugmentConfig::default();
        let mut rng = crate::rng::seeded(2);
        for _ in 0..10_000 {
            let a = sample_affine(&cfg, &mut rng).unwrap();
            assert!(a.translation.iter().all(|t| t.abs() <= 0.2));
            assert!(a.rotation_deg.iter().all(|r| r.abs() <= 15.0));
            assert!(a.scale.iter().all(|s| (0.9..=1.1).contains(s)));
        }
    }

    #[test]
    fn scale_and_inverse_round_trip() {
        let s = AffineAugment::compose([0.0; 3], [0.0; 3], [1.5; 3]);
        assert_eq!(transform_points(&[[0.2, -0.4, 0.6]], &s)[0], [0.2 * 1.5, -0.4 * 1.5, 0.6 * 1.5]);
        let a = AffineAugment::compose([0.05, 0.1, -0.1], [10.0, -7.0, 3.0], [1.08; 3]);
        let inv = a.inverse().unwrap();
        for p in [[0.3, -0.2, 0.9], [-1.0, 0.5, 0.0]] {
            let back = apply(&inv, apply(&a.matrix, p));
            assert!((0..3).all(|k| (back[k] - p[k]).abs() < 1e-12));
        }
    }

    #[test]
    fn warped_linear_field_is_exact_pullback() {
        let v = linear_volume(16);
        let a = AffineAugment::compose([0.05, -0.1, 0.02], [12.0, -5.0, 8.0], [0.95; 3]);
        let inv = a.inverse().unwrap();
        let w = warp_volume(&v, &a).unwrap();
        let frame = w.frame();
        let mut checked = 0;
        for z in 0..16 {
            for y in 0..16 {
                for x in 0..16 {
                    let q = frame.voxel_center_normalized([x, y, z]);
                    let p = apply(&inv, q);
                    if p.iter().all(|c| c.abs() <= 1.0) {
                        assert!((w.get([x, y, z]) as f64 - f(p)).abs() < 1e-5);
                        checked += 1;
                    }
                }
            }
        }
        assert!(checked > 2000);
    }

    #[test]
    fn constant_volume_stays_constant() {
        let v = VolumeGrid::filled([8; 3], [1.0; 3], [0.0; 3], 3.0).unwrap();
        let a = AffineAugment::compose([0.3, 0.0, 0.0], [30.0, 0.0, 10.0], [1.1; 3]);
        assert!(warp_volume(&v, &a).unwrap().values().iter().all(|&x| x == 3.0));
    }

    #[test]
    fn singular_transform_is_rejected() {
        let a = AffineAugment::compose([0.0; 3], [0.0; 3], [0.0, 1.0, 1.0]);
        assert!(warp_volume(&linear_volume(4), &a).is_err());
    }

    #[test]
    fn paired_correspondence_and_label_replay() {
        let v = linear_volume(16);
        let sphere = Sphere {
            center: [0.1, 0.0, -0.1],
            radius: 0.45,
        };
        let mut rng = crate::rng::seeded(4);
        let mut q = QuerySet::empty(1);
        for _ in 0..2000 {
            let p: Point3 = std::array::from_fn(|_| rng.random_range(-0.9..0.9));
            q.push(p, &[(sphere.sdf(p) < 0.0) as u8], SourceTag::Volume);
        }
        let (w, moved, a) = apply_paired(&v, &q, &AugmentConfig::default(), &mut rng).unwrap();
        let moved_shape = TransformedShape::new(&sphere, &a).unwrap();
        let inv = a.inverse().unwrap();
        assert!(moved.len() > 1000);
        for i in 0..moved.len() {
            let t = moved.coords[i];
            assert_eq!((moved_shape.sdf(t) < 0.0) as u8, moved.label(i, 0));
            let p = apply(&inv, t);
            if p.iter().all(|c| c.abs() <= 0.8) && t.iter().all(|c| c.abs() <= 0.9) {
                assert!((w.sample(t) - f(p)).abs() < 1e-5);
            }
        }
        let (same_v, same_q, _) = apply_paired(&v, &q, &AugmentConfig::identity(), &mut rng).unwrap();
        assert_eq!(same_v.values(), v.values());
        assert_eq!(same_q, q);
    }
}
