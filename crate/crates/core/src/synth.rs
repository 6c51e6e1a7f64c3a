//! Synthetic organ scenes with analytic signed-distance oracles.
//!
//! Shapes are defined in the normalized coordinates of the scene volume. A
//! scene voxelizes them into a partial-volume intensity image with noise and
//! extracts a high-resolution ground-truth mesh (world millimetres) per organ.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, dist, dot, scale, sub, Aabb, ImplicitShape, Point3, TriMesh};
use crate::rng::{self, derive_seed};
use crate::sampling::CoordinateFrame;
use crate::volume::{continuous_index, read_vol, write_vol, Provenance, VolumeGrid};

/// Fine-grid factor for ground-truth meshes.
pub const MESH_REFINEMENT: usize = 4;
const BOUNDS_LIMIT: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    Sphere {
        center: Point3,
        radius: f64,
    },
    Ellipsoid {
        center: Point3,
        radii: [f64; 3],
    },
    Capsule {
        a: Point3,
        b: Point3,
        radius: f64,
    },
    SmoothUnion {
        first: Box<Primitive>,
        second: Box<Primitive>,
        k: f64,
    },
    /// `base + amplitude · sin(f(x−c)+φx) · sin(f(y−c)+φy) · sin(f(z−c)+φz)`.
    Perturbed {
        base: Box<Primitive>,
        amplitude: f64,
        frequency: f64,
        phase: [f64; 3],
    },
}

/// Signed distance to an axis-aligned ellipsoid centred at the origin.
///
/// The closest point is found from the secular equation in the scaled variable
/// of Eberly's formulation, solved by Newton iteration from the left bracket
/// where the function is convex and decreasing, so iterates rise monotonically.
pub fn ellipsoid_sdf(p: Point3, radii: [f64; 3]) -> f64 {
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| radii[j].total_cmp(&radii[i]));
    let e = order.map(|i| radii[i]);
    let y = order.map(|i| p[i].abs().max(1e-12));
    let z = [y[0] / e[0], y[1] / e[1], y[2] / e[2]];
    let g = z.iter().map(|v| v * v).sum::<f64>() - 1.0;
    if g == 0.0 {
        return 0.0;
    }
    // shifted ratios r_i − 1, so that u = s + 1 keeps full precision near u → 0
    let rm = [(e[0] / e[2]).powi(2) - 1.0, (e[1] / e[2]).powi(2) - 1.0, 0.0];
    let f = |u: f64| -> (f64, f64) {
        let mut val = -1.0;
        let mut der = 0.0;
        for i in 0..3 {
            let q = (rm[i] + 1.0) * z[i] / (u + rm[i]);
            val += q * q;
            der -= 2.0 * q * q / (u + rm[i]);
        }
        (val, der)
    };
    let mut u = z[2];
    let hi = if g < 0.0 { 1.0 } else { ((rm[0] + 1.0) * z[0]).hypot((rm[1] + 1.0) * z[1]).hypot(z[2]) };
    for _ in 0..200 {
        let (val, der) = f(u);
        if val <= 0.0 || der == 0.0 {
            break;
        }
        let next = (u - val / der).min(hi);
        if next - u <= 1e-16 * u.abs() {
            u = next;
            break;
        }
        u = next;
    }
    let x: [f64; 3] = std::array::from_fn(|i| (rm[i] + 1.0) * y[i] / (u + rm[i]));
    let d = dist(x, y);
    if g < 0.0 {
        -d
    } else {
        d
    }
}

fn segment_distance(p: Point3, a: Point3, b: Point3) -> f64 {
    let ab = sub(b, a);
    let len2 = dot(ab, ab);
    let t = if len2 > 0.0 { (dot(sub(p, a), ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
    dist(p, geometry::add(a, scale(ab, t)))
}

/// Polynomial smooth minimum; deviates from `min` by at most `k/4`.
fn smooth_min(a: f64, b: f64, k: f64) -> f64 {
    if k <= 0.0 {
        return a.min(b);
    }
    let h = (k - (a - b).abs()).max(0.0) / k;
    a.min(b) - h * h * k * 0.25
}

pub fn sdf_eval(shape: &Primitive, p: Point3) -> f64 {
    match shape {
        Primitive::Sphere { center, radius } => dist(p, *center) - radius,
        Primitive::Ellipsoid { center, radii } => ellipsoid_sdf(sub(p, *center), *radii),
        Primitive::Capsule { a, b, radius } => segment_distance(p, *a, *b) - radius,
        Primitive::SmoothUnion { first, second, k } => smooth_min(sdf_eval(first, p), sdf_eval(second, p), *k),
        Primitive::Perturbed {
            base,
            amplitude,
            frequency,
            phase,
        } => {
            let c = base.anchor();
            let w: f64 = (0..3).map(|a| (frequency * (p[a] - c[a]) + phase[a]).sin()).product();
            sdf_eval(base, p) + amplitude * w
        }
    }
}

impl Primitive {
    fn anchor(&self) -> Point3 {
        match self {
            Primitive::Sphere { center, .. } | Primitive::Ellipsoid { center, .. } => *center,
            Primitive::Capsule { a, b, .. } => scale(geometry::add(*a, *b), 0.5),
            Primitive::SmoothUnion { first, .. } => first.anchor(),
            Primitive::Perturbed { base, .. } => base.anchor(),
        }
    }

    /// Conservative bounding box of the negative region.
    pub fn aabb(&self) -> Aabb {
        let grow = |b: Aabb, m: f64| Aabb {
            min: b.min.map(|v| v - m),
            max: b.max.map(|v| v + m),
        };
        match self {
            Primitive::Sphere { center, radius } => grow(Aabb { min: *center, max: *center }, *radius),
            Primitive::Ellipsoid { center, radii } => Aabb {
                min: std::array::from_fn(|a| center[a] - radii[a]),
                max: std::array::from_fn(|a| center[a] + radii[a]),
            },
            Primitive::Capsule { a, b, radius } => {
                let mut bb = Aabb::empty();
                bb.grow(*a);
                bb.grow(*b);
                grow(bb, *radius)
            }
            Primitive::SmoothUnion { first, second, k } => grow(first.aabb().union(&second.aabb()), k * 0.25),
            Primitive::Perturbed { base, amplitude, .. } => grow(base.aabb(), amplitude.abs()),
        }
    }
}

impl ImplicitShape for Primitive {
    fn sdf(&self, p: Point3) -> f64 {
        sdf_eval(self, p)
    }

    fn bounds(&self) -> Aabb {
        self.aabb()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrganSpec {
    pub name: String,
    pub shape: Primitive,
    pub level: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub dims: [usize; 3],
    /// World extent in millimetres along each axis, centred on the origin.
    pub extent_mm: [f64; 3],
    pub organs: Vec<OrganSpec>,
    pub background: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn frame(&self) -> CoordinateFrame {
        let spacing: [f64; 3] = std::array::from_fn(|a| self.extent_mm[a] / self.dims[a] as f64);
        CoordinateFrame {
            dims: self.dims,
            spacing,
            origin: std::array::from_fn(|a| -0.5 * self.extent_mm[a] + 0.5 * spacing[a]),
        }
    }

    /// Voxel edge length in normalized units (isotropic scenes).
    pub fn voxel_normalized(&self) -> f64 {
        2.0 / self.dims[0] as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 2) || self.extent_mm.iter().any(|&e| !(e > 0.0)) {
            return Err(Error::Spec(format!("bad scene grid {:?} / {:?}", self.dims, self.extent_mm)));
        }
        if self.organs.is_empty() {
            return Err(Error::Spec("a scene needs at least one organ".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Spec("noise std must be non-negative".into()));
        }
        for o in &self.organs {
            let b = o.shape.aabb();
            if b.min.iter().chain(&b.max).any(|v| v.abs() > BOUNDS_LIMIT) {
                return Err(Error::Spec(format!(
                    "organ {} bounds {:?}..{:?} leave [−0.9, 0.9]³",
                    o.name, b.min, b.max
                )));
            }
        }
        Ok(())
    }
}

/// A generated scene: intensity volume, analytic oracles and ground-truth meshes.
#[derive(Debug, Clone)]
pub struct Scene {
    pub spec: SceneSpec,
    pub volume: VolumeGrid,
    pub meshes: Vec<TriMesh>,
}

impl Scene {
    pub fn shapes(&self) -> Vec<&dyn ImplicitShape> {
        self.spec.organs.iter().map(|o| &o.shape as &dyn ImplicitShape).collect()
    }

    pub fn organ_count(&self) -> usize {
        self.spec.organs.len()
    }
}

/// Minimum over a `factor`× grid of `max(sdf_a, sdf_b)`; negative means the
/// interiors overlap, otherwise twice the value estimates the surface gap.
pub fn contact_clearance(a: &dyn ImplicitShape, b: &dyn ImplicitShape, dims: [usize; 3], factor: usize) -> f64 {
    let bb = a.bounds();
    let ob = b.bounds();
    let lo: [f64; 3] = std::array::from_fn(|k| bb.min[k].max(ob.min[k]) - 0.05);
    let hi: [f64; 3] = std::array::from_fn(|k| bb.max[k].min(ob.max[k]) + 0.05);
    if (0..3).any(|k| lo[k] > hi[k]) {
        return f64::INFINITY;
    }
    let steps: [usize; 3] = std::array::from_fn(|k| (((hi[k] - lo[k]) * dims[k] as f64 * factor as f64 / 2.0).ceil() as usize).max(1));
    let mut best = f64::INFINITY;
    for i in 0..=steps[2] {
        for j in 0..=steps[1] {
            for k in 0..=steps[0] {
                let p = [
                    lo[0] + (hi[0] - lo[0]) * k as f64 / steps[0] as f64,
                    lo[1] + (hi[1] - lo[1]) * j as f64 / steps[1] as f64,
                    lo[2] + (hi[2] - lo[2]) * i as f64 / steps[2] as f64,
                ];
                best = best.min(a.sdf(p).max(b.sdf(p)));
            }
        }
    }
    best
}

/// Marching cubes on a `MESH_REFINEMENT`× SDF grid restricted to the shape's
/// bounds, followed by light Laplacian smoothing. Vertices in world millimetres.
pub fn ground_truth_mesh(shape: &dyn ImplicitShape, frame: &CoordinateFrame) -> Result<TriMesh> {
    let fine_dims = frame.dims.map(|d| d * MESH_REFINEMENT);
    let fine = frame.rescaled(fine_dims);
    let b = shape.bounds();
    let mut lo = [0usize; 3];
    let mut dims = [0usize; 3];
    for a in 0..3 {
        let i0 = (continuous_index(b.min[a], fine_dims[a]).floor() as isize - 2).max(0) as usize;
        let i1 = ((continuous_index(b.max[a], fine_dims[a]).ceil() as isize + 2) as usize).min(fine_dims[a] - 1);
        lo[a] = i0;
        dims[a] = i1 - i0 + 1;
    }
    let origin: [f64; 3] = std::array::from_fn(|a| fine.origin[a] + lo[a] as f64 * fine.spacing[a]);
    let grid = VolumeGrid::from_fn(dims, fine.spacing, origin, |ijk| {
        let p = fine.voxel_center_normalized([ijk[0] + lo[0], ijk[1] + lo[1], ijk[2] + lo[2]]);
        -shape.sdf(p) as f32
    })?;
    let mesh = geometry::marching_cubes(&grid, 0.0);
    Ok(geometry::smooth_mesh(&mesh, 2, 0.5))
}

/// Voxel intensities: background plus each organ's level times its 3³
/// box-filtered indicator, plus Gaussian noise.
fn render(spec: &SceneSpec) -> Result<VolumeGrid> {
    let frame = spec.frame();
    let [dx, dy, dz] = spec.dims;
    let n = dx * dy * dz;
    let mut owner = vec![u8::MAX; n];
    for z in 0..dz {
        for y in 0..dy {
            for x in 0..dx {
                let p = frame.voxel_center_normalized([x, y, z]);
                for (k, o) in spec.organs.iter().enumerate() {
                    if o.shape.sdf(p) < 0.0 {
                        owner[x + dx * (y + dy * z)] = k as u8;
                        break;
                    }
                }
            }
        }
    }
    let mut noise = rng::stream(spec.seed, &[0x6e6f_6973]);
    let clampi = |v: isize, d: usize| v.clamp(0, d as isize - 1) as usize;
    let mut values = Vec::with_capacity(n);
    let mut counts = vec![0u32; spec.organs.len()];
    for z in 0..dz {
        for y in 0..dy {
            for x in 0..dx {
                counts.fill(0);
                for oz in -1..=1isize {
                    for oy in -1..=1isize {
                        for ox in -1..=1isize {
                            let i = clampi(x as isize + ox, dx) + dx * (clampi(y as isize + oy, dy) + dy * clampi(z as isize + oz, dz));
                            if owner[i] != u8::MAX {
                                counts[owner[i] as usize] += 1;
                            }
                        }
                    }
                }
                let mut v = spec.background;
                for (k, o) in spec.organs.iter().enumerate() {
                    v += o.level * (counts[k] as f64 / 27.0);
                }
                if spec.noise_std > 0.0 {
                    v += spec.noise_std * noise.sample::<f64, _>(StandardNormal);
                }
                values.push(v as f32);
            }
        }
    }
    Ok(VolumeGrid::new(spec.dims, frame.spacing, frame.origin, values)?.with_fill(Some(spec.background as f32)))
}

pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    for i in 0..spec.organs.len() {
        for j in i + 1..spec.organs.len() {
            let c = contact_clearance(&spec.organs[i].shape, &spec.organs[j].shape, spec.dims, 2);
            if c < 0.0 {
                return Err(Error::Spec(format!(
                    "organs {} and {} overlap (clearance {c:.4})",
                    spec.organs[i].name, spec.organs[j].name
                )));
            }
        }
    }
    let volume = render(spec)?;
    let frame = spec.frame();
    let meshes = spec
        .organs
        .iter()
        .map(|o| ground_truth_mesh(&o.shape, &frame))
        .collect::<Result<Vec<_>>>()?;
    Ok(Scene {
        spec: spec.clone(),
        volume,
        meshes,
    })
}

/// Randomized scene families.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SceneTemplate {
    /// One sphere of radius `radius` (normalized) with a jittered centre.
    Sphere { dims: usize, radius: f64 },
    /// Large-organ analog: a perturbed ellipsoid spanning ~40% of the extent.
    SingleOrgan { dims: usize },
    /// Large perturbed ellipsoid plus a thin capsule in contact (gap ≤ 1 voxel).
    TwoOrganContact { dims: usize, capsule_radius: (f64, f64) },
}

impl SceneTemplate {
    pub fn dims(&self) -> usize {
        match *self {
            SceneTemplate::Sphere { dims, .. }
            | SceneTemplate::SingleOrgan { dims }
            | SceneTemplate::TwoOrganContact { dims, .. } => dims,
        }
    }

    pub fn organs(&self) -> usize {
        match self {
            SceneTemplate::TwoOrganContact { .. } => 2,
            _ => 1,
        }
    }
}

pub const EXTENT_MM: f64 = 64.0;
pub const NOISE_STD: f64 = 0.1;

fn liver(rng: &mut rng::Rng, center_x: f64) -> Primitive {
    let center = [
        center_x + rng.random_range(-0.04..0.04),
        rng.random_range(-0.06..0.06),
        rng.random_range(-0.06..0.06),
    ];
    let radii = [
        rng.random_range(0.34..0.44),
        rng.random_range(0.30..0.42),
        rng.random_range(0.30..0.40),
    ];
    Primitive::Perturbed {
        base: Box::new(Primitive::Ellipsoid { center, radii }),
        amplitude: rng.random_range(0.015..0.03),
        frequency: rng.random_range(5.0..8.0),
        phase: std::array::from_fn(|_| rng.random_range(0.0..std::f64::consts::TAU)),
    }
}

/// Slides a capsule along +x until its clearance to `big` equals `gap`.
fn place_in_contact(big: &Primitive, a: Point3, b: Point3, radius: f64, gap: f64) -> Primitive {
    let seg_gap = |shift: f64| {
        (0..=64)
            .map(|i| {
                let t = i as f64 / 64.0;
                let p = [a[0] + shift + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t];
                big.sdf(p)
            })
            .fold(f64::INFINITY, f64::min)
            - radius
    };
    let (mut lo, mut hi) = (-1.0, 1.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if seg_gap(mid) < gap {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Primitive::Capsule {
        a: [a[0] + hi, a[1], a[2]],
        b: [b[0] + hi, b[1], b[2]],
        radius,
    }
}

/// Draws one scene spec from a template.
pub fn sample_spec(template: &SceneTemplate, seed: u64) -> SceneSpec {
    let mut rng = rng::stream(seed, &[0x7370_6563]);
    let r = &mut rng;
    let dims = template.dims();
    let organs = match *template {
        SceneTemplate::Sphere { radius, .. } => vec![OrganSpec {
            name: "sphere".into(),
            shape: Primitive::Sphere {
                center: std::array::from_fn(|_| r.random_range(-0.05..0.05)),
                radius,
            },
            level: 1.0,
        }],
        SceneTemplate::SingleOrgan { .. } => vec![OrganSpec {
            name: "liver".into(),
            shape: liver(r, 0.0),
            level: 1.0,
        }],
        SceneTemplate::TwoOrganContact { capsule_radius, .. } => {
            let big = liver(r, -0.2);
            let radius = r.random_range(capsule_radius.0..=capsule_radius.1);
            let half = r.random_range(0.22..0.3);
            let tilt = r.random_range(-0.15..0.15);
            let y0 = r.random_range(-0.08..0.08);
            let a = [0.0, y0 - half, -tilt * half];
            let b = [0.0, y0 + half, tilt * half];
            let gap = 0.5 * 2.0 / dims as f64;
            let small = place_in_contact(&big, a, b, radius, gap);
            vec![
                OrganSpec {
                    name: "liver".into(),
                    shape: big,
                    level: 1.0,
                },
                OrganSpec {
                    name: "pancreas".into(),
                    shape: small,
                    level: 0.6,
                },
            ]
        }
    };
    SceneSpec {
        dims: [dims; 3],
        extent_mm: [EXTENT_MM; 3],
        organs,
        background: 0.0,
        noise_std: NOISE_STD,
        seed,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub template: SceneTemplate,
    pub seed: u64,
    pub scenes: Vec<Scene>,
    pub split: Split,
}

/// Per-scene seed for scene `index` of a dataset rooted at `seed`.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, &[index as u64])
}

/// Seeded 50/25/25 shuffle split.
pub fn split_indices(n: usize, seed: u64) -> Split {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, &[0x7370_6c74]));
    let n_train = n / 2;
    let n_val = n / 4;
    let mut train = idx[..n_train].to_vec();
    let mut val = idx[n_train..n_train + n_val].to_vec();
    let mut test = idx[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Split { train, val, test }
}

pub fn make_dataset(n: usize, template: &SceneTemplate, seed: u64) -> Result<Dataset> {
    if n < 3 {
        return Err(Error::invalid(format!("a dataset needs at least 3 scenes, got {n}")));
    }
    let scenes = (0..n)
        .map(|i| generate_scene(&sample_spec(template, scene_seed(seed, i))))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        template: *template,
        seed,
        scenes,
        split: split_indices(n, seed),
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct SceneFile {
    spec: SceneSpec,
    volume: String,
    meshes: Vec<String>,
    fingerprint: String,
    seed: u64,
}

/// Writes `scene.json`, `volume.vol` (+ `.raw`) and one OBJ per organ into `dir`.
pub fn save_scene(scene: &Scene, dir: &Path, fingerprint: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let prov = Provenance {
        fingerprint: Some(fingerprint.to_string()),
        seed: Some(scene.spec.seed),
    };
    write_vol(&scene.volume, &dir.join("volume.vol"), &prov)?;
    let mut names = Vec::new();
    for (o, m) in scene.spec.organs.iter().zip(&scene.meshes) {
        let name = format!("{}.obj", o.name);
        m.write_obj(&dir.join(&name), &format!("organ {} fingerprint {} seed {}", o.name, fingerprint, scene.spec.seed))?;
        names.push(name);
    }
    let file = SceneFile {
        spec: scene.spec.clone(),
        volume: "volume.vol".into(),
        meshes: names,
        fingerprint: fingerprint.to_string(),
        seed: scene.spec.seed,
    };
    let path = dir.join("scene.json");
    let text = serde_json::to_string_pretty(&file).map_err(|e| Error::json(&path, e))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_scene(dir: &Path) -> Result<Scene> {
    let path = dir.join("scene.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let file: SceneFile = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    let (volume, _) = read_vol(&dir.join(&file.volume))?;
    let meshes = file
        .meshes
        .iter()
        .map(|m| TriMesh::read_obj(&dir.join(m)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Scene {
        spec: file.spec,
        volume,
        meshes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{norm, MeshOccupancy};

    #[test]
    fn sphere_and_capsule_examples() {
        let s = Primitive::Sphere {
            center: [0.0; 3],
            radius: 0.5,
        };
        assert_eq!(sdf_eval(&s, [0.0; 3]), -0.5);
        assert!((sdf_eval(&s, [0.0, 0.7, 0.0]) - 0.2).abs() < 1e-15);
        let c = Primitive::Capsule {
            a: [-0.3, 0.0, 0.0],
            b: [0.3, 0.0, 0.0],
            radius: 0.2,
        };
        assert!(sdf_eval(&c, [0.0, 0.2, 0.0]).abs() < 1e-15);
        assert!((sdf_eval(&c, [0.6, 0.0, 0.0]) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn ellipsoid_distance_satisfies_closest_point_conditions() {
        let radii = [0.45, 0.3, 0.2];
        let mut rng = rng::seeded(3);
        for _ in 0..300 {
            let p: Point3 = std::array::from_fn(|_| rng.random_range(-0.7..0.7));
            let d = ellipsoid_sdf(p, radii);
            let inside = (0..3).map(|a| (p[a] / radii[a]).powi(2)).sum::<f64>() < 1.0;
            assert_eq!(d < 0.0, inside);
            let mut best = f64::INFINITY;
            let (nu, nv) = (400, 200);
            for i in 0..nu {
                let u = std::f64::consts::TAU * i as f64 / nu as f64;
                for j in 0..=nv {
                    let v = std::f64::consts::PI * j as f64 / nv as f64;
                    let x = [radii[0] * u.cos() * v.sin(), radii[1] * u.sin() * v.sin(), radii[2] * v.cos()];
                    best = best.min(dist(x, p));
                }
            }
            assert!(d.abs() <= best + 1e-9, "{p:?} {d} {best}");
            assert!(best - d.abs() < 5e-3, "{p:?} {d} {best}");
        }
    }

    #[test]
    fn ellipsoid_distance_is_precise_along_axes_and_for_spheres() {
        assert!((ellipsoid_sdf([0.0, 0.0, 0.0], [0.5, 0.3, 0.2]) + 0.2).abs() < 1e-9);
        assert!((ellipsoid_sdf([0.9, 0.0, 0.0], [0.5, 0.3, 0.2]) - 0.4).abs() < 1e-9);
        assert!((ellipsoid_sdf([0.0, 0.0, -0.1], [0.5, 0.3, 0.2]) + 0.1).abs() < 1e-9);
        let mut rng = rng::seeded(8);
        for _ in 0..1000 {
            let p: Point3 = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            assert!((ellipsoid_sdf(p, [0.4; 3]) - (norm(p) - 0.4)).abs() < 1e-6);
        }
    }

    #[test]
    fn ellipsoid_closest_point_is_orthogonal() {
        let radii = [0.4, 0.25, 0.33];
        let mut rng = rng::seeded(9);
        for _ in 0..500 {
            let p: Point3 = std::array::from_fn(|_| rng.random_range(-0.6..0.6));
            let d = ellipsoid_sdf(p, radii);
            let h = 1e-7;
            let g: Point3 = std::array::from_fn(|a| {
                let mut q = p;
                q[a] += h;
                let mut r = p;
                r[a] -= h;
                (ellipsoid_sdf(q, radii) - ellipsoid_sdf(r, radii)) / (2.0 * h)
            });
            let gn = norm(g);
            if (gn - 1.0).abs() > 1e-3 {
                continue;
            }
            let x: Point3 = std::array::from_fn(|a| p[a] - d * g[a] / gn);
            let level = (0..3).map(|a| (x[a] / radii[a]).powi(2)).sum::<f64>();
            assert!((level - 1.0).abs() < 1e-5, "{level}");
        }
    }

    #[test]
    fn smooth_union_is_below_plain_union() {
        let a = Primitive::Sphere {
            center: [-0.2, 0.0, 0.0],
            radius: 0.25,
        };
        let b = Primitive::Sphere {
            center: [0.2, 0.0, 0.0],
            radius: 0.25,
        };
        let u = Primitive::SmoothUnion {
            first: Box::new(a.clone()),
            second: Box::new(b.clone()),
            k: 0.1,
        };
        for p in [[0.0, 0.2, 0.0], [0.5, 0.0, 0.0], [0.0; 3]] {
            let plain = a.sdf(p).min(b.sdf(p));
            assert!(u.sdf(p) <= plain && u.sdf(p) >= plain - 0.025);
        }
    }

    fn sphere_spec(noise: f64) -> SceneSpec {
        SceneSpec {
            dims: [16; 3],
            extent_mm: [64.0; 3],
            organs: vec![OrganSpec {
                name: "sphere".into(),
                shape: Primitive::Sphere {
                    center: [0.0; 3],
                    radius: 0.5,
                },
                level: 0.75,
            }],
            background: 0.25,
            noise_std: noise,
            seed: 5,
        }
    }

    #[test]
    fn deep_interior_voxels_have_exact_intensity() {
        let spec = sphere_spec(0.0);
        let scene = generate_scene(&spec).unwrap();
        let frame = spec.frame();
        let vox = spec.voxel_normalized();
        let mut count = 0;
        for z in 0..16 {
            for y in 0..16 {
                for x in 0..16 {
                    let p = frame.voxel_center_normalized([x, y, z]);
                    if spec.organs[0].shape.sdf(p) < -vox * 3f64.sqrt() {
                        assert_eq!(scene.volume.get([x, y, z]), 1.0);
                        count += 1;
                    }
                    if spec.organs[0].shape.sdf(p) > vox * 3f64.sqrt() {
                        assert_eq!(scene.volume.get([x, y, z]), 0.25);
                    }
                }
            }
        }
        assert!(count > 50);
        assert_eq!(scene.volume.fill(), Some(0.25));
    }

    #[test]
    fn scenes_are_pure_functions_of_spec() {
        let a = generate_scene(&sphere_spec(0.1)).unwrap();
        let b = generate_scene(&sphere_spec(0.1)).unwrap();
        assert_eq!(a.volume, b.volume);
        assert_eq!(a.meshes, b.meshes);
    }

    #[test]
    fn out_of_bounds_and_overlapping_specs_are_rejected() {
        let mut spec = sphere_spec(0.0);
        spec.organs[0].shape = Primitive::Sphere {
            center: [0.6, 0.0, 0.0],
            radius: 0.4,
        };
        assert!(matches!(generate_scene(&spec), Err(Error::Spec(_))));
        let mut spec = sphere_spec(0.0);
        spec.organs.push(OrganSpec {
            name: "other".into(),
            shape: Primitive::Sphere {
                center: [0.3, 0.0, 0.0],
                radius: 0.3,
            },
            level: 0.5,
        });
        assert!(matches!(generate_scene(&spec), Err(Error::Spec(_))));
    }

    #[test]
    fn ground_truth_mesh_agrees_with_oracle() {
        let spec = sample_spec(&SceneTemplate::SingleOrgan { dims: 16 }, 11);
        let scene = generate_scene(&spec).unwrap();
        let mesh = &scene.meshes[0];
        assert!(mesh.is_closed());
        assert!(mesh.signed_volume() > 0.0);
        let frame = spec.frame();
        let oracle = MeshOccupancy::new(mesh).unwrap();
        let half_fine = 0.5 * spec.voxel_normalized() / MESH_REFINEMENT as f64;
        let mut rng = rng::seeded(12);
        let (mut total, mut agree) = (0, 0);
        while total < 3000 {
            let p: Point3 = std::array::from_fn(|_| rng.random_range(-0.9..0.9));
            let d = spec.organs[0].shape.sdf(p);
            if d.abs() <= half_fine {
                continue;
            }
            total += 1;
            agree += (oracle.contains(frame.normalized_to_world(p)) == (d < 0.0)) as usize;
        }
        assert!(agree as f64 >= 0.999 * total as f64, "{agree}/{total}");
    }

    #[test]
    fn contact_scenes_touch_without_overlap() {
        let template = SceneTemplate::TwoOrganContact {
            dims: 32,
            capsule_radius: (0.08, 0.1),
        };
        for s in 0..3 {
            let spec = sample_spec(&template, s);
            spec.validate().unwrap();
            let c = contact_clearance(&spec.organs[0].shape, &spec.organs[1].shape, spec.dims, 4);
            assert!(c >= 0.0, "overlap {c}");
            assert!(2.0 * c <= spec.voxel_normalized(), "gap {} voxels", 2.0 * c / spec.voxel_normalized());
        }
    }

    #[test]
    fn datasets_split_deterministically() {
        let a = split_indices(20, 3);
        assert_eq!(a, split_indices(20, 3));
        assert_eq!((a.train.len(), a.val.len(), a.test.len()), (10, 5, 5));
        let mut all: Vec<usize> = a.train.iter().chain(&a.val).chain(&a.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
        let seeds: std::collections::HashSet<u64> = (0..20).map(|i| scene_seed(3, i)).collect();
        assert_eq!(seeds.len(), 20);
        assert!(make_dataset(2, &SceneTemplate::SingleOrgan { dims: 16 }, 0).is_err());
    }

    #[test]
    fn scene_round_trips_through_disk() {
        let scene = generate_scene(&sphere_spec(0.05)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_scene(&scene, dir.path(), "abc").unwrap();
        let back = load_scene(dir.path()).unwrap();
        assert_eq!(back.spec, scene.spec);
        assert_eq!(back.volume.values(), scene.volume.values());
        assert_eq!(back.meshes[0].triangles, scene.meshes[0].triangles);
    }
}
