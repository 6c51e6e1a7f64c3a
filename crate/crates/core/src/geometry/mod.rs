//! Triangle meshes, implicit shapes, surface sampling and inside/outside labeling.

mod marching_cubes;
mod mc_tables;
mod raycast;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub use marching_cubes::marching_cubes;
pub use raycast::MeshOccupancy;

pub type Point3 = [f64; 3];

#[inline]
pub fn sub(a: Point3, b: Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn add(a: Point3, b: Point3) -> Point3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn scale(a: Point3, s: f64) -> Point3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot(a: Point3, b: Point3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross(a: Point3, b: Point3) -> Point3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm(a: Point3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn dist(a: Point3, b: Point3) -> f64 {
    norm(sub(a, b))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Point3,
    pub max: Point3,
}

impl Aabb {
    pub fn empty() -> Self {
        Self {
            min: [f64::INFINITY; 3],
            max: [f64::NEG_INFINITY; 3],
        }
    }

    pub fn grow(&mut self, p: Point3) {
        for a in 0..3 {
            self.min[a] = self.min[a].min(p[a]);
            self.max[a] = self.max[a].max(p[a]);
        }
    }

    pub fn union(mut self, o: &Aabb) -> Aabb {
        self.grow(o.min);
        self.grow(o.max);
        self
    }

    pub fn contains_box(&self, o: &Aabb) -> bool {
        (0..3).all(|a| self.min[a] <= o.min[a] && o.max[a] <= self.max[a])
    }

    pub fn extent(&self) -> Point3 {
        sub(self.max, self.min)
    }
}

/// A signed distance field (negative inside) with a bounding box.
pub trait ImplicitShape: Send + Sync {
    fn sdf(&self, p: Point3) -> f64;
    fn bounds(&self) -> Aabb;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sphere {
    pub center: Point3,
    pub radius: f64,
}

impl ImplicitShape for Sphere {
    fn sdf(&self, p: Point3) -> f64 {
        dist(p, self.center) - self.radius
    }

    fn bounds(&self) -> Aabb {
        Aabb {
            min: self.center.map(|c| c - self.radius),
            max: self.center.map(|c| c + self.radius),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Point3>,
    pub triangles: Vec<[u32; 3]>,
}

impl TriMesh {
    pub fn new(vertices: Vec<Point3>, triangles: Vec<[u32; 3]>) -> Result<Self> {
        let n = vertices.len() as u32;
        for (i, t) in triangles.iter().enumerate() {
            if t.iter().any(|&v| v >= n) {
                return Err(Error::invalid(format!("triangle {i} indexes past {n} vertices")));
            }
            if t[0] == t[1] || t[1] == t[2] || t[0] == t[2] {
                return Err(Error::invalid(format!("triangle {i} is degenerate: {t:?}")));
            }
        }
        Ok(Self { vertices, triangles })
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn corners(&self, t: usize) -> [Point3; 3] {
        self.triangles[t].map(|v| self.vertices[v as usize])
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.corners(t);
        0.5 * norm(cross(sub(b, a), sub(c, a)))
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    /// Signed enclosed volume; positive for outward-oriented closed meshes.
    pub fn signed_volume(&self) -> f64 {
        (0..self.triangles.len())
            .map(|t| {
                let [a, b, c] = self.corners(t);
                dot(a, cross(b, c)) / 6.0
            })
            .sum()
    }

    pub fn bounds(&self) -> Aabb {
        let mut b = Aabb::empty();
        for &v in &self.vertices {
            b.grow(v);
        }
        b
    }

    pub fn map_vertices(&self, f: impl Fn(Point3) -> Point3) -> TriMesh {
        TriMesh {
            vertices: self.vertices.iter().map(|&v| f(v)).collect(),
            triangles: self.triangles.clone(),
        }
    }

    /// Undirected edge → number of incident triangles.
    pub fn edge_counts(&self) -> HashMap<(u32, u32), usize> {
        let mut counts = HashMap::with_capacity(self.triangles.len() * 3 / 2);
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *counts.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        counts
    }

    /// True when every edge is shared by exactly two triangles.
    pub fn is_closed(&self) -> bool {
        !self.triangles.is_empty() && self.edge_counts().values().all(|&c| c == 2)
    }

    /// Area-weighted unit vertex normals.
    pub fn vertex_normals(&self) -> Vec<Point3> {
        let mut normals = vec![[0.0; 3]; self.vertices.len()];
        for (t, tri) in self.triangles.iter().enumerate() {
            let [a, b, c] = self.corners(t);
            let n = cross(sub(b, a), sub(c, a));
            for &v in tri {
                normals[v as usize] = add(normals[v as usize], n);
            }
        }
        for n in &mut normals {
            let l = norm(*n);
            if l > 0.0 {
                *n = scale(*n, 1.0 / l);
            }
        }
        normals
    }

    pub fn to_obj(&self) -> String {
        let mut s = String::with_capacity(self.vertices.len() * 40 + self.triangles.len() * 24);
        for v in &self.vertices {
            let _ = writeln!(s, "v {} {} {}", v[0], v[1], v[2]);
        }
        for t in &self.triangles {
            let _ = writeln!(s, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
        }
        s
    }

    /// Parses `v`/`f` records; other record types are skipped. Polygon faces are fanned.
    pub fn from_obj(text: &str) -> Result<TriMesh> {
        let mut vertices = Vec::new();
        let mut triangles = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let mut it = line.split_whitespace();
            let bad = |what: &str| Error::invalid(format!("OBJ line {}: {what}", lineno + 1));
            match it.next() {
                Some("v") => {
                    let xyz: Vec<f64> = it
                        .take(3)
                        .map(|t| t.parse::<f64>().map_err(|_| bad("bad coordinate")))
                        .collect::<Result<_>>()?;
                    if xyz.len() != 3 {
                        return Err(bad("vertex needs 3 coordinates"));
                    }
                    vertices.push([xyz[0], xyz[1], xyz[2]]);
                }
                Some("f") => {
                    let idx: Vec<u32> = it
                        .map(|t| {
                            let first = t.split('/').next().unwrap_or("");
                            match first.parse::<u32>() {
                                Ok(i) if i >= 1 => Ok(i - 1),
                                _ => Err(bad("bad face index")),
                            }
                        })
                        .collect::<Result<_>>()?;
                    if idx.len() < 3 {
                        return Err(bad("face needs 3 indices"));
                    }
                    for k in 1..idx.len() - 1 {
                        triangles.push([idx[0], idx[k], idx[k + 1]]);
                    }
                }
                _ => {}
            }
        }
        TriMesh::new(vertices, triangles)
    }

    pub fn write_obj(&self, path: &Path, header: &str) -> Result<()> {
        let mut text = String::new();
        for line in header.lines() {
            let _ = writeln!(text, "# {line}");
        }
        text.push_str(&self.to_obj());
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read_obj(path: &Path) -> Result<TriMesh> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        TriMesh::from_obj(&text)
    }

    /// Vertex adjacency built from triangle edges, sorted and deduplicated.
    pub fn neighbors(&self) -> Vec<Vec<u32>> {
        let mut adj = vec![Vec::new(); self.vertices.len()];
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                adj[a as usize].push(b);
                adj[b as usize].push(a);
            }
        }
        for list in &mut adj {
            list.sort_unstable();
            list.dedup();
        }
        adj
    }
}

/// Laplacian smoothing: each iteration moves every vertex by `lambda` toward the
/// centroid of its 1-ring, all vertices updated simultaneously.
pub fn smooth_mesh(m: &TriMesh, iterations: usize, lambda: f64) -> TriMesh {
    let mut out = m.clone();
    if iterations == 0 || m.is_empty() {
        return out;
    }
    let adj = m.neighbors();
    let mut next = out.vertices.clone();
    for _ in 0..iterations {
        for (i, ring) in adj.iter().enumerate() {
            if ring.is_empty() {
                continue;
            }
            let mut c = [0.0; 3];
            for &j in ring {
                c = add(c, out.vertices[j as usize]);
            }
            let c = scale(c, 1.0 / ring.len() as f64);
            let v = out.vertices[i];
            next[i] = add(v, scale(sub(c, v), lambda));
        }
        std::mem::swap(&mut out.vertices, &mut next);
    }
    out
}

/// Samples from a mesh with the base point and displacement partition of each sample.
#[derive(Debug, Clone)]
pub struct SurfaceSamples {
    pub points: Vec<Point3>,
    pub bases: Vec<Point3>,
    pub partition: Vec<usize>,
}

/// Area-uniform surface points, each displaced by isotropic Gaussian noise.
/// `sigmas` lists `(fraction, sigma)` partitions; sigma is in mesh units.
pub fn sample_surface(m: &TriMesh, n: usize, sigmas: &[(f64, f64)], rng: &mut Rng) -> Result<SurfaceSamples> {
    if m.is_empty() {
        return Err(Error::invalid("cannot sample an empty mesh"));
    }
    if sigmas.is_empty() {
        return Err(Error::invalid("at least one displacement partition is required"));
    }
    let total: f64 = sigmas.iter().map(|s| s.0).sum();
    if (total - 1.0).abs() > 1e-9 || sigmas.iter().any(|s| s.0 < 0.0 || s.1 < 0.0) {
        return Err(Error::invalid(format!("partition fractions must sum to 1, got {total}")));
    }
    let mut cumulative = Vec::with_capacity(m.triangles.len());
    let mut acc = 0.0;
    for t in 0..m.triangles.len() {
        acc += m.triangle_area(t);
        cumulative.push(acc);
    }
    if !(acc > 0.0) {
        return Err(Error::invalid("mesh has zero surface area"));
    }
    let mut counts: Vec<usize> = sigmas.iter().map(|s| (s.0 * n as f64).floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    *counts.last_mut().unwrap() += n - assigned;

    let mut out = SurfaceSamples {
        points: Vec::with_capacity(n),
        bases: Vec::with_capacity(n),
        partition: Vec::with_capacity(n),
    };
    for (part, (&count, &(_, sigma))) in counts.iter().zip(sigmas).enumerate() {
        for _ in 0..count {
            let r = rng.random::<f64>() * acc;
            let t = cumulative.partition_point(|&c| c <= r).min(cumulative.len() - 1);
            let [a, b, c] = m.corners(t);
            let (u, v): (f64, f64) = (rng.random(), rng.random());
            let su = u.sqrt();
            let (wa, wb, wc) = (1.0 - su, su * (1.0 - v), su * v);
            let base = std::array::from_fn(|k| wa * a[k] + wb * b[k] + wc * c[k]);
            let offset: Point3 = std::array::from_fn(|_| {
                let g: f64 = StandardNormal.sample(rng);
                g * sigma
            });
            out.points.push(add(base, offset));
            out.bases.push(base);
            out.partition.push(part);
        }
    }
    Ok(out)
}

pub fn sample_surface_points(m: &TriMesh, n: usize, sigmas: &[(f64, f64)], rng: &mut Rng) -> Result<Vec<Point3>> {
    Ok(sample_surface(m, n, sigmas, rng)?.points)
}

/// Occupancy from an implicit shape: 1 iff the signed distance is strictly negative.
pub fn shape_occupancy(shape: &dyn ImplicitShape, points: &[Point3]) -> Vec<u8> {
    points.iter().map(|&p| (shape.sdf(p) < 0.0) as u8).collect()
}

/// Occupancy from a closed mesh by ray parity.
pub fn mesh_occupancy(mesh: &TriMesh, points: &[Point3]) -> Result<Vec<u8>> {
    let oracle = MeshOccupancy::new(mesh)?;
    Ok(points.iter().map(|&p| oracle.contains(p) as u8).collect())
}

/// Either labeling source accepted by [`point_occupancy`].
pub enum Occupant<'a> {
    Shape(&'a dyn ImplicitShape),
    Mesh(&'a TriMesh),
}

pub fn point_occupancy(source: Occupant<'_>, points: &[Point3]) -> Result<Vec<u8>> {
    match source {
        Occupant::Shape(s) => Ok(shape_occupancy(s, points)),
        Occupant::Mesh(m) => mesh_occupancy(m, points),
    }
}

/// Icosphere by repeated midpoint subdivision of an icosahedron, vertices on the sphere.
pub fn icosphere(center: Point3, radius: f64, subdivisions: usize) -> TriMesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<Point3> = vec![
        [-1.0, t, 0.0], [1.0, t, 0.0], [-1.0, -t, 0.0], [1.0, -t, 0.0],
        [0.0, -1.0, t], [0.0, 1.0, t], [0.0, -1.0, -t], [0.0, 1.0, -t],
        [t, 0.0, -1.0], [t, 0.0, 1.0], [-t, 0.0, -1.0], [-t, 0.0, 1.0],
    ];
    let mut tris: Vec<[u32; 3]> = vec![
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ];
    for v in &mut verts {
        *v = scale(*v, 1.0 / norm(*v));
    }
    for _ in 0..subdivisions {
        let mut mid: HashMap<(u32, u32), u32> = HashMap::new();
        let mut next = Vec::with_capacity(tris.len() * 4);
        for t in &tris {
            let mut m = [0u32; 3];
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                let key = (a.min(b), a.max(b));
                m[k] = *mid.entry(key).or_insert_with(|| {
                    let p = add(verts[a as usize], verts[b as usize]);
                    verts.push(scale(p, 1.0 / norm(p)));
                    (verts.len() - 1) as u32
                });
            }
            next.push([t[0], m[0], m[2]]);
            next.push([t[1], m[1], m[0]]);
            next.push([t[2], m[2], m[1]]);
            next.push(m);
        }
        tris = next;
    }
    let vertices = verts.into_iter().map(|v| add(center, scale(v, radius))).collect();
    TriMesh {
        vertices,
        triangles: tris,
    }
}
