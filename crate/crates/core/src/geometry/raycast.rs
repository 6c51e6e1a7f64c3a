use super::{cross, dot, sub, Aabb, Point3, TriMesh};
use crate::error::{Error, Result};

const LEAF_SIZE: usize = 4;

#[derive(Debug, Clone)]
struct Node {
    bounds: Aabb,
    /// Leaf: `start..start+count` into `order`. Inner: children at `start`, `start + 1`... stored as indices.
    start: usize,
    count: usize,
    left: usize,
    right: usize,
}

/// Inside/outside oracle for a closed triangle mesh using ray parity.
///
/// Rays leave the query point along a fixed generic direction; when a ray grazes
/// an edge, a vertex, or runs nearly parallel to a hit triangle, the query is
/// re-cast along the next direction in a deterministic sequence.
pub struct MeshOccupancy<'a> {
    mesh: &'a TriMesh,
    nodes: Vec<Node>,
    order: Vec<u32>,
    eps: f64,
}

const DIRECTIONS: [Point3; 6] = [
    [0.836_703, 0.312_345, 0.449_876],
    [-0.412_318, 0.867_112, 0.279_554],
    [0.231_797, -0.545_133, 0.805_652],
    [-0.713_243, -0.395_812, -0.578_425],
    [0.117_904, 0.192_355, -0.974_217],
    [0.989_013, -0.121_977, 0.083_371],
];

enum Cast {
    Count(usize),
    Degenerate,
}

impl<'a> MeshOccupancy<'a> {
    pub fn new(mesh: &'a TriMesh) -> Result<Self> {
        if !mesh.is_closed() {
            return Err(Error::Topology(
                "ray-parity occupancy requires a closed mesh (every edge in exactly two triangles)".into(),
            ));
        }
        let mut order: Vec<u32> = (0..mesh.triangles.len() as u32).collect();
        let boxes: Vec<Aabb> = (0..mesh.triangles.len())
            .map(|t| {
                let mut b = Aabb::empty();
                for p in mesh.corners(t) {
                    b.grow(p);
                }
                b
            })
            .collect();
        let mut nodes = Vec::new();
        build(&mut nodes, &mut order, &boxes, 0, boxes.len());
        let ext = mesh.bounds().extent();
        let scale = ext.iter().fold(0.0f64, |m, &e| m.max(e)).max(1e-12);
        Ok(Self {
            mesh,
            nodes,
            order,
            eps: 1e-9 * scale,
        })
    }

    pub fn contains(&self, p: Point3) -> bool {
        for dir in DIRECTIONS {
            if let Cast::Count(n) = self.cast(p, dir) {
                return n % 2 == 1;
            }
        }
        // every direction grazed something: fall back to the first count
        let mut hits = 0;
        self.visit(p, DIRECTIONS[0], &mut |t| {
            if let Some((_, false)) = self.intersect(p, DIRECTIONS[0], t) {
                hits += 1;
            }
            true
        });
        hits % 2 == 1
    }

    fn cast(&self, p: Point3, dir: Point3) -> Cast {
        let mut hits = 0;
        let mut degenerate = false;
        self.visit(p, dir, &mut |t| match self.intersect(p, dir, t) {
            Some((_, true)) => {
                degenerate = true;
                false
            }
            Some((_, false)) => {
                hits += 1;
                true
            }
            None => true,
        });
        if degenerate {
            Cast::Degenerate
        } else {
            Cast::Count(hits)
        }
    }

    /// Möller–Trumbore. Returns `(t, near_degenerate)` for a forward hit.
    fn intersect(&self, o: Point3, d: Point3, t: u32) -> Option<(f64, bool)> {
        let [a, b, c] = self.mesh.corners(t as usize);
        let e1 = sub(b, a);
        let e2 = sub(c, a);
        let pv = cross(d, e2);
        let det = dot(e1, pv);
        let scale = (dot(e1, e1) * dot(e2, e2)).sqrt();
        if det.abs() <= 1e-12 * scale {
            // ray parallel to the triangle plane: degenerate only if it lies in it
            let n = cross(e1, e2);
            return if dot(sub(o, a), n).abs() <= self.eps * scale.sqrt() {
                Some((0.0, true))
            } else {
                None
            };
        }
        let inv = 1.0 / det;
        let tv = sub(o, a);
        let u = dot(tv, pv) * inv;
        let qv = cross(tv, e1);
        let v = dot(d, qv) * inv;
        let dist = dot(e2, qv) * inv;
        let tol = 1e-9;
        if u < -tol || v < -tol || u + v > 1.0 + tol || dist < -self.eps {
            return None;
        }
        let grazing = u < tol || v < tol || u + v > 1.0 - tol || dist.abs() <= self.eps;
        Some((dist, grazing))
    }

    fn visit(&self, o: Point3, d: Point3, f: &mut dyn FnMut(u32) -> bool) {
        if self.nodes.is_empty() {
            return;
        }
        let inv = d.map(|x| 1.0 / x);
        let mut stack = vec![0usize];
        while let Some(i) = stack.pop() {
            let node = &self.nodes[i];
            if !ray_hits_box(o, inv, &node.bounds, self.eps) {
                continue;
            }
            if node.count > 0 {
                for &t in &self.order[node.start..node.start + node.count] {
                    if !f(t) {
                        return;
                    }
                }
            } else {
                stack.push(node.left);
                stack.push(node.right);
            }
        }
    }
}

fn ray_hits_box(o: Point3, inv: Point3, b: &Aabb, eps: f64) -> bool {
    let mut tmin = f64::NEG_INFINITY;
    let mut tmax = f64::INFINITY;
    for a in 0..3 {
        let t1 = (b.min[a] - eps - o[a]) * inv[a];
        let t2 = (b.max[a] + eps - o[a]) * inv[a];
        tmin = tmin.max(t1.min(t2));
        tmax = tmax.min(t1.max(t2));
    }
    tmax >= tmin.max(0.0)
}

fn build(nodes: &mut Vec<Node>, order: &mut [u32], boxes: &[Aabb], start: usize, end: usize) -> usize {
    let mut bounds = Aabb::empty();
    for &t in &order[start..end] {
        bounds = bounds.union(&boxes[t as usize]);
    }
    let id = nodes.len();
    nodes.push(Node {
        bounds,
        start,
        count: end - start,
        left: 0,
        right: 0,
    });
    if end - start <= LEAF_SIZE {
        return id;
    }
    let ext = bounds.extent();
    let axis = (0..3).max_by(|&a, &b| ext[a].total_cmp(&ext[b])).unwrap();
    let center = |t: u32| {
        let b = &boxes[t as usize];
        b.min[axis] + b.max[axis]
    };
    order[start..end].sort_unstable_by(|&a, &b| center(a).total_cmp(&center(b)).then(a.cmp(&b)));
    let mid = (start + end) / 2;
    let left = build(nodes, order, boxes, start, mid);
    let right = build(nodes, order, boxes, mid, end);
    let node = &mut nodes[id];
    node.count = 0;
    node.left = left;
    node.right = right;
    id
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{icosphere, ImplicitShape, Sphere};
    use rand::Rng as _;

    #[test]
    fn icosphere_parity_matches_inscribed_sphere_sdf() {
        // The icosphere is inscribed in its sphere: points with |sdf| beyond the
        // maximum chord sag are classified identically.
        let mesh = icosphere([0.1, -0.2, 0.3], 1.0, 3);
        let oracle = MeshOccupancy::new(&mesh).unwrap();
        let sphere = Sphere { center: [0.1, -0.2, 0.3], radius: 1.0 };
        let mut rng = crate::rng::seeded(11);
        let mut checked = 0;
        while checked < 2000 {
            let p: Point3 = std::array::from_fn(|a| [0.1, -0.2, 0.3][a] + rng.random_range(-1.5..1.5));
            let d = sphere.sdf(p);
            if d.abs() < 0.05 {
                continue;
            }
            assert_eq!(oracle.contains(p), d < 0.0, "{p:?} sdf {d}");
            checked += 1;
        }
    }

    #[test]
    fn vertex_aligned_queries_recast() {
        let mesh = icosphere([0.0; 3], 1.0, 1);
        let oracle = MeshOccupancy::new(&mesh).unwrap();
        assert!(oracle.contains([0.0; 3]));
        // a point whose first ray passes exactly through a vertex
        let v = mesh.vertices[0];
        let d = DIRECTIONS[0];
        let p = [v[0] - 0.5 * d[0], v[1] - 0.5 * d[1], v[2] - 0.5 * d[2]];
        // convex mesh: inside iff behind every outward face plane
        let inside = (0..mesh.triangles.len()).all(|t| {
            let [a, b, c] = mesh.corners(t);
            dot(sub(p, a), cross(sub(b, a), sub(c, a))) < 0.0
        });
        assert_eq!(oracle.contains(p), inside);
        assert!(!oracle.contains([3.0, 0.0, 0.0]));
    }
}
