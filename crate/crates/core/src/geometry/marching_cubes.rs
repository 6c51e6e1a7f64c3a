use super::mc_tables::{CORNERS, EDGES, EDGE_TABLE, TRI_TABLE};
use super::TriMesh;
use crate::volume::VolumeGrid;

/// Extracts the `iso` level set of a voxel grid.
///
/// Corners with value `< iso` count as outside. Each grid edge produces at most
/// one shared vertex, so closed level sets give watertight meshes. Triangles
/// wind so their normals point toward decreasing values (outward for occupancy).
/// Vertices are emitted in cell scan order, in world coordinates.
pub fn marching_cubes(occ: &VolumeGrid, iso: f32) -> TriMesh {
    let [dx, dy, dz] = occ.dims();
    let mut mesh = TriMesh::default();
    if dx < 2 || dy < 2 || dz < 2 {
        return mesh;
    }
    let values = occ.values();
    let spacing = occ.spacing();
    let origin = occ.origin();
    let mut edge_vertex = vec![u32::MAX; 3 * dx * dy * dz];

    for z in 0..dz - 1 {
        for y in 0..dy - 1 {
            for x in 0..dx - 1 {
                let mut corner_vals = [0f32; 8];
                let mut case = 0usize;
                for (k, off) in CORNERS.iter().enumerate() {
                    let v = values[(x + off[0]) + dx * ((y + off[1]) + dy * (z + off[2]))];
                    corner_vals[k] = v;
                    if v < iso {
                        case |= 1 << k;
                    }
                }
                let edges = EDGE_TABLE[case];
                if edges == 0 {
                    continue;
                }
                let mut local = [u32::MAX; 12];
                for (e, &[c0, c1]) in EDGES.iter().enumerate() {
                    if edges & (1 << e) == 0 {
                        continue;
                    }
                    // orient the edge from its lower to its upper corner
                    let (lo, hi) = if CORNERS[c0] <= CORNERS[c1] { (c0, c1) } else { (c1, c0) };
                    let axis = (0..3).find(|&a| CORNERS[lo][a] != CORNERS[hi][a]).unwrap();
                    let base = [x + CORNERS[lo][0], y + CORNERS[lo][1], z + CORNERS[lo][2]];
                    let key = 3 * (base[0] + dx * (base[1] + dy * base[2])) + axis;
                    if edge_vertex[key] == u32::MAX {
                        let (v0, v1) = (corner_vals[lo] as f64, corner_vals[hi] as f64);
                        let t = if v1 != v0 { (iso as f64 - v0) / (v1 - v0) } else { 0.5 };
                        let mut p = [0.0; 3];
                        for a in 0..3 {
                            let c = base[a] as f64 + if a == axis { t } else { 0.0 };
                            p[a] = origin[a] + c * spacing[a];
                        }
                        edge_vertex[key] = mesh.vertices.len() as u32;
                        mesh.vertices.push(p);
                    }
                    local[e] = edge_vertex[key];
                }
                for tri in TRI_TABLE[case].chunks_exact(3) {
                    if tri[0] < 0 {
                        break;
                    }
                    let t = [local[tri[0] as usize], local[tri[1] as usize], local[tri[2] as usize]];
                    if t[0] != t[1] && t[1] != t[2] && t[0] != t[2] {
                        mesh.triangles.push(t);
                    }
                }
            }
        }
    }
    mesh
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{dist, smooth_mesh};

    fn sphere_grid(n: usize, r: f64) -> VolumeGrid {
        let c = (n as f64 - 1.0) / 2.0;
        VolumeGrid::from_fn([n; 3], [1.0; 3], [0.0; 3], |[x, y, z]| {
            let d = dist([x as f64, y as f64, z as f64], [c; 3]);
            (d < r) as u8 as f32
        })
        .unwrap()
    }

    #[test]
    fn empty_when_level_not_crossed() {
        let g = VolumeGrid::filled([4; 3], [1.0; 3], [0.0; 3], 0.0).unwrap();
        assert!(marching_cubes(&g, 0.5).is_empty());
        let g = VolumeGrid::filled([4; 3], [1.0; 3], [0.0; 3], 1.0).unwrap();
        assert!(marching_cubes(&g, 0.5).is_empty());
    }

    #[test]
    fn single_corner_gives_one_triangle() {
        let mut g = VolumeGrid::filled([2; 3], [1.0; 3], [0.0; 3], 0.0).unwrap();
        g.set([1, 1, 1], 1.0);
        let m = marching_cubes(&g, 0.5);
        assert_eq!(m.triangles.len(), 1);
        assert_eq!(m.vertices.len(), 3);
        // normal points away from the occupied corner
        let [a, b, c] = m.corners(0);
        let n = crate::geometry::cross(crate::geometry::sub(b, a), crate::geometry::sub(c, a));
        assert!(crate::geometry::dot(n, [-1.0, -1.0, -1.0]) > 0.0);
    }

    #[test]
    fn sphere_is_watertight_outward_and_close() {
        let g = sphere_grid(32, 10.0);
        let m = marching_cubes(&g, 0.5);
        assert!(m.is_closed());
        assert!(m.signed_volume() > 0.0);
        let c = [15.5; 3];
        let max_dev = m.vertices.iter().map(|&v| (dist(v, c) - 10.0).abs()).fold(0.0, f64::max);
        assert!(max_dev < 0.87, "{max_dev}");
    }

    #[test]
    fn vertices_interpolate_to_iso() {
        let c = 7.5;
        let g = VolumeGrid::from_fn([16; 3], [1.0; 3], [0.0; 3], |[x, y, z]| {
            (6.0 - dist([x as f64, y as f64, z as f64], [c; 3])) as f32
        })
        .unwrap();
        let m = marching_cubes(&g, 0.25);
        assert!(m.is_closed());
        for v in &m.vertices {
            // the vertex is on a grid edge; interpolating along it reproduces iso
            let s = g.sample_extrapolated(g.frame().world_to_normalized(*v));
            assert!((s - 0.25).abs() < 1e-5, "{s}");
        }
    }

    #[test]
    fn smoothing_reduces_staircase_deviation() {
        let g = sphere_grid(32, 10.0);
        let m = marching_cubes(&g, 0.5);
        let c = [15.5; 3];
        let dev = |m: &TriMesh| m.vertices.iter().map(|&v| (dist(v, c) - 10.0).abs()).fold(0.0, f64::max);
        let s = smooth_mesh(&m, 3, 0.5);
        assert!(dev(&s) < dev(&m), "{} vs {}", dev(&s), dev(&m));
        assert_eq!(s.vertices.len(), m.vertices.len());
    }
}
