use proptest::prelude::*;

use occupancy::augment::{apply, AffineAugment, TransformedShape};
use occupancy::geometry::{dist, marching_cubes, ImplicitShape, Point3};
use occupancy::metrics::{assd, chamfer, hd90, iou, PointIndex};
use occupancy::pipeline::hann_1d;
use occupancy::synth::{ellipsoid_sdf, Primitive};
use occupancy::volume::{resample, VolumeGrid};

fn point(lim: f64) -> impl Strategy<Value = Point3> {
    [-lim..lim, -lim..lim, -lim..lim]
}

fn cloud(max: usize) -> impl Strategy<Value = Vec<Point3>> {
    prop::collection::vec(point(10.0), 1..max)
}

fn affine() -> impl Strategy<Value = AffineAugment> {
    (point(0.3), point(30.0), 0.7..1.3f64).prop_map(|(t, r, s)| AffineAugment::compose(t, r, [s; 3]))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn index_nearest_matches_brute_force(points in cloud(200), queries in cloud(20)) {
        let index = PointIndex::new(&points).unwrap();
        for q in queries {
            let want = points.iter().map(|&p| dist(p, q)).fold(f64::INFINITY, f64::min);
            prop_assert_eq!(index.nearest(q), want);
        }
    }

    #[test]
    fn surface_metrics_are_symmetric_and_zero_on_self(a in cloud(100), b in cloud(100)) {
        prop_assert_eq!(hd90(&a, &b).unwrap(), hd90(&b, &a).unwrap());
        prop_assert!((assd(&a, &b).unwrap() - assd(&b, &a).unwrap()).abs() < 1e-9);
        prop_assert!((chamfer(&a, &b).unwrap() - chamfer(&b, &a).unwrap()).abs() < 1e-9);
        prop_assert_eq!(hd90(&a, &a).unwrap(), 0.0);
        prop_assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn iou_is_symmetric_and_bounded(
        p in prop::collection::vec(0.0..1.0f32, 60),
        g in prop::collection::vec(0.0..1.0f32, 60),
    ) {
        let grid = |v: Vec<f32>| VolumeGrid::new([5, 4, 3], [1.0; 3], [0.0; 3], v).unwrap();
        let (p, g) = (grid(p), grid(g));
        let x = iou(&p, &g).unwrap();
        prop_assert_eq!(x, iou(&g, &p).unwrap());
        prop_assert!((0.0..=100.0).contains(&x));
    }

    #[test]
    fn affine_inverse_round_trips(a in affine(), p in point(1.0)) {
        let inv = a.inverse().unwrap();
        let back = apply(&inv, apply(&a.matrix, p));
        prop_assert!(dist(back, p) < 1e-12);
    }

    #[test]
    fn moved_shape_keeps_labels(a in affine(), p in point(1.0), r in 0.2..0.6f64) {
        let shape = Primitive::Ellipsoid { center: [0.1, -0.05, 0.0], radii: [r, 0.8 * r, 1.1 * r] };
        let moved = TransformedShape::new(&shape, &a).unwrap();
        let inside = shape.sdf(p) < 0.0;
        prop_assume!(shape.sdf(p).abs() > 1e-9);
        prop_assert_eq!(moved.sdf(apply(&a.matrix, p)) < 0.0, inside);
    }

    #[test]
    fn ellipsoid_sdf_is_a_distance(radii in [0.2..1.0f64, 0.2..1.0, 0.2..1.0], p in point(1.5)) {
        let d = ellipsoid_sdf(p, radii);
        let level = (0..3).map(|a| (p[a] / radii[a]).powi(2)).sum::<f64>();
        prop_assert_eq!(d < 0.0, level < 1.0);
        // No surface point lies closer than |d|.
        for k in 0..200 {
            let (t, f) = (k as f64 * 0.0314, k as f64 * 0.61);
            let s = [radii[0] * t.sin() * f.cos(), radii[1] * t.sin() * f.sin(), radii[2] * t.cos()];
            prop_assert!(dist(p, s) >= d.abs() - 1e-6);
        }
    }

    #[test]
    fn hann_overlap_add_is_one(half in 1usize..64) {
        let n = 2 * half;
        let w = hann_1d(n);
        for i in 0..half {
            prop_assert!((w[i] + w[i + half] - 1.0).abs() < 1e-6);
        }
        prop_assert!(w.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn resampling_keeps_affine_fields(
        c in [-2.0..2.0f64, -2.0..2.0, -2.0..2.0],
        dims in [2usize..8, 2usize..8, 2usize..8],
        new_dims in [2usize..12, 2usize..12, 2usize..12],
    ) {
        let field = |x: f64, y: f64, z: f64| c[0] * x + c[1] * y + c[2] * z;
        let v = VolumeGrid::from_fn(dims, [1.0; 3], [0.0; 3], |[x, y, z]| {
            let n = |i: usize, d: usize| (2 * i + 1) as f64 / d as f64 - 1.0;
            field(n(x, dims[0]), n(y, dims[1]), n(z, dims[2])) as f32
        })
        .unwrap();
        let r = resample(&v, new_dims).unwrap();
        for (i, &got) in r.values().iter().enumerate() {
            let ijk = [i % new_dims[0], (i / new_dims[0]) % new_dims[1], i / (new_dims[0] * new_dims[1])];
            let n = r.frame().voxel_center_normalized(ijk);
            prop_assert!((got as f64 - field(n[0], n[1], n[2])).abs() < 1e-4);
        }
    }

    #[test]
    fn marching_cubes_spheres_are_closed(c in point(2.0), r in 3.0..7.0f64) {
        let n = 20;
        let center = [9.5 + c[0], 9.5 + c[1], 9.5 + c[2]];
        let grid = VolumeGrid::from_fn([n; 3], [1.0; 3], [0.0; 3], |[x, y, z]| {
            (r - dist([x as f64, y as f64, z as f64], center)).clamp(-1.0, 1.0) as f32 * 0.5 + 0.5
        })
        .unwrap();
        let m = marching_cubes(&grid, 0.5);
        prop_assert!(m.is_closed());
        prop_assert!(m.signed_volume() > 0.0);
        for &v in &m.vertices {
            prop_assert!((dist(v, center) - r).abs() < 0.5);
        }
    }
}
