use nalgebra::Vector3;
use nrt_core::geometry::{generate_rays, project, project_point, sample_uniform, Camera, Jitter, RayBundle};
use proptest::prelude::*;

fn camera(eye: [f64; 3], target: [f64; 3], fov: f64) -> Camera {
    Camera::look_at(Vector3::from(eye), Vector3::from(target), Vector3::new(0.0, 1.0, 0.0), fov, 24, 32, 0.1, 20.0)
        .unwrap()
}

fn coord() -> impl Strategy<Value = f64> {
    -3.0..3.0f64
}

proptest! {
    #[test]
    fn unproject_inverts_project(
        eye in (coord(), coord(), 4.0..8.0f64),
        target in (coord(), coord(), -1.0..1.0f64),
        fov in 20.0..90.0f64,
        row in 0.0..24.0f64,
        col in 0.0..32.0f64,
        depth in 0.2..19.0f64,
    ) {
        let cam = camera([eye.0, eye.1, eye.2], [target.0, target.1, target.2], fov);
        let p = cam.unproject(row, col, depth);
        let ((r, c), z, ok) = project_point(&cam, &p);
        prop_assert!(ok);
        prop_assert!((z - depth).abs() < 1e-9);
        prop_assert!((r - row).abs() < 1e-6 && (c - col).abs() < 1e-6);
        let back = cam.unproject(r, c, z);
        prop_assert!((back - p).norm() < 1e-6);
    }

    #[test]
    fn stored_positions_are_origin_plus_depth_times_direction(
        eye in (coord(), coord(), 4.0..8.0f64),
        seed in any::<u64>(),
        count in 2usize..20,
    ) {
        let cam = camera([eye.0, eye.1, eye.2], [0.0, 0.0, 0.0], 50.0);
        let rays = generate_rays(&cam, &[(0.0, 0.0), (11.3, 17.9), (24.0, 32.0)]).unwrap();
        let samples = sample_uniform(&rays, count, Jitter::Seeded { seed, first_ray: 0 }).unwrap();
        for (ray, s) in rays.rays.iter().zip(&samples.rays) {
            prop_assert!((ray.direction.norm() - 1.0).abs() < 1e-12);
            for (&t, p) in s.depths.iter().zip(&s.positions) {
                prop_assert_eq!(*p, ray.origin + ray.direction * t);
                prop_assert!(t >= ray.near && t <= ray.far);
            }
        }
    }

    #[test]
    fn samples_project_onto_one_epipolar_line(
        a in (coord(), coord(), 4.0..8.0f64),
        b in (coord(), coord(), 4.0..8.0f64),
        row in 1.0..23.0f64,
        col in 1.0..31.0f64,
    ) {
        let target = camera([a.0, a.1, a.2], [0.0, 0.0, 0.0], 50.0);
        let source = camera([b.0, b.1, b.2], [0.1, -0.2, 0.0], 60.0);
        prop_assume!((target.center() - source.center()).norm() > 0.5);
        let rays = generate_rays(&target, &[(row, col)]).unwrap();
        let samples = sample_uniform(&rays, 16, Jitter::Off).unwrap();
        let proj = project(&source, &samples.rays[0].positions);
        let pts: Vec<(f64, f64)> = proj
            .pixels
            .iter()
            .zip(&proj.depths)
            .filter(|(_, &z)| z > 0.0)
            .map(|(&p, _)| p)
            .collect();
        prop_assume!(pts.len() >= 3);
        // the line through the two most distant projections
        let (p0, p1) = (pts[0], pts[pts.len() - 1]);
        let (dr, dc) = (p1.0 - p0.0, p1.1 - p0.1);
        let len = (dr * dr + dc * dc).sqrt();
        prop_assume!(len > 1e-3);
        for p in &pts {
            let dist = ((p.0 - p0.0) * dc - (p.1 - p0.1) * dr).abs() / len;
            prop_assert!(dist < 1e-5, "{dist}");
        }
    }
}

#[test]
fn centre_pixel_looks_at_the_target() {
    let cam = camera([1.0, 2.0, 5.0], [0.5, 0.0, 0.0], 45.0);
    let r = generate_rays(&cam, &[(12.0, 16.0)]).unwrap().rays[0];
    let want = (Vector3::new(0.5, 0.0, 0.0) - Vector3::new(1.0, 2.0, 5.0)).normalize();
    assert!((r.direction - want).norm() < 1e-12);
    assert!((r.origin - Vector3::new(1.0, 2.0, 5.0)).norm() < 1e-12);
}

#[test]
fn too_few_samples_are_rejected() {
    let cam = camera([0.0, 0.0, 5.0], [0.0, 0.0, 0.0], 45.0);
    let rays: RayBundle = generate_rays(&cam, &[(1.0, 1.0)]).unwrap();
    assert!(sample_uniform(&rays, 1, Jitter::Off).is_err());
}
