use ctxmatch::error::Error;
use ctxmatch::geometry::{exp_so3, Pose};
use ctxmatch::pose::{
    pnp_ransac, pose_error, refine_pose, reprojection_error, solve_pnp_minimal, PointCorrespondence, RansacConfig,
};
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
    let w = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let t = Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
    Pose::new(exp_so3(&w), t)
}

/// A world point in front of `pose` at depth 2..8 within a ±0.6 normalized field.
fn visible_point(pose: &Pose, rng: &mut ChaCha8Rng) -> Vector3<f64> {
    let z = rng.random_range(2.0..8.0);
    let pc = Vector3::new(rng.random_range(-0.6..0.6) * z, rng.random_range(-0.6..0.6) * z, z);
    pose.to_world(&pc)
}

fn observe(pose: &Pose, p: Vector3<f64>) -> PointCorrespondence {
    let (x, y) = pose.project(&p).unwrap();
    PointCorrespondence::new(p, x, y)
}

#[test]
fn p3p_recovers_generating_pose() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut found = 0;
    for _ in 0..200 {
        let pose = random_pose(&mut rng);
        let corrs = [0, 1, 2].map(|_| observe(&pose, visible_point(&pose, &mut rng)));
        let sols = solve_pnp_minimal(&corrs).unwrap();
        for s in &sols {
            for c in &corrs {
                assert!(reprojection_error(s, c) < 1e-8);
            }
        }
        if sols.iter().any(|s| {
            let (dt, dr) = pose_error(s, &pose);
            dt < 1e-6 && dr < 1e-6
        }) {
            found += 1;
        }
    }
    assert!(found >= 198, "recovered {found}/200");
}

#[test]
fn p3p_identity_case() {
    let pose = Pose::identity();
    let pts = [Vector3::new(1.0, 0.0, 4.0), Vector3::new(0.0, 1.0, 5.0), Vector3::new(-1.0, -0.5, 3.0)];
    let corrs = pts.map(|p| observe(&pose, p));
    let sols = solve_pnp_minimal(&corrs).unwrap();
    assert!(sols.iter().any(|s| {
        let (dt, dr) = pose_error(s, &pose);
        dt < 1e-9 && dr < 1e-7
    }));
}

#[test]
fn p3p_rejects_collinear_points() {
    let pose = Pose::identity();
    let pts = [Vector3::new(0.0, 0.0, 4.0), Vector3::new(1.0, 0.0, 4.0), Vector3::new(2.0, 0.0, 4.0)];
    let corrs = pts.map(|p| observe(&pose, p));
    assert!(matches!(solve_pnp_minimal(&corrs), Err(Error::DegenerateSample(_))));
}

#[test]
fn ransac_noise_free() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pose = random_pose(&mut rng);
    let corrs: Vec<_> = (0..20).map(|_| observe(&pose, visible_point(&pose, &mut rng))).collect();
    let r = pnp_ransac(&corrs, 0.005, &RansacConfig::default()).unwrap();
    let (dt, dr) = pose_error(&r.pose.unwrap(), &pose);
    assert!(dt < 1e-6 && dr < 1e-6, "{dt} {dr}");
    assert_eq!(r.inlier_ratio, 1.0);
}

#[test]
fn ransac_with_planted_outliers() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pose = random_pose(&mut rng);
    let mut corrs: Vec<_> = (0..20).map(|_| observe(&pose, visible_point(&pose, &mut rng))).collect();
    for _ in 0..20 {
        let p = visible_point(&pose, &mut rng);
        corrs.push(PointCorrespondence::new(p, rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6)));
    }
    let r = pnp_ransac(&corrs, 0.005, &RansacConfig::default()).unwrap();
    let (dt, dr) = pose_error(&r.pose.unwrap(), &pose);
    assert!(dt < 1e-6 && dr < 1e-6);
    assert!((r.inlier_ratio - 0.5).abs() <= 0.05, "{}", r.inlier_ratio);
    assert_eq!(r, pnp_ransac(&corrs, 0.005, &RansacConfig::default()).unwrap());
}

#[test]
fn ransac_needs_three() {
    let c = PointCorrespondence::new(Vector3::new(0.0, 0.0, 1.0), 0.0, 0.0);
    assert!(matches!(
        pnp_ransac(&[c, c], 0.01, &RansacConfig::default()),
        Err(Error::TooFewCorrespondences { needed: 3, got: 2 })
    ));
}

#[test]
fn refinement_never_increases_cost() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let pose = random_pose(&mut rng);
        let corrs: Vec<_> = (0..15)
            .map(|_| {
                let c = observe(&pose, visible_point(&pose, &mut rng));
                PointCorrespondence::new(c.world, c.image.x + rng.random_range(-0.003..0.003), c.image.y)
            })
            .collect();
        let start = Pose::new(exp_so3(&Vector3::new(0.02, -0.01, 0.03)) * pose.rotation, pose.translation + Vector3::new(0.05, 0.0, -0.04));
        let all: Vec<usize> = (0..corrs.len()).collect();
        let cost = |p: &Pose| corrs.iter().map(|c| reprojection_error(p, c).powi(2)).sum::<f64>();
        let refined = refine_pose(&start, &corrs, &all, 10);
        assert!(cost(&refined) <= cost(&start));
    }
}

#[test]
fn pose_error_examples() {
    let a = Pose::identity();
    assert_eq!(pose_error(&a, &a), (0.0, 0.0));
    let b = Pose::new(Matrix3::identity(), Vector3::new(0.2, 0.0, 0.0));
    let (dt, dr) = pose_error(&b, &a);
    assert!((dt - 0.2).abs() < 1e-15 && dr == 0.0);
    let axis = Vector3::new(1.0, 2.0, -0.5).normalize();
    let c = Pose::new(exp_so3(&(axis * 5f64.to_radians())), Vector3::zeros());
    let (dt, dr) = pose_error(&c, &a);
    assert!(dt == 0.0 && (dr - 5.0).abs() < 1e-12);
    let d = Pose::new(exp_so3(&(axis * std::f64::consts::PI)), Vector3::zeros());
    assert!((pose_error(&d, &a).1 - 180.0).abs() < 1e-9);
}
