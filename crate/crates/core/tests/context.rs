use ctxmatch::context::{
    describe_region, describe_region_indexed, generate_regions, instantiate_region, place_region, FeatureExtractor,
    FrameIndex, OrientedRect, RegionConfig,
};
use ctxmatch::geometry::Pose;
use ctxmatch::map::{CameraIntrinsics, Frame, Keypoint};
use ctxmatch::vocabulary::Vocabulary;
use ctxmatch::Descriptor;
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cam() -> CameraIntrinsics {
    CameraIntrinsics {
        camera_id: 0,
        fx: 400.0,
        fy: 400.0,
        cx: 320.0,
        cy: 240.0,
        width: 640,
        height: 480,
    }
}

fn random_descriptor(rng: &mut ChaCha8Rng, bits: usize) -> Descriptor {
    let bools: Vec<bool> = (0..bits).map(|_| rng.random()).collect();
    Descriptor::from_bits(&bools)
}

fn vocab(rng: &mut ChaCha8Rng, k: usize) -> Vocabulary {
    Vocabulary::from_centroids((0..k).map(|_| random_descriptor(rng, 64)).collect(), 0).unwrap()
}

fn random_frame(rng: &mut ChaCha8Rng, n: usize, gravity: Vector3<f64>) -> Frame {
    let keypoints = (0..n)
        .map(|_| Keypoint {
            u: rng.random_range(0.0..640.0),
            v: rng.random_range(0.0..480.0),
            scale: rng.random_range(2.0..12.0),
            descriptor: random_descriptor(rng, 64),
            landmark_id: None,
        })
        .collect();
    Frame {
        frame_id: 0,
        camera_id: 0,
        pose: Pose::identity(),
        gravity_in_camera: gravity,
        keypoints,
    }
}

fn brute_force_histogram(rect: &OrientedRect, frame: &Frame, vocab: &Vocabulary, exclude: usize) -> Vec<f32> {
    let mut counts = vec![0u32; vocab.k()];
    for (j, kp) in frame.keypoints.iter().enumerate() {
        if j == exclude {
            continue;
        }
        let (x, y) = cam().normalize(kp.u, kp.v);
        // Rotate into the rectangle's frame by hand.
        let (dx, dy) = (x - rect.center.0, y - rect.center.1);
        let (c, s) = (rect.angle.cos(), rect.angle.sin());
        let (lx, ly) = (c * dx + s * dy, -s * dx + c * dy);
        if lx.abs() <= rect.half_extents.0 && ly.abs() <= rect.half_extents.1 {
            let word = (0..vocab.k())
                .min_by_key(|&w| (kp.descriptor.hamming(&vocab.centroids()[w]), w))
                .unwrap();
            counts[word] += 1;
        }
    }
    let total: u32 = counts.iter().sum();
    counts
        .iter()
        .map(|&c| if total == 0 { 0.0 } else { c as f32 / total as f32 })
        .collect()
}

#[test]
fn histogram_matches_brute_force_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let v = vocab(&mut rng, 8);
    let bank = generate_regions(&RegionConfig {
        n_regions: 40,
        seed: 2,
        ..Default::default()
    })
    .unwrap();
    for _ in 0..20 {
        let g = Vector3::new(rng.random_range(-0.5..0.5), 1.0, rng.random_range(-0.3..0.3)).normalize();
        let frame = random_frame(&mut rng, 60, g);
        let anchor = rng.random_range(0..frame.keypoints.len());
        for r in &bank.regions {
            let rect = instantiate_region(r, &frame.keypoints[anchor], &cam(), &g, 6.0);
            let fast = describe_region(&rect, &frame, &cam(), &v, Some(anchor));
            assert_eq!(fast, brute_force_histogram(&rect, &frame, &v, anchor));
        }
    }
}

#[test]
fn feature_blocks_equal_per_region_histograms() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let v = vocab(&mut rng, 4);
    let bank = generate_regions(&RegionConfig {
        n_regions: 25,
        seed: 9,
        ..Default::default()
    })
    .unwrap();
    let g = Vector3::new(0.2, 0.95, 0.1).normalize();
    let frame = random_frame(&mut rng, 40, g);
    let fx = FeatureExtractor::new(&bank, &v, 5.0, true, true);
    let index = fx.index(&frame, &cam());
    for kp in [0, 7, 39] {
        let full = fx.feature_vector(&frame, &index, kp);
        assert_eq!(full.len(), 25 * 4 + 64);
        for (j, r) in bank.regions.iter().enumerate() {
            let rect = instantiate_region(r, &frame.keypoints[kp], &cam(), &g, 5.0);
            assert_eq!(&full[j * 4..(j + 1) * 4], describe_region(&rect, &frame, &cam(), &v, Some(kp)).as_slice());
        }
        let bits: Vec<f32> = (0..64).map(|i| f32::from(u8::from(frame.keypoints[kp].descriptor.get(i)))).collect();
        assert_eq!(&full[100..], bits.as_slice());
    }
}

#[test]
fn lone_anchor_gives_zero_context_and_raw_bits() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let v = vocab(&mut rng, 4);
    let bank = generate_regions(&RegionConfig {
        n_regions: 10,
        ..Default::default()
    })
    .unwrap();
    let frame = random_frame(&mut rng, 1, Vector3::y());
    let fx = FeatureExtractor::new(&bank, &v, 5.0, true, true);
    let f = fx.feature_vector(&frame, &fx.index(&frame, &cam()), 0);
    assert!(f[..40].iter().all(|&x| x == 0.0));
    assert_eq!(f[40..].iter().filter(|&&x| x == 1.0).count() as u32, frame.keypoints[0].descriptor.count_ones());
}

#[test]
fn gravity_rotation_co_rotates_regions_and_neighbors() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let v = vocab(&mut rng, 8);
    let bank = generate_regions(&RegionConfig {
        n_regions: 60,
        seed: 4,
        ..Default::default()
    })
    .unwrap();
    let phi = 30f64.to_radians();
    let (c, s) = (phi.cos(), phi.sin());
    for _ in 0..10 {
        let g = Vector3::new(rng.random_range(-0.4..0.4), 1.0, rng.random_range(-0.3..0.3));
        let frame = random_frame(&mut rng, 50, g);
        let anchor = 0;
        let a = cam().normalize(frame.keypoints[anchor].u, frame.keypoints[anchor].v);
        let mut rotated = frame.clone();
        rotated.gravity_in_camera = Vector3::new(c * g.x - s * g.y, s * g.x + c * g.y, g.z);
        for kp in &mut rotated.keypoints {
            let (x, y) = cam().normalize(kp.u, kp.v);
            let (dx, dy) = (x - a.0, y - a.1);
            let (u, vv) = cam().denormalize(a.0 + c * dx - s * dy, a.1 + s * dx + c * dy);
            kp.u = u;
            kp.v = vv;
        }
        let i0 = FrameIndex::new(&frame, &cam(), &v);
        let i1 = FrameIndex::new(&rotated, &cam(), &v);
        for r in &bank.regions {
            let r0 = place_region(r, i0.points[anchor], 1.0, i0.roll);
            let r1 = place_region(r, i1.points[anchor], 1.0, i1.roll);
            let turn = (r1.angle - r0.angle - phi).rem_euclid(std::f64::consts::TAU);
            assert!(turn.min(std::f64::consts::TAU - turn) < 1e-9);
            // Keep well clear of rectangle edges so rounding cannot flip membership.
            let clear = i0.points.iter().enumerate().all(|(j, &(x, y))| {
                j == anchor || {
                    let (dx, dy) = (x - r0.center.0, y - r0.center.1);
                    let (lx, ly) = (r0.angle.cos() * dx + r0.angle.sin() * dy, -r0.angle.sin() * dx + r0.angle.cos() * dy);
                    (lx.abs() - r0.half_extents.0).abs() > 1e-9 && (ly.abs() - r0.half_extents.1).abs() > 1e-9
                }
            });
            if !clear {
                continue;
            }
            let (mut h0, mut h1) = (vec![0.0; 8], vec![0.0; 8]);
            describe_region_indexed(&r0, &i0, 8, Some(anchor), &mut h0);
            describe_region_indexed(&r1, &i1, 8, Some(anchor), &mut h1);
            assert_eq!(h0, h1);
        }
    }
}

#[test]
fn region_bounds_hold_for_many_samples() {
    let cfg = RegionConfig {
        n_regions: 100_000,
        seed: 17,
        ..Default::default()
    };
    let bank = generate_regions(&cfg).unwrap();
    assert_eq!(bank.len(), cfg.n_regions);
    for r in &bank.regions {
        assert!(r.area() >= cfg.area_min * (1.0 - 1e-12) && r.area() <= cfg.area_max * (1.0 + 1e-12));
        assert!(r.aspect() >= cfg.aspect_min * (1.0 - 1e-12) && r.aspect() <= cfg.aspect_max * (1.0 + 1e-12));
    }
}
