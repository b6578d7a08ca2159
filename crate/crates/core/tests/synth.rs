use ctxmatch::harness::metrics::precision_at_1;
use ctxmatch::harness::{evaluate_matcher, EvalOptions};
use ctxmatch::matching::{HammingIndex, Matcher};
use ctxmatch::synth::{flip_bits, generate_world, gravity_in_camera, WorldConfig};
use ctxmatch::Descriptor;

fn aliased_noise_free() -> WorldConfig {
    WorldConfig {
        seed: 21,
        landmark_count: 300,
        aliasing_factor: 2,
        bit_flip: 0.0,
        pixel_jitter: 0.0,
        train_frames: 40,
        eval_frames: 20,
        ..Default::default()
    }
}

#[test]
fn identical_twins_defeat_hamming_matching() {
    let w = generate_world(&aliased_noise_free()).unwrap();
    let index = HammingIndex::new(&w.map);
    let options = EvalOptions {
        localize: false,
        ..Default::default()
    };
    let eval = evaluate_matcher(&Matcher::Hamming(&index), &w.eval, &w.camera(), &w.map, &options).unwrap();
    let p = precision_at_1(&eval.retrieval).unwrap();
    assert!(p < 1.0, "hamming precision@1 {p}");
    assert!(p > 0.0);
}

#[test]
fn eval_frames_carry_complete_ground_truth() {
    let cfg = WorldConfig {
        landmark_count: 300,
        train_frames: 30,
        eval_frames: 15,
        ..Default::default()
    };
    let w = generate_world(&cfg).unwrap();
    let cam = w.camera();
    assert_eq!(w.eval.len(), 15);
    let mut tracked = 0;
    for e in &w.eval {
        assert_eq!(e.truth.len(), e.frame.keypoints.len());
        assert!(e.frame.keypoints.iter().all(|k| k.landmark_id.is_none()));
        assert!((e.frame.pose.rotation.transpose() * e.frame.pose.rotation - nalgebra::Matrix3::identity()).abs().max() < 1e-12);
        let g = gravity_in_camera(&e.frame.pose);
        assert!((e.frame.gravity_in_camera - g).norm() < 1e-12);
        assert!((g.norm() - 1.0).abs() < 1e-12);
        for (k, t) in e.frame.keypoints.iter().zip(&e.truth) {
            let Some(id) = t else { continue };
            tracked += 1;
            assert!(w.map.landmark(*id).is_some(), "truth {id} is not a map landmark");
            let (x, y) = e.frame.pose.project(&w.landmarks[*id as usize].position).unwrap();
            let (u, v) = cam.denormalize(x, y);
            assert!((u - k.u).hypot(v - k.v) < 6.0 * cfg.pixel_jitter);
        }
    }
    assert!(tracked > 0);
}

#[test]
fn flip_bits_is_seeded() {
    let d = Descriptor::zeros(384);
    assert_eq!(flip_bits(&d, 0.3, 5), flip_bits(&d, 0.3, 5));
    assert_ne!(flip_bits(&d, 0.3, 5), flip_bits(&d, 0.3, 6));
}
