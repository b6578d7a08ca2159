use std::collections::BTreeMap;
use std::sync::OnceLock;

use ctxmatch::boosting::{train_model, BoostConfig, BoostedModel, Classifier, WeakLearner};
use ctxmatch::context::{generate_regions, RegionConfig};
use ctxmatch::map::LandmarkId;
use ctxmatch::matching::{
    classify, classify_with_inverted_file, correspondences, write_correspondences, AcceptRule, HammingIndex, Matcher,
    MatcherKind, ProjectedIndex,
};
use ctxmatch::synth::{descriptor_pool, flip_bits, generate_world, SyntheticWorld, WorldConfig};
use ctxmatch::vocabulary::{build_inverted_file, train_vocabulary, InvertedFile};
use ctxmatch::{ClassId, Descriptor, SfMMap, BACKGROUND};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Fixture {
    world: SyntheticWorld,
    model: BoostedModel,
    inverted: InvertedFile,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let world = generate_world(&WorldConfig {
            seed: 3,
            landmark_count: 200,
            train_frames: 40,
            eval_frames: 10,
            ..Default::default()
        })
        .unwrap();
        let vocab = train_vocabulary(&descriptor_pool(&world.config, 4000, 1), 16, 0, 30).unwrap();
        let regions = generate_regions(&RegionConfig {
            n_regions: 60,
            seed: 2,
            ..Default::default()
        })
        .unwrap();
        let cfg = BoostConfig {
            rounds: 150,
            candidate_features: 50,
            mining_period: 50,
            ..Default::default()
        };
        let model = train_model(&world.map, &regions, &vocab, &cfg).unwrap().model;
        let inverted = build_inverted_file(&world.map, &model.vocabulary, &model.classes);
        Fixture { world, model, inverted }
    })
}

fn learner(feature: usize, threshold: f32, a: f64, b: f64, sharing: Vec<ClassId>, k: Vec<f64>) -> WeakLearner {
    WeakLearner {
        feature,
        threshold,
        a,
        b,
        sharing,
        k,
    }
}

#[test]
fn decisive_stump_puts_its_class_first() {
    let model = Classifier::new(vec![learner(0, 0.5, 10.0, 0.0, vec![7], vec![0.0; 10])], 10);
    assert_eq!(classify(&model, &[1.0, 0.0], 3).head().unwrap().0, 7);
    let below = classify(&model, &[0.0, 0.0], 3);
    assert_eq!(below.entries.iter().map(|e| e.0).collect::<Vec<_>>(), vec![0, 1, 2]);
}

#[test]
fn zero_model_ranks_by_class_id() {
    let r = classify(&Classifier::new(Vec::new(), 6), &[0.0], 10);
    assert_eq!(r.entries, (0..6).map(|c| (c, 0.0)).collect::<Vec<_>>());
    assert_eq!(r.evaluated, 6);
}

#[test]
fn ranking_equals_sorted_scores_and_is_shift_invariant() {
    let f = fixture();
    let fx = f.model.extractor();
    let eval = &f.world.eval[0].frame;
    let index = fx.index(eval, &f.world.camera());
    let mut shifted = f.model.classifier.learners().to_vec();
    for l in &mut shifted {
        l.b += 0.75;
        for (c, k) in l.k.iter_mut().enumerate() {
            if !l.sharing.contains(&(c as ClassId)) {
                *k += 0.75;
            }
        }
    }
    let shifted = Classifier::new(shifted, f.model.num_classes());
    for kp in 0..eval.keypoints.len().min(40) {
        let v = fx.feature_vector(eval, &index, kp);
        let mut oracle: Vec<(ClassId, f64)> =
            (0..f.model.num_classes() as ClassId).map(|c| (c, f.model.classifier.score(&v, c))).collect();
        oracle.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
        oracle.truncate(12);
        let ranked = classify(&f.model.classifier, &v, 12);
        assert_eq!(ranked.entries, oracle);
        let moved = classify(&shifted, &v, 12);
        let ids = |r: &[(ClassId, f64)]| r.iter().map(|e| e.0).collect::<Vec<_>>();
        assert_eq!(ids(&moved.entries), ids(&ranked.entries));
    }
}

#[test]
fn inverted_file_restricts_without_changing_scores() {
    let f = fixture();
    let fx = f.model.extractor();
    let mut evaluated = 0usize;
    let mut queries = 0usize;
    for e in f.world.eval.iter().chain(&f.world.replay_frames()) {
        let index = fx.index(&e.frame, &f.world.camera());
        for (kp, k) in e.frame.keypoints.iter().enumerate() {
            let v = fx.feature_vector(&e.frame, &index, kp);
            let all = f.model.num_classes();
            let full = classify(&f.model.classifier, &v, all);
            let scores: BTreeMap<ClassId, f64> = full.entries.iter().copied().collect();
            let r = classify_with_inverted_file(&f.model.classifier, &v, &k.descriptor, &f.model.vocabulary, &f.inverted, all);
            assert_eq!(r.background_score.to_bits(), full.background_score.to_bits());
            for &(c, s) in &r.entries {
                assert_eq!(s.to_bits(), scores[&c].to_bits());
            }
            evaluated += r.evaluated;
            queries += 1;
        }
    }
    assert!(queries >= 1000, "{queries} queries");
    assert!((evaluated as f64 / queries as f64) < f.model.num_classes() as f64);
}

#[test]
fn single_class_bucket_limits_output() {
    let f = fixture();
    let inv: InvertedFile =
        serde_json::from_value(serde_json::json!({"word_to_classes": vec![vec![3]; 16], "fingerprint": 0})).unwrap();
    let frame = &f.world.eval[0].frame;
    let fx = f.model.extractor();
    let index = fx.index(frame, &f.world.camera());
    for kp in 0..frame.keypoints.len() {
        let v = fx.feature_vector(frame, &index, kp);
        let r = classify_with_inverted_file(&f.model.classifier, &v, &frame.keypoints[kp].descriptor, &f.model.vocabulary, &inv, 10);
        assert!(r.entries.iter().all(|e| e.0 == BACKGROUND || e.0 == 3));
        assert_eq!(r.evaluated, 2);
    }
}

#[test]
fn replayed_training_frames_are_matched() {
    let f = fixture();
    let matcher = Matcher::Boost {
        model: &f.model,
        inverted: None,
        rule: AcceptRule::default(),
    };
    let (mut tracked, mut hit) = (0, 0);
    for e in f.world.replay_frames() {
        let corrs = matcher.match_frame(&e.frame, &f.world.camera()).unwrap();
        let by_kp: BTreeMap<usize, LandmarkId> = corrs.iter().map(|c| (c.keypoint, c.landmark_id)).collect();
        for (kp, t) in e.truth.iter().enumerate() {
            if let Some(t) = t {
                tracked += 1;
                hit += usize::from(by_kp.get(&kp) == Some(t));
            }
        }
    }
    let rate = hit as f64 / tracked as f64;
    assert!(rate >= 0.8, "replay match rate {rate:.3}");
}

#[test]
fn untracked_only_frame_gives_few_matches() {
    let f = fixture();
    let matcher = Matcher::Boost {
        model: &f.model,
        inverted: None,
        rule: AcceptRule::default(),
    };
    let (mut total, mut matched) = (0, 0);
    for mut frame in f.world.map.frames().iter().cloned() {
        frame.keypoints.retain(|k| k.landmark_id.is_none());
        total += frame.keypoints.len();
        matched += matcher.match_frame(&frame, &f.world.camera()).unwrap().len();
    }
    assert!(total > 0);
    assert!((matched as f64) < 0.05 * total as f64, "{matched}/{total} clutter keypoints matched");

    let mut empty = f.world.map.frames()[0].clone();
    empty.keypoints.clear();
    assert!(matcher.match_frame(&empty, &f.world.camera()).unwrap().is_empty());
}

#[test]
fn correspondences_never_carry_background() {
    let f = fixture();
    let frame = &f.world.eval[1].frame;
    for inverted in [None, Some(&f.inverted)] {
        let m = Matcher::Boost {
            model: &f.model,
            inverted,
            rule: AcceptRule { margin: 0.0 },
        };
        let results = m.query_frame(frame, &f.world.camera(), 5).unwrap();
        let corrs = correspondences(frame.frame_id, &results, m.kind());
        for r in &results {
            if r.candidates[0].landmark.is_none() {
                assert!(!r.accepted);
            }
        }
        assert_eq!(corrs.len(), results.iter().filter(|r| r.accepted).count());
    }
}

#[test]
fn correspondence_csv_lists_every_row() {
    let f = fixture();
    let frame = &f.world.eval[2].frame;
    let index = HammingIndex::new(&f.world.map);
    let corrs = Matcher::Hamming(&index).match_frame(frame, &f.world.camera()).unwrap();
    let mut buf = Vec::new();
    write_correspondences(&corrs, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("frame_id,keypoint_idx,landmark_id,score,matcher"));
    for (line, c) in lines.zip(&corrs) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[0].parse::<u64>().unwrap(), c.frame_id);
        assert_eq!(cols[1].parse::<usize>().unwrap(), c.keypoint);
        assert_eq!(cols[2].parse::<u64>().unwrap(), c.landmark_id);
        assert_eq!(cols[3].parse::<f64>().unwrap(), c.score);
        assert_eq!(cols[4].parse::<MatcherKind>().unwrap(), MatcherKind::Hamming);
    }
    assert_eq!(text.lines().count(), corrs.len() + 1);
}

fn map_descriptors(map: &SfMMap) -> Vec<(LandmarkId, Descriptor)> {
    map.landmarks()
        .iter()
        .flat_map(|l| l.observations.iter().map(move |&o| (l.landmark_id, map.keypoint(o).unwrap().descriptor.clone())))
        .collect()
}

fn naive_top<T: PartialOrd + Copy>(db: &[(LandmarkId, T)], k: usize) -> Vec<(LandmarkId, T)> {
    let mut best: BTreeMap<LandmarkId, T> = BTreeMap::new();
    for &(l, d) in db {
        let e = best.entry(l).or_insert(d);
        if d < *e {
            *e = d;
        }
    }
    let mut v: Vec<(LandmarkId, T)> = best.into_iter().collect();
    v.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    v.truncate(k);
    v
}

fn query_pool(map: &SfMMap, n: usize, seed: u64) -> Vec<Descriptor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let db = map_descriptors(map);
    (0..n)
        .map(|i| {
            if i % 2 == 0 {
                let words = (0..map.descriptor_bits().div_ceil(64)).map(|_| rng.random::<u64>()).collect();
                Descriptor::from_words(map.descriptor_bits(), words)
            } else {
                let (_, d) = &db[rng.random_range(0..db.len())];
                flip_bits(d, 0.1, rng.random())
            }
        })
        .collect()
}

#[test]
fn hamming_index_matches_naive_scan() {
    let map = &fixture().world.map;
    let index = HammingIndex::new(map);
    let db = map_descriptors(map);
    for q in query_pool(map, 10_000, 5) {
        let dists: Vec<(LandmarkId, u32)> = db.iter().map(|(l, d)| (*l, d.hamming(&q))).collect();
        assert_eq!(index.query(&q, 5).unwrap(), naive_top(&dists, 5));
    }
}

#[test]
fn hamming_exact_hit_and_tie_rule() {
    let map = &fixture().world.map;
    let index = HammingIndex::new(map);
    let lm = &map.landmarks()[17];
    let d = map.keypoint(lm.observations[0]).unwrap().descriptor.clone();
    let top = index.query(&d, 1).unwrap();
    assert_eq!(top[0].1, 0);
    let cam = fixture().world.camera();
    let mk = |d: Descriptor, id| ctxmatch::Keypoint {
        u: 10.0,
        v: 10.0,
        scale: 4.0,
        descriptor: d,
        landmark_id: Some(id),
    };
    let zero = Descriptor::from_words(64, vec![0]);
    let frame = ctxmatch::Frame {
        frame_id: 0,
        camera_id: cam.camera_id,
        pose: ctxmatch::Pose::identity(),
        gravity_in_camera: nalgebra::Vector3::y(),
        keypoints: vec![mk(Descriptor::from_words(64, vec![0b10]), 9), mk(Descriptor::from_words(64, vec![0b01]), 4)],
    };
    let tiny = SfMMap::from_parts(
        64,
        vec![cam],
        vec![frame],
        vec![(4, nalgebra::Vector3::zeros()), (9, nalgebra::Vector3::zeros())],
    )
    .unwrap();
    assert_eq!(HammingIndex::new(&tiny).query(&zero, 2).unwrap(), vec![(4, 1), (9, 1)]);
}

#[test]
fn projected_index_matches_linear_scan() {
    let map = &fixture().world.map;
    let index = ProjectedIndex::new(map, 11).unwrap();
    let db: Vec<(LandmarkId, _)> =
        map_descriptors(map).into_iter().map(|(l, d)| (l, index.projection().project(&d))).collect();
    for q in query_pool(map, 2000, 6) {
        let p = index.projection().project(&q);
        let dists: Vec<(LandmarkId, f64)> = db.iter().map(|(l, x)| (*l, (x - p).norm())).collect();
        assert_eq!(index.query(&q, 5).unwrap(), naive_top(&dists, 5));
    }
    let d = map.keypoint(map.landmarks()[3].observations[0]).unwrap().descriptor.clone();
    let top = index.query(&d, 1).unwrap();
    assert_eq!(top[0].1, 0.0);
}
