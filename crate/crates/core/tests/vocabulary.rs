use std::collections::BTreeSet;

use ctxmatch::boosting::{bootstrap_negatives, build_training_set, split_heldout};
use ctxmatch::context::{build_feature_vector, generate_regions, RegionConfig};
use ctxmatch::synth::{descriptor_pool, generate_world, WorldConfig};
use ctxmatch::vocabulary::{build_inverted_file, candidate_classes, train_vocabulary, Vocabulary};
use ctxmatch::{ClassId, Descriptor, BACKGROUND};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_world() -> WorldConfig {
    WorldConfig {
        landmark_count: 160,
        train_frames: 30,
        eval_frames: 4,
        ..Default::default()
    }
}

#[test]
fn single_cluster_centroid_is_bitwise_majority() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let descs: Vec<Descriptor> = (0..41)
        .map(|_| Descriptor::from_bits(&(0..96).map(|_| rng.random_bool(0.3)).collect::<Vec<_>>()))
        .collect();
    let v = train_vocabulary(&descs, 1, 0, 10).unwrap();
    for i in 0..96 {
        let ones = descs.iter().filter(|d| d.get(i)).count();
        assert_eq!(v.centroids()[0].get(i), ones * 2 > descs.len(), "bit {i}");
    }
    assert!(descs.iter().all(|d| v.quantize(d).unwrap() == 0));
}

#[test]
fn quantizer_matches_exhaustive_scan() {
    let cfg = WorldConfig::default();
    let pool = descriptor_pool(&cfg, 3000, 4);
    let v = train_vocabulary(&pool, 32, 2, 20).unwrap();
    for d in descriptor_pool(&cfg, 2000, 5) {
        let brute = (0..v.k()).min_by_key(|&w| (d.hamming(&v.centroids()[w]), w)).unwrap();
        assert_eq!(v.quantize(&d).unwrap(), brute);
    }
}

#[test]
fn inverted_file_buckets_cover_every_class() {
    let w = generate_world(&small_world()).unwrap();
    let v = train_vocabulary(&descriptor_pool(&w.config, 2000, 9), 16, 0, 20).unwrap();
    let set = build_training_set(
        &w.map,
        &generate_regions(&RegionConfig {
            n_regions: 5,
            ..Default::default()
        })
        .unwrap(),
        &v,
        usize::MAX,
        usize::MAX,
        false,
        true,
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
    let inv = build_inverted_file(&w.map, &v, &set.classes);
    let union: BTreeSet<ClassId> = (0..inv.num_words()).flat_map(|b| inv.bucket(b).iter().copied()).collect();
    let all: BTreeSet<ClassId> = (1..set.num_classes() as ClassId).collect();
    assert_eq!(union, all);

    // Every positive sample finds its own class among the candidates.
    for (i, s) in set.samples.iter().enumerate() {
        if s.class_id == BACKGROUND {
            continue;
        }
        let frame = w.map.frame(s.frame_id).unwrap();
        let cands = candidate_classes(&frame.keypoints[s.keypoint].descriptor, &v, &inv);
        assert_eq!(cands[0], BACKGROUND);
        assert!(cands.contains(&s.class_id), "sample {i}");
    }
}

#[test]
fn training_features_match_direct_recompute() {
    let w = generate_world(&small_world()).unwrap();
    let v = train_vocabulary(&descriptor_pool(&w.config, 2000, 9), 8, 0, 20).unwrap();
    let bank = generate_regions(&RegionConfig {
        n_regions: 20,
        seed: 3,
        ..Default::default()
    })
    .unwrap();
    let set = build_training_set(&w.map, &bank, &v, 50, 100, true, true, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(set.num_classes(), 51);
    for i in (0..set.len()).step_by(7) {
        let s = &set.samples[i];
        let frame = w.map.frame(s.frame_id).unwrap();
        let direct = build_feature_vector(frame, s.keypoint, &w.camera(), &bank, &v, set.reference_scale);
        assert_eq!(set.features_of(i), direct);
    }
}

#[test]
fn landmark_budget_keeps_most_observed() {
    let w = generate_world(&small_world()).unwrap();
    let v = train_vocabulary(&descriptor_pool(&w.config, 1000, 9), 4, 0, 10).unwrap();
    let bank = generate_regions(&RegionConfig {
        n_regions: 2,
        ..Default::default()
    })
    .unwrap();
    let set = build_training_set(&w.map, &bank, &v, 10, 0, false, true, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut counts: Vec<usize> = w.map.landmarks().iter().map(|l| l.observations.len()).collect();
    counts.sort_unstable_by(|a, b| b.cmp(a));
    let expected: usize = counts[..10].iter().sum();
    assert_eq!(set.len(), expected);
    assert!(set.samples.iter().all(|s| s.class_id != BACKGROUND));
}

#[test]
fn bootstrap_matches_brute_force_filter() {
    let w = generate_world(&small_world()).unwrap();
    let v = train_vocabulary(&descriptor_pool(&w.config, 2000, 9), 16, 0, 20).unwrap();
    let bank = generate_regions(&RegionConfig {
        n_regions: 2,
        ..Default::default()
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let set = build_training_set(&w.map, &bank, &v, usize::MAX, 200, false, true, &mut rng).unwrap();
    let (positives, heldout) = split_heldout(&set, 0.1, &mut rng);
    let held: BTreeSet<u32> = heldout.iter().copied().collect();
    let pool: Vec<u32> = (0..set.len() as u32).filter(|i| !held.contains(i)).collect();
    for c in (1..set.num_classes()).step_by(9) {
        let pos = &positives[c];
        let words: BTreeSet<u32> = pos.iter().map(|&p| set.samples[p as usize].word).collect();
        let expected: Vec<u32> = pool
            .iter()
            .copied()
            .filter(|&i| {
                let s = &set.samples[i as usize];
                s.class_id as usize != c
                    && words.contains(&s.word)
                    && !set.classes_near(s.class_id, c as ClassId, 0.5)
            })
            .collect();
        let b = bootstrap_negatives(&set, c as ClassId, pos, &pool, 0.5, usize::MAX / 2, &mut rng);
        assert_eq!(b.bootstrapped, expected, "class {c}");
        for &i in &b.all() {
            let s = &set.samples[i as usize];
            assert!(s.class_id as usize != c && !set.classes_near(s.class_id, c as ClassId, 0.5));
        }
    }
}

#[test]
fn disjoint_words_give_only_random_top_up() {
    use ctxmatch::boosting::TrainingSet;
    let rows: Vec<Vec<f32>> = (0..8).map(|i| vec![i as f32]).collect();
    let mut set = TrainingSet::from_rows(&rows, &[1, 1, 1, 1, 2, 2, 2, 2], 2).unwrap();
    for (i, s) in set.samples.iter_mut().enumerate() {
        s.word = if i < 4 { 0 } else { 1 };
    }
    let pool: Vec<u32> = (0..8).collect();
    let b = bootstrap_negatives(&set, 1, &[0, 1, 2, 3], &pool, 0.5, 3, &mut ChaCha8Rng::seed_from_u64(0));
    assert!(b.bootstrapped.is_empty());
    assert_eq!(b.top_up.len(), 3);
    assert!(b.top_up.iter().all(|&i| i >= 4));
}

#[test]
fn vocabulary_file_round_trip() {
    let cfg = WorldConfig::default();
    let v = train_vocabulary(&descriptor_pool(&cfg, 500, 1), 8, 42, 10).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("v.txt");
    v.save(&p).unwrap();
    let back = Vocabulary::load(&p).unwrap();
    assert_eq!(back.centroids(), v.centroids());
    assert_eq!((back.k(), back.bits(), back.seed()), (8, 384, 42));
}
