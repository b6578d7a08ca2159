//! Training samples, per-class sample sets and negative bootstrapping.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use rand::seq::index::sample as sample_indices;
use rand::Rng;

use crate::classes::{ClassId, ClassTable, BACKGROUND};
use crate::context::{FeatureExtractor, FeatureLayout, RegionBank};
use crate::error::{Error, Result};
use crate::map::{FrameId, LandmarkId, SfMMap};
use crate::vocabulary::Vocabulary;

/// One keypoint observation used for training. Features live in the owning
/// [`TrainingSet`]'s matrix, row `i` for sample `i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainingSample {
    pub class_id: ClassId,
    pub frame_id: FrameId,
    pub keypoint: usize,
    /// Visual word of the keypoint's own descriptor.
    pub word: u32,
}

/// Samples plus a dense column-major feature matrix.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub samples: Vec<TrainingSample>,
    features: Vec<f32>,
    pub dim: usize,
    pub classes: ClassTable,
    /// 3D position per class index (`None` for background).
    pub class_positions: Vec<Option<Vector3<f64>>>,
    pub layout: FeatureLayout,
    pub reference_scale: f64,
}

impl TrainingSet {
    /// Build from row vectors; used for hand-made and randomized instances.
    pub fn from_rows(rows: &[Vec<f32>], class_ids: &[ClassId], num_landmark_classes: usize) -> Result<Self> {
        if rows.len() != class_ids.len() {
            return Err(Error::LengthMismatch {
                expected: rows.len(),
                actual: class_ids.len(),
            });
        }
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: bad.len(),
            });
        }
        if let Some(&c) = class_ids.iter().find(|&&c| c as usize > num_landmark_classes) {
            return Err(Error::InvalidConfig(format!("class {c} outside the class table")));
        }
        let n = rows.len();
        let mut features = vec![0.0; n * dim];
        for (i, row) in rows.iter().enumerate() {
            for (f, &v) in row.iter().enumerate() {
                features[f * n + i] = v;
            }
        }
        let samples = class_ids
            .iter()
            .enumerate()
            .map(|(i, &class_id)| TrainingSample {
                class_id,
                frame_id: 0,
                keypoint: i,
                word: 0,
            })
            .collect();
        Ok(Self {
            samples,
            features,
            dim,
            classes: ClassTable::new((0..num_landmark_classes as LandmarkId).collect()),
            class_positions: vec![None; num_landmark_classes + 1],
            layout: FeatureLayout {
                n_regions: 0,
                words: 0,
                descriptor_bits: dim,
                use_context: false,
                use_descriptor: true,
            },
            reference_scale: 1.0,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.num_classes()
    }

    /// Values of feature `f` for every sample.
    pub fn column(&self, f: usize) -> &[f32] {
        let n = self.len();
        &self.features[f * n..(f + 1) * n]
    }

    pub fn value(&self, sample: usize, f: usize) -> f32 {
        self.features[f * self.len() + sample]
    }

    pub fn features_of(&self, sample: usize) -> Vec<f32> {
        (0..self.dim).map(|f| self.value(sample, f)).collect()
    }

    /// Whether two classes are landmarks closer than `radius` meters.
    pub fn classes_near(&self, a: ClassId, b: ClassId, radius: f64) -> bool {
        match (&self.class_positions[a as usize], &self.class_positions[b as usize]) {
            (Some(pa), Some(pb)) => (pa - pb).norm() <= radius,
            _ => false,
        }
    }

    pub fn max_word(&self) -> u32 {
        self.samples.iter().map(|s| s.word).max().unwrap_or(0)
    }
}

/// Top `landmark_budget` landmarks by observation count become classes `1..=K`
/// (ties by landmark id); untracked keypoints become background samples,
/// subsampled to `background_cap`.
#[allow(clippy::too_many_arguments)]
pub fn build_training_set(
    map: &SfMMap,
    bank: &RegionBank,
    vocab: &Vocabulary,
    landmark_budget: usize,
    background_cap: usize,
    use_context: bool,
    use_descriptor: bool,
    rng: &mut impl Rng,
) -> Result<TrainingSet> {
    if vocab.bits() != map.descriptor_bits() && map.keypoint_count() > 0 {
        return Err(Error::DimensionMismatch {
            expected: vocab.bits(),
            actual: map.descriptor_bits(),
        });
    }
    let mut ranked: Vec<(usize, LandmarkId)> = map
        .landmarks()
        .iter()
        .map(|l| (l.observations.len(), l.landmark_id))
        .collect();
    ranked.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    if landmark_budget > ranked.len() {
        log::warn!(
            "landmark budget {landmark_budget} exceeds the {} mapped landmarks; using all",
            ranked.len()
        );
    }
    ranked.truncate(landmark_budget);
    let classes = ClassTable::new(ranked.iter().map(|r| r.1).collect());
    let mut class_positions = vec![None; classes.num_classes()];
    for (idx, &lid) in classes.landmarks().iter().enumerate() {
        class_positions[idx + 1] = map.landmark(lid).map(|l| l.position);
    }

    // (frame position, keypoint, class)
    let mut picked: Vec<(usize, usize, ClassId)> = Vec::new();
    let mut background: Vec<(usize, usize)> = Vec::new();
    for (fi, frame) in map.frames().iter().enumerate() {
        for (ki, kp) in frame.keypoints.iter().enumerate() {
            match kp.landmark_id {
                None => background.push((fi, ki)),
                Some(lid) => {
                    if let Some(c) = classes.class_of(lid) {
                        picked.push((fi, ki, c));
                    }
                }
            }
        }
    }
    if background.len() > background_cap {
        let mut keep: Vec<usize> = sample_indices(rng, background.len(), background_cap).into_vec();
        keep.sort_unstable();
        background = keep.into_iter().map(|i| background[i]).collect();
    }
    picked.extend(background.into_iter().map(|(f, k)| (f, k, BACKGROUND)));
    picked.sort_unstable();

    let extractor = FeatureExtractor::new(bank, vocab, map.median_keypoint_scale(), use_context, use_descriptor);
    let dim = extractor.dim();
    let n = picked.len();
    let mut features = vec![0.0f32; n * dim];
    let mut samples = Vec::with_capacity(n);
    let mut row = vec![0.0f32; dim];
    let mut by_frame: BTreeMap<usize, Vec<(usize, usize, ClassId)>> = BTreeMap::new();
    for (i, &(fi, ki, c)) in picked.iter().enumerate() {
        by_frame.entry(fi).or_default().push((i, ki, c));
    }
    samples.resize(
        n,
        TrainingSample {
            class_id: 0,
            frame_id: 0,
            keypoint: 0,
            word: 0,
        },
    );
    for (fi, entries) in by_frame {
        let frame = &map.frames()[fi];
        let index = extractor.index(frame, map.camera_of(frame));
        for (i, ki, c) in entries {
            extractor.write_features(frame, &index, ki, &mut row);
            for (f, &v) in row.iter().enumerate() {
                features[f * n + i] = v;
            }
            samples[i] = TrainingSample {
                class_id: c,
                frame_id: frame.frame_id,
                keypoint: ki,
                word: index.words[ki],
            };
        }
    }
    Ok(TrainingSet {
        samples,
        features,
        dim,
        classes,
        class_positions,
        layout: extractor.layout,
        reference_scale: extractor.reference_scale,
    })
}

/// Per-class positive and negative index sets plus the held-out samples.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SampleSets {
    pub positives: Vec<Vec<u32>>,
    pub negatives: Vec<Vec<u32>>,
    pub heldout: Vec<u32>,
}

impl SampleSets {
    pub fn num_classes(&self) -> usize {
        self.positives.len()
    }

    pub fn pair_count(&self) -> usize {
        self.positives.iter().chain(&self.negatives).map(Vec::len).sum()
    }
}

/// Per class, `round(fraction · n)` samples are held out, never leaving fewer than 2.
pub fn split_heldout(set: &TrainingSet, fraction: f64, rng: &mut impl Rng) -> (Vec<Vec<u32>>, Vec<u32>) {
    let mut by_class: Vec<Vec<u32>> = vec![Vec::new(); set.num_classes()];
    for (i, s) in set.samples.iter().enumerate() {
        by_class[s.class_id as usize].push(i as u32);
    }
    let mut heldout = Vec::new();
    for members in &mut by_class {
        let n = members.len();
        let hold = ((fraction * n as f64).round() as usize).min(n.saturating_sub(2));
        if hold == 0 {
            continue;
        }
        let mut pick: Vec<usize> = sample_indices(rng, n, hold).into_vec();
        pick.sort_unstable();
        for &p in pick.iter().rev() {
            heldout.push(members.remove(p));
        }
    }
    heldout.sort_unstable();
    (by_class, heldout)
}

/// Negatives for one class: `bootstrapped` share a visual word with the class's
/// positives; `top_up` are uniform random fill.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Bootstrap {
    pub bootstrapped: Vec<u32>,
    pub top_up: Vec<u32>,
}

impl Bootstrap {
    pub fn all(&self) -> Vec<u32> {
        let mut v: Vec<u32> = self.bootstrapped.iter().chain(&self.top_up).copied().collect();
        v.sort_unstable();
        v
    }
}

/// Draws negatives for class `c` from `pool` (candidate sample indices, typically
/// the training split). Samples of `c` itself and of landmarks within
/// `exclusion_radius` of `c` are never chosen.
pub fn bootstrap_negatives(
    set: &TrainingSet,
    c: ClassId,
    positives: &[u32],
    pool: &[u32],
    exclusion_radius: f64,
    target: usize,
    rng: &mut impl Rng,
) -> Bootstrap {
    let mut words = vec![false; set.max_word() as usize + 1];
    for &p in positives {
        words[set.samples[p as usize].word as usize] = true;
    }
    let mut same_word = Vec::new();
    let mut other = Vec::new();
    for &i in pool {
        let s = &set.samples[i as usize];
        if s.class_id == c || set.classes_near(s.class_id, c, exclusion_radius) {
            continue;
        }
        if words[s.word as usize] {
            same_word.push(i);
        } else {
            other.push(i);
        }
    }
    if same_word.len() > target {
        let mut keep: Vec<u32> = sample_indices(rng, same_word.len(), target)
            .into_iter()
            .map(|k| same_word[k])
            .collect();
        keep.sort_unstable();
        return Bootstrap {
            bootstrapped: keep,
            top_up: Vec::new(),
        };
    }
    let need = (target - same_word.len()).min(other.len());
    let mut top_up: Vec<u32> = sample_indices(rng, other.len(), need)
        .into_iter()
        .map(|k| other[k])
        .collect();
    top_up.sort_unstable();
    Bootstrap {
        bootstrapped: same_word,
        top_up,
    }
}

/// Held-out split followed by bootstrapped negatives for every class with positives.
pub fn build_sample_sets(
    set: &TrainingSet,
    heldout_fraction: f64,
    negatives_per_positive: usize,
    max_negatives: usize,
    exclusion_radius: f64,
    rng: &mut impl Rng,
) -> SampleSets {
    let (positives, heldout) = split_heldout(set, heldout_fraction, rng);
    let mut in_train = vec![true; set.len()];
    for &h in &heldout {
        in_train[h as usize] = false;
    }
    let pool: Vec<u32> = (0..set.len() as u32).filter(|&i| in_train[i as usize]).collect();
    let negatives = positives
        .iter()
        .enumerate()
        .map(|(c, pos)| {
            if pos.is_empty() {
                return Vec::new();
            }
            let target = (negatives_per_positive * pos.len()).min(max_negatives);
            bootstrap_negatives(set, c as ClassId, pos, &pool, exclusion_radius, target, rng).all()
        })
        .collect();
    SampleSets {
        positives,
        negatives,
        heldout,
    }
}
