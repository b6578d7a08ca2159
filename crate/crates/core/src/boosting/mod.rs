//! Multi-class boosting with shared decision stumps and per-class negative sets.

mod data;
mod stump;
mod train;

pub use data::{
    bootstrap_negatives, build_sample_sets, build_training_set, split_heldout, Bootstrap, SampleSets,
    TrainingSample, TrainingSet,
};
pub use stump::{
    candidate_thresholds, exhaustive_search, feature_bins, fit_class_constant, fit_stump, greedy_search,
    incremental_update_b, init_sharing_set, prefix_search, search_feature, ClassPairs, FeatureBins,
    FeatureChoice, RunningMean, SetChoice, SideStats, StumpFit, SweepScratch, TrainerState, WeakLearner,
};
pub use train::{
    boost_round, mine_hard_negatives, run_boosting, update_weights, weighted_loss, BinCache, RoundLog,
    ScoreTracker,
};

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classes::{fnv1a, ClassId, ClassTable};
use crate::context::{FeatureExtractor, FeatureLayout, RegionBank};
use crate::error::{Error, Result};
use crate::map::{write_map, SfMMap};
use crate::vocabulary::Vocabulary;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoostConfig {
    pub rounds: usize,
    /// Features sampled per round.
    pub candidate_features: usize,
    pub max_thresholds: usize,
    /// Sharing sets are searched exhaustively when at most this many classes are eligible.
    pub exhaustive_max: usize,
    pub landmark_budget: usize,
    pub background_cap: usize,
    pub negatives_per_positive: usize,
    pub max_negatives: usize,
    pub exclusion_radius: f64,
    pub mining_period: usize,
    pub mining_growth: f64,
    pub heldout_fraction: f64,
    pub use_context: bool,
    pub use_descriptor: bool,
    pub seed: u64,
}

impl Default for BoostConfig {
    fn default() -> Self {
        Self {
            rounds: 500,
            candidate_features: 500,
            max_thresholds: 64,
            exhaustive_max: 8,
            landmark_budget: 7500,
            background_cap: 5000,
            negatives_per_positive: 10,
            max_negatives: 500,
            exclusion_radius: 0.5,
            mining_period: 100,
            mining_growth: 0.25,
            heldout_fraction: 0.1,
            use_context: true,
            use_descriptor: true,
            seed: 0,
        }
    }
}

impl BoostConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.heldout_fraction) {
            return Err(Error::InvalidConfig("heldout_fraction must lie in [0, 1)".into()));
        }
        if self.mining_growth < 0.0 || self.exclusion_radius < 0.0 {
            return Err(Error::InvalidConfig("mining_growth and exclusion_radius must be non-negative".into()));
        }
        if !(1..=255).contains(&self.max_thresholds) {
            return Err(Error::InvalidConfig("max_thresholds must lie in 1..=255".into()));
        }
        if self.exhaustive_max > 16 {
            return Err(Error::InvalidConfig("exhaustive_max above 16 is impractical".into()));
        }
        if !self.use_context && !self.use_descriptor {
            return Err(Error::InvalidConfig("at least one feature family must be enabled".into()));
        }
        Ok(())
    }
}

/// The learners alone, with a per-class index for fast scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "ClassifierRepr", into = "ClassifierRepr")]
pub struct Classifier {
    learners: Vec<WeakLearner>,
    num_classes: usize,
    /// Σ_m k_m[c] in learner order.
    constants: Vec<f64>,
    /// Learners whose sharing set contains the class, in learner order.
    class_learners: Vec<Vec<u32>>,
}

#[derive(Serialize, Deserialize)]
struct ClassifierRepr {
    num_classes: usize,
    learners: Vec<WeakLearner>,
}

impl From<ClassifierRepr> for Classifier {
    fn from(r: ClassifierRepr) -> Self {
        Classifier::new(r.learners, r.num_classes)
    }
}

impl From<Classifier> for ClassifierRepr {
    fn from(c: Classifier) -> Self {
        ClassifierRepr {
            num_classes: c.num_classes,
            learners: c.learners,
        }
    }
}

impl Classifier {
    pub fn new(learners: Vec<WeakLearner>, num_classes: usize) -> Self {
        let mut constants = vec![0.0; num_classes];
        let mut class_learners = vec![Vec::new(); num_classes];
        for (m, l) in learners.iter().enumerate() {
            for (k, &lk) in constants.iter_mut().zip(&l.k) {
                *k += lk;
            }
            for &c in &l.sharing {
                class_learners[c as usize].push(m as u32);
            }
        }
        Self {
            learners,
            num_classes,
            constants,
            class_learners,
        }
    }

    pub fn learners(&self) -> &[WeakLearner] {
        &self.learners
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn max_feature(&self) -> Option<usize> {
        self.learners.iter().map(|l| l.feature).max()
    }

    /// `H(v, c)`. Every evaluation path sums the same terms in the same order,
    /// so restricted and full scoring agree bit for bit.
    pub fn score(&self, v: &[f32], c: ClassId) -> f64 {
        let mut s = self.constants[c as usize];
        for &m in &self.class_learners[c as usize] {
            let l = &self.learners[m as usize];
            s += l.stump(v[l.feature]);
        }
        s
    }

    pub fn scores(&self, v: &[f32]) -> Vec<f64> {
        (0..self.num_classes as ClassId).map(|c| self.score(v, c)).collect()
    }
}

/// Per-round training log as CSV.
pub fn write_training_log(log: &[RoundLog], out: &mut impl Write) -> Result<()> {
    writeln!(out, "round,J,heldout_precision_at_1,sharing_set_size,chosen_feature_kind")?;
    for r in log {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.round,
            r.cost,
            r.heldout_precision_at_1,
            r.sharing_set_size,
            if r.context_feature { "context" } else { "descriptor" }
        )?;
    }
    Ok(())
}

pub fn save_training_log(log: &[RoundLog], path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_training_log(log, &mut out)?;
    out.flush()?;
    Ok(())
}

/// A trained classifier with everything needed to compute its features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostedModel {
    pub classifier: Classifier,
    pub classes: ClassTable,
    pub regions: RegionBank,
    pub vocabulary: Vocabulary,
    pub reference_scale: f64,
    pub layout: FeatureLayout,
    pub config: BoostConfig,
    pub seed: u64,
    /// Hash of the training map, vocabulary and regions.
    pub fingerprint: u64,
}

impl BoostedModel {
    pub fn extractor(&self) -> FeatureExtractor<'_> {
        FeatureExtractor::new(
            &self.regions,
            &self.vocabulary,
            self.reference_scale,
            self.layout.use_context,
            self.layout.use_descriptor,
        )
    }

    pub fn num_classes(&self) -> usize {
        self.classes.num_classes()
    }

    pub fn score(&self, v: &[f32], c: ClassId) -> f64 {
        self.classifier.score(v, c)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut out, self)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let model: Self = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let dim = self.layout.dim();
        if self.layout != self.extractor().layout {
            return Err(Error::InvalidConfig("model layout disagrees with its regions or vocabulary".into()));
        }
        if self.classifier.num_classes() != self.num_classes() {
            return Err(Error::LengthMismatch {
                expected: self.num_classes(),
                actual: self.classifier.num_classes(),
            });
        }
        for l in self.classifier.learners() {
            if l.feature >= dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: l.feature,
                });
            }
            if l.k.len() != self.num_classes() || l.sharing.is_empty() {
                return Err(Error::InvalidConfig("malformed learner".into()));
            }
            if l.sharing.iter().any(|&c| c as usize >= self.num_classes()) {
                return Err(Error::InvalidConfig("sharing set references an unknown class".into()));
            }
        }
        Ok(())
    }
}

/// Hash of the inputs a model was trained from.
pub fn training_fingerprint(map: &SfMMap, vocab: &Vocabulary, regions: &RegionBank) -> Result<u64> {
    let mut bytes = Vec::new();
    write_map(map, &mut bytes)?;
    bytes.extend(vocab.fingerprint().to_le_bytes());
    bytes.extend(regions.to_text().into_bytes());
    Ok(fnv1a(bytes))
}

/// Everything produced by [`train_model`].
#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub model: BoostedModel,
    pub log: Vec<RoundLog>,
    pub sets: SampleSets,
}

/// Full pipeline: samples → sets → boosting. Deterministic for a given config.
pub fn train_model(
    map: &SfMMap,
    regions: &RegionBank,
    vocab: &Vocabulary,
    config: &BoostConfig,
) -> Result<TrainingOutcome> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let set = build_training_set(
        map,
        regions,
        vocab,
        config.landmark_budget,
        config.background_cap,
        config.use_context,
        config.use_descriptor,
        &mut rng,
    )?;
    let (model, log, sets) = train(config, &set, regions, vocab, &mut rng)?;
    let model = BoostedModel {
        fingerprint: training_fingerprint(map, vocab, regions)?,
        ..model
    };
    Ok(TrainingOutcome { model, log, sets })
}

/// Builds sample sets for `set` and boosts. The returned model has a zero fingerprint.
pub fn train(
    config: &BoostConfig,
    set: &TrainingSet,
    regions: &RegionBank,
    vocab: &Vocabulary,
    rng: &mut ChaCha8Rng,
) -> Result<(BoostedModel, Vec<RoundLog>, SampleSets)> {
    config.validate()?;
    let mut sets = build_sample_sets(
        set,
        config.heldout_fraction,
        config.negatives_per_positive,
        config.max_negatives,
        config.exclusion_radius,
        rng,
    );
    let (learners, log) = run_boosting(set, &mut sets, config, rng);
    let model = BoostedModel {
        classifier: Classifier::new(learners, set.num_classes()),
        classes: set.classes.clone(),
        regions: regions.clone(),
        vocabulary: vocab.clone(),
        reference_scale: set.reference_scale,
        layout: set.layout,
        config: config.clone(),
        seed: config.seed,
        fingerprint: 0,
    };
    Ok((model, log, sets))
}
