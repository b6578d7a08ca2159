//! The boosting loop: rounds, weight updates, hard-negative mining and logging.

use rand::seq::index::sample as sample_indices;
use rand::Rng;

use super::data::{SampleSets, TrainingSet};
use super::stump::{
    fit_class_constant, fit_stump, search_feature, FeatureBins, SweepScratch, TrainerState, WeakLearner,
};
use super::BoostConfig;
use crate::classes::ClassId;

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundLog {
    /// Number of learners fitted so far (1-based).
    pub round: usize,
    /// Cumulative training cost: geometric mean over classes of the product of the
    /// per-round weight normalizers.
    pub cost: f64,
    /// This round's `Σ_c ln Z_c / K` before clamping; non-positive up to rounding.
    pub log_step: f64,
    /// Weighted squared error of this round's learner on the normalized weights.
    pub round_loss: f64,
    /// The same error for the all-zero learner.
    pub zero_loss: f64,
    pub heldout_precision_at_1: f64,
    pub sharing_set_size: usize,
    pub context_feature: bool,
}

/// Lazily computed per-feature thresholds and bins.
#[derive(Debug)]
pub struct BinCache {
    support: Vec<u32>,
    cap: usize,
    bins: Vec<Option<FeatureBins>>,
}

impl BinCache {
    /// Thresholds come from the values of the `support` samples only.
    pub fn new(dim: usize, support: Vec<u32>, cap: usize) -> Self {
        Self {
            support,
            cap,
            bins: vec![None; dim],
        }
    }

    pub fn get(&mut self, set: &TrainingSet, f: usize) -> &FeatureBins {
        let (support, cap) = (&self.support, self.cap);
        self.bins[f].get_or_insert_with(|| super::stump::feature_bins(set.column(f), support, cap))
    }
}

/// Picks the learner minimizing the weighted squared error over `features`
/// (ascending order; ties keep the earliest feature and threshold).
pub fn boost_round(
    set: &TrainingSet,
    state: &TrainerState,
    features: &[usize],
    cache: &mut BinCache,
    exhaustive_max: usize,
    scratch: &mut SweepScratch,
) -> WeakLearner {
    let mut best: Option<(usize, f32, f64, Vec<ClassId>)> = None;
    for &f in features {
        let bins = cache.get(set, f);
        if let Some(fc) = search_feature(state, bins, exhaustive_max, scratch) {
            if best.as_ref().is_none_or(|b| fc.choice.gain > b.2) {
                best = Some((f, bins.thresholds[fc.threshold_index], fc.choice.gain, fc.choice.sharing));
            }
        }
    }
    let (feature, threshold, sharing) = match best {
        Some((f, t, _, s)) => (f, t, s),
        None => {
            // No split helps any class: a stump equivalent to a class constant.
            let c = state.pairs.iter().position(|p| !p.is_empty()).unwrap_or(0) as ClassId;
            let f = features.first().copied().unwrap_or(0);
            let t = cache.get(set, f).thresholds.first().copied().unwrap_or(f32::MAX);
            (f, t, vec![c])
        }
    };
    let fit = fit_stump(set, state, feature, threshold, &sharing);
    let k = (0..state.num_classes() as ClassId)
        .map(|c| {
            if sharing.binary_search(&c).is_ok() {
                0.0
            } else {
                fit_class_constant(state, c)
            }
        })
        .collect();
    WeakLearner {
        feature,
        threshold,
        a: fit.a,
        b: fit.b,
        sharing,
        k,
    }
}

/// Weighted squared error `Σ_c Σ_i w (z − h)²` of a learner on the current weights.
pub fn weighted_loss(set: &TrainingSet, state: &TrainerState, learner: &WeakLearner) -> f64 {
    let col = set.column(learner.feature);
    let mut loss = 0.0;
    for (c, p) in state.pairs.iter().enumerate() {
        let shared = learner.shares(c as ClassId);
        for ((&i, &z), &w) in p.samples.iter().zip(&p.z).zip(&p.w) {
            let h = if shared {
                learner.stump(col[i as usize])
            } else {
                learner.k[c]
            };
            loss += w * (z - h) * (z - h);
        }
    }
    loss
}

/// `w ← w·exp(−z·h)` then per-class renormalization. Returns each class's
/// normalizer (the weight sum before renormalizing; 1 for inactive classes).
pub fn update_weights(set: &TrainingSet, state: &mut TrainerState, learner: &WeakLearner) -> Vec<f64> {
    let col = set.column(learner.feature);
    let mut normalizers = vec![1.0; state.num_classes()];
    for (c, p) in state.pairs.iter_mut().enumerate() {
        if p.is_empty() {
            continue;
        }
        let shared = learner.shares(c as ClassId);
        for ((&i, &z), w) in p.samples.iter().zip(&p.z).zip(p.w.iter_mut()) {
            let h = if shared {
                learner.stump(col[i as usize])
            } else {
                learner.k[c]
            };
            *w *= (-z * h).exp();
        }
        normalizers[c] = p.weight_sum();
        p.normalize();
    }
    state.round += 1;
    normalizers
}

/// Per-class score vectors over a fixed set of samples, updated one learner at a time.
/// Scores are `K[c] + S[c][j]`, splitting the class constants from the stump part so
/// a round touches only the sharing-set rows.
#[derive(Debug, Clone)]
pub struct ScoreTracker {
    samples: Vec<u32>,
    constants: Vec<f64>,
    shared: Vec<Option<Vec<f64>>>,
}

impl ScoreTracker {
    pub fn new(samples: Vec<u32>, num_classes: usize) -> Self {
        Self {
            samples,
            constants: vec![0.0; num_classes],
            shared: vec![None; num_classes],
        }
    }

    pub fn add(&mut self, set: &TrainingSet, learner: &WeakLearner) {
        for (k, &lk) in self.constants.iter_mut().zip(&learner.k) {
            *k += lk;
        }
        let col = set.column(learner.feature);
        for &c in &learner.sharing {
            let row = self.shared[c as usize].get_or_insert_with(|| vec![0.0; self.samples.len()]);
            for (r, &i) in row.iter_mut().zip(&self.samples) {
                *r += learner.stump(col[i as usize]);
            }
        }
    }

    pub fn score(&self, j: usize, c: ClassId) -> f64 {
        self.constants[c as usize] + self.shared[c as usize].as_ref().map_or(0.0, |r| r[j])
    }

    /// Fraction of samples whose top-scoring class (ties to the lowest index) is their own.
    pub fn precision_at_1(&self, set: &TrainingSet) -> f64 {
        if self.samples.is_empty() {
            return f64::NAN;
        }
        let mut best = vec![(f64::NEG_INFINITY, 0 as ClassId); self.samples.len()];
        for c in 0..self.constants.len() {
            let k = self.constants[c];
            match &self.shared[c] {
                Some(row) => {
                    for (b, &r) in best.iter_mut().zip(row) {
                        if k + r > b.0 {
                            *b = (k + r, c as ClassId);
                        }
                    }
                }
                None => {
                    for b in best.iter_mut() {
                        if k > b.0 {
                            *b = (k, c as ClassId);
                        }
                    }
                }
            }
        }
        let hits = best
            .iter()
            .zip(&self.samples)
            .filter(|(b, &i)| b.1 == set.samples[i as usize].class_id)
            .count();
        hits as f64 / self.samples.len() as f64
    }
}

/// Adds, per class, the training samples the current model scores above zero for
/// that class but which are not yet active pairs. At most
/// `max(1, ⌊growth · |negatives|⌋)` per class, highest scores first. New pairs start at
/// the class's mean negative weight. Returns the number of pairs added.
#[allow(clippy::too_many_arguments)]
pub fn mine_hard_negatives(
    set: &TrainingSet,
    state: &mut TrainerState,
    sets: &mut SampleSets,
    learners: &[WeakLearner],
    pool: &[u32],
    growth: f64,
    exclusion_radius: f64,
) -> usize {
    let nc = state.num_classes();
    let mut constants = vec![0.0; nc];
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); nc];
    for (m, l) in learners.iter().enumerate() {
        for (k, &lk) in constants.iter_mut().zip(&l.k) {
            *k += lk;
        }
        for &c in &l.sharing {
            by_class[c as usize].push(m);
        }
    }
    let n = set.len();
    let mut scores = vec![0.0f64; n];
    let mut active = vec![false; n];
    let mut added = 0;
    for c in 0..nc {
        if state.pairs[c].is_empty() {
            continue;
        }
        scores.iter_mut().for_each(|s| *s = constants[c]);
        for &m in &by_class[c] {
            let l = &learners[m];
            let col = set.column(l.feature);
            for (s, &v) in scores.iter_mut().zip(col) {
                *s += l.stump(v);
            }
        }
        for &i in &state.pairs[c].samples {
            active[i as usize] = true;
        }
        let mut offenders: Vec<(f64, u32)> = pool
            .iter()
            .filter(|&&i| {
                let s = &set.samples[i as usize];
                !active[i as usize]
                    && s.class_id as usize != c
                    && scores[i as usize] > 0.0
                    && !set.classes_near(s.class_id, c as ClassId, exclusion_radius)
            })
            .map(|&i| (scores[i as usize], i))
            .collect();
        for &i in &state.pairs[c].samples {
            active[i as usize] = false;
        }
        if offenders.is_empty() {
            continue;
        }
        offenders.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
        let n_neg = sets.negatives[c].len();
        let cap = ((growth * n_neg as f64).floor() as usize).max(1);
        offenders.truncate(cap);

        let p = &mut state.pairs[c];
        let neg_w: Vec<f64> = p.w.iter().zip(&p.z).filter(|(_, &z)| z < 0.0).map(|(&w, _)| w).collect();
        let init = if neg_w.is_empty() {
            1.0 / p.len() as f64
        } else {
            neg_w.iter().sum::<f64>() / neg_w.len() as f64
        };
        for &(_, i) in &offenders {
            p.push(i, -1.0, init);
            sets.negatives[c].push(i);
        }
        sets.negatives[c].sort_unstable();
        p.normalize();
        added += offenders.len();
    }
    added
}

/// Runs `config.rounds` boosting rounds. Returns the learners and the per-round log;
/// `sets` receives mined negatives.
pub fn run_boosting(
    set: &TrainingSet,
    sets: &mut SampleSets,
    config: &BoostConfig,
    rng: &mut impl Rng,
) -> (Vec<WeakLearner>, Vec<RoundLog>) {
    let mut state = TrainerState::new(sets);
    let mut in_train = vec![true; set.len()];
    for &h in &sets.heldout {
        in_train[h as usize] = false;
    }
    let pool: Vec<u32> = (0..set.len() as u32).filter(|&i| in_train[i as usize]).collect();
    let mut cache = BinCache::new(set.dim, pool.clone(), config.max_thresholds);
    let mut scratch = SweepScratch::default();
    let mut heldout = ScoreTracker::new(sets.heldout.clone(), set.num_classes());
    let active = state.active_classes().max(1) as f64;
    let mut log_cost = 0.0f64;
    let mut learners = Vec::with_capacity(config.rounds);
    let mut log = Vec::with_capacity(config.rounds);
    if set.dim == 0 || state.active_classes() == 0 {
        return (learners, log);
    }
    for round in 1..=config.rounds {
        let count = config.candidate_features.clamp(1, set.dim);
        let mut features: Vec<usize> = if count >= set.dim {
            (0..set.dim).collect()
        } else {
            sample_indices(rng, set.dim, count).into_vec()
        };
        features.sort_unstable();
        let learner = boost_round(set, &state, &features, &mut cache, config.exhaustive_max, &mut scratch);
        let zero_loss: f64 = state.pairs.iter().map(|p| p.weight_sum()).sum();
        let round_loss = weighted_loss(set, &state, &learner);
        let normalizers = update_weights(set, &mut state, &learner);
        // Each round's sum is non-positive in exact arithmetic; clamp rounding noise.
        let step: f64 = normalizers.iter().map(|z| z.ln()).sum();
        log_cost += step.min(0.0) / active;
        heldout.add(set, &learner);
        log.push(RoundLog {
            round,
            cost: log_cost.exp(),
            log_step: step / active,
            round_loss,
            zero_loss,
            heldout_precision_at_1: heldout.precision_at_1(set),
            sharing_set_size: learner.sharing.len(),
            context_feature: set.layout.is_context_feature(learner.feature),
        });
        learners.push(learner);
        if config.mining_period > 0 && round % config.mining_period == 0 && round < config.rounds {
            let added = mine_hard_negatives(
                set,
                &mut state,
                sets,
                &learners,
                &pool,
                config.mining_growth,
                config.exclusion_radius,
            );
            log::debug!("round {round}: mined {added} hard negatives");
        }
    }
    (learners, log)
}
