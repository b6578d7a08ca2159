//! Shared decision stumps: closed-form fits and the per-round search.

use serde::{Deserialize, Serialize};

use super::data::{SampleSets, TrainingSet};
use crate::classes::ClassId;

/// `h(v, c) = a·[v_f > θ] + b` for `c` in the sharing set, `k[c]` otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakLearner {
    pub feature: usize,
    pub threshold: f32,
    pub a: f64,
    pub b: f64,
    /// Sorted, nonempty.
    pub sharing: Vec<ClassId>,
    /// Per-class constants; zero for members of the sharing set.
    pub k: Vec<f64>,
}

impl WeakLearner {
    pub fn shares(&self, c: ClassId) -> bool {
        self.sharing.binary_search(&c).is_ok()
    }

    /// Response of a sharing-set class to feature value `v`.
    #[inline]
    pub fn stump(&self, v: f32) -> f64 {
        if v > self.threshold {
            self.a + self.b
        } else {
            self.b
        }
    }

    pub fn eval(&self, features: &[f32], c: ClassId) -> f64 {
        if self.shares(c) {
            self.stump(features[self.feature])
        } else {
            self.k[c as usize]
        }
    }
}

/// Active (sample, class) pairs of one class with their weights.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClassPairs {
    pub samples: Vec<u32>,
    pub z: Vec<f64>,
    pub w: Vec<f64>,
}

impl ClassPairs {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn push(&mut self, sample: u32, z: f64, w: f64) {
        self.samples.push(sample);
        self.z.push(z);
        self.w.push(w);
    }

    pub fn weight_sum(&self) -> f64 {
        self.w.iter().sum()
    }

    pub fn normalize(&mut self) {
        let s = self.weight_sum();
        if s > 0.0 {
            self.w.iter_mut().for_each(|w| *w /= s);
        }
    }
}

/// Weights for every active pair, grouped by class.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainerState {
    pub pairs: Vec<ClassPairs>,
    pub round: usize,
}

impl TrainerState {
    /// Uniform `1/|pairs|` weights per class.
    pub fn new(sets: &SampleSets) -> Self {
        let pairs = sets
            .positives
            .iter()
            .zip(&sets.negatives)
            .map(|(pos, neg)| {
                let n = pos.len() + neg.len();
                let mut cp = ClassPairs::default();
                for &p in pos {
                    cp.push(p, 1.0, 1.0 / n as f64);
                }
                for &q in neg {
                    cp.push(q, -1.0, 1.0 / n as f64);
                }
                cp
            })
            .collect();
        Self { pairs, round: 0 }
    }

    pub fn num_classes(&self) -> usize {
        self.pairs.len()
    }

    pub fn active_classes(&self) -> usize {
        self.pairs.iter().filter(|p| !p.is_empty()).count()
    }

    /// Per-class `(Σw, Σwz)`.
    pub fn totals(&self) -> Vec<(f64, f64)> {
        self.pairs
            .iter()
            .map(|p| {
                p.w.iter()
                    .zip(&p.z)
                    .fold((0.0, 0.0), |(w, z), (&wi, &zi)| (w + wi, z + wi * zi))
            })
            .collect()
    }
}

/// Running weighted mean `num / den`, grown one class at a time.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunningMean {
    pub num: f64,
    pub den: f64,
}

impl RunningMean {
    pub fn add(&mut self, mean: f64, weight: f64) {
        (self.num, self.den, _) = incremental_update_b(self.num, self.den, mean, weight);
    }

    /// 0 when nothing has been added.
    pub fn value(&self) -> f64 {
        if self.den > 0.0 {
            self.num / self.den
        } else {
            0.0
        }
    }

    /// Squared-error reduction of fitting this side's mean: `num² / den`.
    pub fn reduction(&self) -> f64 {
        if self.den > 0.0 {
            self.num * self.num / self.den
        } else {
            0.0
        }
    }
}

/// Adds class `c'` with individual side mean `b_c` and side weight `w_c` to a running
/// fit. Returns the new numerator, denominator and value.
pub fn incremental_update_b(b_num: f64, b_den: f64, b_c: f64, w_c: f64) -> (f64, f64, f64) {
    let num = b_num + b_c * w_c;
    let den = b_den + w_c;
    let value = if den > 0.0 { num / den } else { 0.0 };
    (num, den, value)
}

/// Closed-form stump fit on sharing set `s` with its weighted squared error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StumpFit {
    pub a: f64,
    pub b: f64,
    pub loss: f64,
}

pub fn fit_stump(set: &TrainingSet, state: &TrainerState, f: usize, theta: f32, s: &[ClassId]) -> StumpFit {
    let col = set.column(f);
    let (mut wa, mut za, mut wb, mut zb) = (0.0, 0.0, 0.0, 0.0);
    for &c in s {
        let p = &state.pairs[c as usize];
        for ((&i, &z), &w) in p.samples.iter().zip(&p.z).zip(&p.w) {
            if col[i as usize] > theta {
                wa += w;
                za += w * z;
            } else {
                wb += w;
                zb += w * z;
            }
        }
    }
    let above = if wa > 0.0 { za / wa } else { 0.0 };
    let b = if wb > 0.0 { zb / wb } else { 0.0 };
    let mut loss = 0.0;
    for &c in s {
        let p = &state.pairs[c as usize];
        for ((&i, &z), &w) in p.samples.iter().zip(&p.z).zip(&p.w) {
            let h = if col[i as usize] > theta { above } else { b };
            loss += w * (z - h) * (z - h);
        }
    }
    StumpFit { a: above - b, b, loss }
}

/// Weighted mean of `z` over the class's active pairs (0 if it has none).
pub fn fit_class_constant(state: &TrainerState, c: ClassId) -> f64 {
    let p = &state.pairs[c as usize];
    let (w, z) = p
        .w
        .iter()
        .zip(&p.z)
        .fold((0.0, 0.0), |(w, z), (&wi, &zi)| (w + wi, z + wi * zi));
    if w > 0.0 {
        z / w
    } else {
        0.0
    }
}

/// Midpoint thresholds of a feature and each sample's bin (number of thresholds below it).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBins {
    pub thresholds: Vec<f32>,
    pub bins: Vec<u8>,
}

/// Midpoints between consecutive sorted unique values of `values[i]` for `i` in
/// `support`, evenly subsampled to at most `cap` (≤ 255).
pub fn candidate_thresholds(values: &[f32], support: &[u32], cap: usize) -> Vec<f32> {
    let mut uniq: Vec<f32> = support.iter().map(|&i| values[i as usize]).collect();
    uniq.sort_by(f32::total_cmp);
    uniq.dedup();
    let mids: Vec<f32> = uniq
        .windows(2)
        .map(|w| {
            let m = ((w[0] as f64 + w[1] as f64) / 2.0) as f32;
            // Adjacent floats can round the midpoint onto the upper value.
            if m >= w[0] && m < w[1] {
                m
            } else {
                w[0]
            }
        })
        .collect();
    let cap = cap.clamp(1, 255);
    if mids.len() <= cap {
        return mids;
    }
    (0..cap).map(|j| mids[j * mids.len() / cap]).collect()
}

pub fn feature_bins(values: &[f32], support: &[u32], cap: usize) -> FeatureBins {
    let thresholds = candidate_thresholds(values, support, cap);
    let bins = values
        .iter()
        .map(|&v| thresholds.partition_point(|&t| v > t) as u8)
        .collect();
    FeatureBins { thresholds, bins }
}

/// Side statistics of one class at one threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SideStats {
    pub class: ClassId,
    pub wa: f64,
    pub za: f64,
    pub wb: f64,
    pub zb: f64,
}

impl SideStats {
    pub fn above_mean(&self) -> f64 {
        self.za / self.wa
    }

    /// `Z²/W` reduction of fitting the class constant alone.
    pub fn base(&self) -> f64 {
        let (w, z) = (self.wa + self.wb, self.za + self.zb);
        if w > 0.0 {
            z * z / w
        } else {
            0.0
        }
    }
}

/// Classes in descending order of their individual above-threshold response
/// `Za/Wa`, ties by class index. Classes without weight above θ are omitted.
pub fn init_sharing_set(stats: &[SideStats]) -> Vec<ClassId> {
    let mut v: Vec<&SideStats> = stats.iter().filter(|s| s.wa > 0.0).collect();
    v.sort_by(|x, y| y.above_mean().total_cmp(&x.above_mean()).then(x.class.cmp(&y.class)));
    v.into_iter().map(|s| s.class).collect()
}

/// Best sharing set found for one `(f, θ)`: gain is the loss reduction over
/// fitting class constants only.
#[derive(Debug, Clone, PartialEq)]
pub struct SetChoice {
    pub gain: f64,
    pub sharing: Vec<ClassId>,
}

fn gain_of(above: &RunningMean, below: &RunningMean, base: f64) -> f64 {
    above.reduction() + below.reduction() - base
}

/// Largest-gain prefix of `order` (entries index into `stats`).
fn best_prefix(stats: &[SideStats], order: &[usize], best: &mut Option<SetChoice>) {
    let (mut above, mut below, mut base) = (RunningMean::default(), RunningMean::default(), 0.0);
    let mut best_len = 0;
    let mut best_gain = best.as_ref().map_or(f64::NEG_INFINITY, |b| b.gain);
    for (n, &j) in order.iter().enumerate() {
        let s = &stats[j];
        above.add(s.za / s.wa, s.wa);
        below.add(s.zb / s.wb, s.wb);
        base += s.base();
        let g = gain_of(&above, &below, base);
        if g > best_gain {
            best_gain = g;
            best_len = n + 1;
        }
    }
    if best_len > 0 {
        let mut sharing: Vec<ClassId> = order[..best_len].iter().map(|&j| stats[j].class).collect();
        sharing.sort_unstable();
        *best = Some(SetChoice { gain: best_gain, sharing });
    }
}

/// Prefix search over the response ordering, swept in both directions, then
/// refined by single-class toggles.
pub fn prefix_search(stats: &[SideStats]) -> Option<SetChoice> {
    let mut order: Vec<usize> = (0..stats.len()).collect();
    order.sort_by(|&x, &y| {
        stats[y]
            .above_mean()
            .total_cmp(&stats[x].above_mean())
            .then(stats[x].class.cmp(&stats[y].class))
    });
    let mut down = None;
    best_prefix(stats, &order, &mut down);
    // Reversal flips the class tie order; restore ascending class within ties.
    order.sort_by(|&x, &y| {
        stats[x]
            .above_mean()
            .total_cmp(&stats[y].above_mean())
            .then(stats[x].class.cmp(&stats[y].class))
    });
    let mut up = None;
    best_prefix(stats, &order, &mut up);
    [down, up]
        .into_iter()
        .flatten()
        .map(|c| refine(stats, c))
        .reduce(|a, b| if b.gain > a.gain { b } else { a })
}

/// Single-class toggles on top of the best prefix until no toggle helps.
fn refine(stats: &[SideStats], start: SetChoice) -> SetChoice {
    const MAX_SWEEPS: usize = 4;
    let mut member: Vec<bool> = stats.iter().map(|s| start.sharing.binary_search(&s.class).is_ok()).collect();
    let (mut above, mut below, mut base) = (RunningMean::default(), RunningMean::default(), 0.0);
    for (s, _) in stats.iter().zip(&member).filter(|(_, &m)| m) {
        above.add(s.za / s.wa, s.wa);
        below.add(s.zb / s.wb, s.wb);
        base += s.base();
    }
    let mut size = start.sharing.len();
    let mut gain = start.gain;
    for _ in 0..MAX_SWEEPS {
        let mut changed = false;
        for (j, s) in stats.iter().enumerate() {
            let sign = if member[j] { -1.0 } else { 1.0 };
            if member[j] && size == 1 {
                continue;
            }
            let a = RunningMean {
                num: above.num + sign * s.za,
                den: above.den + sign * s.wa,
            };
            let b = RunningMean {
                num: below.num + sign * s.zb,
                den: below.den + sign * s.wb,
            };
            let nb = base + sign * s.base();
            let g = gain_of(&a, &b, nb);
            if g > gain + 1e-12 * gain.abs().max(1e-12) {
                (above, below, base, gain) = (a, b, nb, g);
                member[j] = !member[j];
                size = if member[j] { size + 1 } else { size - 1 };
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let sharing = stats.iter().zip(&member).filter(|(_, &m)| m).map(|(s, _)| s.class).collect();
    let mut sharing: Vec<ClassId> = sharing;
    sharing.sort_unstable();
    SetChoice { gain, sharing }
}

/// Every nonempty subset; only for small class counts.
pub fn exhaustive_search(stats: &[SideStats]) -> Option<SetChoice> {
    assert!(stats.len() < 31, "exhaustive search over {} classes", stats.len());
    let mut best: Option<SetChoice> = None;
    for mask in 1u32..(1 << stats.len()) {
        let (mut above, mut below, mut base) = (RunningMean::default(), RunningMean::default(), 0.0);
        for (j, s) in stats.iter().enumerate() {
            if mask >> j & 1 == 1 {
                above.add(s.za / s.wa, s.wa);
                below.add(s.zb / s.wb, s.wb);
                base += s.base();
            }
        }
        let g = gain_of(&above, &below, base);
        if best.as_ref().is_none_or(|b| g > b.gain) {
            let sharing = stats
                .iter()
                .enumerate()
                .filter(|(j, _)| mask >> j & 1 == 1)
                .map(|(_, s)| s.class)
                .collect();
            best = Some(SetChoice { gain: g, sharing });
        }
    }
    best
}

/// Reference greedy selection: repeatedly add the class that most improves the gain.
pub fn greedy_search(stats: &[SideStats]) -> Option<SetChoice> {
    let mut chosen: Vec<usize> = Vec::new();
    let mut best: Option<SetChoice> = None;
    let mut remaining: Vec<usize> = (0..stats.len()).collect();
    while !remaining.is_empty() {
        let mut round_best: Option<(f64, usize)> = None;
        for (r, &j) in remaining.iter().enumerate() {
            let (mut above, mut below, mut base) = (RunningMean::default(), RunningMean::default(), 0.0);
            for &m in chosen.iter().chain(std::iter::once(&j)) {
                let s = &stats[m];
                above.add(s.za / s.wa, s.wa);
                below.add(s.zb / s.wb, s.wb);
                base += s.base();
            }
            let g = gain_of(&above, &below, base);
            if round_best.is_none_or(|(bg, _)| g > bg) {
                round_best = Some((g, r));
            }
        }
        let (g, r) = round_best.expect("remaining is nonempty");
        chosen.push(remaining.remove(r));
        if best.as_ref().is_none_or(|b| g > b.gain) {
            let mut sharing: Vec<ClassId> = chosen.iter().map(|&m| stats[m].class).collect();
            sharing.sort_unstable();
            best = Some(SetChoice { gain: g, sharing });
        }
    }
    best
}

/// Threshold-sweep scratch buffers reused across features.
#[derive(Debug, Default)]
pub struct SweepScratch {
    hw: Vec<f64>,
    hz: Vec<f64>,
    aw: Vec<f64>,
    az: Vec<f64>,
    stats: Vec<SideStats>,
}

/// Best `(threshold index, set)` for one feature.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureChoice {
    pub threshold_index: usize,
    pub choice: SetChoice,
}

/// Evaluates every threshold of a feature. Classes whose pairs all fall on one side
/// cannot improve any sharing set (the pooled side means can only lose against
/// per-class constants) and are left out of the search.
pub fn search_feature(
    state: &TrainerState,
    bins: &FeatureBins,
    exhaustive_max: usize,
    scratch: &mut SweepScratch,
) -> Option<FeatureChoice> {
    let t_count = bins.thresholds.len();
    if t_count == 0 {
        return None;
    }
    let nb = t_count + 1;
    let nc = state.num_classes();
    for buf in [&mut scratch.hw, &mut scratch.hz, &mut scratch.aw, &mut scratch.az] {
        buf.clear();
        buf.resize(nc * nb, 0.0);
    }
    for (c, p) in state.pairs.iter().enumerate() {
        let range = c * nb..(c + 1) * nb;
        let hw = &mut scratch.hw[range.clone()];
        let hz = &mut scratch.hz[range.clone()];
        for ((&i, &z), &w) in p.samples.iter().zip(&p.z).zip(&p.w) {
            let bin = bins.bins[i as usize] as usize;
            hw[bin] += w;
            hz[bin] += w * z;
        }
        // Suffix sums: entry t holds the weight strictly above threshold t.
        let aw = &mut scratch.aw[range.clone()];
        let az = &mut scratch.az[range];
        for t in (0..t_count).rev() {
            aw[t] = aw[t + 1] + hw[t + 1];
            az[t] = az[t + 1] + hz[t + 1];
        }
        // Prefix sums in place: entry t becomes the weight at or below threshold t.
        for t in 1..nb {
            hw[t] += hw[t - 1];
            hz[t] += hz[t - 1];
        }
    }
    let mut best: Option<FeatureChoice> = None;
    for t in 0..t_count {
        scratch.stats.clear();
        for c in 0..nc {
            let j = c * nb + t;
            let (wb, zb, wa, za) = (scratch.hw[j], scratch.hz[j], scratch.aw[j], scratch.az[j]);
            if wb > 0.0 && wa > 0.0 {
                scratch.stats.push(SideStats {
                    class: c as ClassId,
                    wa,
                    za,
                    wb,
                    zb,
                });
            }
        }
        if scratch.stats.is_empty() {
            continue;
        }
        let choice = if scratch.stats.len() <= exhaustive_max {
            exhaustive_search(&scratch.stats)
        } else {
            prefix_search(&scratch.stats)
        };
        if let Some(choice) = choice {
            if best.as_ref().is_none_or(|b| choice.gain > b.choice.gain) {
                best = Some(FeatureChoice {
                    threshold_index: t,
                    choice,
                });
            }
        }
    }
    best
}
