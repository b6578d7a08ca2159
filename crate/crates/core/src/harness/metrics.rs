//! Retrieval and pose metrics.

use std::io::Write;

use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::map::{FrameId, LandmarkId};
use crate::matching::MatcherKind;
use crate::pose::pose_error;

/// Ranked output for one query keypoint with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalRecord {
    pub frame_id: FrameId,
    pub keypoint: usize,
    /// `None` for untracked (background-truth) keypoints.
    pub truth: Option<LandmarkId>,
    /// Candidates in rank order; `None` entries are the background class.
    pub ranked: Vec<Option<LandmarkId>>,
    pub evaluated: usize,
    pub match_ms: f64,
}

impl RetrievalRecord {
    /// 1-based rank of the true landmark, if listed.
    pub fn rank(&self) -> Option<usize> {
        let t = self.truth?;
        self.ranked.iter().position(|&c| c == Some(t)).map(|p| p + 1)
    }
}

fn tracked(records: &[RetrievalRecord]) -> impl Iterator<Item = &RetrievalRecord> {
    records.iter().filter(|r| r.truth.is_some())
}

/// Fraction of tracked queries whose head is the true landmark.
pub fn precision_at_1(records: &[RetrievalRecord]) -> Result<f64> {
    let n = tracked(records).count();
    if n == 0 {
        return Err(Error::UndefinedMetric("precision@1 of an empty record set"));
    }
    let hits = tracked(records).filter(|r| r.rank() == Some(1)).count();
    Ok(hits as f64 / n as f64)
}

/// Mean of `1/rank` over tracked queries, 0 for queries whose truth is not listed.
pub fn mean_reciprocal_rank(records: &[RetrievalRecord]) -> Result<f64> {
    let n = tracked(records).count();
    if n == 0 {
        return Err(Error::UndefinedMetric("MRR of an empty record set"));
    }
    let sum: f64 = tracked(records).map(|r| r.rank().map_or(0.0, |k| 1.0 / k as f64)).sum();
    Ok(sum / n as f64)
}

/// Fraction of untracked queries whose head is background (always 0 for matchers
/// without a background class).
pub fn background_rejection(records: &[RetrievalRecord]) -> Option<f64> {
    let untracked: Vec<_> = records.iter().filter(|r| r.truth.is_none()).collect();
    if untracked.is_empty() {
        return None;
    }
    let rejected = untracked.iter().filter(|r| matches!(r.ranked.first(), None | Some(None))).count();
    Some(rejected as f64 / untracked.len() as f64)
}

pub const DEFAULT_BUDGETS: [usize; 6] = [1, 2, 5, 10, 20, 50];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MissRatePoint {
    pub budget: usize,
    pub miss_rate: f64,
    /// Mean number of wrong candidates ranked above the truth, or all listed
    /// candidates within the budget when the truth is missed.
    pub false_positives_per_query: f64,
}

pub fn miss_rate_curve(records: &[RetrievalRecord], budgets: &[usize]) -> Result<Vec<MissRatePoint>> {
    if budgets.windows(2).any(|w| w[0] >= w[1]) || budgets.first() == Some(&0) {
        return Err(Error::InvalidConfig("budgets must be positive and strictly increasing".into()));
    }
    let n = tracked(records).count();
    if n == 0 {
        return Err(Error::UndefinedMetric("miss rate of an empty record set"));
    }
    Ok(budgets
        .iter()
        .map(|&k| {
            let (mut misses, mut fp) = (0usize, 0usize);
            for r in tracked(records) {
                match r.rank() {
                    Some(rank) if rank <= k => fp += rank - 1,
                    _ => {
                        misses += 1;
                        fp += k.min(r.ranked.len());
                    }
                }
            }
            MissRatePoint {
                budget: k,
                miss_rate: misses as f64 / n as f64,
                false_positives_per_query: fp as f64 / n as f64,
            }
        })
        .collect())
}

/// Pose estimation outcome for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseRecord {
    pub frame_id: FrameId,
    pub estimate: Option<Pose>,
    pub truth: Pose,
    pub inliers: usize,
    pub correspondences: usize,
    pub inlier_ratio: f64,
    pub match_ms: f64,
    pub ransac_ms: f64,
}

impl PoseRecord {
    /// RANSAC inlier count, the sweep score of the PR curve.
    pub fn confidence(&self) -> f64 {
        self.inliers as f64
    }

    pub fn errors(&self) -> Option<(f64, f64)> {
        self.estimate.as_ref().map(|e| pose_error(e, &self.truth))
    }

    pub fn correct(&self, max_translation: f64, max_rotation_deg: f64) -> bool {
        self.errors()
            .is_some_and(|(dt, dr)| dt <= max_translation && dr <= max_rotation_deg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub threshold: f64,
    pub recall: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    pub auc: f64,
}

/// Sweeps the confidence threshold from high to low. The curve starts at recall 0
/// with precision 1; recall is relative to all frames. AUC by the trapezoid rule.
pub fn pose_pr_auc(records: &[PoseRecord], max_translation: f64, max_rotation_deg: f64) -> PrCurve {
    let total = records.len();
    let mut returned: Vec<(f64, bool)> = records
        .iter()
        .filter(|r| r.estimate.is_some())
        .map(|r| (r.confidence(), r.correct(max_translation, max_rotation_deg)))
        .collect();
    returned.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = vec![PrPoint {
        threshold: f64::INFINITY,
        recall: 0.0,
        precision: 1.0,
    }];
    let (mut n_returned, mut n_correct) = (0usize, 0usize);
    let mut i = 0;
    while i < returned.len() {
        let level = returned[i].0;
        while i < returned.len() && returned[i].0 == level {
            n_returned += 1;
            n_correct += usize::from(returned[i].1);
            i += 1;
        }
        points.push(PrPoint {
            threshold: level,
            recall: n_correct as f64 / total as f64,
            precision: n_correct as f64 / n_returned as f64,
        });
    }
    let auc = points
        .windows(2)
        .map(|w| (w[1].recall - w[0].recall) * (w[1].precision + w[0].precision) / 2.0)
        .sum();
    PrCurve { points, auc }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RuntimeRow {
    pub matcher: MatcherKind,
    pub frames: usize,
    pub mean_match_ms: f64,
    pub mean_inlier_ratio: f64,
}

pub fn runtime_inlier_report(by_matcher: &[(MatcherKind, Vec<PoseRecord>)]) -> Result<Vec<RuntimeRow>> {
    by_matcher
        .iter()
        .map(|(m, recs)| {
            if recs.is_empty() {
                return Err(Error::UndefinedMetric("runtime report needs at least one record per matcher"));
            }
            let n = recs.len() as f64;
            Ok(RuntimeRow {
                matcher: *m,
                frames: recs.len(),
                mean_match_ms: recs.iter().map(|r| r.match_ms).sum::<f64>() / n,
                mean_inlier_ratio: recs.iter().map(|r| r.inlier_ratio).sum::<f64>() / n,
            })
        })
        .collect()
}

/// Per-frame `(matcher, frame_id, match_ms, inlier_ratio)` rows for plotting.
pub fn write_runtime_scatter(by_matcher: &[(MatcherKind, Vec<PoseRecord>)], out: &mut impl Write) -> Result<()> {
    writeln!(out, "matcher,frame_id,match_ms,inlier_ratio")?;
    for (m, recs) in by_matcher {
        for r in recs {
            writeln!(out, "{m},{},{},{}", r.frame_id, r.match_ms, r.inlier_ratio)?;
        }
    }
    Ok(())
}
