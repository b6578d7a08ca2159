//! Query keypoints → ranked landmark candidates → 2D-3D correspondences.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::SVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boosting::{BoostedModel, Classifier};
use crate::classes::{ClassId, BACKGROUND};
use crate::descriptor::Descriptor;
use crate::error::{Error, Result};
use crate::map::{CameraIntrinsics, Frame, FrameId, LandmarkId, SfMMap};
use crate::vocabulary::{candidate_classes, InvertedFile, Vocabulary};

pub const DEFAULT_TOP_K: usize = 10;
pub const PROJECTED_DIM: usize = 16;

/// Classes ordered by descending score, ties by ascending class.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedCandidates {
    pub entries: Vec<(ClassId, f64)>,
    pub background_score: f64,
    /// Number of classes whose score was computed.
    pub evaluated: usize,
}

impl RankedCandidates {
    pub fn head(&self) -> Option<(ClassId, f64)> {
        self.entries.first().copied()
    }
}

fn rank(mut scored: Vec<(ClassId, f64)>, top_k: usize) -> Vec<(ClassId, f64)> {
    let order = |x: &(ClassId, f64), y: &(ClassId, f64)| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0));
    let k = top_k.max(1);
    if scored.len() > k {
        scored.select_nth_unstable_by(k - 1, order);
        scored.truncate(k);
    }
    scored.sort_by(order);
    scored
}

/// Scores every class, background included.
pub fn classify(model: &Classifier, v: &[f32], top_k: usize) -> RankedCandidates {
    let scores = model.scores(v);
    let background_score = scores.first().copied().unwrap_or(0.0);
    let evaluated = scores.len();
    let scored = scores.into_iter().enumerate().map(|(c, s)| (c as ClassId, s)).collect();
    RankedCandidates {
        entries: rank(scored, top_k),
        background_score,
        evaluated,
    }
}

/// Scores only background and the classes sharing the descriptor's visual word.
pub fn classify_with_inverted_file(
    model: &Classifier,
    v: &[f32],
    descriptor: &Descriptor,
    vocab: &Vocabulary,
    inv: &InvertedFile,
    top_k: usize,
) -> RankedCandidates {
    let candidates = candidate_classes(descriptor, vocab, inv);
    let scored: Vec<(ClassId, f64)> = candidates.iter().map(|&c| (c, model.score(v, c))).collect();
    let background_score = scored[0].1;
    RankedCandidates {
        evaluated: scored.len(),
        entries: rank(scored, top_k),
        background_score,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatcherKind {
    Boost,
    BoostInv,
    Hamming,
    Projected,
}

impl MatcherKind {
    pub const ALL: [MatcherKind; 4] = [Self::Boost, Self::BoostInv, Self::Hamming, Self::Projected];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Boost => "boost",
            Self::BoostInv => "boost-inv",
            Self::Hamming => "hamming",
            Self::Projected => "projected",
        }
    }
}

impl fmt::Display for MatcherKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MatcherKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown matcher '{s}'")))
    }
}

/// One ranked candidate; `landmark` is `None` for the background class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub landmark: Option<LandmarkId>,
    pub score: f64,
}

/// Ranked output for one query keypoint.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    pub keypoint: usize,
    pub candidates: Vec<Candidate>,
    /// Whether the head may be used as a correspondence.
    pub accepted: bool,
    pub evaluated: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence2D3D {
    pub frame_id: FrameId,
    pub keypoint: usize,
    pub landmark_id: LandmarkId,
    pub score: f64,
    pub matcher: MatcherKind,
}

/// Head must beat the background score by more than `margin`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcceptRule {
    pub margin: f64,
}

impl Default for AcceptRule {
    fn default() -> Self {
        Self { margin: 0.0 }
    }
}

impl AcceptRule {
    pub fn accepts(&self, ranked: &RankedCandidates) -> bool {
        match ranked.head() {
            Some((c, s)) => c != BACKGROUND && s - ranked.background_score > self.margin,
            None => false,
        }
    }
}

/// Exact Hamming nearest neighbour over all mapped observations.
#[derive(Debug, Clone)]
pub struct HammingIndex {
    descriptors: Vec<Descriptor>,
    owner: Vec<u32>,
    landmarks: Vec<LandmarkId>,
}

impl HammingIndex {
    pub fn new(map: &SfMMap) -> Self {
        let landmarks: Vec<LandmarkId> = map.landmarks().iter().map(|l| l.landmark_id).collect();
        let mut descriptors = Vec::new();
        let mut owner = Vec::new();
        for (li, l) in map.landmarks().iter().enumerate() {
            for &obs in &l.observations {
                if let Some(kp) = map.keypoint(obs) {
                    descriptors.push(kp.descriptor.clone());
                    owner.push(li as u32);
                }
            }
        }
        Self {
            descriptors,
            owner,
            landmarks,
        }
    }

    pub fn len(&self) -> usize {
        self.descriptors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.is_empty()
    }

    pub fn num_landmarks(&self) -> usize {
        self.landmarks.len()
    }

    /// Landmarks by ascending best distance, ties by landmark id.
    pub fn query(&self, d: &Descriptor, top_k: usize) -> Result<Vec<(LandmarkId, u32)>> {
        if let Some(first) = self.descriptors.first() {
            if first.len() != d.len() {
                return Err(Error::DimensionMismatch {
                    expected: first.len(),
                    actual: d.len(),
                });
            }
        }
        let mut best = vec![u32::MAX; self.landmarks.len()];
        for (db, &o) in self.descriptors.iter().zip(&self.owner) {
            let dist = db.hamming(d);
            let b = &mut best[o as usize];
            *b = (*b).min(dist);
        }
        let scored = best
            .into_iter()
            .zip(&self.landmarks)
            .filter(|(dist, _)| *dist != u32::MAX)
            .map(|(dist, &l)| (l, dist))
            .collect();
        Ok(top_by(scored, top_k, |a: &u32, b: &u32| a.cmp(b)))
    }
}

fn top_by<T: Copy>(
    mut v: Vec<(LandmarkId, T)>,
    top_k: usize,
    cmp: impl Fn(&T, &T) -> std::cmp::Ordering,
) -> Vec<(LandmarkId, T)> {
    let order = |x: &(LandmarkId, T), y: &(LandmarkId, T)| cmp(&x.1, &y.1).then(x.0.cmp(&y.0));
    let k = top_k.max(1);
    if v.len() > k {
        v.select_nth_unstable_by(k - 1, order);
        v.truncate(k);
    }
    v.sort_by(order);
    v
}

/// Seeded random ±1 matrix with orthonormalized rows, applied to bits mapped to ±1.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorProjection {
    rows: Vec<Vec<f64>>,
}

impl DescriptorProjection {
    pub fn new(bits: usize, seed: u64) -> Result<Self> {
        if bits < PROJECTED_DIM {
            return Err(Error::InvalidConfig(format!(
                "cannot project {bits}-bit descriptors to {PROJECTED_DIM} dimensions"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(PROJECTED_DIM);
        while rows.len() < PROJECTED_DIM {
            let mut r: Vec<f64> = (0..bits).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
            for q in &rows {
                let dot: f64 = r.iter().zip(q).map(|(a, b)| a * b).sum();
                r.iter_mut().zip(q).for_each(|(a, b)| *a -= dot * b);
            }
            let norm = r.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 1e-6 {
                r.iter_mut().for_each(|a| *a /= norm);
                rows.push(r);
            }
        }
        Ok(Self { rows })
    }

    pub fn bits(&self) -> usize {
        self.rows[0].len()
    }

    pub fn project(&self, d: &Descriptor) -> SVector<f64, PROJECTED_DIM> {
        debug_assert_eq!(d.len(), self.bits());
        let signs: Vec<f64> = (0..d.len()).map(|i| if d.get(i) { 1.0 } else { -1.0 }).collect();
        SVector::from_fn(|r, _| self.rows[r].iter().zip(&signs).map(|(a, s)| a * s).sum())
    }
}

/// Exact Euclidean nearest neighbour in the projected space.
#[derive(Debug, Clone)]
pub struct ProjectedIndex {
    projection: DescriptorProjection,
    points: Vec<SVector<f64, PROJECTED_DIM>>,
    owner: Vec<u32>,
    landmarks: Vec<LandmarkId>,
}

impl ProjectedIndex {
    pub fn new(map: &SfMMap, seed: u64) -> Result<Self> {
        let hamming = HammingIndex::new(map);
        let projection = DescriptorProjection::new(map.descriptor_bits(), seed)?;
        let points = hamming.descriptors.iter().map(|d| projection.project(d)).collect();
        Ok(Self {
            projection,
            points,
            owner: hamming.owner,
            landmarks: hamming.landmarks,
        })
    }

    pub fn num_landmarks(&self) -> usize {
        self.landmarks.len()
    }

    pub fn projection(&self) -> &DescriptorProjection {
        &self.projection
    }

    /// Landmarks by ascending best distance, ties by landmark id.
    pub fn query(&self, d: &Descriptor, top_k: usize) -> Result<Vec<(LandmarkId, f64)>> {
        if d.len() != self.projection.bits() {
            return Err(Error::DimensionMismatch {
                expected: self.projection.bits(),
                actual: d.len(),
            });
        }
        let q = self.projection.project(d);
        let mut best = vec![f64::INFINITY; self.landmarks.len()];
        for (p, &o) in self.points.iter().zip(&self.owner) {
            let dist = (p - q).norm();
            let b = &mut best[o as usize];
            *b = b.min(dist);
        }
        let scored = best
            .into_iter()
            .zip(&self.landmarks)
            .filter(|(dist, _)| dist.is_finite())
            .map(|(dist, &l)| (l, dist))
            .collect();
        Ok(top_by(scored, top_k, |a: &f64, b: &f64| a.total_cmp(b)))
    }
}

/// A configured matcher.
#[derive(Debug, Clone, Copy)]
pub enum Matcher<'a> {
    Boost {
        model: &'a BoostedModel,
        inverted: Option<&'a InvertedFile>,
        rule: AcceptRule,
    },
    Hamming(&'a HammingIndex),
    Projected(&'a ProjectedIndex),
}

impl Matcher<'_> {
    pub fn kind(&self) -> MatcherKind {
        match self {
            Matcher::Boost { inverted: None, .. } => MatcherKind::Boost,
            Matcher::Boost { inverted: Some(_), .. } => MatcherKind::BoostInv,
            Matcher::Hamming(_) => MatcherKind::Hamming,
            Matcher::Projected(_) => MatcherKind::Projected,
        }
    }

    /// Ranked candidates for every keypoint, in keypoint order.
    pub fn query_frame(&self, frame: &Frame, cam: &CameraIntrinsics, top_k: usize) -> Result<Vec<QueryResult>> {
        match *self {
            Matcher::Boost { model, inverted, rule } => {
                let bits = model.vocabulary.bits();
                if let Some(k) = frame.keypoints.iter().find(|k| k.descriptor.len() != bits) {
                    return Err(Error::DimensionMismatch {
                        expected: bits,
                        actual: k.descriptor.len(),
                    });
                }
                let extractor = model.extractor();
                let index = extractor.index(frame, cam);
                let mut v = vec![0.0f32; extractor.dim()];
                let mut out = Vec::with_capacity(frame.keypoints.len());
                for (i, kp) in frame.keypoints.iter().enumerate() {
                    extractor.write_features(frame, &index, i, &mut v);
                    let ranked = match inverted {
                        None => classify(&model.classifier, &v, top_k),
                        Some(inv) => {
                            classify_with_inverted_file(&model.classifier, &v, &kp.descriptor, &model.vocabulary, inv, top_k)
                        }
                    };
                    out.push(QueryResult {
                        keypoint: i,
                        accepted: rule.accepts(&ranked),
                        evaluated: ranked.evaluated,
                        candidates: ranked
                            .entries
                            .iter()
                            .map(|&(c, score)| Candidate {
                                landmark: model.classes.landmark_of(c),
                                score,
                            })
                            .collect(),
                    });
                }
                Ok(out)
            }
            Matcher::Hamming(index) => frame
                .keypoints
                .iter()
                .enumerate()
                .map(|(i, kp)| {
                    let ranked = index.query(&kp.descriptor, top_k)?;
                    Ok(QueryResult {
                        keypoint: i,
                        accepted: !ranked.is_empty(),
                        evaluated: index.num_landmarks(),
                        candidates: ranked
                            .into_iter()
                            .map(|(l, d)| Candidate {
                                landmark: Some(l),
                                score: -(d as f64),
                            })
                            .collect(),
                    })
                })
                .collect(),
            Matcher::Projected(index) => frame
                .keypoints
                .iter()
                .enumerate()
                .map(|(i, kp)| {
                    let ranked = index.query(&kp.descriptor, top_k)?;
                    Ok(QueryResult {
                        keypoint: i,
                        accepted: !ranked.is_empty(),
                        evaluated: index.num_landmarks(),
                        candidates: ranked
                            .into_iter()
                            .map(|(l, d)| Candidate {
                                landmark: Some(l),
                                score: -d,
                            })
                            .collect(),
                    })
                })
                .collect(),
        }
    }

    /// Accepted heads as correspondences. Baseline scores are negated distances.
    pub fn match_frame(&self, frame: &Frame, cam: &CameraIntrinsics) -> Result<Vec<Correspondence2D3D>> {
        let results = self.query_frame(frame, cam, 1)?;
        Ok(correspondences(frame.frame_id, &results, self.kind()))
    }
}

pub fn correspondences(frame_id: FrameId, results: &[QueryResult], matcher: MatcherKind) -> Vec<Correspondence2D3D> {
    results
        .iter()
        .filter(|r| r.accepted)
        .filter_map(|r| {
            let head = r.candidates.first()?;
            Some(Correspondence2D3D {
                frame_id,
                keypoint: r.keypoint,
                landmark_id: head.landmark?,
                score: head.score,
                matcher,
            })
        })
        .collect()
}

pub fn write_correspondences(corrs: &[Correspondence2D3D], out: &mut impl Write) -> Result<()> {
    writeln!(out, "frame_id,keypoint_idx,landmark_id,score,matcher")?;
    for c in corrs {
        writeln!(out, "{},{},{},{},{}", c.frame_id, c.keypoint, c.landmark_id, c.score, c.matcher)?;
    }
    Ok(())
}

pub fn save_correspondences(corrs: &[Correspondence2D3D], path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_correspondences(corrs, &mut out)?;
    out.flush()?;
    Ok(())
}
