//! Visual vocabulary over binary descriptors and the word → class inverted file.
//!
//! Training is k-medians in Hamming space: assignments go to the nearest centroid
//! and each centroid is replaced by the bitwise majority of its members (ties
//! resolve to 0). Majority is the exact minimizer of summed Hamming distance, so
//! total distortion never increases across iterations.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classes::{fnv1a, ClassId, ClassTable, BACKGROUND};
use crate::descriptor::Descriptor;
use crate::error::{Error, Result};
use crate::map::SfMMap;

/// Word counts swept when reproducing the vocabulary-size study.
pub const VOCABULARY_SIZES: [usize; 6] = [4, 8, 16, 32, 64, 128];
pub const DEFAULT_VOCABULARY_SIZE: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    centroids: Vec<Descriptor>,
    bits: usize,
    seed: u64,
}

#[derive(Debug, Clone)]
pub struct TrainingReport {
    /// Total Hamming distortion after each iteration's centroid update.
    pub distortion: Vec<u64>,
    pub iterations: usize,
    pub converged: bool,
}

impl Vocabulary {
    pub fn from_centroids(centroids: Vec<Descriptor>, seed: u64) -> Result<Self> {
        let bits = centroids
            .first()
            .map(|c| c.len())
            .ok_or_else(|| Error::InvalidConfig("vocabulary needs at least one centroid".into()))?;
        if let Some(bad) = centroids.iter().find(|c| c.len() != bits) {
            return Err(Error::LengthMismatch {
                expected: bits,
                actual: bad.len(),
            });
        }
        let distinct: BTreeSet<&[u64]> = centroids.iter().map(|c| c.words()).collect();
        if distinct.len() != centroids.len() {
            return Err(Error::InvalidConfig("vocabulary centroids must be distinct".into()));
        }
        Ok(Self {
            centroids,
            bits,
            seed,
        })
    }

    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn centroids(&self) -> &[Descriptor] {
        &self.centroids
    }

    /// Nearest centroid by Hamming distance, ties to the lowest word index.
    pub fn quantize(&self, d: &Descriptor) -> Result<usize> {
        if d.len() != self.bits {
            return Err(Error::LengthMismatch {
                expected: self.bits,
                actual: d.len(),
            });
        }
        Ok(self.quantize_unchecked(d))
    }

    #[inline]
    pub fn quantize_unchecked(&self, d: &Descriptor) -> usize {
        nearest(&self.centroids, d).0
    }

    pub fn fingerprint(&self) -> u64 {
        fnv1a(
            self.centroids
                .iter()
                .flat_map(|c| c.words().iter().flat_map(|w| w.to_le_bytes())),
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = format!("ctxmatch-vocabulary k={} bits={} seed={}\n", self.k(), self.bits, self.seed);
        for c in &self.centroids {
            text.push_str(&c.to_hex());
            text.push('\n');
        }
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let perr = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| perr(1, "missing header".into()))?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some("ctxmatch-vocabulary") {
            return Err(perr(1, "not a vocabulary file".into()));
        }
        let (mut k, mut bits, mut seed) = (None, None, None);
        for f in fields {
            let (key, value) = f.split_once('=').ok_or_else(|| perr(1, format!("bad header field {f}")))?;
            let value: u64 = value.parse().map_err(|_| perr(1, format!("bad header value {f}")))?;
            match key {
                "k" => k = Some(value as usize),
                "bits" => bits = Some(value as usize),
                "seed" => seed = Some(value),
                _ => return Err(perr(1, format!("unknown header field {key}"))),
            }
        }
        let (k, bits, seed) = match (k, bits, seed) {
            (Some(k), Some(b), Some(s)) => (k, b, s),
            _ => return Err(perr(1, "header needs k, bits and seed".into())),
        };
        let mut centroids = Vec::with_capacity(k);
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let d = Descriptor::from_hex(line.trim()).map_err(|e| perr(i + 2, e.to_string()))?;
            if d.len() != bits {
                return Err(perr(i + 2, format!("centroid has {} bits, header says {bits}", d.len())));
            }
            centroids.push(d);
        }
        if centroids.len() != k {
            return Err(perr(k + 1, format!("expected {k} centroids, found {}", centroids.len())));
        }
        Self::from_centroids(centroids, seed)
    }
}

#[inline]
fn nearest(centroids: &[Descriptor], d: &Descriptor) -> (usize, u32) {
    let mut best = (0, u32::MAX);
    for (i, c) in centroids.iter().enumerate() {
        let dist = c.hamming(d);
        if dist < best.1 {
            best = (i, dist);
        }
    }
    best
}

/// Bitwise majority of a set of descriptors; ties resolve to 0.
pub fn bitwise_majority<'a>(bits: usize, members: impl IntoIterator<Item = &'a Descriptor>) -> Descriptor {
    let mut counts = vec![0u32; bits];
    let mut n = 0u32;
    for d in members {
        n += 1;
        for (w, word) in d.words().iter().enumerate() {
            let mut x = *word;
            while x != 0 {
                let b = x.trailing_zeros() as usize;
                counts[w * 64 + b] += 1;
                x &= x - 1;
            }
        }
    }
    let mut out = Descriptor::zeros(bits);
    for (i, &c) in counts.iter().enumerate() {
        if 2 * c > n {
            out.set(i, true);
        }
    }
    out
}

pub fn train_vocabulary(descriptors: &[Descriptor], k: usize, seed: u64, max_iters: usize) -> Result<Vocabulary> {
    train_vocabulary_with_report(descriptors, k, seed, max_iters).map(|(v, _)| v)
}

pub fn train_vocabulary_with_report(
    descriptors: &[Descriptor],
    k: usize,
    seed: u64,
    max_iters: usize,
) -> Result<(Vocabulary, TrainingReport)> {
    if k == 0 {
        return Err(Error::InvalidConfig("vocabulary size must be at least 1".into()));
    }
    let bits = descriptors.first().map(|d| d.len()).unwrap_or(0);
    if let Some(bad) = descriptors.iter().find(|d| d.len() != bits) {
        return Err(Error::LengthMismatch {
            expected: bits,
            actual: bad.len(),
        });
    }
    let distinct: BTreeSet<&[u64]> = descriptors.iter().map(|d| d.words()).collect();
    if distinct.len() < k {
        return Err(Error::TooFewDistinct {
            needed: k,
            found: distinct.len(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_centroids(descriptors, k, &mut rng);
    let mut assignment: Vec<usize> = vec![usize::MAX; descriptors.len()];
    let mut distances = vec![0u32; descriptors.len()];
    let mut report = TrainingReport {
        distortion: Vec::new(),
        iterations: 0,
        converged: false,
    };

    for _ in 0..max_iters.max(1) {
        report.iterations += 1;
        let mut changed = false;
        for (i, d) in descriptors.iter().enumerate() {
            let (w, dist) = nearest(&centroids, d);
            if assignment[i] != w {
                assignment[i] = w;
                changed = true;
            }
            distances[i] = dist;
        }
        if !changed && report.iterations > 1 {
            report.converged = true;
            report.distortion.push(distances.iter().map(|&d| d as u64).sum());
            break;
        }

        let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
        for (i, &w) in assignment.iter().enumerate() {
            members[w].push(i);
        }
        for (w, m) in members.iter().enumerate() {
            if !m.is_empty() {
                centroids[w] = bitwise_majority(bits, m.iter().map(|&i| &descriptors[i]));
            }
        }
        for (i, d) in descriptors.iter().enumerate() {
            distances[i] = centroids[assignment[i]].hamming(d);
        }
        // Empty clusters and duplicate centroids are reseeded with the member farthest
        // from its own centroid. Moving that point to a zero-distance centroid can
        // only lower the distortion.
        for w in 0..k {
            let duplicate = centroids[..w].contains(&centroids[w]);
            if members[w].is_empty() || duplicate {
                let far = (0..descriptors.len())
                    .filter(|&i| !centroids.contains(&descriptors[i]))
                    .max_by(|&a, &b| distances[a].cmp(&distances[b]).then(b.cmp(&a)));
                if let Some(i) = far {
                    centroids[w] = descriptors[i].clone();
                    if !duplicate {
                        let old = assignment[i];
                        members[old].retain(|&j| j != i);
                    }
                    assignment[i] = w;
                    distances[i] = 0;
                }
            }
        }
        report.distortion.push(distances.iter().map(|&d| d as u64).sum());
    }

    Ok((Vocabulary::from_centroids(centroids, seed)?, report))
}

/// k-means++ style seeding with probability proportional to squared Hamming distance.
fn seed_centroids(descriptors: &[Descriptor], k: usize, rng: &mut ChaCha8Rng) -> Vec<Descriptor> {
    let first = rng.random_range(0..descriptors.len());
    let mut centroids = vec![descriptors[first].clone()];
    let mut best: Vec<u64> = descriptors
        .iter()
        .map(|d| (d.hamming(&centroids[0]) as u64).pow(2))
        .collect();
    while centroids.len() < k {
        let total: u64 = best.iter().sum();
        // Distinct descriptors remain (checked by the caller), so total > 0.
        let mut target = rng.random_range(0..total);
        let mut pick = 0;
        for (i, &b) in best.iter().enumerate() {
            if target < b {
                pick = i;
                break;
            }
            target -= b;
        }
        let c = descriptors[pick].clone();
        for (i, d) in descriptors.iter().enumerate() {
            best[i] = best[i].min((d.hamming(&c) as u64).pow(2));
        }
        centroids.push(c);
    }
    centroids
}

/// Word → candidate classes over the raw descriptors of positive observations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvertedFile {
    word_to_classes: Vec<Vec<ClassId>>,
    fingerprint: u64,
}

impl InvertedFile {
    pub fn bucket(&self, word: usize) -> &[ClassId] {
        &self.word_to_classes[word]
    }

    pub fn num_words(&self) -> usize {
        self.word_to_classes.len()
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }
}

pub fn build_inverted_file(map: &SfMMap, vocab: &Vocabulary, classes: &ClassTable) -> InvertedFile {
    let mut buckets: Vec<BTreeSet<ClassId>> = vec![BTreeSet::new(); vocab.k()];
    for (idx, &lid) in classes.landmarks().iter().enumerate() {
        let class = idx as ClassId + 1;
        let Some(lm) = map.landmark(lid) else { continue };
        for &obs in &lm.observations {
            if let Some(kp) = map.keypoint(obs) {
                buckets[vocab.quantize_unchecked(&kp.descriptor)].insert(class);
            }
        }
    }
    let fingerprint = fnv1a(
        classes
            .landmarks()
            .iter()
            .flat_map(|l| l.to_le_bytes())
            .chain(vocab.fingerprint().to_le_bytes()),
    );
    InvertedFile {
        word_to_classes: buckets.into_iter().map(|b| b.into_iter().collect()).collect(),
        fingerprint,
    }
}

/// Background plus the bucket of the descriptor's word, sorted ascending.
pub fn candidate_classes(d: &Descriptor, vocab: &Vocabulary, inv: &InvertedFile) -> Vec<ClassId> {
    let word = vocab.quantize_unchecked(d);
    let mut out = Vec::with_capacity(inv.bucket(word).len() + 1);
    out.push(BACKGROUND);
    out.extend(inv.bucket(word).iter().copied().filter(|&c| c != BACKGROUND));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::flip_bits;

    fn random_descriptor(rng: &mut ChaCha8Rng, bits: usize) -> Descriptor {
        let words = (0..bits.div_ceil(64)).map(|_| rng.random::<u64>()).collect();
        Descriptor::from_words(bits, words)
    }

    #[test]
    fn single_word_is_the_majority() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ds: Vec<_> = (0..31).map(|_| random_descriptor(&mut rng, 64)).collect();
        let v = train_vocabulary(&ds, 1, 3, 10).unwrap();
        assert_eq!(v.centroids()[0], bitwise_majority(64, &ds));
        assert!(ds.iter().all(|d| v.quantize(d).unwrap() == 0));
    }

    #[test]
    fn majority_ties_resolve_to_zero() {
        let a = Descriptor::from_bits(&[true, false]);
        let b = Descriptor::from_bits(&[false, true]);
        assert_eq!(bitwise_majority(2, [&a, &b]), Descriptor::zeros(2));
    }

    #[test]
    fn two_separated_clusters_match_brute_force_partition() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let bits = 128;
        let centers = [random_descriptor(&mut rng, bits), random_descriptor(&mut rng, bits)];
        let mut ds = Vec::new();
        for (i, c) in centers.iter().enumerate() {
            for j in 0..20 {
                ds.push(flip_bits(c, 0.05, (i * 100 + j) as u64));
            }
        }
        // Brute force over the two natural assignments gives the cluster majorities.
        let m0 = bitwise_majority(bits, &ds[..20]);
        let m1 = bitwise_majority(bits, &ds[20..]);
        let v = train_vocabulary(&ds, 2, 4, 50).unwrap();
        let got: BTreeSet<_> = v.centroids().iter().cloned().collect();
        let want: BTreeSet<_> = [m0, m1].into_iter().collect();
        assert_eq!(got, want);
    }

    #[test]
    fn distortion_is_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ds: Vec<_> = (0..400).map(|_| random_descriptor(&mut rng, 96)).collect();
        let (v, report) = train_vocabulary_with_report(&ds, 16, 5, 30).unwrap();
        assert_eq!(v.k(), 16);
        for w in report.distortion.windows(2) {
            assert!(w[1] <= w[0], "{:?}", report.distortion);
        }
    }

    #[test]
    fn too_few_distinct_descriptors() {
        let d = Descriptor::zeros(32);
        let ds = vec![d.clone(), d.clone(), d];
        assert!(matches!(
            train_vocabulary(&ds, 2, 0, 5),
            Err(Error::TooFewDistinct { needed: 2, found: 1 })
        ));
    }

    #[test]
    fn quantize_exact_centroid_and_length_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cs: Vec<_> = (0..5).map(|_| random_descriptor(&mut rng, 64)).collect();
        let v = Vocabulary::from_centroids(cs.clone(), 0).unwrap();
        assert_eq!(v.quantize(&cs[3]).unwrap(), 3);
        assert!(matches!(v.quantize(&Descriptor::zeros(32)), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn save_load_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cs: Vec<_> = (0..4).map(|_| random_descriptor(&mut rng, 384)).collect();
        let v = Vocabulary::from_centroids(cs, 77).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        v.save(&p).unwrap();
        assert_eq!(Vocabulary::load(&p).unwrap(), v);
    }
}
