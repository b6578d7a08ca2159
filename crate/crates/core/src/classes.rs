use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::map::LandmarkId;

/// Class index used by the classifier. `0` is the background class.
pub type ClassId = u32;

pub const BACKGROUND: ClassId = 0;

/// Bidirectional landmark id ↔ class index table. Landmarks occupy classes `1..=K`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<LandmarkId>", into = "Vec<LandmarkId>")]
pub struct ClassTable {
    landmarks: Vec<LandmarkId>,
    lookup: HashMap<LandmarkId, ClassId>,
}

impl ClassTable {
    pub fn new(landmarks: Vec<LandmarkId>) -> Self {
        let lookup = landmarks
            .iter()
            .enumerate()
            .map(|(i, &id)| (id, i as ClassId + 1))
            .collect();
        Self { landmarks, lookup }
    }

    /// Number of classes including background.
    pub fn num_classes(&self) -> usize {
        self.landmarks.len() + 1
    }

    pub fn num_landmarks(&self) -> usize {
        self.landmarks.len()
    }

    pub fn class_of(&self, landmark: LandmarkId) -> Option<ClassId> {
        self.lookup.get(&landmark).copied()
    }

    /// Landmark of a class, `None` for background or out-of-range classes.
    pub fn landmark_of(&self, class: ClassId) -> Option<LandmarkId> {
        if class == BACKGROUND {
            return None;
        }
        self.landmarks.get(class as usize - 1).copied()
    }

    pub fn landmarks(&self) -> &[LandmarkId] {
        &self.landmarks
    }
}

impl From<Vec<LandmarkId>> for ClassTable {
    fn from(v: Vec<LandmarkId>) -> Self {
        Self::new(v)
    }
}

impl From<ClassTable> for Vec<LandmarkId> {
    fn from(t: ClassTable) -> Self {
        t.landmarks
    }
}

/// 64-bit FNV-1a, used for cheap content fingerprints stored alongside models.
pub fn fnv1a(bytes: impl IntoIterator<Item = u8>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}
