//! Landmark recognition against a structure-from-motion map using boosted classifiers
//! over binary descriptors and gravity-aligned visual context.

pub mod boosting;
pub mod classes;
pub mod context;
pub mod descriptor;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod map;
pub mod matching;
pub mod pose;
pub mod synth;
pub mod vocabulary;

pub use classes::{ClassId, ClassTable, BACKGROUND};
pub use descriptor::Descriptor;
pub use error::{Error, Result};
pub use geometry::Pose;
pub use map::{CameraIntrinsics, Frame, Keypoint, Landmark, SfMMap};
pub use vocabulary::Vocabulary;
