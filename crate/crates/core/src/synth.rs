//! Synthetic corridor worlds with controllable visual aliasing.
//!
//! The world is a row of box rooms along the x axis. Landmarks sit on the two side
//! walls. Rooms are grouped into layouts: rooms sharing a layout contain the same
//! "structural" landmarks at the same room-relative positions with identical
//! canonical descriptors, so descriptor-only matching cannot tell them apart. Every
//! room also gets its own "cue" landmarks with unique descriptors at random
//! positions, which is what the visual context can pick up on.
//!
//! Descriptors come from a fixed appearance model: a set of prototype bit strings
//! (seeded by `appearance_seed`, shared across datasets) perturbed per landmark.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::descriptor::Descriptor;
use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::map::{CameraIntrinsics, Frame, FrameId, Keypoint, LandmarkId, SfMMap};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub seed: u64,
    /// Seeds the descriptor prototypes; keep fixed across datasets of one "domain".
    pub appearance_seed: u64,
    pub descriptor_bits: usize,
    pub appearance_clusters: usize,
    /// Per-bit flip probability from a prototype to a landmark's canonical descriptor.
    pub cluster_spread: f64,

    pub landmark_count: usize,
    pub rooms: usize,
    /// Number of rooms sharing one structural layout (1 disables aliasing).
    pub aliasing_factor: usize,
    /// Fraction of each room's landmarks that are unique cues.
    pub cue_fraction: f64,
    pub room_length: f64,
    pub room_width: f64,
    pub room_height: f64,
    pub room_gap: f64,
    pub landmark_size: (f64, f64),

    pub train_frames: usize,
    pub eval_frames: usize,
    /// Distance from the camera path to the wall being viewed (meters).
    pub wall_distance: f64,
    /// Extra offset of the evaluation path towards the viewed wall (meters).
    pub eval_path_shift: f64,
    pub yaw_wobble_deg: f64,
    pub roll_wobble_deg: f64,
    pub max_depth: f64,

    pub fx: f64,
    pub width: u32,
    pub height: u32,

    pub bit_flip: f64,
    pub pixel_jitter: f64,
    pub dropout: f64,
    pub clutter_per_frame: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            appearance_seed: 0xA11A5,
            descriptor_bits: 384,
            appearance_clusters: 16,
            cluster_spread: 0.35,
            landmark_count: 2000,
            rooms: 4,
            aliasing_factor: 2,
            cue_fraction: 0.3,
            room_length: 8.0,
            room_width: 4.0,
            room_height: 3.0,
            room_gap: 0.5,
            landmark_size: (0.03, 0.08),
            train_frames: 120,
            eval_frames: 60,
            wall_distance: 2.5,
            eval_path_shift: 0.3,
            yaw_wobble_deg: 20.0,
            roll_wobble_deg: 5.0,
            max_depth: 7.0,
            fx: 400.0,
            width: 640,
            height: 480,
            bit_flip: 0.05,
            pixel_jitter: 0.5,
            dropout: 0.1,
            clutter_per_frame: 10,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let probs = [self.cluster_spread, self.cue_fraction, self.bit_flip, self.dropout];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidConfig("probabilities must lie in [0, 1]".into()));
        }
        if self.rooms == 0 || self.aliasing_factor == 0 || self.rooms % self.aliasing_factor != 0 {
            return Err(Error::InvalidConfig(format!(
                "rooms ({}) must be a positive multiple of aliasing_factor ({})",
                self.rooms, self.aliasing_factor
            )));
        }
        if self.descriptor_bits == 0 || self.descriptor_bits % 8 != 0 {
            return Err(Error::InvalidConfig("descriptor_bits must be a positive multiple of 8".into()));
        }
        if self.appearance_clusters == 0 {
            return Err(Error::InvalidConfig("appearance_clusters must be positive".into()));
        }
        let lengths = [self.room_length, self.room_width, self.room_height, self.fx, self.max_depth];
        if lengths.iter().any(|v| !(*v > 0.0)) || self.room_gap < 0.0 || self.pixel_jitter < 0.0 {
            return Err(Error::InvalidConfig("geometry parameters must be positive".into()));
        }
        if !(self.landmark_size.0 > 0.0 && self.landmark_size.0 <= self.landmark_size.1) {
            return Err(Error::InvalidConfig("landmark_size must satisfy 0 < min <= max".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidConfig("image size must be positive".into()));
        }
        if self.wall_distance <= 0.0 || self.wall_distance + self.eval_path_shift >= self.room_width + 0.5 * self.room_width {
            return Err(Error::InvalidConfig("wall_distance must keep the camera inside the corridor".into()));
        }
        Ok(())
    }

    pub fn camera(&self) -> CameraIntrinsics {
        CameraIntrinsics {
            camera_id: 0,
            fx: self.fx,
            fy: self.fx,
            cx: self.width as f64 / 2.0,
            cy: self.height as f64 / 2.0,
            width: self.width,
            height: self.height,
        }
    }

    pub fn room_spacing(&self) -> f64 {
        self.room_length + self.room_gap
    }
}

/// Every bit flipped independently with probability `p`.
pub fn flip_bits(d: &Descriptor, p: f64, seed: u64) -> Descriptor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    flip_bits_with(d, p, &mut rng)
}

fn flip_bits_with(d: &Descriptor, p: f64, rng: &mut impl Rng) -> Descriptor {
    let mut out = d.clone();
    if p <= 0.0 {
        return out;
    }
    for i in 0..d.len() {
        if rng.random::<f64>() < p {
            out.flip(i);
        }
    }
    out
}

fn random_descriptor(bits: usize, rng: &mut impl RngCore) -> Descriptor {
    Descriptor::from_words(bits, (0..bits.div_ceil(64)).map(|_| rng.next_u64()).collect())
}

/// Prototype descriptors of the appearance model.
pub fn appearance_prototypes(cfg: &WorldConfig) -> Vec<Descriptor> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.appearance_seed);
    (0..cfg.appearance_clusters)
        .map(|_| random_descriptor(cfg.descriptor_bits, &mut rng))
        .collect()
}

/// Descriptors drawn from the same appearance model as a world but independent of
/// its landmarks; used to train vocabularies on unrelated data.
pub fn descriptor_pool(cfg: &WorldConfig, n: usize, seed: u64) -> Vec<Descriptor> {
    let prototypes = appearance_prototypes(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15);
    (0..n)
        .map(|_| {
            let p = &prototypes[rng.random_range(0..prototypes.len())];
            let canonical = flip_bits_with(p, cfg.cluster_spread, &mut rng);
            flip_bits_with(&canonical, cfg.bit_flip, &mut rng)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LandmarkKind {
    Structural,
    Cue,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldLandmark {
    pub landmark_id: LandmarkId,
    pub position: Vector3<f64>,
    pub size: f64,
    pub canonical: Descriptor,
    pub room: usize,
    pub kind: LandmarkKind,
}

/// A query frame. Keypoints carry no landmark ids; the truth is kept alongside.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalFrame {
    pub frame: Frame,
    pub truth: Vec<Option<LandmarkId>>,
}

#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub config: WorldConfig,
    pub map: SfMMap,
    pub eval: Vec<EvalFrame>,
    pub landmarks: Vec<WorldLandmark>,
}

impl SyntheticWorld {
    pub fn camera(&self) -> CameraIntrinsics {
        self.config.camera()
    }

    /// Map landmarks that have an identical-descriptor twin elsewhere.
    pub fn twins(&self) -> BTreeMap<LandmarkId, Vec<LandmarkId>> {
        let mut by_desc: BTreeMap<&[u64], Vec<LandmarkId>> = BTreeMap::new();
        for lm in &self.landmarks {
            by_desc.entry(lm.canonical.words()).or_default().push(lm.landmark_id);
        }
        let mut out = BTreeMap::new();
        for ids in by_desc.values().filter(|v| v.len() > 1) {
            for &a in ids {
                out.insert(a, ids.iter().copied().filter(|&b| b != a).collect());
            }
        }
        out
    }

    /// Evaluation frames replaying the training map frames (same poses and keypoints).
    pub fn replay_frames(&self) -> Vec<EvalFrame> {
        self.map
            .frames()
            .iter()
            .map(|f| {
                let truth = f.keypoints.iter().map(|k| k.landmark_id).collect();
                let mut frame = f.clone();
                frame.keypoints.iter_mut().for_each(|k| k.landmark_id = None);
                EvalFrame { frame, truth }
            })
            .collect()
    }
}

struct Placement {
    side: f64,
    x_rel: f64,
    z: f64,
    size: f64,
    canonical: Descriptor,
}

fn place(cfg: &WorldConfig, prototypes: &[Descriptor], rng: &mut ChaCha8Rng) -> Placement {
    let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let margin = 0.2;
    let x_rel = margin + (cfg.room_length - 2.0 * margin) * rng.random::<f64>();
    let z = 0.3 + (cfg.room_height - 0.6) * rng.random::<f64>();
    let size = cfg.landmark_size.0 + (cfg.landmark_size.1 - cfg.landmark_size.0) * rng.random::<f64>();
    let proto = &prototypes[rng.random_range(0..prototypes.len())];
    let canonical = flip_bits_with(proto, cfg.cluster_spread, rng);
    Placement {
        side,
        x_rel,
        z,
        size,
        canonical,
    }
}

fn build_landmarks(cfg: &WorldConfig, rng: &mut ChaCha8Rng) -> Vec<WorldLandmark> {
    let prototypes = appearance_prototypes(cfg);
    let per_room = cfg.landmark_count / cfg.rooms;
    let extra = cfg.landmark_count % cfg.rooms;
    let layouts = cfg.rooms / cfg.aliasing_factor;
    let n_struct = ((1.0 - cfg.cue_fraction) * per_room as f64).round() as usize;
    let layout_sets: Vec<Vec<Placement>> = (0..layouts)
        .map(|_| (0..n_struct).map(|_| place(cfg, &prototypes, rng)).collect())
        .collect();

    let mut out = Vec::with_capacity(cfg.landmark_count);
    for room in 0..cfg.rooms {
        let x0 = room as f64 * cfg.room_spacing();
        let count = per_room + usize::from(room < extra);
        let push = |p: &Placement, kind: LandmarkKind, out: &mut Vec<WorldLandmark>| {
            let id = out.len() as LandmarkId;
            out.push(WorldLandmark {
                landmark_id: id,
                position: Vector3::new(x0 + p.x_rel, p.side * cfg.room_width / 2.0, p.z),
                size: p.size,
                canonical: p.canonical.clone(),
                room,
                kind,
            });
        };
        let structural = &layout_sets[room % layouts];
        let n_s = n_struct.min(count);
        for p in &structural[..n_s] {
            push(p, LandmarkKind::Structural, &mut out);
        }
        for _ in n_s..count {
            let p = place(cfg, &prototypes, rng);
            push(&p, LandmarkKind::Cue, &mut out);
        }
    }
    out
}

fn camera_pose(center: Vector3<f64>, yaw: f64, pitch: f64, roll: f64) -> Pose {
    let forward = Vector3::new(yaw.cos(), yaw.sin(), 0.0);
    let down = Vector3::new(0.0, 0.0, -1.0);
    let right = down.cross(&forward);
    let base = Matrix3::from_columns(&[right, down, forward]);
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, pitch.cos(), -pitch.sin(), 0.0, pitch.sin(), pitch.cos());
    let rz = Matrix3::new(roll.cos(), -roll.sin(), 0.0, roll.sin(), roll.cos(), 0.0, 0.0, 0.0, 1.0);
    Pose::new(base * rx * rz, center)
}

/// World gravity (−z) expressed in the camera frame.
pub fn gravity_in_camera(pose: &Pose) -> Vector3<f64> {
    (pose.rotation.transpose() * Vector3::new(0.0, 0.0, -1.0)).normalize()
}

fn trajectory(cfg: &WorldConfig, n: usize, path_shift: f64, phase: f64, rng: &mut ChaCha8Rng) -> Vec<Pose> {
    let total = cfg.rooms as f64 * cfg.room_spacing() - cfg.room_gap;
    let wobble = cfg.yaw_wobble_deg.to_radians();
    let roll_amp = cfg.roll_wobble_deg.to_radians();
    (0..n)
        .map(|i| {
            let t = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.5 };
            let side = if i % 2 == 0 { 1.0 } else { -1.0 };
            let x = 0.5 + (total - 1.0) * t;
            let y = side * (cfg.room_width / 2.0 - cfg.wall_distance - path_shift);
            let z = 1.5 + 0.05 * (rng.random::<f64>() - 0.5);
            let yaw = side * PI / 2.0 + wobble * (2.0 * PI * (3.0 * t) + phase).sin();
            let pitch = 0.05 * (2.0 * PI * 5.0 * t + phase).sin();
            let roll = roll_amp * (2.0 * PI * 2.0 * t + 0.7 * phase).sin();
            camera_pose(Vector3::new(x, y, z), yaw, pitch, roll)
        })
        .collect()
}

fn render_frame(
    cfg: &WorldConfig,
    frame_id: FrameId,
    pose: Pose,
    landmarks: &[WorldLandmark],
    prototypes: &[Descriptor],
    rng: &mut ChaCha8Rng,
) -> Frame {
    let cam = cfg.camera();
    let jitter = Normal::new(0.0, cfg.pixel_jitter.max(1e-300)).expect("finite sigma");
    let margin = 2.0;
    let mut keypoints = Vec::new();
    for lm in landmarks {
        let pc = pose.to_camera(&lm.position);
        if pc.z < 0.3 || pc.z > cfg.max_depth {
            continue;
        }
        let (u0, v0) = cam.denormalize(pc.x / pc.z, pc.y / pc.z);
        let (du, dv) = if cfg.pixel_jitter > 0.0 {
            (jitter.sample(rng), jitter.sample(rng))
        } else {
            (0.0, 0.0)
        };
        let (u, v) = (u0 + du, v0 + dv);
        let inside = u >= margin && v >= margin && u < cam.width as f64 - margin && v < cam.height as f64 - margin;
        let drop = rng.random::<f64>() < cfg.dropout;
        let noise_seed = rng.next_u64();
        if !inside || drop {
            continue;
        }
        keypoints.push(Keypoint {
            u,
            v,
            scale: cfg.fx * lm.size / pc.z,
            descriptor: flip_bits(&lm.canonical, cfg.bit_flip, noise_seed),
            landmark_id: Some(lm.landmark_id),
        });
    }
    for _ in 0..cfg.clutter_per_frame {
        let u = margin + (cam.width as f64 - 2.0 * margin) * rng.random::<f64>();
        let v = margin + (cam.height as f64 - 2.0 * margin) * rng.random::<f64>();
        let depth = cfg.wall_distance * (0.7 + 0.6 * rng.random::<f64>());
        let size = cfg.landmark_size.0 + (cfg.landmark_size.1 - cfg.landmark_size.0) * rng.random::<f64>();
        let proto = &prototypes[rng.random_range(0..prototypes.len())];
        let d = flip_bits_with(proto, cfg.cluster_spread, rng);
        keypoints.push(Keypoint {
            u,
            v,
            scale: cfg.fx * size / depth,
            descriptor: d,
            landmark_id: None,
        });
    }
    // Detector output order: shuffle so keypoint index carries no information.
    for i in (1..keypoints.len()).rev() {
        let j = rng.random_range(0..=i);
        keypoints.swap(i, j);
    }
    Frame {
        frame_id,
        camera_id: cam.camera_id,
        pose,
        gravity_in_camera: gravity_in_camera(&pose),
        keypoints,
    }
}

pub fn generate_world(cfg: &WorldConfig) -> Result<SyntheticWorld> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let landmarks = build_landmarks(cfg, &mut rng);
    let prototypes = appearance_prototypes(cfg);

    let train_poses = trajectory(cfg, cfg.train_frames, 0.0, 0.0, &mut rng);
    let mut frames: Vec<Frame> = train_poses
        .into_iter()
        .enumerate()
        .map(|(i, pose)| render_frame(cfg, i as FrameId, pose, &landmarks, &prototypes, &mut rng))
        .collect();

    let eval_poses = trajectory(cfg, cfg.eval_frames, cfg.eval_path_shift, 1.3, &mut rng);
    let first_eval_id = cfg.train_frames as FrameId;
    let mut eval: Vec<EvalFrame> = eval_poses
        .into_iter()
        .enumerate()
        .map(|(i, pose)| {
            let mut frame = render_frame(cfg, first_eval_id + i as FrameId, pose, &landmarks, &prototypes, &mut rng);
            let truth = frame.keypoints.iter().map(|k| k.landmark_id).collect();
            frame.keypoints.iter_mut().for_each(|k| k.landmark_id = None);
            EvalFrame { frame, truth }
        })
        .collect();

    // Only landmarks observed in the training frames enter the map.
    let mut observed = vec![false; landmarks.len()];
    for f in &frames {
        for k in &f.keypoints {
            if let Some(id) = k.landmark_id {
                observed[id as usize] = true;
            }
        }
    }
    frames.iter_mut().for_each(|f| f.keypoints.shrink_to_fit());
    // Queries of unmapped landmarks have no known landmark to match.
    for e in &mut eval {
        for t in &mut e.truth {
            if t.is_some_and(|id| !observed[id as usize]) {
                *t = None;
            }
        }
    }
    let positions = landmarks
        .iter()
        .filter(|l| observed[l.landmark_id as usize])
        .map(|l| (l.landmark_id, l.position))
        .collect();
    let map = SfMMap::from_parts(cfg.descriptor_bits, vec![cfg.camera()], frames, positions)?;

    Ok(SyntheticWorld {
        config: cfg.clone(),
        map,
        eval,
        landmarks,
    })
}

/// Query frames in map format (keypoints without landmark ids) for file exchange.
pub fn eval_frames_as_map(eval: &[EvalFrame], camera: CameraIntrinsics, bits: usize) -> Result<SfMMap> {
    SfMMap::from_parts(bits, vec![camera], eval.iter().map(|e| e.frame.clone()).collect(), vec![])
}

/// Ground-truth CSV: one row per query keypoint with the frame's true pose.
pub fn write_ground_truth(eval: &[EvalFrame], path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "frame_id,keypoint_idx,true_landmark_id,tx,ty,tz,qw,qx,qy,qz")?;
    for e in eval {
        let t = e.frame.pose.translation;
        let q = e.frame.pose.quaternion_wxyz();
        let pose = format!("{},{},{},{},{},{},{}", t.x, t.y, t.z, q[0], q[1], q[2], q[3]);
        if e.truth.is_empty() {
            writeln!(out, "{},,,{pose}", e.frame.frame_id)?;
        }
        for (i, truth) in e.truth.iter().enumerate() {
            let lid = truth.map(|l| l.to_string()).unwrap_or_default();
            writeln!(out, "{},{i},{lid},{pose}", e.frame.frame_id)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Re-attach ground truth to query frames loaded from a map-format file.
pub fn read_ground_truth(queries: &SfMMap, path: impl AsRef<Path>) -> Result<Vec<EvalFrame>> {
    let path = path.as_ref();
    let perr = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut truth: BTreeMap<FrameId, (Pose, Vec<Option<LandmarkId>>)> = BTreeMap::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate().skip(1) {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 10 {
            return Err(perr(i + 1, format!("expected 10 columns, got {}", cols.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| perr(i + 1, format!("bad number {s}")));
        let frame_id: FrameId = cols[0].parse().map_err(|_| perr(i + 1, "bad frame id".into()))?;
        let t = Vector3::new(num(cols[3])?, num(cols[4])?, num(cols[5])?);
        let q = [num(cols[6])?, num(cols[7])?, num(cols[8])?, num(cols[9])?];
        let entry = truth
            .entry(frame_id)
            .or_insert_with(|| (Pose::from_quaternion_wxyz(q, t), Vec::new()));
        if !cols[1].is_empty() {
            let idx: usize = cols[1].parse().map_err(|_| perr(i + 1, "bad keypoint index".into()))?;
            if idx != entry.1.len() {
                return Err(perr(i + 1, "keypoint rows out of order".into()));
            }
            let lid = if cols[2].is_empty() {
                None
            } else {
                Some(cols[2].parse().map_err(|_| perr(i + 1, "bad landmark id".into()))?)
            };
            entry.1.push(lid);
        }
    }
    queries
        .frames()
        .iter()
        .map(|f| {
            let (pose, labels) = truth.remove(&f.frame_id).ok_or(Error::DanglingReference {
                kind: "ground-truth frame",
                id: f.frame_id,
            })?;
            if labels.len() != f.keypoints.len() {
                return Err(Error::InvalidMap(format!(
                    "frame {} has {} keypoints but {} truth rows",
                    f.frame_id,
                    f.keypoints.len(),
                    labels.len()
                )));
            }
            let mut frame = f.clone();
            frame.pose = pose;
            Ok(EvalFrame { frame, truth: labels })
        })
        .collect()
}
