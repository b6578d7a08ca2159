//! Map data model: cameras, frames with keypoints, landmarks, and their observation links.
//!
//! The on-disk format is newline-delimited JSON. Every line is one record tagged by
//! `kind`; see `docs/map_format.md`. Records are written in a canonical order (map
//! header, cameras by id, frames by id, keypoints by frame then index, landmarks by
//! id) so that saving the same map twice yields identical bytes.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::descriptor::{Descriptor, DEFAULT_DESCRIPTOR_BITS};
use crate::error::{Error, Result};
use crate::geometry::Pose;

pub type CameraId = u64;
pub type FrameId = u64;
pub type LandmarkId = u64;

const ROTATION_TOL: f64 = 1e-9;
const GRAVITY_TOL: f64 = 1e-9;

/// Pinhole intrinsics. Pixel coordinates are assumed undistorted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub camera_id: CameraId,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidMap(format!("camera {} has invalid intrinsics", self.camera_id)))
        }
    }

    #[inline]
    pub fn normalize(&self, u: f64, v: f64) -> (f64, f64) {
        ((u - self.cx) / self.fx, (v - self.cy) / self.fy)
    }

    #[inline]
    pub fn denormalize(&self, x: f64, y: f64) -> (f64, f64) {
        (x * self.fx + self.cx, y * self.fy + self.cy)
    }

    pub fn contains_pixel(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64
    }

    /// Converts a pixel distance to normalized image-plane units.
    pub fn pixels_to_normalized(&self, pixels: f64) -> f64 {
        pixels * 2.0 / (self.fx + self.fy)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Keypoint {
    pub u: f64,
    pub v: f64,
    /// Detector scale in pixels.
    pub scale: f64,
    pub descriptor: Descriptor,
    pub landmark_id: Option<LandmarkId>,
}

/// Normalized image-plane coordinates of a keypoint.
pub fn normalize_keypoint(kp: &Keypoint, cam: &CameraIntrinsics) -> (f64, f64) {
    cam.normalize(kp.u, kp.v)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub frame_id: FrameId,
    pub camera_id: CameraId,
    pub pose: Pose,
    /// Unit gravity direction expressed in the camera frame.
    pub gravity_in_camera: Vector3<f64>,
    pub keypoints: Vec<Keypoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Observation {
    pub frame_id: FrameId,
    pub keypoint: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Landmark {
    pub landmark_id: LandmarkId,
    pub position: Vector3<f64>,
    /// Sorted by `(frame_id, keypoint)`.
    pub observations: Vec<Observation>,
}

/// A linked, validated map. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct SfMMap {
    descriptor_bits: usize,
    cameras: Vec<CameraIntrinsics>,
    frames: Vec<Frame>,
    landmarks: Vec<Landmark>,
    camera_index: BTreeMap<CameraId, usize>,
    frame_index: BTreeMap<FrameId, usize>,
    landmark_index: BTreeMap<LandmarkId, usize>,
}

impl SfMMap {
    pub fn empty() -> Self {
        Self::from_parts(DEFAULT_DESCRIPTOR_BITS, vec![], vec![], vec![]).expect("empty map is valid")
    }

    /// Link and validate a map. Observations are derived from keypoint landmark ids;
    /// every landmark must be observed at least once.
    pub fn from_parts(
        descriptor_bits: usize,
        mut cameras: Vec<CameraIntrinsics>,
        mut frames: Vec<Frame>,
        landmark_positions: Vec<(LandmarkId, Vector3<f64>)>,
    ) -> Result<Self> {
        cameras.sort_by_key(|c| c.camera_id);
        frames.sort_by_key(|f| f.frame_id);

        let mut camera_index = BTreeMap::new();
        for (i, cam) in cameras.iter().enumerate() {
            cam.validate()?;
            if camera_index.insert(cam.camera_id, i).is_some() {
                return Err(Error::InvalidMap(format!("duplicate camera id {}", cam.camera_id)));
            }
        }

        let mut landmarks: Vec<Landmark> = landmark_positions
            .into_iter()
            .map(|(landmark_id, position)| Landmark {
                landmark_id,
                position,
                observations: Vec::new(),
            })
            .collect();
        landmarks.sort_by_key(|l| l.landmark_id);
        let mut landmark_index = BTreeMap::new();
        for (i, lm) in landmarks.iter().enumerate() {
            if landmark_index.insert(lm.landmark_id, i).is_some() {
                return Err(Error::InvalidMap(format!("duplicate landmark id {}", lm.landmark_id)));
            }
        }

        let mut frame_index = BTreeMap::new();
        for (fi, frame) in frames.iter().enumerate() {
            if frame_index.insert(frame.frame_id, fi).is_some() {
                return Err(Error::InvalidMap(format!("duplicate frame id {}", frame.frame_id)));
            }
            let cam = camera_index
                .get(&frame.camera_id)
                .map(|&i| &cameras[i])
                .ok_or(Error::DanglingReference {
                    kind: "camera",
                    id: frame.camera_id,
                })?;
            validate_frame(frame, cam, descriptor_bits)?;
            for (ki, kp) in frame.keypoints.iter().enumerate() {
                if let Some(lid) = kp.landmark_id {
                    let li = *landmark_index.get(&lid).ok_or(Error::DanglingReference {
                        kind: "landmark",
                        id: lid,
                    })?;
                    landmarks[li].observations.push(Observation {
                        frame_id: frame.frame_id,
                        keypoint: ki,
                    });
                }
            }
        }

        for lm in &landmarks {
            if lm.observations.is_empty() {
                return Err(Error::InvalidMap(format!(
                    "landmark {} has no observations",
                    lm.landmark_id
                )));
            }
        }

        Ok(Self {
            descriptor_bits,
            cameras,
            frames,
            landmarks,
            camera_index,
            frame_index,
            landmark_index,
        })
    }

    pub fn descriptor_bits(&self) -> usize {
        self.descriptor_bits
    }

    pub fn cameras(&self) -> &[CameraIntrinsics] {
        &self.cameras
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn landmarks(&self) -> &[Landmark] {
        &self.landmarks
    }

    pub fn camera(&self, id: CameraId) -> Option<&CameraIntrinsics> {
        self.camera_index.get(&id).map(|&i| &self.cameras[i])
    }

    pub fn frame(&self, id: FrameId) -> Option<&Frame> {
        self.frame_index.get(&id).map(|&i| &self.frames[i])
    }

    pub fn landmark(&self, id: LandmarkId) -> Option<&Landmark> {
        self.landmark_index.get(&id).map(|&i| &self.landmarks[i])
    }

    pub fn camera_of(&self, frame: &Frame) -> &CameraIntrinsics {
        self.camera(frame.camera_id).expect("frame camera resolved at construction")
    }

    pub fn keypoint(&self, obs: Observation) -> Option<&Keypoint> {
        self.frame(obs.frame_id).and_then(|f| f.keypoints.get(obs.keypoint))
    }

    /// Median keypoint scale over all frames, or 1.0 for a map without keypoints.
    pub fn median_keypoint_scale(&self) -> f64 {
        let mut scales: Vec<f64> = self
            .frames
            .iter()
            .flat_map(|f| f.keypoints.iter().map(|k| k.scale))
            .collect();
        if scales.is_empty() {
            return 1.0;
        }
        scales.sort_by(f64::total_cmp);
        scales[scales.len() / 2]
    }

    pub fn keypoint_count(&self) -> usize {
        self.frames.iter().map(|f| f.keypoints.len()).sum()
    }
}

fn validate_frame(frame: &Frame, cam: &CameraIntrinsics, bits: usize) -> Result<()> {
    if frame.pose.orthonormality_error() > ROTATION_TOL {
        return Err(Error::InvalidMap(format!(
            "frame {} rotation is not a proper rotation",
            frame.frame_id
        )));
    }
    if (frame.gravity_in_camera.norm() - 1.0).abs() > GRAVITY_TOL {
        return Err(Error::InvalidMap(format!(
            "frame {} gravity is not unit length",
            frame.frame_id
        )));
    }
    for (i, kp) in frame.keypoints.iter().enumerate() {
        if !cam.contains_pixel(kp.u, kp.v) {
            return Err(Error::InvalidMap(format!(
                "frame {} keypoint {i} lies outside the image",
                frame.frame_id
            )));
        }
        if !(kp.scale > 0.0) {
            return Err(Error::InvalidMap(format!(
                "frame {} keypoint {i} has non-positive scale",
                frame.frame_id
            )));
        }
        if kp.descriptor.len() != bits {
            return Err(Error::LengthMismatch {
                expected: bits,
                actual: kp.descriptor.len(),
            });
        }
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
enum Record {
    Map {
        format_version: u32,
        descriptor_bits: usize,
    },
    Camera(CameraIntrinsics),
    Frame {
        frame_id: FrameId,
        camera_id: CameraId,
        /// Row-major world-from-camera rotation.
        rotation: [f64; 9],
        translation: [f64; 3],
        gravity: [f64; 3],
    },
    Keypoint {
        frame_id: FrameId,
        index: usize,
        u: f64,
        v: f64,
        scale: f64,
        descriptor: String,
        landmark_id: Option<LandmarkId>,
    },
    Landmark {
        landmark_id: LandmarkId,
        position: [f64; 3],
    },
}

const FORMAT_VERSION: u32 = 1;

pub fn save_map(map: &SfMMap, path: impl AsRef<Path>) -> Result<()> {
    let file = File::create(path.as_ref())?;
    let mut out = BufWriter::new(file);
    write_map(map, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn write_map<W: Write>(map: &SfMMap, out: &mut W) -> Result<()> {
    let mut emit = |r: &Record| -> Result<()> {
        serde_json::to_writer(&mut *out, r)?;
        out.write_all(b"\n")?;
        Ok(())
    };
    emit(&Record::Map {
        format_version: FORMAT_VERSION,
        descriptor_bits: map.descriptor_bits,
    })?;
    for cam in &map.cameras {
        emit(&Record::Camera(*cam))?;
    }
    for f in &map.frames {
        let r = &f.pose.rotation;
        emit(&Record::Frame {
            frame_id: f.frame_id,
            camera_id: f.camera_id,
            rotation: [
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
            ],
            translation: f.pose.translation.into(),
            gravity: f.gravity_in_camera.into(),
        })?;
    }
    for f in &map.frames {
        for (index, kp) in f.keypoints.iter().enumerate() {
            emit(&Record::Keypoint {
                frame_id: f.frame_id,
                index,
                u: kp.u,
                v: kp.v,
                scale: kp.scale,
                descriptor: kp.descriptor.to_hex(),
                landmark_id: kp.landmark_id,
            })?;
        }
    }
    for lm in &map.landmarks {
        emit(&Record::Landmark {
            landmark_id: lm.landmark_id,
            position: lm.position.into(),
        })?;
    }
    Ok(())
}

pub fn load_map(path: impl AsRef<Path>) -> Result<SfMMap> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    read_map(reader, path)
}

pub fn read_map<R: BufRead>(reader: R, path: &Path) -> Result<SfMMap> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut descriptor_bits: Option<usize> = None;
    let mut cameras = Vec::new();
    let mut frames: Vec<Frame> = Vec::new();
    let mut frame_slot: BTreeMap<FrameId, usize> = BTreeMap::new();
    let mut landmarks = Vec::new();

    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record =
            serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
        match record {
            Record::Map {
                format_version,
                descriptor_bits: bits,
            } => {
                if format_version != FORMAT_VERSION {
                    return Err(parse_err(lineno, format!("unsupported format version {format_version}")));
                }
                if bits == 0 || bits % 8 != 0 {
                    return Err(parse_err(lineno, format!("descriptor_bits {bits} must be a positive multiple of 8")));
                }
                descriptor_bits = Some(bits);
            }
            Record::Camera(cam) => cameras.push(cam),
            Record::Frame {
                frame_id,
                camera_id,
                rotation,
                translation,
                gravity,
            } => {
                if frame_slot.insert(frame_id, frames.len()).is_some() {
                    return Err(parse_err(lineno, format!("duplicate frame id {frame_id}")));
                }
                frames.push(Frame {
                    frame_id,
                    camera_id,
                    pose: Pose::new(Matrix3::from_row_slice(&rotation), translation.into()),
                    gravity_in_camera: gravity.into(),
                    keypoints: Vec::new(),
                });
            }
            Record::Keypoint {
                frame_id,
                index,
                u,
                v,
                scale,
                descriptor,
                landmark_id,
            } => {
                let slot = *frame_slot.get(&frame_id).ok_or(Error::DanglingReference {
                    kind: "frame",
                    id: frame_id,
                })?;
                let frame = &mut frames[slot];
                if index != frame.keypoints.len() {
                    return Err(parse_err(
                        lineno,
                        format!(
                            "keypoint index {index} of frame {frame_id} out of order (expected {})",
                            frame.keypoints.len()
                        ),
                    ));
                }
                let descriptor =
                    Descriptor::from_hex(&descriptor).map_err(|e| parse_err(lineno, e.to_string()))?;
                let bits = *descriptor_bits.get_or_insert(descriptor.len());
                if descriptor.len() != bits {
                    return Err(parse_err(
                        lineno,
                        format!("descriptor has {} bits, map uses {bits}", descriptor.len()),
                    ));
                }
                frame.keypoints.push(Keypoint {
                    u,
                    v,
                    scale,
                    descriptor,
                    landmark_id,
                });
            }
            Record::Landmark {
                landmark_id,
                position,
            } => landmarks.push((landmark_id, Vector3::from(position))),
        }
    }

    SfMMap::from_parts(
        descriptor_bits.unwrap_or(DEFAULT_DESCRIPTOR_BITS),
        cameras,
        frames,
        landmarks,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn camera() -> CameraIntrinsics {
        CameraIntrinsics {
            camera_id: 0,
            fx: 500.0,
            fy: 480.0,
            cx: 320.0,
            cy: 240.0,
            width: 640,
            height: 480,
        }
    }

    fn keypoint(landmark_id: Option<LandmarkId>) -> Keypoint {
        Keypoint {
            u: 100.0,
            v: 200.0,
            scale: 8.0,
            descriptor: Descriptor::zeros(16),
            landmark_id,
        }
    }

    fn frame(frame_id: FrameId, keypoints: Vec<Keypoint>) -> Frame {
        Frame {
            frame_id,
            camera_id: 0,
            pose: Pose::identity(),
            gravity_in_camera: Vector3::new(0.0, 1.0, 0.0),
            keypoints,
        }
    }

    fn parse(text: &str) -> Result<SfMMap> {
        read_map(text.as_bytes(), Path::new("<mem>"))
    }

    #[test]
    fn minimal_map_links_one_observation() {
        let text = r#"{"kind":"camera","camera_id":0,"fx":500,"fy":500,"cx":320,"cy":240,"width":640,"height":480}
{"kind":"frame","frame_id":3,"camera_id":0,"rotation":[1,0,0,0,1,0,0,0,1],"translation":[0,0,0],"gravity":[0,1,0]}
{"kind":"keypoint","frame_id":3,"index":0,"u":10,"v":20,"scale":4,"descriptor":"00ff","landmark_id":7}
{"kind":"landmark","landmark_id":7,"position":[1,2,3]}
"#;
        let map = parse(text).unwrap();
        assert_eq!(map.descriptor_bits(), 16);
        let lm = map.landmark(7).unwrap();
        assert_eq!(lm.observations, vec![Observation { frame_id: 3, keypoint: 0 }]);
        assert_eq!(map.keypoint(lm.observations[0]).unwrap().landmark_id, Some(7));
    }

    #[test]
    fn dangling_landmark_is_named() {
        let text = r#"{"kind":"camera","camera_id":0,"fx":500,"fy":500,"cx":320,"cy":240,"width":640,"height":480}
{"kind":"frame","frame_id":1,"camera_id":0,"rotation":[1,0,0,0,1,0,0,0,1],"translation":[0,0,0],"gravity":[0,1,0]}
{"kind":"keypoint","frame_id":1,"index":0,"u":10,"v":20,"scale":4,"descriptor":"00ff","landmark_id":99}
"#;
        match parse(text) {
            Err(Error::DanglingReference { kind: "landmark", id: 99 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parse_error_reports_line() {
        let text = "{\"kind\":\"camera\",\"camera_id\":0,\"fx\":500,\"fy\":500,\"cx\":320,\"cy\":240,\"width\":640,\"height\":480}\n{not json}\n";
        match parse(text) {
            Err(Error::Parse { line: 2, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn mixed_descriptor_lengths_are_rejected() {
        let text = r#"{"kind":"camera","camera_id":0,"fx":500,"fy":500,"cx":320,"cy":240,"width":640,"height":480}
{"kind":"frame","frame_id":1,"camera_id":0,"rotation":[1,0,0,0,1,0,0,0,1],"translation":[0,0,0],"gravity":[0,1,0]}
{"kind":"keypoint","frame_id":1,"index":0,"u":10,"v":20,"scale":4,"descriptor":"00ff","landmark_id":null}
{"kind":"keypoint","frame_id":1,"index":1,"u":10,"v":20,"scale":4,"descriptor":"00ff00","landmark_id":null}
"#;
        assert!(matches!(parse(text), Err(Error::Parse { line: 4, .. })));
    }

    #[test]
    fn empty_map_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.ndjson");
        let map = SfMMap::empty();
        save_map(&map, &path).unwrap();
        assert_eq!(load_map(&path).unwrap(), map);
    }

    #[test]
    fn shared_landmark_round_trips_byte_identically() {
        let frames = vec![
            frame(1, vec![keypoint(Some(5)), keypoint(None)]),
            frame(2, vec![keypoint(Some(5))]),
        ];
        let map = SfMMap::from_parts(16, vec![camera()], frames, vec![(5, Vector3::new(0.5, -1.0, 4.0))]).unwrap();
        assert_eq!(map.landmark(5).unwrap().observations.len(), 2);

        let mut a = Vec::new();
        write_map(&map, &mut a).unwrap();
        let loaded = read_map(a.as_slice(), Path::new("<mem>")).unwrap();
        assert_eq!(loaded, map);
        let mut b = Vec::new();
        write_map(&loaded, &mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let err = save_map(&SfMMap::empty(), "/nonexistent-dir/definitely/map.ndjson").unwrap_err();
        assert!(matches!(err, Error::Io(_)));
    }

    #[test]
    fn unobserved_landmark_is_rejected() {
        let err = SfMMap::from_parts(16, vec![camera()], vec![], vec![(1, Vector3::zeros())]).unwrap_err();
        assert!(matches!(err, Error::InvalidMap(_)));
    }

    #[test]
    fn normalize_keypoint_matches_formula() {
        let cam = camera();
        let mut kp = keypoint(None);
        kp.u = cam.cx;
        kp.v = cam.cy;
        assert_eq!(normalize_keypoint(&kp, &cam), (0.0, 0.0));
        kp.u = cam.cx + cam.fx;
        assert_eq!(normalize_keypoint(&kp, &cam), (1.0, 0.0));
        let (x, y) = cam.normalize(123.25, 77.5);
        let (u, v) = cam.denormalize(x, y);
        assert!((u - 123.25).abs() < 1e-12 && (v - 77.5).abs() < 1e-12);
    }
}
