//! Keypoint-anchored context regions and the feature vectors built from them.
//!
//! A region is stored in anchor-relative units: its center offset and half-extents
//! are expressed in normalized image-plane units for a keypoint of the reference
//! scale. Instantiating it for a keypoint scales it by `scale / reference_scale`,
//! rotates it by the in-plane angle of the projected gravity vector and centers it
//! at the keypoint. The region's descriptor is the L1-normalized histogram of
//! visual words of the other keypoints falling inside it.

use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::map::{CameraIntrinsics, Frame};
use crate::vocabulary::Vocabulary;

/// Projected gravity shorter than this leaves the roll undefined.
pub const DEGENERATE_GRAVITY_NORM: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegionConfig {
    pub n_regions: usize,
    pub area_min: f64,
    pub area_max: f64,
    pub aspect_min: f64,
    pub aspect_max: f64,
    pub offset_radius: f64,
    pub seed: u64,
}

impl Default for RegionConfig {
    fn default() -> Self {
        Self {
            n_regions: 1000,
            area_min: 1e-4,
            area_max: 0.25,
            aspect_min: 0.25,
            aspect_max: 4.0,
            offset_radius: 1.0,
            seed: 0,
        }
    }
}

impl RegionConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.area_min, self.area_max, self.aspect_min, self.aspect_max, self.offset_radius]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidBounds("region bounds must be finite".into()));
        }
        if self.n_regions == 0 {
            return Err(Error::InvalidBounds("need at least one region".into()));
        }
        if !(self.area_min > 0.0 && self.area_min < self.area_max) {
            return Err(Error::InvalidBounds(format!(
                "area bounds [{}, {}] must satisfy 0 < min < max",
                self.area_min, self.area_max
            )));
        }
        if !(self.aspect_min > 0.0 && self.aspect_min <= self.aspect_max) {
            return Err(Error::InvalidBounds(format!(
                "aspect bounds [{}, {}] must satisfy 0 < min <= max",
                self.aspect_min, self.aspect_max
            )));
        }
        if self.offset_radius < 0.0 {
            return Err(Error::InvalidBounds("offset radius must be non-negative".into()));
        }
        Ok(())
    }

    /// Log-area sampling interval `[m, n]`.
    pub fn log_area_bounds(&self) -> (f64, f64) {
        (self.area_min.ln(), self.area_max.ln())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContextRegion {
    pub offset_x: f64,
    pub offset_y: f64,
    pub half_width: f64,
    pub half_height: f64,
}

impl ContextRegion {
    pub fn area(&self) -> f64 {
        4.0 * self.half_width * self.half_height
    }

    pub fn aspect(&self) -> f64 {
        self.half_width / self.half_height
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionBank {
    pub config: RegionConfig,
    pub regions: Vec<ContextRegion>,
}

impl RegionBank {
    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    /// Text form: one header line followed by `offset_x offset_y half_width half_height` rows.
    pub fn to_text(&self) -> String {
        let c = &self.config;
        let mut s = format!(
            "ctxmatch-regions n={} seed={} area_min={:e} area_max={:e} aspect_min={:e} aspect_max={:e} offset_radius={:e}\n",
            self.regions.len(),
            c.seed,
            c.area_min,
            c.area_max,
            c.aspect_min,
            c.aspect_max,
            c.offset_radius
        );
        for r in &self.regions {
            s.push_str(&format!(
                "{:e} {:e} {:e} {:e}\n",
                r.offset_x, r.offset_y, r.half_width, r.half_height
            ));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: usize, m: &str| Error::InvalidConfig(format!("region bank line {line}: {m}"));
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad(1, "missing header"))?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some("ctxmatch-regions") {
            return Err(bad(1, "not a region bank"));
        }
        let mut config = RegionConfig::default();
        let mut n = None;
        for f in fields {
            let (k, v) = f.split_once('=').ok_or_else(|| bad(1, "malformed field"))?;
            let num = |v: &str| v.parse::<f64>().map_err(|_| bad(1, "malformed number"));
            match k {
                "n" => n = Some(v.parse::<usize>().map_err(|_| bad(1, "malformed count"))?),
                "seed" => config.seed = v.parse().map_err(|_| bad(1, "malformed seed"))?,
                "area_min" => config.area_min = num(v)?,
                "area_max" => config.area_max = num(v)?,
                "aspect_min" => config.aspect_min = num(v)?,
                "aspect_max" => config.aspect_max = num(v)?,
                "offset_radius" => config.offset_radius = num(v)?,
                _ => return Err(bad(1, "unknown field")),
            }
        }
        let mut regions = Vec::new();
        for (i, line) in lines.enumerate() {
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad(i + 2, "malformed region"))?;
            if vals.len() != 4 {
                return Err(bad(i + 2, "expected four values"));
            }
            regions.push(ContextRegion {
                offset_x: vals[0],
                offset_y: vals[1],
                half_width: vals[2],
                half_height: vals[3],
            });
        }
        let n = n.ok_or_else(|| bad(1, "missing n"))?;
        if regions.len() != n {
            return Err(bad(n + 1, "region count does not match header"));
        }
        config.n_regions = n;
        Ok(Self { config, regions })
    }
}

/// Inverse-CDF sample for `Pr(area) ∝ 1/area`: `u` uniform on `[ln a_min, ln a_max]` maps to `exp(u)`.
#[inline]
pub fn sample_region_area(u: f64) -> f64 {
    u.exp()
}

pub fn generate_regions(config: &RegionConfig) -> Result<RegionBank> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (m, n) = config.log_area_bounds();
    let (am, an) = (config.aspect_min.ln(), config.aspect_max.ln());
    let regions = (0..config.n_regions)
        .map(|_| {
            let area = sample_region_area(m + (n - m) * rng.random::<f64>());
            let aspect = if an > am {
                (am + (an - am) * rng.random::<f64>()).exp()
            } else {
                config.aspect_min
            };
            let width = (area * aspect).sqrt();
            let height = (area / aspect).sqrt();
            let radius = config.offset_radius * rng.random::<f64>().sqrt();
            let angle = 2.0 * PI * rng.random::<f64>();
            ContextRegion {
                offset_x: radius * angle.cos(),
                offset_y: radius * angle.sin(),
                half_width: 0.5 * width,
                half_height: 0.5 * height,
            }
        })
        .collect();
    Ok(RegionBank {
        config: *config,
        regions,
    })
}

/// In-plane roll of a frame: the angle that maps the image "down" axis onto the
/// projected gravity direction. `None` when gravity is (nearly) along the optical axis.
pub fn gravity_roll(gravity_in_camera: &Vector3<f64>) -> Option<f64> {
    let (gx, gy) = (gravity_in_camera.x, gravity_in_camera.y);
    if gx.hypot(gy) < DEGENERATE_GRAVITY_NORM {
        return None;
    }
    Some(gy.atan2(gx) - 0.5 * PI)
}

fn roll_or_warn(gravity_in_camera: &Vector3<f64>) -> f64 {
    gravity_roll(gravity_in_camera).unwrap_or_else(|| {
        log::warn!("projected gravity is degenerate; using zero roll for context regions");
        0.0
    })
}

/// A rectangle in the normalized image plane, rotated by `angle`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedRect {
    pub center: (f64, f64),
    pub half_extents: (f64, f64),
    pub angle: f64,
    cos: f64,
    sin: f64,
}

impl OrientedRect {
    pub fn new(center: (f64, f64), half_extents: (f64, f64), angle: f64) -> Self {
        Self {
            center,
            half_extents,
            angle,
            cos: angle.cos(),
            sin: angle.sin(),
        }
    }

    #[inline]
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.center.0;
        let dy = y - self.center.1;
        let lx = self.cos * dx + self.sin * dy;
        let ly = -self.sin * dx + self.cos * dy;
        lx.abs() <= self.half_extents.0 && ly.abs() <= self.half_extents.1
    }
}

/// Place a region around a keypoint given its normalized position, scale ratio and roll.
pub fn place_region(region: &ContextRegion, anchor: (f64, f64), scale_ratio: f64, roll: f64) -> OrientedRect {
    let (c, s) = (roll.cos(), roll.sin());
    let ox = scale_ratio * region.offset_x;
    let oy = scale_ratio * region.offset_y;
    OrientedRect::new(
        (anchor.0 + c * ox - s * oy, anchor.1 + s * ox + c * oy),
        (scale_ratio * region.half_width, scale_ratio * region.half_height),
        roll,
    )
}

pub fn instantiate_region(
    region: &ContextRegion,
    keypoint: &crate::map::Keypoint,
    cam: &CameraIntrinsics,
    gravity_in_camera: &Vector3<f64>,
    reference_scale: f64,
) -> OrientedRect {
    let anchor = cam.normalize(keypoint.u, keypoint.v);
    place_region(region, anchor, keypoint.scale / reference_scale, roll_or_warn(gravity_in_camera))
}

/// Per-frame precomputation: normalized coordinates and words of every keypoint.
#[derive(Debug, Clone)]
pub struct FrameIndex {
    pub points: Vec<(f64, f64)>,
    pub words: Vec<u32>,
    pub scales: Vec<f64>,
    pub roll: f64,
}

impl FrameIndex {
    pub fn new(frame: &Frame, cam: &CameraIntrinsics, vocab: &Vocabulary) -> Self {
        Self {
            points: frame.keypoints.iter().map(|k| cam.normalize(k.u, k.v)).collect(),
            words: frame
                .keypoints
                .iter()
                .map(|k| vocab.quantize_unchecked(&k.descriptor) as u32)
                .collect(),
            scales: frame.keypoints.iter().map(|k| k.scale).collect(),
            roll: roll_or_warn(&frame.gravity_in_camera),
        }
    }
}

/// Word histogram of the keypoints inside `rect`, skipping `exclude`, L1-normalized.
pub fn describe_region_indexed(rect: &OrientedRect, index: &FrameIndex, k: usize, exclude: Option<usize>, out: &mut [f32]) {
    debug_assert_eq!(out.len(), k);
    let mut counts = [0u32; 256];
    let mut dyn_counts;
    let counts: &mut [u32] = if k <= 256 {
        &mut counts[..k]
    } else {
        dyn_counts = vec![0u32; k];
        &mut dyn_counts
    };
    let mut total = 0u32;
    for (j, &(x, y)) in index.points.iter().enumerate() {
        if Some(j) == exclude {
            continue;
        }
        if rect.contains(x, y) {
            counts[index.words[j] as usize] += 1;
            total += 1;
        }
    }
    if total == 0 {
        out.iter_mut().for_each(|o| *o = 0.0);
    } else {
        let t = total as f32;
        for (o, &c) in out.iter_mut().zip(counts.iter()) {
            *o = c as f32 / t;
        }
    }
}

pub fn describe_region(
    rect: &OrientedRect,
    frame: &Frame,
    cam: &CameraIntrinsics,
    vocab: &Vocabulary,
    exclude: Option<usize>,
) -> Vec<f32> {
    let index = FrameIndex::new(frame, cam, vocab);
    let mut out = vec![0.0; vocab.k()];
    describe_region_indexed(rect, &index, vocab.k(), exclude, &mut out);
    out
}

/// Which parts of the feature vector are populated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub n_regions: usize,
    pub words: usize,
    pub descriptor_bits: usize,
    pub use_context: bool,
    pub use_descriptor: bool,
}

impl FeatureLayout {
    pub fn context_dim(&self) -> usize {
        if self.use_context {
            self.n_regions * self.words
        } else {
            0
        }
    }

    pub fn dim(&self) -> usize {
        self.context_dim() + if self.use_descriptor { self.descriptor_bits } else { 0 }
    }

    pub fn is_context_feature(&self, f: usize) -> bool {
        f < self.context_dim()
    }
}

/// Builds feature vectors with a fixed region bank, vocabulary and reference scale.
#[derive(Debug, Clone, Copy)]
pub struct FeatureExtractor<'a> {
    pub bank: &'a RegionBank,
    pub vocab: &'a Vocabulary,
    pub reference_scale: f64,
    pub layout: FeatureLayout,
}

impl<'a> FeatureExtractor<'a> {
    pub fn new(bank: &'a RegionBank, vocab: &'a Vocabulary, reference_scale: f64, use_context: bool, use_descriptor: bool) -> Self {
        Self {
            bank,
            vocab,
            reference_scale,
            layout: FeatureLayout {
                n_regions: bank.len(),
                words: vocab.k(),
                descriptor_bits: vocab.bits(),
                use_context,
                use_descriptor,
            },
        }
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn index(&self, frame: &Frame, cam: &CameraIntrinsics) -> FrameIndex {
        FrameIndex::new(frame, cam, self.vocab)
    }

    /// Region blocks in bank order followed by the descriptor bits as 0/1.
    pub fn write_features(&self, frame: &Frame, index: &FrameIndex, keypoint: usize, out: &mut [f32]) {
        debug_assert_eq!(out.len(), self.dim());
        let k = self.layout.words;
        let ctx = self.layout.context_dim();
        if self.layout.use_context {
            let anchor = index.points[keypoint];
            let ratio = index.scales[keypoint] / self.reference_scale;
            for (r, block) in self.bank.regions.iter().zip(out[..ctx].chunks_exact_mut(k)) {
                let rect = place_region(r, anchor, ratio, index.roll);
                describe_region_indexed(&rect, index, k, Some(keypoint), block);
            }
        }
        if self.layout.use_descriptor {
            let d = &frame.keypoints[keypoint].descriptor;
            for (i, o) in out[ctx..].iter_mut().enumerate() {
                *o = if d.get(i) { 1.0 } else { 0.0 };
            }
        }
    }

    pub fn feature_vector(&self, frame: &Frame, index: &FrameIndex, keypoint: usize) -> Vec<f32> {
        let mut out = vec![0.0; self.dim()];
        self.write_features(frame, index, keypoint, &mut out);
        out
    }
}

/// Convenience wrapper building the index for a single keypoint.
pub fn build_feature_vector(
    frame: &Frame,
    keypoint: usize,
    cam: &CameraIntrinsics,
    bank: &RegionBank,
    vocab: &Vocabulary,
    reference_scale: f64,
) -> Vec<f32> {
    let fx = FeatureExtractor::new(bank, vocab, reference_scale, true, true);
    let index = fx.index(frame, cam);
    fx.feature_vector(frame, &index, keypoint)
}
