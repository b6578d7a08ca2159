//! Camera pose from 2D-3D correspondences: P3P inside RANSAC plus Gauss-Newton refinement.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, Matrix2x3, Matrix3, Matrix6, SMatrix, Vector2, Vector3, Vector6};
use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{exp_so3, rotation_angle, skew, Pose};
use crate::map::{normalize_keypoint, CameraIntrinsics, Frame, FrameId, SfMMap};
use crate::matching::{Correspondence2D3D, Matcher};

/// A world point and its observation in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointCorrespondence {
    pub world: Vector3<f64>,
    pub image: Vector2<f64>,
}

impl PointCorrespondence {
    pub fn new(world: Vector3<f64>, x: f64, y: f64) -> Self {
        Self {
            world,
            image: Vector2::new(x, y),
        }
    }

    fn bearing(&self) -> Vector3<f64> {
        Vector3::new(self.image.x, self.image.y, 1.0).normalize()
    }
}

/// Normalized reprojection error, infinite for points at or behind the camera.
pub fn reprojection_error(pose: &Pose, c: &PointCorrespondence) -> f64 {
    let pc = pose.to_camera(&c.world);
    if pc.z <= 0.0 {
        return f64::INFINITY;
    }
    (pc.x / pc.z - c.image.x).hypot(pc.y / pc.z - c.image.y)
}

/// Real roots of `Σ coeffs[i] x^(n-i)` (highest degree first), Newton-polished.
fn real_roots(coeffs: &[f64]) -> Vec<f64> {
    let scale = coeffs.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    if scale == 0.0 {
        return Vec::new();
    }
    let lead = coeffs.iter().position(|c| c.abs() > 1e-12 * scale);
    let Some(lead) = lead else { return Vec::new() };
    let p: Vec<f64> = coeffs[lead..].iter().map(|c| c / coeffs[lead]).collect();
    let n = p.len() - 1;
    if n == 0 {
        return Vec::new();
    }
    let mut companion = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        companion[(0, j)] = -p[j + 1];
    }
    for i in 1..n {
        companion[(i, i - 1)] = 1.0;
    }
    let eval = |x: f64| p.iter().fold((0.0, 0.0), |(v, d), &c| (v * x + c, d * x + v));
    companion
        .complex_eigenvalues()
        .iter()
        .filter(|z| z.im.abs() <= 1e-6 * (1.0 + z.re.abs()))
        .map(|z| {
            let mut x = z.re;
            for _ in 0..8 {
                let (v, d) = eval(x);
                if d == 0.0 {
                    break;
                }
                let step = v / d;
                x -= step;
                if step.abs() <= 1e-15 * (1.0 + x.abs()) {
                    break;
                }
            }
            x
        })
        .collect()
}

/// Rigid `(R, t)` minimizing `Σ |R·p + t − q|²`.
fn kabsch(p: &[Vector3<f64>], q: &[Vector3<f64>]) -> (Matrix3<f64>, Vector3<f64>) {
    let n = p.len() as f64;
    let pc = p.iter().sum::<Vector3<f64>>() / n;
    let qc = q.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (a, b) in p.iter().zip(q) {
        h += (a - pc) * (b - qc).transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let v = vt.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let r = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
    (r, qc - r * pc)
}

/// All camera poses consistent with three correspondences (Grunert's quartic).
pub fn solve_pnp_minimal(corrs: &[PointCorrespondence; 3]) -> Result<Vec<Pose>> {
    let [p1, p2, p3] = [corrs[0].world, corrs[1].world, corrs[2].world];
    let scale = (p2 - p1).norm().max((p3 - p1).norm()).max((p3 - p2).norm());
    if scale == 0.0 || (p2 - p1).cross(&(p3 - p1)).norm() <= 1e-9 * scale * scale {
        return Err(Error::DegenerateSample("collinear landmarks"));
    }
    let [j1, j2, j3] = [corrs[0].bearing(), corrs[1].bearing(), corrs[2].bearing()];
    if j1.cross(&j2).norm() < 1e-12 || j1.cross(&j3).norm() < 1e-12 || j2.cross(&j3).norm() < 1e-12 {
        return Err(Error::DegenerateSample("coincident bearings"));
    }
    let a2 = (p2 - p3).norm_squared();
    let b2 = (p1 - p3).norm_squared();
    let c2 = (p1 - p2).norm_squared();
    let (ca, cb, cg) = (j2.dot(&j3), j1.dot(&j3), j1.dot(&j2));

    let amc = (a2 - c2) / b2;
    let apc = (a2 + c2) / b2;
    let bmc = (b2 - c2) / b2;
    let bma = (b2 - a2) / b2;
    let (ca2, cb2, cg2) = (ca * ca, cb * cb, cg * cg);

    let a4 = (amc - 1.0).powi(2) - 4.0 * c2 / b2 * ca2;
    let a3 = 4.0 * (amc * (1.0 - amc) * cb - (1.0 - apc) * ca * cg + 2.0 * c2 / b2 * ca2 * cb);
    let a2c = 2.0 * (amc * amc - 1.0 + 2.0 * amc * amc * cb2 + 2.0 * bmc * ca2 - 4.0 * apc * ca * cb * cg + 2.0 * bma * cg2);
    let a1 = 4.0 * (-amc * (1.0 + amc) * cb + 2.0 * a2 / b2 * cg2 * cb - (1.0 - apc) * ca * cg);
    let a0 = (1.0 + amc).powi(2) - 4.0 * a2 / b2 * cg2;

    let world = [p1, p2, p3];
    let mut poses: Vec<Pose> = Vec::new();
    for v in real_roots(&[a4, a3, a2c, a1, a0]) {
        if v <= 0.0 {
            continue;
        }
        let denom = 2.0 * (cg - v * ca);
        if denom.abs() < 1e-14 {
            continue;
        }
        let u = ((-1.0 + amc) * v * v - 2.0 * amc * cb * v + 1.0 + amc) / denom;
        if u <= 0.0 {
            continue;
        }
        let d1sq = b2 / (1.0 + v * v - 2.0 * v * cb);
        if !(d1sq > 0.0) {
            continue;
        }
        let s1 = d1sq.sqrt();
        let cam = [j1 * s1, j2 * (u * s1), j3 * (v * s1)];
        let (r, t) = kabsch(&world, &cam);
        let mut pose = Pose::from_camera_from_world(&r, &t);
        let residual = |p: &Pose| corrs.iter().map(|c| reprojection_error(p, c)).fold(0.0, f64::max);
        if residual(&pose) > 1e-12 {
            pose = refine_pose(&pose, corrs, &[0, 1, 2], 5);
        }
        if residual(&pose) < 1e-8 && !poses.iter().any(|q| same_pose(q, &pose)) {
            poses.push(pose);
        }
    }
    Ok(poses)
}

fn same_pose(a: &Pose, b: &Pose) -> bool {
    (a.translation - b.translation).norm() < 1e-9 && (a.rotation - b.rotation).abs().max() < 1e-9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RansacConfig {
    pub max_iterations: usize,
    pub confidence: f64,
    /// Inlier threshold in pixels, converted per camera.
    pub inlier_threshold_px: f64,
    pub min_inliers: usize,
    pub refine_iterations: usize,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            confidence: 0.999,
            inlier_threshold_px: 2.0,
            min_inliers: 6,
            refine_iterations: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacResult {
    pub pose: Option<Pose>,
    pub inliers: Vec<usize>,
    pub iterations: usize,
    pub inlier_ratio: f64,
}

fn inliers_of(pose: &Pose, corrs: &[PointCorrespondence], threshold: f64) -> (Vec<usize>, f64) {
    let mut idx = Vec::new();
    let mut err = 0.0;
    for (i, c) in corrs.iter().enumerate() {
        let e = reprojection_error(pose, c);
        if e < threshold {
            idx.push(i);
            err += e;
        }
    }
    (idx, err)
}

fn squared_cost(pose: &Pose, corrs: &[PointCorrespondence], subset: &[usize]) -> f64 {
    subset
        .iter()
        .map(|&i| {
            let e = reprojection_error(pose, &corrs[i]);
            e * e
        })
        .sum()
}

/// Gauss-Newton on the squared normalized reprojection error. Steps that do not
/// lower the cost are rejected, so the result is never worse than the input.
pub fn refine_pose(pose: &Pose, corrs: &[PointCorrespondence], subset: &[usize], iterations: usize) -> Pose {
    let (mut r, mut t) = pose.camera_from_world();
    let mut best = *pose;
    let mut cost = squared_cost(pose, corrs, subset);
    for _ in 0..iterations {
        let mut jtj = Matrix6::<f64>::zeros();
        let mut jtr = Vector6::<f64>::zeros();
        for &i in subset {
            let c = &corrs[i];
            let rx = r * c.world;
            let pc = rx + t;
            if pc.z <= 0.0 {
                continue;
            }
            let iz = 1.0 / pc.z;
            let res = Vector2::new(pc.x * iz - c.image.x, pc.y * iz - c.image.y);
            let jp = Matrix2x3::new(iz, 0.0, -pc.x * iz * iz, 0.0, iz, -pc.y * iz * iz);
            let mut j = SMatrix::<f64, 2, 6>::zeros();
            j.fixed_view_mut::<2, 3>(0, 0).copy_from(&(jp * -skew(&rx)));
            j.fixed_view_mut::<2, 3>(0, 3).copy_from(&jp);
            jtj += j.transpose() * j;
            jtr += j.transpose() * res;
        }
        let Some(delta) = jtj.cholesky().map(|ch| ch.solve(&-jtr)) else { break };
        let dw = Vector3::new(delta[0], delta[1], delta[2]);
        let dt = Vector3::new(delta[3], delta[4], delta[5]);
        let r_new = exp_so3(&dw) * r;
        let t_new = t + dt;
        let candidate = Pose::from_camera_from_world(&r_new, &t_new);
        let new_cost = squared_cost(&candidate, corrs, subset);
        if !(new_cost < cost) {
            break;
        }
        let converged = cost - new_cost <= 1e-15 * cost.max(1e-300);
        (r, t, cost, best) = (r_new, t_new, new_cost, candidate);
        if converged {
            break;
        }
    }
    best
}

pub fn pnp_ransac(corrs: &[PointCorrespondence], threshold: f64, config: &RansacConfig) -> Result<RansacResult> {
    if corrs.len() < 3 {
        return Err(Error::TooFewCorrespondences {
            needed: 3,
            got: corrs.len(),
        });
    }
    let n = corrs.len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut best: Option<(Pose, usize, f64)> = None;
    let mut bound = config.max_iterations;
    let mut iterations = 0;
    while iterations < bound.min(config.max_iterations) {
        iterations += 1;
        let idx = sample_indices(&mut rng, n, 3);
        let sample = [corrs[idx.index(0)], corrs[idx.index(1)], corrs[idx.index(2)]];
        let Ok(solutions) = solve_pnp_minimal(&sample) else { continue };
        for pose in solutions {
            let (inl, err) = inliers_of(&pose, corrs, threshold);
            let better = match &best {
                None => true,
                Some((_, count, best_err)) => inl.len() > *count || (inl.len() == *count && err < *best_err),
            };
            if better {
                let w = inl.len() as f64 / n as f64;
                best = Some((pose, inl.len(), err));
                bound = adaptive_bound(w, config.confidence, config.max_iterations);
            }
        }
    }
    let Some((pose, count, _)) = best else {
        return Ok(RansacResult {
            pose: None,
            inliers: Vec::new(),
            iterations,
            inlier_ratio: 0.0,
        });
    };
    if count < config.min_inliers.max(3) {
        return Ok(RansacResult {
            pose: None,
            inliers: Vec::new(),
            iterations,
            inlier_ratio: 0.0,
        });
    }
    let (consensus, _) = inliers_of(&pose, corrs, threshold);
    let refined = refine_pose(&pose, corrs, &consensus, config.refine_iterations);
    let (inliers, _) = inliers_of(&refined, corrs, threshold);
    let (pose, inliers) = if inliers.len() >= consensus.len() {
        (refined, inliers)
    } else {
        (pose, consensus)
    };
    Ok(RansacResult {
        inlier_ratio: inliers.len() as f64 / n as f64,
        pose: Some(pose),
        inliers,
        iterations,
    })
}

/// Iterations needed to draw one all-inlier triple with the given confidence.
fn adaptive_bound(inlier_ratio: f64, confidence: f64, cap: usize) -> usize {
    let p_good = inlier_ratio.powi(3);
    if p_good >= 1.0 {
        return 1;
    }
    if p_good <= 0.0 {
        return cap;
    }
    let k = (1.0 - confidence).ln() / (1.0 - p_good).ln();
    if k.is_finite() {
        (k.ceil() as usize).clamp(1, cap)
    } else {
        cap
    }
}

/// `(translation error in meters, rotation error in degrees)`.
pub fn pose_error(estimate: &Pose, truth: &Pose) -> (f64, f64) {
    let dt = (estimate.translation - truth.translation).norm();
    let dr = rotation_angle(&(estimate.rotation.transpose() * truth.rotation)).to_degrees();
    (dt, dr)
}

/// Outcome of matching plus pose estimation on one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Localization {
    pub frame_id: FrameId,
    pub correspondences: Vec<Correspondence2D3D>,
    pub ransac: RansacResult,
    pub match_ms: f64,
    pub ransac_ms: f64,
}

impl Localization {
    pub fn success(&self) -> bool {
        self.ransac.pose.is_some()
    }
}

/// Correspondences with landmark positions from `map` and normalized keypoints.
pub fn point_correspondences(
    frame: &Frame,
    cam: &CameraIntrinsics,
    map: &SfMMap,
    corrs: &[Correspondence2D3D],
) -> Vec<PointCorrespondence> {
    corrs
        .iter()
        .filter_map(|c| {
            let lm = map.landmark(c.landmark_id)?;
            let (x, y) = normalize_keypoint(&frame.keypoints[c.keypoint], cam);
            Some(PointCorrespondence::new(lm.position, x, y))
        })
        .collect()
}

/// PnP-RANSAC on the given matches with the per-frame seed. Fewer than 3 usable
/// correspondences give an empty result rather than an error.
pub fn estimate_pose(
    frame: &Frame,
    cam: &CameraIntrinsics,
    map: &SfMMap,
    correspondences: &[Correspondence2D3D],
    config: &RansacConfig,
) -> Result<RansacResult> {
    let points = point_correspondences(frame, cam, map, correspondences);
    if points.len() < 3 {
        return Ok(RansacResult {
            pose: None,
            inliers: Vec::new(),
            iterations: 0,
            inlier_ratio: 0.0,
        });
    }
    let threshold = cam.pixels_to_normalized(config.inlier_threshold_px);
    let frame_config = RansacConfig {
        seed: config.seed ^ frame.frame_id.wrapping_mul(0x9E37_79B9_7F4A_7C15),
        ..config.clone()
    };
    pnp_ransac(&points, threshold, &frame_config)
}

/// Match then PnP-RANSAC.
pub fn localize_frame(
    frame: &Frame,
    cam: &CameraIntrinsics,
    matcher: &Matcher<'_>,
    map: &SfMMap,
    config: &RansacConfig,
) -> Result<Localization> {
    let t0 = Instant::now();
    let correspondences = matcher.match_frame(frame, cam)?;
    let match_ms = t0.elapsed().as_secs_f64() * 1e3;
    let t1 = Instant::now();
    let ransac = estimate_pose(frame, cam, map, &correspondences, config)?;
    let ransac_ms = t1.elapsed().as_secs_f64() * 1e3;
    Ok(Localization {
        frame_id: frame.frame_id,
        correspondences,
        ransac,
        match_ms,
        ransac_ms,
    })
}

pub fn write_pose_records(records: &[Localization], total_of: impl Fn(&Localization) -> usize, out: &mut impl Write) -> Result<()> {
    writeln!(out, "frame_id,success,tx,ty,tz,qw,qx,qy,qz,inliers,total,inlier_ratio,match_ms,ransac_ms")?;
    for r in records {
        let pose = match &r.ransac.pose {
            Some(p) => {
                let q = p.quaternion_wxyz();
                let t = p.translation;
                format!("{},{},{},{},{},{},{}", t.x, t.y, t.z, q[0], q[1], q[2], q[3])
            }
            None => ",,,,,,".to_string(),
        };
        writeln!(
            out,
            "{},{},{pose},{},{},{},{},{}",
            r.frame_id,
            u8::from(r.success()),
            r.ransac.inliers.len(),
            total_of(r),
            r.ransac.inlier_ratio,
            r.match_ms,
            r.ransac_ms
        )?;
    }
    Ok(())
}

pub fn save_pose_records(records: &[Localization], path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_pose_records(records, |r| r.correspondences.len(), &mut out)?;
    out.flush()?;
    Ok(())
}
