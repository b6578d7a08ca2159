use std::path::PathBuf;

use nalgebra::Vector3;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use ctxmatch::boosting::{train_model, BoostConfig, BoostedModel};
use ctxmatch::context::{generate_regions, RegionBank, RegionConfig};
use ctxmatch::harness::{run_experiment, ExperimentSpec};
use ctxmatch::map::{load_map, save_map, SfMMap};
use ctxmatch::matching::{AcceptRule, HammingIndex, Matcher, MatcherKind, ProjectedIndex};
use ctxmatch::pose::{pnp_ransac, PointCorrespondence, RansacConfig};
use ctxmatch::synth::{generate_world, SyntheticWorld, WorldConfig};
use ctxmatch::vocabulary::{build_inverted_file, train_vocabulary, Vocabulary};
use ctxmatch::{Descriptor, Error};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyIOError::new_err(io.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn from_toml<T: serde::de::DeserializeOwned + Default>(text: Option<&str>) -> PyResult<T> {
    match text {
        None => Ok(T::default()),
        Some(t) => toml::from_str(t).map_err(|e| PyValueError::new_err(e.to_string())),
    }
}

fn descriptor_from_hex(hex: &str) -> PyResult<Descriptor> {
    Descriptor::from_hex(hex).map_err(py_err)
}

/// Structure-from-motion map: landmarks, frames and keypoint observations.
#[pyclass(name = "Map", frozen)]
struct PyMap {
    inner: SfMMap,
}

#[pymethods]
impl PyMap {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        load_map(path).map(|inner| Self { inner }).map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_map(&self.inner, path).map_err(py_err)
    }

    #[getter]
    fn num_landmarks(&self) -> usize {
        self.inner.landmarks().len()
    }

    #[getter]
    fn num_frames(&self) -> usize {
        self.inner.frames().len()
    }

    #[getter]
    fn descriptor_bits(&self) -> usize {
        self.inner.descriptor_bits()
    }

    fn landmark_ids(&self) -> Vec<u64> {
        self.inner.landmarks().iter().map(|l| l.landmark_id).collect()
    }

    fn landmark_position(&self, landmark_id: u64) -> PyResult<(f64, f64, f64)> {
        let l = self
            .inner
            .landmark(landmark_id)
            .ok_or_else(|| PyValueError::new_err(format!("unknown landmark {landmark_id}")))?;
        Ok((l.position.x, l.position.y, l.position.z))
    }

    /// Keypoints of frame `index` as `(u, v, scale, descriptor_hex, landmark_id)`.
    fn keypoints(&self, index: usize) -> PyResult<Vec<(f64, f64, f64, String, Option<u64>)>> {
        let frame = self
            .inner
            .frames()
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("frame index {index} out of range")))?;
        Ok(frame
            .keypoints
            .iter()
            .map(|k| (k.u, k.v, k.scale, k.descriptor.to_hex(), k.landmark_id))
            .collect())
    }

    fn __repr__(&self) -> String {
        format!(
            "Map(landmarks={}, frames={}, bits={})",
            self.inner.landmarks().len(),
            self.inner.frames().len(),
            self.inner.descriptor_bits()
        )
    }
}

/// Synthetic aliased world with its training map and query frames.
#[pyclass(name = "World", frozen)]
struct PyWorld {
    inner: SyntheticWorld,
}

#[pymethods]
impl PyWorld {
    /// `config` is a TOML world table; `seed` overrides its seed.
    #[new]
    #[pyo3(signature = (config=None, seed=None))]
    fn new(config: Option<&str>, seed: Option<u64>) -> PyResult<Self> {
        let mut cfg: WorldConfig = from_toml(config)?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        generate_world(&cfg).map(|inner| Self { inner }).map_err(py_err)
    }

    fn map(&self) -> PyMap {
        PyMap {
            inner: self.inner.map.clone(),
        }
    }

    /// Query frames as a map (no landmarks), in the map file format.
    fn queries(&self) -> PyResult<PyMap> {
        ctxmatch::synth::eval_frames_as_map(&self.inner.eval, self.inner.camera(), self.inner.config.descriptor_bits)
            .map(|inner| PyMap { inner })
            .map_err(py_err)
    }

    /// Per-keypoint true landmark ids of query frame `index`.
    fn truth(&self, index: usize) -> PyResult<Vec<Option<u64>>> {
        self.inner
            .eval
            .get(index)
            .map(|e| e.truth.clone())
            .ok_or_else(|| PyValueError::new_err(format!("query index {index} out of range")))
    }

    #[getter]
    fn num_queries(&self) -> usize {
        self.inner.eval.len()
    }
}

#[pyclass(name = "Vocabulary", frozen)]
struct PyVocabulary {
    inner: Vocabulary,
}

#[pymethods]
impl PyVocabulary {
    /// Trains on all keypoint descriptors of `map`.
    #[staticmethod]
    #[pyo3(signature = (map, k=16, seed=0, max_iterations=50))]
    fn train(map: &PyMap, k: usize, seed: u64, max_iterations: usize) -> PyResult<Self> {
        let descs: Vec<Descriptor> = map
            .inner
            .frames()
            .iter()
            .flat_map(|f| f.keypoints.iter().map(|kp| kp.descriptor.clone()))
            .collect();
        train_vocabulary(&descs, k, seed, max_iterations)
            .map(|inner| Self { inner })
            .map_err(py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Vocabulary::load(path).map(|inner| Self { inner }).map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(py_err)
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k()
    }

    fn quantize(&self, descriptor_hex: &str) -> PyResult<usize> {
        self.inner.quantize(&descriptor_from_hex(descriptor_hex)?).map_err(py_err)
    }
}

#[pyclass(name = "RegionBank", frozen)]
struct PyRegionBank {
    inner: RegionBank,
}

#[pymethods]
impl PyRegionBank {
    #[staticmethod]
    #[pyo3(signature = (n_regions=1000, seed=0))]
    fn generate(n_regions: usize, seed: u64) -> PyResult<Self> {
        let cfg = RegionConfig {
            n_regions,
            seed,
            ..RegionConfig::default()
        };
        generate_regions(&cfg).map(|inner| Self { inner }).map_err(py_err)
    }

    #[staticmethod]
    fn from_text(text: &str) -> PyResult<Self> {
        RegionBank::from_text(text).map(|inner| Self { inner }).map_err(py_err)
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    /// Region areas in normalized image units.
    fn areas(&self) -> Vec<f64> {
        self.inner.regions.iter().map(|r| r.area()).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Trained boosted landmark classifier with its vocabulary and regions.
#[pyclass(name = "Model", frozen)]
struct PyModel {
    inner: BoostedModel,
}

#[pymethods]
impl PyModel {
    /// `config` is a TOML boosting table.
    #[staticmethod]
    #[pyo3(signature = (map, regions, vocabulary, config=None))]
    fn train(map: &PyMap, regions: &PyRegionBank, vocabulary: &PyVocabulary, config: Option<&str>) -> PyResult<Self> {
        let cfg: BoostConfig = from_toml(config)?;
        train_model(&map.inner, &regions.inner, &vocabulary.inner, &cfg)
            .map(|o| Self { inner: o.model })
            .map_err(py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        BoostedModel::load(path).map(|inner| Self { inner }).map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(py_err)
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    #[getter]
    fn num_stumps(&self) -> usize {
        self.inner.classifier.learners().len()
    }
}

/// Matches every keypoint of every frame in `queries` against `map`.
///
/// Returns `(frame_id, keypoint_idx, landmark_id, score)` rows for accepted matches.
#[pyfunction]
#[pyo3(signature = (map, queries, matcher="boost", model=None, margin=0.0, projection_seed=0))]
fn match_frames(
    map: &PyMap,
    queries: &PyMap,
    matcher: &str,
    model: Option<&PyModel>,
    margin: f64,
    projection_seed: u64,
) -> PyResult<Vec<(u64, usize, u64, f64)>> {
    let kind: MatcherKind = matcher.parse().map_err(py_err)?;
    let map = &map.inner;
    let run = |m: &Matcher<'_>| -> PyResult<Vec<(u64, usize, u64, f64)>> {
        let mut out = Vec::new();
        for f in queries.inner.frames() {
            for c in m.match_frame(f, queries.inner.camera_of(f)).map_err(py_err)? {
                out.push((c.frame_id, c.keypoint, c.landmark_id, c.score));
            }
        }
        Ok(out)
    };
    match kind {
        MatcherKind::Boost | MatcherKind::BoostInv => {
            let model = &model
                .ok_or_else(|| PyValueError::new_err("the boost matchers need a model"))?
                .inner;
            let inv = build_inverted_file(map, &model.vocabulary, &model.classes);
            run(&Matcher::Boost {
                model,
                inverted: (kind == MatcherKind::BoostInv).then_some(&inv),
                rule: AcceptRule { margin },
            })
        }
        MatcherKind::Hamming => run(&Matcher::Hamming(&HammingIndex::new(map))),
        MatcherKind::Projected => run(&Matcher::Projected(
            &ProjectedIndex::new(map, projection_seed).map_err(py_err)?,
        )),
    }
}

/// PnP-RANSAC on normalized image points. Returns `None` or a dict with the
/// world-from-camera quaternion (w, x, y, z), the camera center and inlier indices.
#[pyfunction]
#[pyo3(signature = (world_points, image_points, threshold, max_iterations=500, seed=0))]
fn solve_pnp_ransac<'py>(
    py: Python<'py>,
    world_points: Vec<(f64, f64, f64)>,
    image_points: Vec<(f64, f64)>,
    threshold: f64,
    max_iterations: usize,
    seed: u64,
) -> PyResult<Option<Bound<'py, PyDict>>> {
    if world_points.len() != image_points.len() {
        return Err(PyValueError::new_err("world and image point counts differ"));
    }
    let corrs: Vec<PointCorrespondence> = world_points
        .iter()
        .zip(&image_points)
        .map(|(&(x, y, z), &(u, v))| PointCorrespondence::new(Vector3::new(x, y, z), u, v))
        .collect();
    let cfg = RansacConfig {
        max_iterations,
        seed,
        ..RansacConfig::default()
    };
    let r = pnp_ransac(&corrs, threshold, &cfg).map_err(py_err)?;
    let Some(pose) = r.pose else { return Ok(None) };
    let q = pose.quaternion_wxyz();
    let t = pose.translation;
    let d = PyDict::new(py);
    d.set_item("quaternion_wxyz", (q[0], q[1], q[2], q[3]))?;
    d.set_item("center", (t.x, t.y, t.z))?;
    d.set_item("inliers", r.inliers)?;
    d.set_item("inlier_ratio", r.inlier_ratio)?;
    Ok(Some(d))
}

/// Runs an experiment spec file and returns per-matcher headline metrics.
#[pyfunction]
fn run_experiment_file<'py>(py: Python<'py>, spec: PathBuf, out_dir: PathBuf) -> PyResult<Bound<'py, PyDict>> {
    let spec = ExperimentSpec::load(spec).map_err(py_err)?;
    let report = run_experiment(&spec, out_dir).map_err(py_err)?;
    let out = PyDict::new(py);
    for s in &report.summaries {
        let d = PyDict::new(py);
        d.set_item("precision_at_1", s.precision_at_1)?;
        d.set_item("mrr", s.mrr)?;
        d.set_item("background_rejection", s.background_rejection)?;
        d.set_item("mean_evaluated", s.mean_evaluated)?;
        d.set_item("pose_auc", s.pose.auc)?;
        d.set_item("localized", s.localized)?;
        d.set_item("frames", s.frames)?;
        out.set_item(s.matcher.as_str(), d)?;
    }
    Ok(out)
}

#[pymodule]
fn ctxmatch_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMap>()?;
    m.add_class::<PyWorld>()?;
    m.add_class::<PyVocabulary>()?;
    m.add_class::<PyRegionBank>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(match_frames, m)?)?;
    m.add_function(wrap_pyfunction!(solve_pnp_ransac, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment_file, m)?)?;
    Ok(())
}
