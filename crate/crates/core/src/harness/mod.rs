//! Experiment orchestration: synth → vocabulary → regions → train → match → localize → metrics.

pub mod metrics;

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::boosting::{save_training_log, train_model, BoostConfig, BoostedModel};
use crate::classes::fnv1a;
use crate::context::{generate_regions, RegionConfig};
use crate::descriptor::Descriptor;
use crate::error::{Error, Result};
use crate::map::{load_map, save_map, CameraIntrinsics, SfMMap};
use crate::matching::{
    correspondences, write_correspondences, AcceptRule, Correspondence2D3D, HammingIndex, Matcher, MatcherKind,
    ProjectedIndex,
};
use crate::pose::{estimate_pose, write_pose_records, Localization, RansacConfig};
use crate::synth::{
    descriptor_pool, eval_frames_as_map, generate_world, read_ground_truth, write_ground_truth, EvalFrame, WorldConfig,
};
use crate::vocabulary::{build_inverted_file, train_vocabulary, Vocabulary, DEFAULT_VOCABULARY_SIZE};
use metrics::{
    background_rejection, mean_reciprocal_rank, miss_rate_curve, pose_pr_auc, precision_at_1, runtime_inlier_report,
    write_runtime_scatter, MissRatePoint, PoseRecord, PrCurve, RetrievalRecord, RuntimeRow, DEFAULT_BUDGETS,
};

/// Retrieval and pose records of one matcher over a set of query frames.
#[derive(Debug, Clone)]
pub struct MatcherEvaluation {
    pub matcher: MatcherKind,
    pub retrieval: Vec<RetrievalRecord>,
    pub poses: Vec<PoseRecord>,
    pub localizations: Vec<Localization>,
}

impl MatcherEvaluation {
    pub fn correspondences(&self) -> impl Iterator<Item = &Correspondence2D3D> {
        self.localizations.iter().flat_map(|l| &l.correspondences)
    }

    pub fn mean_evaluated(&self) -> f64 {
        if self.retrieval.is_empty() {
            return 0.0;
        }
        self.retrieval.iter().map(|r| r.evaluated as f64).sum::<f64>() / self.retrieval.len() as f64
    }
}

/// Options for [`evaluate_matcher`].
#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub top_k: usize,
    pub ransac: RansacConfig,
    pub localize: bool,
    /// Record wall-clock timings; when false all timings are written as 0.
    pub timings: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            top_k: 50,
            ransac: RansacConfig::default(),
            localize: true,
            timings: false,
        }
    }
}

/// Queries every keypoint of every frame and, optionally, localizes each frame from
/// the accepted head matches.
pub fn evaluate_matcher(
    matcher: &Matcher<'_>,
    frames: &[EvalFrame],
    cam: &CameraIntrinsics,
    map: &SfMMap,
    options: &EvalOptions,
) -> Result<MatcherEvaluation> {
    let kind = matcher.kind();
    let mut retrieval = Vec::new();
    let mut poses = Vec::new();
    let mut localizations = Vec::new();
    let ms = |t: Instant| if options.timings { t.elapsed().as_secs_f64() * 1e3 } else { 0.0 };
    for ef in frames {
        let frame = &ef.frame;
        let t0 = Instant::now();
        let results = matcher.query_frame(frame, cam, options.top_k)?;
        let match_ms = ms(t0);
        let per_query = if results.is_empty() { 0.0 } else { match_ms / results.len() as f64 };
        for r in &results {
            retrieval.push(RetrievalRecord {
                frame_id: frame.frame_id,
                keypoint: r.keypoint,
                truth: ef.truth[r.keypoint],
                ranked: r.candidates.iter().map(|c| c.landmark).collect(),
                evaluated: r.evaluated,
                match_ms: per_query,
            });
        }
        if !options.localize {
            continue;
        }
        let corrs = correspondences(frame.frame_id, &results, kind);
        let t1 = Instant::now();
        let ransac = estimate_pose(frame, cam, map, &corrs, &options.ransac)?;
        let ransac_ms = ms(t1);
        poses.push(PoseRecord {
            frame_id: frame.frame_id,
            estimate: ransac.pose,
            truth: frame.pose,
            inliers: ransac.inliers.len(),
            correspondences: corrs.len(),
            inlier_ratio: ransac.inlier_ratio,
            match_ms,
            ransac_ms,
        });
        localizations.push(Localization {
            frame_id: frame.frame_id,
            correspondences: corrs,
            ransac,
            match_ms,
            ransac_ms,
        });
    }
    Ok(MatcherEvaluation {
        matcher: kind,
        retrieval,
        poses,
        localizations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabularySpec {
    pub k: usize,
    /// Descriptors drawn from the appearance model for training (synthetic data only).
    pub pool_size: usize,
    pub max_iterations: usize,
    pub seed: u64,
    /// Load instead of training.
    pub path: Option<PathBuf>,
}

impl Default for VocabularySpec {
    fn default() -> Self {
        Self {
            k: DEFAULT_VOCABULARY_SIZE,
            pool_size: 20_000,
            max_iterations: 50,
            seed: 0,
            path: None,
        }
    }
}

/// Map, queries and ground truth given as files instead of a synthetic world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataFiles {
    pub map: PathBuf,
    pub queries: PathBuf,
    pub truth: PathBuf,
}

/// Declarative experiment description (TOML).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    /// Mixed into every stage seed.
    pub seed: u64,
    pub timings: bool,
    pub write_data: bool,
    pub top_k: usize,
    pub budgets: Vec<usize>,
    pub matchers: Vec<MatcherKind>,
    pub translation_threshold: f64,
    pub rotation_threshold_deg: f64,
    pub projection_seed: u64,
    pub world: Option<WorldConfig>,
    pub data: Option<DataFiles>,
    pub vocabulary: VocabularySpec,
    pub regions: RegionConfig,
    pub boost: BoostConfig,
    /// Load a trained model instead of training.
    pub model: Option<PathBuf>,
    pub ransac: RansacConfig,
    pub accept: AcceptRule,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            timings: false,
            write_data: true,
            top_k: 50,
            budgets: DEFAULT_BUDGETS.to_vec(),
            matchers: MatcherKind::ALL.to_vec(),
            translation_threshold: 0.2,
            rotation_threshold_deg: 5.0,
            projection_seed: 0,
            world: None,
            data: None,
            vocabulary: VocabularySpec::default(),
            regions: RegionConfig::default(),
            boost: BoostConfig::default(),
            model: None,
            ransac: RansacConfig::default(),
            accept: AcceptRule::default(),
        }
    }
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Spec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    /// Parses the file and resolves relative paths against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Spec(format!("{}: {e}", path.display())))?;
        let mut spec = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(d) = &mut spec.data {
            resolve(&mut d.map);
            resolve(&mut d.queries);
            resolve(&mut d.truth);
        }
        if let Some(p) = &mut spec.vocabulary.path {
            resolve(p);
        }
        if let Some(p) = &mut spec.model {
            resolve(p);
        }
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Spec(m.to_string()));
        match (&self.world, &self.data) {
            (None, None) => return bad("one of [world] or [data] is required"),
            (Some(_), Some(_)) => return bad("[world] and [data] are mutually exclusive"),
            _ => {}
        }
        if self.matchers.is_empty() {
            return bad("at least one matcher is required");
        }
        if self.top_k == 0 {
            return bad("top_k must be positive");
        }
        if self.budgets.is_empty() || self.budgets[0] == 0 || self.budgets.windows(2).any(|w| w[0] >= w[1]) {
            return bad("budgets must be positive and strictly increasing");
        }
        if let Some(w) = &self.world {
            w.validate().map_err(|e| Error::Spec(e.to_string()))?;
        }
        self.regions.validate().map_err(|e| Error::Spec(e.to_string()))?;
        self.boost.validate().map_err(|e| Error::Spec(e.to_string()))?;
        Ok(())
    }

    /// Seed for a stage: the section's own seed combined with the top-level seed.
    pub fn stage_seed(&self, stage: &str, section_seed: u64) -> u64 {
        fnv1a(
            self.seed
                .to_le_bytes()
                .into_iter()
                .chain(stage.bytes())
                .chain(section_seed.to_le_bytes()),
        )
    }
}

/// Headline numbers for one matcher.
#[derive(Debug, Clone, PartialEq)]
pub struct MatcherSummary {
    pub matcher: MatcherKind,
    pub queries: usize,
    pub precision_at_1: f64,
    pub mrr: f64,
    pub background_rejection: Option<f64>,
    pub mean_evaluated: f64,
    pub miss_rate: Vec<MissRatePoint>,
    pub pose: PrCurve,
    pub localized: usize,
    pub frames: usize,
}

pub fn summarize(eval: &MatcherEvaluation, spec_budgets: &[usize], t_max: f64, r_max: f64) -> Result<MatcherSummary> {
    Ok(MatcherSummary {
        matcher: eval.matcher,
        queries: eval.retrieval.iter().filter(|r| r.truth.is_some()).count(),
        precision_at_1: precision_at_1(&eval.retrieval)?,
        mrr: mean_reciprocal_rank(&eval.retrieval)?,
        background_rejection: background_rejection(&eval.retrieval),
        mean_evaluated: eval.mean_evaluated(),
        miss_rate: miss_rate_curve(&eval.retrieval, spec_budgets)?,
        pose: pose_pr_auc(&eval.poses, t_max, r_max),
        localized: eval.poses.iter().filter(|p| p.estimate.is_some()).count(),
        frames: eval.poses.len(),
    })
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub out_dir: PathBuf,
    pub summaries: Vec<MatcherSummary>,
    pub runtime: Vec<RuntimeRow>,
}

fn create(path: PathBuf) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::stage(name, e))
}

/// Runs every stage and writes the report files into `out_dir`.
pub fn run_experiment(spec: &ExperimentSpec, out_dir: impl AsRef<Path>) -> Result<ExperimentReport> {
    spec.validate()?;
    let out = out_dir.as_ref().to_path_buf();
    fs::create_dir_all(&out)?;

    let (map, queries, synthetic) = stage("synth", load_data(spec))?;
    let cam = *map
        .cameras()
        .first()
        .ok_or_else(|| Error::stage("synth", Error::InvalidMap("map has no camera".into())))?;
    if spec.write_data {
        stage("synth", write_data(&out, &map, &queries, &cam))?;
    }

    let model = match &spec.model {
        Some(path) if !path.is_file() => {
            return Err(Error::stage(
                "train",
                Error::InvalidConfig(format!("model input {} does not exist", path.display())),
            ))
        }
        Some(path) => stage("train", BoostedModel::load(path))?,
        None => {
            let vocab = stage("train-vocab", build_vocabulary(spec, &map, synthetic.as_ref()))?;
            let regions = stage("gen-regions", {
                let config = RegionConfig {
                    seed: spec.stage_seed("regions", spec.regions.seed),
                    ..spec.regions
                };
                generate_regions(&config)
            })?;
            let config = BoostConfig {
                seed: spec.stage_seed("train", spec.boost.seed),
                ..spec.boost.clone()
            };
            let outcome = stage("train", train_model(&map, &regions, &vocab, &config))?;
            stage("train", save_training_log(&outcome.log, out.join("training_log.csv")))?;
            outcome.model
        }
    };
    stage("train-vocab", model.vocabulary.save(out.join("vocabulary.txt")))?;
    stage(
        "gen-regions",
        fs::write(out.join("regions.txt"), model.regions.to_text()).map_err(Error::from),
    )?;
    stage("train", model.save(out.join("model.json")))?;

    let inverted = build_inverted_file(&map, &model.vocabulary, &model.classes);
    let hamming = HammingIndex::new(&map);
    let projected = stage("match", ProjectedIndex::new(&map, spec.stage_seed("projection", spec.projection_seed)))?;
    let options = EvalOptions {
        top_k: spec.top_k,
        ransac: RansacConfig {
            seed: spec.stage_seed("ransac", spec.ransac.seed),
            ..spec.ransac.clone()
        },
        localize: true,
        timings: spec.timings,
    };
    let mut evaluations = Vec::new();
    for &kind in &spec.matchers {
        let matcher = match kind {
            MatcherKind::Boost => Matcher::Boost {
                model: &model,
                inverted: None,
                rule: spec.accept,
            },
            MatcherKind::BoostInv => Matcher::Boost {
                model: &model,
                inverted: Some(&inverted),
                rule: spec.accept,
            },
            MatcherKind::Hamming => Matcher::Hamming(&hamming),
            MatcherKind::Projected => Matcher::Projected(&projected),
        };
        let ev = stage("localize", evaluate_matcher(&matcher, &queries, &cam, &map, &options))?;
        stage("match", write_matcher_files(&out, &ev))?;
        evaluations.push(ev);
    }

    let summaries = stage(
        "eval",
        evaluations
            .iter()
            .map(|e| summarize(e, &spec.budgets, spec.translation_threshold, spec.rotation_threshold_deg))
            .collect::<Result<Vec<_>>>(),
    )?;
    let by_matcher: Vec<(MatcherKind, Vec<PoseRecord>)> =
        evaluations.iter().map(|e| (e.matcher, e.poses.clone())).collect();
    let runtime = stage("eval", runtime_inlier_report(&by_matcher))?;
    stage("eval", write_reports(&out, spec, &summaries, &runtime, &by_matcher))?;
    Ok(ExperimentReport {
        out_dir: out,
        summaries,
        runtime,
    })
}

type LoadedData = (SfMMap, Vec<EvalFrame>, Option<WorldConfig>);

fn load_data(spec: &ExperimentSpec) -> Result<LoadedData> {
    if let Some(world) = &spec.world {
        let config = WorldConfig {
            seed: spec.stage_seed("world", world.seed),
            ..world.clone()
        };
        let w = generate_world(&config)?;
        return Ok((w.map, w.eval, Some(config)));
    }
    let data = spec.data.as_ref().ok_or_else(|| Error::Spec("no data source".into()))?;
    let map = load_map(&data.map)?;
    let queries = load_map(&data.queries)?;
    let frames = read_ground_truth(&queries, &data.truth)?;
    Ok((map, frames, None))
}

fn write_data(out: &Path, map: &SfMMap, queries: &[EvalFrame], cam: &CameraIntrinsics) -> Result<()> {
    save_map(map, out.join("map.ndjson"))?;
    save_map(&eval_frames_as_map(queries, *cam, map.descriptor_bits())?, out.join("queries.ndjson"))?;
    write_ground_truth(queries, out.join("ground_truth.csv"))
}

fn build_vocabulary(spec: &ExperimentSpec, map: &SfMMap, world: Option<&WorldConfig>) -> Result<Vocabulary> {
    let v = &spec.vocabulary;
    if let Some(path) = &v.path {
        return Vocabulary::load(path);
    }
    let seed = spec.stage_seed("vocabulary", v.seed);
    let pool: Vec<Descriptor> = match world {
        Some(w) => descriptor_pool(w, v.pool_size, seed),
        None => map
            .frames()
            .iter()
            .flat_map(|f| f.keypoints.iter().map(|k| k.descriptor.clone()))
            .collect(),
    };
    train_vocabulary(&pool, v.k, seed, v.max_iterations)
}

fn write_matcher_files(out: &Path, ev: &MatcherEvaluation) -> Result<()> {
    let m = ev.matcher;
    let mut f = create(out.join(format!("retrieval_{m}.csv")))?;
    writeln!(f, "frame_id,keypoint_idx,true_landmark_id,rank,head,evaluated,match_ms")?;
    for r in &ev.retrieval {
        let opt = |o: Option<u64>| o.map(|v| v.to_string()).unwrap_or_default();
        let head = match r.ranked.first() {
            None => String::new(),
            Some(None) => "background".into(),
            Some(Some(l)) => l.to_string(),
        };
        writeln!(
            f,
            "{},{},{},{},{head},{},{}",
            r.frame_id,
            r.keypoint,
            opt(r.truth),
            r.rank().map(|k| k.to_string()).unwrap_or_default(),
            r.evaluated,
            r.match_ms
        )?;
    }
    f.flush()?;

    let corrs: Vec<Correspondence2D3D> = ev.correspondences().copied().collect();
    let mut f = create(out.join(format!("correspondences_{m}.csv")))?;
    write_correspondences(&corrs, &mut f)?;
    f.flush()?;

    let mut f = create(out.join(format!("poses_{m}.csv")))?;
    write_pose_records(&ev.localizations, |l| l.correspondences.len(), &mut f)?;
    f.flush()?;
    Ok(())
}

fn write_reports(
    out: &Path,
    spec: &ExperimentSpec,
    summaries: &[MatcherSummary],
    runtime: &[RuntimeRow],
    by_matcher: &[(MatcherKind, Vec<PoseRecord>)],
) -> Result<()> {
    let mut f = create(out.join("metrics.csv"))?;
    writeln!(
        f,
        "matcher,queries,precision_at_1,mrr,background_rejection,mean_evaluated_classes,pose_auc,localized,frames"
    )?;
    for s in summaries {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{}",
            s.matcher,
            s.queries,
            s.precision_at_1,
            s.mrr,
            s.background_rejection.map(|v| v.to_string()).unwrap_or_default(),
            s.mean_evaluated,
            s.pose.auc,
            s.localized,
            s.frames
        )?;
    }
    f.flush()?;

    let mut f = create(out.join("miss_rate.csv"))?;
    writeln!(f, "matcher,budget,miss_rate,false_positives_per_query")?;
    for s in summaries {
        for p in &s.miss_rate {
            writeln!(f, "{},{},{},{}", s.matcher, p.budget, p.miss_rate, p.false_positives_per_query)?;
        }
    }
    f.flush()?;

    let mut f = create(out.join("pose_pr.csv"))?;
    writeln!(f, "matcher,threshold,recall,precision")?;
    for s in summaries {
        for p in &s.pose.points {
            writeln!(f, "{},{},{},{}", s.matcher, p.threshold, p.recall, p.precision)?;
        }
    }
    f.flush()?;

    let mut f = create(out.join("runtime.csv"))?;
    writeln!(f, "matcher,frames,mean_match_ms,mean_inlier_ratio")?;
    for r in runtime {
        writeln!(f, "{},{},{},{}", r.matcher, r.frames, r.mean_match_ms, r.mean_inlier_ratio)?;
    }
    f.flush()?;

    let mut f = create(out.join("runtime_scatter.csv"))?;
    write_runtime_scatter(by_matcher, &mut f)?;
    f.flush()?;

    let mut text = String::new();
    let _ = writeln!(text, "experiment summary");
    let _ = writeln!(
        text,
        "pose thresholds: {} m, {} deg; candidate budgets: {:?}",
        spec.translation_threshold, spec.rotation_threshold_deg, spec.budgets
    );
    for s in summaries {
        let _ = writeln!(text);
        let _ = writeln!(text, "[{}]", s.matcher);
        let _ = writeln!(text, "  tracked queries       {}", s.queries);
        let _ = writeln!(text, "  precision@1           {:.4}", s.precision_at_1);
        let _ = writeln!(text, "  mean reciprocal rank  {:.4}", s.mrr);
        if let Some(b) = s.background_rejection {
            let _ = writeln!(text, "  background rejected   {b:.4}");
        }
        let _ = writeln!(text, "  classes evaluated     {:.1}", s.mean_evaluated);
        let _ = writeln!(text, "  frames localized      {}/{}", s.localized, s.frames);
        let _ = writeln!(text, "  pose PR AUC           {:.4}", s.pose.auc);
    }
    fs::write(out.join("summary.txt"), text)?;
    Ok(())
}
