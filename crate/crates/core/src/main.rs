use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use ctxmatch::boosting::{save_training_log, train_model, BoostConfig, BoostedModel};
use ctxmatch::context::{generate_regions, RegionBank, RegionConfig};
use ctxmatch::harness::{run_experiment, DataFiles, ExperimentSpec};
use ctxmatch::map::{load_map, save_map, SfMMap};
use ctxmatch::matching::{
    save_correspondences, AcceptRule, HammingIndex, Matcher, MatcherKind, ProjectedIndex,
};
use ctxmatch::pose::{localize_frame, save_pose_records, RansacConfig};
use ctxmatch::synth::{eval_frames_as_map, generate_world, write_ground_truth, WorldConfig};
use ctxmatch::vocabulary::{build_inverted_file, train_vocabulary, Vocabulary};
use ctxmatch::Error;

#[derive(Parser)]
#[command(name = "ctxmatch", version, about = "Context-aware 2D-3D matching and localization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world: map.ndjson, queries.ndjson, ground_truth.csv.
    Synth {
        /// World configuration (TOML); defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a visual vocabulary on the descriptors of a map file.
    TrainVocab {
        #[arg(long, default_value_t = 16)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        max_iterations: usize,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Sample a bank of context regions.
    GenRegions {
        /// Region configuration (TOML); defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train the boosted landmark classifier.
    Train {
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        regions: PathBuf,
        /// Boosting configuration (TOML); defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        output: PathBuf,
        /// Training log CSV.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Match query keypoints against the map and dump correspondences.
    Match {
        #[command(flatten)]
        inputs: MatchInputs,
        #[arg(long)]
        output: PathBuf,
    },
    /// Match and estimate one pose per query frame.
    Localize {
        #[command(flatten)]
        inputs: MatchInputs,
        /// RANSAC configuration (TOML); defaults when omitted.
        #[arg(long)]
        ransac: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Evaluate a trained model on query frames with ground truth.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Matchers to compare; all when omitted.
        #[arg(long, value_delimiter = ',')]
        matchers: Vec<MatcherKind>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an experiment spec end to end.
    Run {
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct MatchInputs {
    /// Trained model; required for the boost matchers.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    map: PathBuf,
    #[arg(long)]
    query: PathBuf,
    #[arg(long, default_value = "boost")]
    matcher: MatcherKind,
    /// Minimum head-over-background score margin.
    #[arg(long, default_value_t = 0.0)]
    margin: f64,
    /// Seed of the projected baseline.
    #[arg(long, default_value_t = 0)]
    projection_seed: u64,
}

fn read_toml<T: DeserializeOwned + Default>(path: Option<&Path>) -> ctxmatch::Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Spec(format!("{}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| Error::Spec(format!("{}: {e}", p.display())))
        }
    }
}

fn stage<T>(name: &'static str, r: ctxmatch::Result<T>) -> ctxmatch::Result<T> {
    r.map_err(|e| Error::stage(name, e))
}

/// Builds the matcher for `inputs` and hands it to `f`.
fn with_matcher<T>(
    inputs: &MatchInputs,
    map: &SfMMap,
    f: impl FnOnce(&Matcher<'_>) -> ctxmatch::Result<T>,
) -> ctxmatch::Result<T> {
    let rule = AcceptRule { margin: inputs.margin };
    match inputs.matcher {
        MatcherKind::Boost | MatcherKind::BoostInv => {
            let path = inputs
                .model
                .as_ref()
                .ok_or_else(|| Error::Spec("--model is required for the boost matchers".into()))?;
            let model = BoostedModel::load(path)?;
            let inverted = build_inverted_file(map, &model.vocabulary, &model.classes);
            let inverted = (inputs.matcher == MatcherKind::BoostInv).then_some(&inverted);
            f(&Matcher::Boost {
                model: &model,
                inverted,
                rule,
            })
        }
        MatcherKind::Hamming => f(&Matcher::Hamming(&HammingIndex::new(map))),
        MatcherKind::Projected => f(&Matcher::Projected(&ProjectedIndex::new(map, inputs.projection_seed)?)),
    }
}

fn run(command: Command) -> ctxmatch::Result<()> {
    match command {
        Command::Synth { config, seed, out } => {
            let mut cfg: WorldConfig = read_toml(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate().map_err(|e| Error::Spec(e.to_string()))?;
            stage("synth", {
                let world = generate_world(&cfg)?;
                fs::create_dir_all(&out)?;
                save_map(&world.map, out.join("map.ndjson"))?;
                let queries = eval_frames_as_map(&world.eval, world.camera(), cfg.descriptor_bits)?;
                save_map(&queries, out.join("queries.ndjson"))?;
                write_ground_truth(&world.eval, out.join("ground_truth.csv"))?;
                log::info!(
                    "{} landmarks, {} map frames, {} query frames",
                    world.map.landmarks().len(),
                    world.map.frames().len(),
                    world.eval.len()
                );
                Ok(())
            })
        }
        Command::TrainVocab {
            k,
            seed,
            max_iterations,
            input,
            output,
        } => stage("train-vocab", {
            load_map(&input).and_then(|map| {
                let descs: Vec<_> = map
                    .frames()
                    .iter()
                    .flat_map(|f| f.keypoints.iter().map(|kp| kp.descriptor.clone()))
                    .collect();
                train_vocabulary(&descs, k, seed, max_iterations)?.save(&output)
            })
        }),
        Command::GenRegions { config, n, seed, output } => {
            let mut cfg: RegionConfig = read_toml(config.as_deref())?;
            if let Some(n) = n {
                cfg.n_regions = n;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate().map_err(|e| Error::Spec(e.to_string()))?;
            stage(
                "gen-regions",
                generate_regions(&cfg).and_then(|bank| Ok(fs::write(&output, bank.to_text())?)),
            )
        }
        Command::Train {
            map,
            vocab,
            regions,
            config,
            seed,
            output,
            log,
        } => {
            let mut cfg: BoostConfig = read_toml(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate().map_err(|e| Error::Spec(e.to_string()))?;
            stage("train", {
                (|| {
                    let map = load_map(&map)?;
                    let vocab = Vocabulary::load(&vocab)?;
                    let bank = RegionBank::from_text(&fs::read_to_string(&regions)?)?;
                    let outcome = train_model(&map, &bank, &vocab, &cfg)?;
                    outcome.model.save(&output)?;
                    if let Some(path) = &log {
                        save_training_log(&outcome.log, path)?;
                    }
                    Ok(())
                })()
            })
        }
        Command::Match { inputs, output } => stage("match", {
            (|| {
                let map = load_map(&inputs.map)?;
                let queries = load_map(&inputs.query)?;
                with_matcher(&inputs, &map, |m| {
                    let mut all = Vec::new();
                    for frame in queries.frames() {
                        all.extend(m.match_frame(frame, queries.camera_of(frame))?);
                    }
                    save_correspondences(&all, &output)
                })
            })()
        }),
        Command::Localize { inputs, ransac, output } => {
            let cfg: RansacConfig = read_toml(ransac.as_deref())?;
            stage("localize", {
                (|| {
                    let map = load_map(&inputs.map)?;
                    let queries = load_map(&inputs.query)?;
                    with_matcher(&inputs, &map, |m| {
                        let records = queries
                            .frames()
                            .iter()
                            .map(|f| localize_frame(f, queries.camera_of(f), m, &map, &cfg))
                            .collect::<ctxmatch::Result<Vec<_>>>()?;
                        save_pose_records(&records, &output)
                    })
                })()
            })
        }
        Command::Eval {
            model,
            map,
            query,
            truth,
            matchers,
            out,
        } => {
            let mut spec = ExperimentSpec {
                data: Some(DataFiles {
                    map,
                    queries: query,
                    truth,
                }),
                model: Some(model),
                write_data: false,
                ..ExperimentSpec::default()
            };
            if !matchers.is_empty() {
                spec.matchers = matchers;
            }
            let report = run_experiment(&spec, &out)?;
            print!("{}", fs::read_to_string(report.out_dir.join("summary.txt"))?);
            Ok(())
        }
        Command::Run { spec, out } => {
            let spec = ExperimentSpec::load(&spec)?;
            let report = run_experiment(&spec, &out)?;
            print!("{}", fs::read_to_string(report.out_dir.join("summary.txt"))?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ (Error::Spec(_) | Error::InvalidConfig(_))) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
