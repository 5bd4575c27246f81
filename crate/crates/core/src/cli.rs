//! Command-line front end: `gen`, `train`, `mine`, `eval` and `gradcheck`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    load_checkpoint, load_dataset, save_checkpoint, save_dataset, MiningKind, Modality, TrainConfig,
};
use crate::encoder::gradcheck;
use crate::error::{Error, Result};
use crate::evaluator::{
    distance_distribution, embed_dataset, evaluate_embeddings, has_labels, labeled_embeddings,
    mining_quality, DistanceDistribution, EmbeddingRecord, MiningQuality, RetrievalResult,
    DEFAULT_MAX_RANK,
};
use crate::mining::{mine_report, MiningReport, MiningRule};
use crate::prototyping::build_prototypes;
use crate::synthgen::{generate_dataset, GenConfig};
use crate::trainer::train_with_progress;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

const EFFECTIVE_CONFIG: &str = "effective_config.json";
const DOMAIN_EVAL: u64 = 0x4556_0001;

/// Evaluation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub max_rank: usize,
    /// Pairs sampled per kind for the distance distribution.
    pub n_pairs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            max_rank: DEFAULT_MAX_RANK,
            n_pairs: 40_000,
        }
    }
}

/// Everything a run reads from its JSON config file. Every section is
/// optional and falls back to its defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub gen: GenConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

#[derive(Debug, Parser)]
#[command(name = "hitpro", version, about = "Unsupervised visible-infrared tracklet re-identification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration with optional `gen`, `train` and `eval` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed of the section the command uses.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on this value.
    #[arg(long, env = "HITPRO_THREADS")]
    threads: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainFlags {
    /// Fixed similarity threshold `h` instead of the dynamic one.
    #[arg(long, value_name = "H")]
    fixed_threshold: Option<f64>,
    /// Uniform weights over accepted positives.
    #[arg(long)]
    no_swa: bool,
    /// Activate every loss from the first epoch.
    #[arg(long)]
    no_hls: bool,
    /// Drop the intra-modality cross-camera loss.
    #[arg(long)]
    no_imcc: bool,
    /// Drop the cross-modality loss.
    #[arg(long)]
    no_cm: bool,
    /// Dynamic threshold off; uses the configured fixed threshold.
    #[arg(long)]
    no_dts: bool,
    /// Number of temporal transformer layers (0 to 2).
    #[arg(long, value_name = "N")]
    tte_layers: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
}

impl TrainFlags {
    fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(h) = self.fixed_threshold {
            cfg.use_dts = false;
            cfg.fixed_threshold = h;
        }
        if self.no_dts {
            cfg.use_dts = false;
        }
        if self.no_swa {
            cfg.use_swa = false;
        }
        if self.no_hls {
            cfg.use_hls = false;
        }
        if self.no_imcc {
            cfg.use_imcc = false;
        }
        if self.no_cm {
            cfg.use_cm = false;
        }
        if let Some(n) = self.tte_layers {
            cfg.n_tte_layers = n;
        }
        if let Some(e) = self.epochs {
            cfg.e_total = e;
        }
        if let Some(i) = self.iters {
            cfg.iters_per_epoch = i;
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an encoder and write `metrics.json` and `checkpoint.hpt`.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: TrainFlags,
        /// Dataset directory or manifest file.
        #[arg(long)]
        data: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump the positive sets mined from a checkpoint's encoder.
    Mine {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: TrainFlags,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output JSON file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrieval evaluation in both directions.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output JSON file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every encoder gradient.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Central-difference step.
        #[arg(long, default_value_t = 1e-4)]
        step: f64,
        /// Failure threshold on the maximum relative error.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Optional directory for the report and effective config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Serialize)]
struct MiningFamily {
    report: MiningReport,
    quality: Option<MiningQuality>,
}

#[derive(Debug, Serialize)]
struct MineOutput {
    epoch: usize,
    families: Vec<MiningFamily>,
}

#[derive(Debug, Serialize)]
struct EvalReport {
    ir_to_vis: RetrievalResult,
    vis_to_ir: RetrievalResult,
    distances: DistanceDistribution,
    embeddings: Vec<EmbeddingRecord>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Directory that receives `effective_config.json` for a file output.
fn sibling_dir(file: &Path) -> PathBuf {
    match file.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn base_config(common: &Common) -> Result<RunConfig> {
    match &common.config {
        Some(path) => RunConfig::load(path),
        None => Ok(RunConfig::default()),
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Gen { common, out } => {
            let mut cfg = base_config(&common)?;
            if let Some(s) = common.seed {
                cfg.gen.seed = s;
            }
            let dataset = generate_dataset(&cfg.gen)?;
            let manifest = save_dataset(&dataset, &out)?;
            write_json(&out.join(EFFECTIVE_CONFIG), &cfg)?;
            eprintln!("wrote {} tracklets to {}", dataset.len(), manifest.display());
        }
        Command::Train {
            common,
            flags,
            data,
            out,
        } => {
            let mut cfg = base_config(&common)?;
            if let Some(s) = common.seed {
                cfg.train.seed = s;
            }
            flags.apply(&mut cfg.train);
            cfg.train.validate()?;
            let dataset = load_dataset(&data)?;
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            write_json(&out.join(EFFECTIVE_CONFIG), &cfg)?;
            let (ck, metrics) = train_with_progress(&dataset, &cfg.train, |r| {
                eprintln!(
                    "epoch {:>3}  lr {:.2e}  loss {:.4} (ic {:.4}, imcc {:.4}, cm {:.4})",
                    r.epoch, r.lr, r.mean_l_total, r.mean_l_ic, r.mean_l_imcc, r.mean_l_cm
                );
            })?;
            save_checkpoint(&ck.params, &ck.store, ck.epoch, &ck.config, out.join("checkpoint.hpt"))?;
            write_json(&out.join("metrics.json"), &metrics)?;
        }
        Command::Mine {
            common,
            flags,
            checkpoint,
            data,
            out,
        } => {
            let base = base_config(&common)?;
            let ck = load_checkpoint(&checkpoint)?;
            let mut cfg = RunConfig {
                train: ck.config.clone(),
                ..base
            };
            flags.apply(&mut cfg.train);
            cfg.train.validate()?;
            let dataset = load_dataset(&data)?;
            let store = build_prototypes(&ck.params, &dataset, &cfg.train)?;
            let epoch = ck.epoch.min(cfg.train.e_total);
            let rule = MiningRule::from_config(epoch, &cfg.train)?;
            let labelled = has_labels(&dataset);
            let mut families = Vec::new();
            for m in Modality::ALL {
                for kind in [MiningKind::IntraModal, MiningKind::CrossModal] {
                    let mut report = mine_report(&store, m, kind, &rule)?;
                    let sets = report.positive_sets();
                    let quality = if labelled && !sets.is_empty() {
                        Some(mining_quality(&sets, &dataset)?)
                    } else {
                        None
                    };
                    report.precision = quality.as_ref().and_then(|q| q.precision);
                    families.push(MiningFamily { report, quality });
                }
            }
            write_json(&out, &MineOutput { epoch, families })?;
            write_json(&sibling_dir(&out).join(EFFECTIVE_CONFIG), &cfg)?;
        }
        Command::Eval {
            common,
            checkpoint,
            data,
            out,
        } => {
            let base = base_config(&common)?;
            let ck = load_checkpoint(&checkpoint)?;
            let mut cfg = RunConfig {
                train: ck.config.clone(),
                ..base
            };
            if let Some(s) = common.seed {
                cfg.train.seed = s;
            }
            let dataset = load_dataset(&data)?;
            let embeddings = embed_dataset(&ck.params, &dataset, &cfg.train)?;
            let [ir_to_vis, vis_to_ir] = evaluate_embeddings(&embeddings, cfg.eval.max_rank)?;
            let labelled = labeled_embeddings(&embeddings, None)?;
            let mut rng = crate::rng::stream(cfg.train.seed, DOMAIN_EVAL, 0);
            let distances = distance_distribution(&labelled, cfg.eval.n_pairs, &mut rng)?;
            for r in [&ir_to_vis, &vis_to_ir] {
                eprintln!(
                    "{:?}: rank-1 {:.4}  rank-5 {:.4}  rank-10 {:.4}  mAP {:.4}",
                    r.direction,
                    r.rank(1),
                    r.rank(5),
                    r.rank(10),
                    r.map
                );
            }
            write_json(
                &out,
                &EvalReport {
                    ir_to_vis,
                    vis_to_ir,
                    distances,
                    embeddings,
                },
            )?;
            write_json(&sibling_dir(&out).join(EFFECTIVE_CONFIG), &cfg)?;
        }
        Command::Gradcheck {
            common,
            step,
            tolerance,
            out,
        } => {
            let seed = common.seed.unwrap_or(0);
            let reports = gradcheck::run_suite(seed, step)?;
            let mut worst: f64 = 0.0;
            for r in &reports {
                println!(
                    "layers {}  params {:>5}  max relative error {:.3e}",
                    r.n_layers, r.n_params, r.max_rel_error
                );
                worst = worst.max(r.max_rel_error);
            }
            println!("max relative error {worst:.3e}");
            if let Some(dir) = out {
                write_json(&dir.join("gradcheck.json"), &reports)?;
                write_json(
                    &dir.join(EFFECTIVE_CONFIG),
                    &serde_json::json!({ "seed": seed, "step": step, "tolerance": tolerance }),
                )?;
            }
            if worst.is_nan() || worst >= tolerance {
                return Err(Error::NumericFailure { stage: "gradient check" });
            }
        }
    }
    Ok(())
}

fn threads(command: &Command) -> Option<usize> {
    match command {
        Command::Gen { common, .. }
        | Command::Train { common, .. }
        | Command::Mine { common, .. }
        | Command::Eval { common, .. }
        | Command::Gradcheck { common, .. } => common.threads,
    }
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match threads(&cli.command) {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| execute(cli.command)),
            Err(e) => {
                eprintln!("error: cannot start {n} worker threads: {e}");
                return EXIT_FAILURE;
            }
        },
        None => execute(cli.command),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}
