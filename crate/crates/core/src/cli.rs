//! The `tbx` command line: train, explain, evaluate, tune, generate.
//!
//! Every command writes only under `--out`. Per-record failures do not stop
//! a run; they are written to `errors.jsonl` and make the exit code 1.
//! Fatal problems (unreadable manifest, bad flags) exit with 2.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ingest::{self, Manifest};
use crate::pipeline::{explain_batch, Explainer, Explanation, ThresholdConfig};
use crate::saliency::BinarizeMode;
use crate::sentence::TemplateSet;
use crate::spc::SpcModel;
use crate::synthgen::{self, SynthSpec};
use crate::tuning::{self, EvalReport, GridSpec, MatchRule};

pub const MODEL_FILE: &str = "spc_model.json";
pub const ERRORS_FILE: &str = "errors.jsonl";
pub const EXPLANATIONS_FILE: &str = "explanations.jsonl";
pub const SENTENCES_FILE: &str = "sentences.txt";
pub const REPORT_FILE: &str = "report.json";
pub const CONFUSION_FILE: &str = "confusion.csv";
pub const FOLD_SCORES_FILE: &str = "scores_by_fold.csv";
pub const SCORES_FILE: &str = "scores.csv";
pub const BEST_CONFIG_FILE: &str = "best_config.json";

#[derive(Debug, Parser)]
#[command(
    name = "tbx",
    version,
    about = "Explain and correct scene classifier predictions with detected objects"
)]
pub struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true, env = "TBX_JOBS")]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Learn object-class statistics from validated objects of labeled images.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        thresholds: ThresholdArgs,
    },
    /// Write an explanation sentence for every image.
    Explain {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON file with scenario1/scenario2/scenario3 templates.
        #[arg(long)]
        templates: Option<PathBuf>,
        #[command(flatten)]
        thresholds: ThresholdArgs,
    },
    /// Accuracy, confusion matrix and optional annotation fidelity.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also score explanations against manifest annotations.
        #[arg(long, value_enum)]
        fidelity: Option<FidelityArg>,
        #[command(flatten)]
        thresholds: ThresholdArgs,
    },
    /// Cross-validated grid search over the thresholds.
    Tune {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON grid file: {"t_c": [..], "t_r_multipliers": [..], "t_p": [..], "folds": k}.
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        binarize: Option<BinarizeMode>,
    },
    /// Write a synthetic corpus.
    Generate {
        /// JSON generator spec (default: built-in four-class indoor scenes).
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        images: usize,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FidelityArg {
    Any,
    Majority,
    All,
}

impl From<FidelityArg> for MatchRule {
    fn from(a: FidelityArg) -> Self {
        match a {
            FidelityArg::Any => MatchRule::AnyMatch,
            FidelityArg::Majority => MatchRule::MajorityMatch,
            FidelityArg::All => MatchRule::AllMatch,
        }
    }
}

/// Threshold flags. Precedence: flag, then `--config` file, then defaults.
#[derive(Clone, Debug, Default, Args)]
pub struct ThresholdArgs {
    /// JSON file with any of t_c, t_r, t_p, binarize.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub tc: Option<f64>,
    #[arg(long)]
    pub tr: Option<f64>,
    #[arg(long)]
    pub tp: Option<f64>,
    /// absolute:<t> or quantile:<q>
    #[arg(long)]
    pub binarize: Option<BinarizeMode>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    t_c: Option<f64>,
    t_r: Option<f64>,
    t_p: Option<f64>,
    binarize: Option<BinarizeMode>,
}

impl ThresholdArgs {
    pub fn resolve(&self) -> Result<ThresholdConfig> {
        let file: ConfigFile = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing {}", path.display()))?
            }
            None => ConfigFile::default(),
        };
        let d = ThresholdConfig::default();
        let cfg = ThresholdConfig {
            t_c: self.tc.or(file.t_c).unwrap_or(d.t_c),
            t_r: self.tr.or(file.t_r).unwrap_or(d.t_r),
            t_p: self.tp.or(file.t_p).unwrap_or(d.t_p),
            binarize: self.binarize.or(file.binarize).unwrap_or(d.binarize),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// A per-record failure, one JSON object per line of `errors.jsonl`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordError {
    pub image_id: String,
    pub error: String,
}

impl RecordError {
    fn new(image_id: &str, err: impl std::fmt::Display) -> Self {
        RecordError {
            image_id: image_id.to_string(),
            error: err.to_string(),
        }
    }
}

/// Result of a command that ran to completion.
#[derive(Debug, Default)]
pub struct Outcome {
    pub processed: usize,
    pub errors: Vec<RecordError>,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        if self.errors.is_empty() {
            0
        } else {
            1
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = create(path)?;
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn write_pretty<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn prepare_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn load_manifest(path: &Path) -> Result<Manifest> {
    let m = ingest::load_manifest(path)?;
    if m.is_empty() {
        bail!("{}: manifest has no records", path.display());
    }
    Ok(m)
}

/// Class list of the first readable probability file.
fn class_names(manifest: &Manifest) -> Result<Vec<String>> {
    let mut last_err = None;
    for r in &manifest.records {
        match ingest::read_probs(manifest.resolve(&r.probs)) {
            Ok(p) => return Ok(p.class_names),
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.expect("non-empty manifest").into())
}

pub fn train(manifest: &Path, out: &Path, cfg: &ThresholdConfig) -> Result<Outcome> {
    let manifest = load_manifest(manifest)?;
    prepare_out(out)?;
    let classes = class_names(&manifest)?;
    let per_record: Vec<Result<(String, Vec<String>), RecordError>> = manifest
        .records
        .par_iter()
        .map(|r| {
            let label = r
                .true_label
                .clone()
                .ok_or_else(|| RecordError::new(&r.image_id, "record has no true_label"))?;
            let img = tuning::prepare_record(&manifest, r, cfg.binarize)
                .map_err(|e| RecordError::new(&r.image_id, e))?;
            let objects = img
                .validated_labels(cfg.t_c, cfg.t_r)
                .map_err(|e| RecordError::new(&r.image_id, e))?;
            Ok((label, objects))
        })
        .collect();

    let mut model = SpcModel::new(classes)?;
    let mut outcome = Outcome::default();
    for (r, result) in manifest.records.iter().zip(per_record) {
        match result.and_then(|(label, objects)| {
            model
                .train_accumulate(&objects, &label)
                .map_err(|e| RecordError::new(&r.image_id, e))
        }) {
            Ok(()) => outcome.processed += 1,
            Err(e) => outcome.errors.push(e),
        }
    }
    ingest::save_spc(&model, out.join(MODEL_FILE))?;
    write_jsonl(&out.join(ERRORS_FILE), &outcome.errors)?;
    info!(
        "trained on {} images ({} objects, {} failed)",
        outcome.processed,
        model.objects().count(),
        outcome.errors.len()
    );
    Ok(outcome)
}

fn run_batch(
    manifest: &Manifest,
    model: &SpcModel,
    cfg: &ThresholdConfig,
    templates: &TemplateSet,
) -> Result<(Vec<Explanation>, Vec<RecordError>)> {
    let explainer = Explainer::new(model, cfg, templates)?;
    let mut explanations = Vec::new();
    let mut errors = Vec::new();
    for item in explain_batch(&explainer, manifest) {
        match item.result {
            Ok(e) => explanations.push(e),
            Err(err) => errors.push(RecordError::new(&item.image_id, err)),
        }
    }
    Ok((explanations, errors))
}

pub fn explain(
    manifest: &Path,
    model: &Path,
    out: &Path,
    templates: Option<&Path>,
    cfg: &ThresholdConfig,
) -> Result<Outcome> {
    let manifest = load_manifest(manifest)?;
    let model = ingest::load_spc(model)?;
    let templates = match templates {
        Some(p) => TemplateSet::load(p)?,
        None => TemplateSet::default(),
    };
    prepare_out(out)?;
    let (explanations, errors) = run_batch(&manifest, &model, cfg, &templates)?;
    write_jsonl(&out.join(EXPLANATIONS_FILE), &explanations)?;
    let mut w = create(&out.join(SENTENCES_FILE))?;
    for e in &explanations {
        writeln!(w, "{}\t{}", e.image_id, e.sentence)?;
    }
    w.flush()?;
    write_jsonl(&out.join(ERRORS_FILE), &errors)?;
    let counts = tuning::scenario_counts(&explanations);
    info!(
        "explained {} images (scenario 1/2/3: {}/{}/{}), {} failed",
        explanations.len(),
        counts[0],
        counts[1],
        counts[2],
        errors.len()
    );
    Ok(Outcome {
        processed: explanations.len(),
        errors,
    })
}

pub fn evaluate(
    manifest: &Path,
    model: &Path,
    out: &Path,
    fidelity: Option<MatchRule>,
    cfg: &ThresholdConfig,
) -> Result<Outcome> {
    let manifest = load_manifest(manifest)?;
    let model = ingest::load_spc(model)?;
    prepare_out(out)?;
    let (explanations, mut errors) = run_batch(&manifest, &model, cfg, &TemplateSet::default())?;

    let labels: std::collections::HashMap<&str, &str> = manifest
        .records
        .iter()
        .filter_map(|r| r.true_label.as_deref().map(|l| (r.image_id.as_str(), l)))
        .collect();
    let mut scored = Vec::new();
    for e in &explanations {
        match labels.get(e.image_id.as_str()) {
            Some(label) => scored.push((*label, e)),
            None => errors.push(RecordError::new(&e.image_id, "record has no true_label")),
        }
    }
    let mut report = EvalReport::from_explanations(model.class_names(), scored)?;
    if let Some(rule) = fidelity {
        match tuning::fidelity_for_records(&manifest.records, &explanations, rule) {
            Ok(f) => report.fidelity = Some(f),
            Err(e) => warn!("fidelity skipped: {e}"),
        }
    }
    write_pretty(&out.join(REPORT_FILE), &report)?;
    report
        .confusion
        .write_csv(create(&out.join(CONFUSION_FILE))?)?;
    write_jsonl(&out.join(ERRORS_FILE), &errors)?;
    info!(
        "accuracy {:.4} (classifier alone {:.4}) on {} images",
        report.accuracy, report.classifier_accuracy, report.images
    );
    Ok(Outcome {
        processed: report.images,
        errors,
    })
}

pub fn tune(
    manifest: &Path,
    out: &Path,
    grid: &GridSpec,
    binarize: BinarizeMode,
    seed: u64,
) -> Result<Outcome> {
    let manifest = load_manifest(manifest)?;
    grid.validate()?;
    prepare_out(out)?;
    let prepared: Vec<_> = manifest
        .records
        .par_iter()
        .map(|r| {
            if r.true_label.is_none() {
                return Err(RecordError::new(&r.image_id, "record has no true_label"));
            }
            tuning::prepare_record(&manifest, r, binarize)
                .map_err(|e| RecordError::new(&r.image_id, e))
        })
        .collect();
    let mut images = Vec::new();
    let mut errors = Vec::new();
    for p in prepared {
        match p {
            Ok(img) => images.push(img),
            Err(e) => errors.push(e),
        }
    }
    write_jsonl(&out.join(ERRORS_FILE), &errors)?;
    let result = tuning::grid_search(&images, grid, binarize, seed)?;
    result.write_fold_csv(create(&out.join(FOLD_SCORES_FILE))?)?;
    result.write_summary_csv(create(&out.join(SCORES_FILE))?)?;
    let best = result.best();
    write_pretty(&out.join(BEST_CONFIG_FILE), &best.config)?;
    info!(
        "best of {} configurations: t_c={} t_r={} t_p={} (mean accuracy {:.4})",
        result.rows.len(),
        best.config.t_c,
        best.config.t_r,
        best.config.t_p,
        best.mean_accuracy
    );
    Ok(Outcome {
        processed: images.len(),
        errors,
    })
}

pub fn generate(spec: &SynthSpec, images: usize, out: &Path) -> Result<Outcome> {
    let manifest = synthgen::generate_to_dir(spec, images, out)?;
    info!("wrote {images} images to {}", manifest.display());
    Ok(Outcome {
        processed: images,
        errors: Vec::new(),
    })
}

fn dispatch(command: Command) -> Result<Outcome> {
    match command {
        Command::Train {
            manifest,
            out,
            thresholds,
        } => train(&manifest, &out, &thresholds.resolve()?),
        Command::Explain {
            manifest,
            model,
            out,
            templates,
            thresholds,
        } => explain(
            &manifest,
            &model,
            &out,
            templates.as_deref(),
            &thresholds.resolve()?,
        ),
        Command::Evaluate {
            manifest,
            model,
            out,
            fidelity,
            thresholds,
        } => evaluate(
            &manifest,
            &model,
            &out,
            fidelity.map(Into::into),
            &thresholds.resolve()?,
        ),
        Command::Tune {
            manifest,
            out,
            grid,
            folds,
            seed,
            binarize,
        } => {
            let mut spec = match grid {
                Some(p) => {
                    let text = fs::read_to_string(&p)
                        .with_context(|| format!("reading {}", p.display()))?;
                    serde_json::from_str(&text)
                        .with_context(|| format!("parsing {}", p.display()))?
                }
                None => GridSpec::default(),
            };
            if let Some(k) = folds {
                spec.folds = k;
            }
            tune(&manifest, &out, &spec, binarize.unwrap_or_default(), seed)
        }
        Command::Generate {
            spec,
            images,
            out,
            seed,
        } => {
            let mut spec = match spec {
                Some(p) => SynthSpec::load(p)?,
                None => SynthSpec::default(),
            };
            if let Some(s) = seed {
                spec.seed = s;
            }
            generate(&spec, images, &out)
        }
    }
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(j) = cli.jobs {
        pool = pool.num_threads(j);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            log::error!("{e}");
            return 2;
        }
    };
    match pool.install(|| dispatch(cli.command)) {
        Ok(outcome) => {
            for e in &outcome.errors {
                warn!("{}: {}", e.image_id, e.error);
            }
            outcome.exit_code()
        }
        Err(e) => {
            log::error!("{e:#}");
            2
        }
    }
}

/// Entry point for the binary: logging on stderr via `TBX_LOG`.
pub fn main() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TBX_LOG", "info")).init();
    run(Cli::parse())
}
