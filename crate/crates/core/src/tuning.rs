//! Threshold search and evaluation.
//!
//! Overlap scores do not depend on any threshold, so every image is
//! [`prepare`]d once (heatmap binarized, each detection scored) and the grid
//! search then only replays the cheap gates. For each `(t_c, t_r)` pair and
//! fold an SPC model is trained on the other folds' validated objects; the
//! `t_p` values are evaluated against that same model.

use std::collections::HashMap;
use std::io;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{self, ImageInputs, IngestError, Manifest, ProbVector};
use crate::pipeline::{Explainer, Explanation, PipelineError, ThresholdConfig};
use crate::saliency::{binarize, BinarizeMode, Heatmap};
use crate::sentence::TemplateSet;
use crate::spc::{SpcError, SpcModel};
use crate::validation::{score_detections, validate_scored, ScoredDetection};

#[derive(Debug, Error)]
pub enum TuningError {
    #[error("cannot split {records} records into {folds} folds")]
    TooFewRecords { records: usize, folds: usize },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("image '{0}' has no true label")]
    MissingLabel(String),
    #[error("image '{image_id}' is labeled '{label}', which is not a known class")]
    UnknownLabel { image_id: String, label: String },
    #[error("nothing to evaluate")]
    EmptyDataset,
    #[error("no record carries a non-empty annotation")]
    NoAnnotatedRecords,
    #[error("image '{image_id}': {source}")]
    Record {
        image_id: String,
        #[source]
        source: PipelineError,
    },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Spc(#[from] SpcError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

// ---------------------------------------------------------------------------
// prepared images

/// An image with every detection's overlap score computed.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedImage {
    pub image_id: String,
    pub true_label: Option<String>,
    pub annotation: Option<Vec<String>>,
    pub probs: ProbVector,
    pub scored: Vec<ScoredDetection>,
}

/// Binarizes the heatmap and scores all detections. A heatmap is required
/// whenever the image has detections.
pub fn prepare(
    inputs: &ImageInputs,
    heatmap: Option<&Heatmap>,
    mode: BinarizeMode,
) -> Result<PreparedImage, PipelineError> {
    let dets = &inputs.detections;
    let scored = if dets.is_empty() {
        Vec::new()
    } else {
        let hm = heatmap.ok_or_else(|| PipelineError::MissingHeatmap(dets.image_id.clone()))?;
        if hm.width() != dets.width || hm.height() != dets.height {
            return Err(PipelineError::DimensionMismatch {
                image_id: dets.image_id.clone(),
                heatmap_w: hm.width(),
                heatmap_h: hm.height(),
                image_w: dets.width,
                image_h: dets.height,
            });
        }
        let mask = binarize(hm, mode)?;
        score_detections(&mask, &dets.detections)?
    };
    Ok(PreparedImage {
        image_id: inputs.record.image_id.clone(),
        true_label: inputs.record.true_label.clone(),
        annotation: inputs.record.annotation.clone(),
        probs: inputs.probs.clone(),
        scored,
    })
}

/// Loads and prepares one manifest record.
pub fn prepare_record(
    manifest: &Manifest,
    record: &ingest::ImageRecord,
    mode: BinarizeMode,
) -> Result<PreparedImage, PipelineError> {
    let inputs = ingest::load_image_inputs(manifest, record)?;
    let heatmap = if inputs.detections.is_empty() {
        None
    } else {
        ingest::load_heatmap(manifest, record)?
    };
    prepare(&inputs, heatmap.as_ref(), mode)
}

/// Prepares every record, failing on the first bad one.
pub fn prepare_manifest(
    manifest: &Manifest,
    mode: BinarizeMode,
) -> Result<Vec<PreparedImage>, TuningError> {
    manifest
        .records
        .par_iter()
        .map(|r| {
            prepare_record(manifest, r, mode).map_err(|source| TuningError::Record {
                image_id: r.image_id.clone(),
                source,
            })
        })
        .collect()
}

impl PreparedImage {
    fn label(&self) -> Result<&str, TuningError> {
        self.true_label
            .as_deref()
            .ok_or_else(|| TuningError::MissingLabel(self.image_id.clone()))
    }

    /// Object labels that pass both gates, most relevant first.
    pub fn validated_labels(&self, t_c: f64, t_r: f64) -> Result<Vec<String>, PipelineError> {
        Ok(validate_scored(&self.scored, t_c, t_r)?
            .into_iter()
            .map(|v| v.label)
            .collect())
    }
}

/// Trains an SPC model from the validated objects of labeled images.
pub fn train_spc<'a>(
    class_names: &[String],
    images: impl IntoIterator<Item = &'a PreparedImage>,
    t_c: f64,
    t_r: f64,
) -> Result<SpcModel, TuningError> {
    let mut model = SpcModel::new(class_names.iter().cloned())?;
    for img in images {
        let label = img.label()?;
        let objects = img
            .validated_labels(t_c, t_r)
            .map_err(|source| TuningError::Record {
                image_id: img.image_id.clone(),
                source,
            })?;
        model
            .train_accumulate(&objects, label)
            .map_err(|e| match e {
                SpcError::UnknownClass(label) => TuningError::UnknownLabel {
                    image_id: img.image_id.clone(),
                    label,
                },
                other => other.into(),
            })?;
    }
    Ok(model)
}

// ---------------------------------------------------------------------------
// evaluation

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub class_names: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(class_names: Vec<String>) -> Self {
        let n = class_names.len();
        ConfusionMatrix {
            class_names,
            counts: vec![vec![0; n]; n],
        }
    }

    pub fn add(&mut self, truth: usize, predicted: usize) {
        self.counts[truth][predicted] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    /// Header row and first column hold class names.
    pub fn write_csv<W: io::Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["true\\predicted".to_string()];
        header.extend(self.class_names.iter().cloned());
        w.write_record(&header)?;
        for (name, row) in self.class_names.iter().zip(&self.counts) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(u64::to_string));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Accuracy, confusion matrix and scenario breakdown over labeled images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: usize,
    pub accuracy: f64,
    /// Accuracy of the classifier's own top prediction on the same images.
    pub classifier_accuracy: f64,
    pub confusion: ConfusionMatrix,
    /// Images per scenario 1, 2, 3.
    pub scenario_counts: [usize; 3],
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fidelity: Option<FidelityReport>,
}

impl EvalReport {
    /// Tallies `(true label, explanation)` pairs.
    pub fn from_explanations<'a>(
        class_names: &[String],
        outcomes: impl IntoIterator<Item = (&'a str, &'a Explanation)>,
    ) -> Result<Self, TuningError> {
        let index: HashMap<&str, usize> = class_names
            .iter()
            .enumerate()
            .map(|(i, c)| (c.as_str(), i))
            .collect();
        let lookup = |image_id: &str, label: &str| {
            index
                .get(label)
                .copied()
                .ok_or_else(|| TuningError::UnknownLabel {
                    image_id: image_id.to_string(),
                    label: label.to_string(),
                })
        };
        let mut confusion = ConfusionMatrix::new(class_names.to_vec());
        let mut scenario_counts = [0usize; 3];
        let mut classifier_hits = 0usize;
        for (truth, e) in outcomes {
            let t = lookup(&e.image_id, truth)?;
            let p = lookup(&e.image_id, &e.final_label)?;
            confusion.add(t, p);
            scenario_counts[e.scenario.index()] += 1;
            if e.classifier_label == truth {
                classifier_hits += 1;
            }
        }
        let n = confusion.total();
        if n == 0 {
            return Err(TuningError::EmptyDataset);
        }
        Ok(EvalReport {
            images: n as usize,
            accuracy: confusion.trace() as f64 / n as f64,
            classifier_accuracy: classifier_hits as f64 / n as f64,
            confusion,
            scenario_counts,
            fidelity: None,
        })
    }
}

/// Explains prepared images with a fixed model and thresholds.
pub fn explain_prepared(
    images: &[PreparedImage],
    model: &SpcModel,
    cfg: &ThresholdConfig,
    templates: &TemplateSet,
) -> Result<Vec<Explanation>, TuningError> {
    let explainer = Explainer::new(model, cfg, templates)?;
    images
        .iter()
        .map(|img| {
            explainer
                .explain_scored(&img.image_id, &img.probs, &img.scored)
                .map_err(|source| TuningError::Record {
                    image_id: img.image_id.clone(),
                    source,
                })
        })
        .collect()
}

/// Evaluates the full pipeline on labeled, prepared images.
pub fn evaluate(
    images: &[PreparedImage],
    model: &SpcModel,
    cfg: &ThresholdConfig,
) -> Result<EvalReport, TuningError> {
    if images.is_empty() {
        return Err(TuningError::EmptyDataset);
    }
    for img in images {
        img.label()?;
    }
    let explanations = explain_prepared(images, model, cfg, &TemplateSet::default())?;
    EvalReport::from_explanations(
        model.class_names(),
        images
            .iter()
            .zip(&explanations)
            .map(|(img, e)| (img.true_label.as_deref().unwrap_or_default(), e)),
    )
}

// ---------------------------------------------------------------------------
// fidelity

/// When an explanation counts as agreeing with a human annotation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchRule {
    /// At least one annotated object is cited.
    #[default]
    AnyMatch,
    /// More than half of the annotated objects are cited.
    MajorityMatch,
    /// Every annotated object is cited.
    AllMatch,
}

impl std::str::FromStr for MatchRule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "any" | "any_match" => Ok(MatchRule::AnyMatch),
            "majority" | "majority_match" => Ok(MatchRule::MajorityMatch),
            "all" | "all_match" => Ok(MatchRule::AllMatch),
            other => Err(format!(
                "unknown match rule '{other}' (expected any, majority or all)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub rule: MatchRule,
    pub hits: usize,
    pub annotated: usize,
    pub score: f64,
    /// Cited annotated objects over all annotated objects, whatever the rule.
    pub object_recall: f64,
}

/// Fraction of annotated images whose explanation cites the annotated
/// objects (case-insensitive exact label match). Slots equal to `"empty"`
/// are ignored and images with no other slot are skipped.
pub fn fidelity<'a, A, O>(
    pairs: impl IntoIterator<Item = (&'a [A], &'a [O])>,
    rule: MatchRule,
) -> Result<FidelityReport, TuningError>
where
    A: AsRef<str> + 'a,
    O: AsRef<str> + 'a,
{
    let mut hits = 0;
    let mut annotated = 0;
    let (mut objects_cited, mut objects_wanted) = (0usize, 0usize);
    for (annotation, objects) in pairs {
        let wanted: Vec<String> = annotation
            .iter()
            .map(|a| a.as_ref())
            .filter(|a| *a != ingest::EMPTY_ANNOTATION)
            .map(str::to_lowercase)
            .collect();
        if wanted.is_empty() {
            continue;
        }
        annotated += 1;
        let cited: Vec<String> = objects.iter().map(|o| o.as_ref().to_lowercase()).collect();
        let matched = wanted.iter().filter(|w| cited.contains(w)).count();
        objects_cited += matched;
        objects_wanted += wanted.len();
        let hit = match rule {
            MatchRule::AnyMatch => matched >= 1,
            MatchRule::MajorityMatch => 2 * matched > wanted.len(),
            MatchRule::AllMatch => matched == wanted.len(),
        };
        if hit {
            hits += 1;
        }
    }
    if annotated == 0 {
        return Err(TuningError::NoAnnotatedRecords);
    }
    Ok(FidelityReport {
        rule,
        hits,
        annotated,
        score: hits as f64 / annotated as f64,
        object_recall: objects_cited as f64 / objects_wanted as f64,
    })
}

/// Joins records and explanations by image id. Annotated records without
/// an explanation count as misses.
pub fn fidelity_for_records(
    records: &[ingest::ImageRecord],
    explanations: &[Explanation],
    rule: MatchRule,
) -> Result<FidelityReport, TuningError> {
    let by_id: HashMap<&str, &Explanation> = explanations
        .iter()
        .map(|e| (e.image_id.as_str(), e))
        .collect();
    let none: Vec<String> = Vec::new();
    let pairs: Vec<(&[String], &[String])> = records
        .iter()
        .filter_map(|r| {
            let ann = r.annotation.as_deref()?;
            let objs = by_id
                .get(r.image_id.as_str())
                .map_or(none.as_slice(), |e| e.contributing_objects.as_slice());
            Some((ann, objs))
        })
        .collect();
    fidelity(pairs, rule)
}

// ---------------------------------------------------------------------------
// k-fold grid search

/// Shuffles `0..n` with `seed` and cuts it into `k` folds whose sizes differ
/// by at most one (the first `n % k` folds are the larger ones).
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>, TuningError> {
    if k < 2 || k > n {
        return Err(TuningError::TooFewRecords {
            records: n,
            folds: k,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        folds.push(order[start..start + len].to_vec());
        start += len;
    }
    Ok(folds)
}

/// `multiplier * t_c`, rounded to 12 decimals so that e.g. 0.4 * 0.2 is
/// stored and printed as 0.08.
pub fn relevance_threshold(t_c: f64, multiplier: f64) -> f64 {
    (multiplier * t_c * 1e12).round() / 1e12
}

/// Candidate thresholds. `t_r` values are multiples of the current `t_c`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub t_c: Vec<f64>,
    pub t_r_multipliers: Vec<f64>,
    pub t_p: Vec<f64>,
    pub folds: usize,
}

impl Default for GridSpec {
    /// Four confidence values, four relevance multipliers, ten probability
    /// values from 0.1 to 1.0, four folds: 160 configurations.
    fn default() -> Self {
        GridSpec {
            t_c: vec![0.2, 0.4, 0.6, 0.8],
            t_r_multipliers: vec![0.2, 0.4, 0.6, 0.8],
            t_p: (1..=10).map(|i| f64::from(i) / 10.0).collect(),
            folds: 4,
        }
    }
}

impl GridSpec {
    pub fn single(cfg: &ThresholdConfig, folds: usize) -> Self {
        GridSpec {
            t_c: vec![cfg.t_c],
            t_r_multipliers: vec![if cfg.t_c > 0.0 {
                cfg.t_r / cfg.t_c
            } else {
                0.0
            }],
            t_p: vec![cfg.t_p],
            folds,
        }
    }

    pub fn validate(&self) -> Result<(), TuningError> {
        if self.t_c.is_empty() || self.t_r_multipliers.is_empty() || self.t_p.is_empty() {
            return Err(TuningError::InvalidGrid(
                "every axis needs at least one value".into(),
            ));
        }
        if self.folds < 2 {
            return Err(TuningError::InvalidGrid(format!(
                "need at least 2 folds, got {}",
                self.folds
            )));
        }
        for (axis, values) in [
            ("t_c", &self.t_c),
            ("t_r_multipliers", &self.t_r_multipliers),
            ("t_p", &self.t_p),
        ] {
            if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(TuningError::InvalidGrid(format!(
                    "{axis} value {v} is outside [0, 1]"
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.t_c.len() * self.t_r_multipliers.len() * self.t_p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Configurations in search order: `t_c` outermost, then `t_r`, then `t_p`.
    pub fn configs(&self, binarize: BinarizeMode) -> Vec<ThresholdConfig> {
        let mut out = Vec::with_capacity(self.len());
        for &t_c in &self.t_c {
            for &m in &self.t_r_multipliers {
                for &t_p in &self.t_p {
                    out.push(ThresholdConfig {
                        t_c,
                        t_r: relevance_threshold(t_c, m),
                        t_p,
                        binarize,
                    });
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub config: ThresholdConfig,
    pub fold_accuracies: Vec<f64>,
    pub mean_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSearchResult {
    pub rows: Vec<GridRow>,
    pub best_index: usize,
}

impl GridSearchResult {
    pub fn best(&self) -> &GridRow {
        &self.rows[self.best_index]
    }

    /// One line per configuration and fold.
    pub fn write_fold_csv<W: io::Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t_c", "t_r", "t_p", "fold", "accuracy"])?;
        for row in &self.rows {
            let c = &row.config;
            for (fold, acc) in row.fold_accuracies.iter().enumerate() {
                w.write_record([
                    c.t_c.to_string(),
                    c.t_r.to_string(),
                    c.t_p.to_string(),
                    fold.to_string(),
                    acc.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// One line per configuration with the mean over folds.
    pub fn write_summary_csv<W: io::Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t_c", "t_r", "t_p", "mean_accuracy"])?;
        for row in &self.rows {
            let c = &row.config;
            w.write_record([
                c.t_c.to_string(),
                c.t_r.to_string(),
                c.t_p.to_string(),
                row.mean_accuracy.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Training and held-out image indices of one fold.
pub fn fold_partition(folds: &[Vec<usize>], fold: usize) -> (Vec<usize>, &[usize]) {
    let train = folds
        .iter()
        .enumerate()
        .filter(|(f, _)| *f != fold)
        .flat_map(|(_, idx)| idx.iter().copied())
        .collect();
    (train, &folds[fold])
}

/// Exhaustive threshold search with k-fold cross-validation. The winner is
/// the highest mean accuracy; ties go to the earliest configuration in
/// search order. Runs on the current rayon pool; results do not depend on
/// its size.
pub fn grid_search(
    images: &[PreparedImage],
    spec: &GridSpec,
    binarize: BinarizeMode,
    seed: u64,
) -> Result<GridSearchResult, TuningError> {
    spec.validate()?;
    let first = images.first().ok_or(TuningError::EmptyDataset)?;
    let class_names = first.probs.class_names.clone();
    for img in images {
        img.label()?;
    }
    let folds = kfold_split(images.len(), spec.folds, seed)?;
    let templates = TemplateSet::default();

    // one unit per (t_c, t_r multiplier, fold); each yields accuracies for
    // every t_p
    let units: Vec<(usize, usize, usize)> = (0..spec.t_c.len())
        .flat_map(|c| {
            (0..spec.t_r_multipliers.len())
                .flat_map(move |r| (0..spec.folds).map(move |f| (c, r, f)))
        })
        .collect();
    let results: Vec<Vec<f64>> = units
        .par_iter()
        .map(|&(c, r, f)| {
            let t_c = spec.t_c[c];
            let t_r = relevance_threshold(t_c, spec.t_r_multipliers[r]);
            let (train_idx, test_idx) = fold_partition(&folds, f);
            let model = train_spc(
                &class_names,
                train_idx.iter().map(|&i| &images[i]),
                t_c,
                t_r,
            )?;
            let held_out: Vec<PreparedImage> =
                test_idx.iter().map(|&i| images[i].clone()).collect();
            spec.t_p
                .iter()
                .map(|&t_p| {
                    let cfg = ThresholdConfig {
                        t_c,
                        t_r,
                        t_p,
                        binarize,
                    };
                    let explanations = explain_prepared(&held_out, &model, &cfg, &templates)?;
                    let hits = held_out
                        .iter()
                        .zip(&explanations)
                        .filter(|(img, e)| {
                            img.true_label.as_deref() == Some(e.final_label.as_str())
                        })
                        .count();
                    Ok(hits as f64 / held_out.len() as f64)
                })
                .collect::<Result<Vec<f64>, TuningError>>()
        })
        .collect::<Result<_, _>>()?;

    let mut rows = Vec::with_capacity(spec.len());
    for (c, &t_c) in spec.t_c.iter().enumerate() {
        for (r, &m) in spec.t_r_multipliers.iter().enumerate() {
            for (p, &t_p) in spec.t_p.iter().enumerate() {
                let fold_accuracies: Vec<f64> = (0..spec.folds)
                    .map(|f| {
                        let unit = (c * spec.t_r_multipliers.len() + r) * spec.folds + f;
                        results[unit][p]
                    })
                    .collect();
                let mean_accuracy = fold_accuracies.iter().sum::<f64>() / spec.folds as f64;
                rows.push(GridRow {
                    config: ThresholdConfig {
                        t_c,
                        t_r: relevance_threshold(t_c, m),
                        t_p,
                        binarize,
                    },
                    fold_accuracies,
                    mean_accuracy,
                });
            }
        }
    }
    let mut best_index = 0;
    for (i, row) in rows.iter().enumerate() {
        if row.mean_accuracy > rows[best_index].mean_accuracy {
            best_index = i;
        }
    }
    Ok(GridSearchResult { rows, best_index })
}

/// Scenario tally of a set of explanations.
pub fn scenario_counts(explanations: &[Explanation]) -> [usize; 3] {
    let mut counts = [0; 3];
    for e in explanations {
        counts[e.scenario.index()] += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::Scenario;
    use crate::validation::{BoundingBox, Detection};

    #[test]
    fn fold_sizes() {
        let f = kfold_split(8, 4, 1).unwrap();
        assert!(f.iter().all(|x| x.len() == 2));
        let f = kfold_split(9, 4, 1).unwrap();
        let mut sizes: Vec<usize> = f.iter().map(Vec::len).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, [2, 2, 2, 3]);
        assert_eq!(kfold_split(9, 4, 7).unwrap(), kfold_split(9, 4, 7).unwrap());
        assert!(matches!(
            kfold_split(3, 4, 0),
            Err(TuningError::TooFewRecords { .. })
        ));
        assert!(kfold_split(3, 1, 0).is_err());
    }

    #[test]
    fn folds_partition_indices() {
        let folds = kfold_split(23, 5, 99).unwrap();
        let mut all: Vec<usize> = folds.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
        for f in 0..5 {
            let (train, test) = fold_partition(&folds, f);
            assert!(train.iter().all(|i| !test.contains(i)));
            assert_eq!(train.len() + test.len(), 23);
        }
    }

    #[test]
    fn default_grid_has_160_configs_in_order() {
        let g = GridSpec::default();
        let configs = g.configs(BinarizeMode::default());
        assert_eq!(configs.len(), 160);
        assert_eq!(g.folds, 4);
        assert_eq!((configs[0].t_c, configs[0].t_p), (0.2, 0.1));
        assert_eq!(configs[9].t_p, 1.0);
        assert_eq!(configs[10].t_r, 0.08);
        assert_eq!(configs[159].t_c, 0.8);
        assert!((configs[159].t_r - 0.64).abs() < 1e-12);
    }

    #[test]
    fn grid_validation() {
        let g = GridSpec {
            folds: 1,
            ..GridSpec::default()
        };
        assert!(g.validate().is_err());
        let mut g = GridSpec::default();
        g.t_p.clear();
        assert!(g.validate().is_err());
        let mut g = GridSpec::default();
        g.t_c.push(1.5);
        assert!(g.validate().is_err());
    }

    #[test]
    fn confusion_matrix_csv() {
        let mut m = ConfusionMatrix::new(vec!["a".into(), "b,c".into()]);
        m.add(0, 0);
        m.add(0, 1);
        m.add(1, 1);
        let mut out = Vec::new();
        m.write_csv(&mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "true\\predicted,a,\"b,c\"\na,1,1\n\"b,c\",0,1\n"
        );
        assert_eq!(m.trace(), 2);
        assert_eq!(m.row_sums(), [2, 1]);
    }

    fn expl(id: &str, objs: &[&str]) -> Explanation {
        Explanation {
            image_id: id.into(),
            scenario: Scenario::Confident,
            classifier_label: "x".into(),
            classifier_prob: 0.9,
            final_label: "x".into(),
            contributing_objects: objs.iter().map(|s| s.to_string()).collect(),
            sentence: String::new(),
            spc_scores: None,
            spc_fallback: false,
        }
    }

    #[test]
    fn fidelity_rules() {
        let hit: [&str; 3] = ["bed", "empty", "empty"];
        let miss: [&str; 3] = ["sofa", "tv", "rug"];
        let r = fidelity(
            [(&hit[..], &["bed", "lamp"][..]), (&miss[..], &["bed"][..])],
            MatchRule::AnyMatch,
        )
        .unwrap();
        assert_eq!((r.hits, r.annotated), (1, 2));
        // case-insensitive
        let r = fidelity(
            [(&["Bed", "empty", "empty"][..], &["bed"][..])],
            MatchRule::AnyMatch,
        )
        .unwrap();
        assert_eq!(r.score, 1.0);
        let ann = ["sofa", "tv", "rug"];
        let r = fidelity(
            [
                (&["sofa", "tv", "empty"][..], &["tv", "sofa"][..]),
                (&ann[..], &["tv", "rug"][..]),
            ],
            MatchRule::AllMatch,
        )
        .unwrap();
        assert_eq!(r.hits, 1);
        assert_eq!(r.object_recall, 4.0 / 5.0);
        // majority needs 2 of 3
        let r = fidelity(
            [(&ann[..], &["tv"][..]), (&ann[..], &["tv", "rug"][..])],
            MatchRule::MajorityMatch,
        )
        .unwrap();
        assert_eq!(r.hits, 1);
        let empty: [&str; 3] = ["empty"; 3];
        assert!(matches!(
            fidelity([(&empty[..], &["bed"][..])], MatchRule::AnyMatch),
            Err(TuningError::NoAnnotatedRecords)
        ));
    }

    #[test]
    fn fidelity_joins_by_image_id() {
        let rec = |id: &str, ann: Option<[&str; 3]>| ingest::ImageRecord {
            image_id: id.into(),
            width: 1,
            height: 1,
            true_label: None,
            detections: "d".into(),
            heatmap: None,
            probs: "p".into(),
            annotation: ann.map(|a| a.iter().map(|s| s.to_string()).collect()),
        };
        let records = [
            rec("a", Some(["bed", "empty", "empty"])),
            rec("b", Some(["oven", "empty", "empty"])),
            rec("c", None),
        ];
        let explanations = [expl("a", &["bed"])];
        let r = fidelity_for_records(&records, &explanations, MatchRule::AnyMatch).unwrap();
        assert_eq!((r.hits, r.annotated), (1, 2));
    }

    fn prepared(id: &str, label: &str, probs: [f64; 2], objs: &[(&str, f64)]) -> PreparedImage {
        PreparedImage {
            image_id: id.into(),
            true_label: Some(label.into()),
            annotation: None,
            probs: ProbVector::new(id, vec!["a".into(), "b".into()], probs.to_vec()).unwrap(),
            scored: objs
                .iter()
                .map(|(l, c)| ScoredDetection {
                    detection: Detection::new(*l, *c, BoundingBox::new(0.0, 0.0, 1.0, 1.0)),
                    overlap: Some(1.0),
                })
                .collect(),
        }
    }

    #[test]
    fn evaluation_tallies() {
        let imgs = vec![
            prepared("1", "a", [0.9, 0.1], &[("x", 0.9)]),
            prepared("2", "b", [0.4, 0.6], &[("y", 0.9)]),
            prepared("3", "b", [0.6, 0.4], &[("y", 0.9)]),
            prepared("4", "a", [0.4, 0.6], &[]),
        ];
        let model = train_spc(&["a".into(), "b".into()], &imgs, 0.2, 0.08).unwrap();
        assert_eq!(model.counts("y"), Some(&[0, 2][..]));
        let r = evaluate(&imgs, &model, &ThresholdConfig::default()).unwrap();
        // 1: confident a (right); 2: corrected to b (right);
        // 3: corrected to b (right); 4: unreliable, stays b (wrong)
        assert_eq!(r.confusion.counts, vec![vec![1, 1], vec![0, 2]]);
        assert_eq!(r.accuracy, 0.75);
        assert_eq!(r.classifier_accuracy, 0.5);
        assert_eq!(r.scenario_counts, [1, 2, 1]);
        assert!(matches!(
            evaluate(&[], &model, &ThresholdConfig::default()),
            Err(TuningError::EmptyDataset)
        ));
        let mut unlabeled = imgs.clone();
        unlabeled[0].true_label = None;
        assert!(matches!(
            evaluate(&unlabeled, &model, &ThresholdConfig::default()),
            Err(TuningError::MissingLabel(_))
        ));
    }

    #[test]
    fn single_config_grid_matches_direct_evaluation() {
        let imgs: Vec<PreparedImage> = (0..8)
            .map(|i| {
                let (label, obj) = if i % 2 == 0 { ("a", "x") } else { ("b", "y") };
                prepared(&i.to_string(), label, [0.45, 0.55], &[(obj, 0.9)])
            })
            .collect();
        let cfg = ThresholdConfig::default();
        let spec = GridSpec::single(&cfg, 2);
        let result = grid_search(&imgs, &spec, cfg.binarize, 3).unwrap();
        assert_eq!(result.rows.len(), 1);
        let folds = kfold_split(8, 2, 3).unwrap();
        let mut direct = 0.0;
        for f in 0..2 {
            let (train, test) = fold_partition(&folds, f);
            let model = train_spc(
                &["a".into(), "b".into()],
                train.iter().map(|&i| &imgs[i]),
                cfg.t_c,
                cfg.t_r,
            )
            .unwrap();
            let held: Vec<PreparedImage> = test.iter().map(|&i| imgs[i].clone()).collect();
            direct += evaluate(&held, &model, &cfg).unwrap().accuracy;
        }
        assert_eq!(result.best().mean_accuracy, direct / 2.0);
        assert_eq!(result.best().config.t_c, cfg.t_c);
    }
}
