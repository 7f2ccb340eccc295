//! One image through the system: scenario selection, object validation,
//! statistical correction and sentence assembly.
//!
//! * Scenario 1: the classifier's top probability is strictly above `t_p`.
//!   The prediction stands and is explained by the validated objects.
//! * Scenario 2: the prediction is unreliable, but detections above `t_c`
//!   exist and the SPC model scores some class positively. The SPC winner
//!   replaces the prediction and every passing detection is cited.
//! * Scenario 3: the prediction is unreliable and nothing can correct it.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{self, IngestError, Manifest, ProbVector};
use crate::saliency::{binarize, BinarizeMode, Heatmap, SaliencyError};
use crate::sentence::{TemplateError, TemplateSet};
use crate::spc::{ClassScores, SpcModel};
use crate::validation::{
    validate_objects, validate_scored, Detection, DetectionSet, ScoredDetection, ValidatedObject,
    ValidationError,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("image '{0}' needs a heatmap to validate its objects, but none was supplied")]
    MissingHeatmap(String),
    #[error("image '{image_id}': heatmap is {heatmap_w}x{heatmap_h} but the image is {image_w}x{image_h}")]
    DimensionMismatch {
        image_id: String,
        heatmap_w: u32,
        heatmap_h: u32,
        image_w: u32,
        image_h: u32,
    },
    #[error(
        "image '{image_id}': classifier classes {found:?} differ from the model's {expected:?}"
    )]
    ClassMismatch {
        image_id: String,
        expected: Vec<String>,
        found: Vec<String>,
    },
    #[error("probabilities belong to '{probs}' but detections to '{detections}'")]
    ImageIdMismatch { probs: String, detections: String },
    #[error("invalid threshold configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error(transparent)]
    Saliency(#[from] SaliencyError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

/// Which of the three explanation paths an image took.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Scenario {
    /// Reliable prediction explained by validated objects.
    Confident,
    /// Unreliable prediction replaced by the SPC winner.
    Corrected,
    /// Unreliable prediction that nothing could correct.
    Unreliable,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [
        Scenario::Confident,
        Scenario::Corrected,
        Scenario::Unreliable,
    ];

    pub fn number(self) -> u8 {
        match self {
            Scenario::Confident => 1,
            Scenario::Corrected => 2,
            Scenario::Unreliable => 3,
        }
    }

    pub fn index(self) -> usize {
        self.number() as usize - 1
    }
}

impl From<Scenario> for u8 {
    fn from(s: Scenario) -> u8 {
        s.number()
    }
}

impl TryFrom<u8> for Scenario {
    type Error = String;

    fn try_from(n: u8) -> Result<Self, Self::Error> {
        match n {
            1 => Ok(Scenario::Confident),
            2 => Ok(Scenario::Corrected),
            3 => Ok(Scenario::Unreliable),
            other => Err(format!("scenario must be 1, 2 or 3, got {other}")),
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

/// Detection confidence, relevance and class-probability thresholds plus
/// the heatmap binarization rule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdConfig {
    pub t_c: f64,
    pub t_r: f64,
    pub t_p: f64,
    #[serde(default)]
    pub binarize: BinarizeMode,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        ThresholdConfig {
            t_c: 0.2,
            t_r: 0.08,
            t_p: 0.7,
            binarize: BinarizeMode::default(),
        }
    }
}

impl ThresholdConfig {
    pub fn new(t_c: f64, t_r: f64, t_p: f64) -> Self {
        ThresholdConfig {
            t_c,
            t_r,
            t_p,
            binarize: BinarizeMode::default(),
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        for (name, v) in [("t_c", self.t_c), ("t_r", self.t_r), ("t_p", self.t_p)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(PipelineError::InvalidConfig(format!(
                    "{name}={v} is outside [0, 1]"
                )));
            }
        }
        self.binarize.validate()?;
        Ok(())
    }
}

/// Scenario rule: 1 iff `prob > t_p`, else 2 iff some detection passed the
/// confidence gate and SPC can produce a label, else 3.
pub fn select_scenario(
    prob: f64,
    detections_after_tc: usize,
    spc_correctable: bool,
    t_p: f64,
) -> Scenario {
    if prob > t_p {
        Scenario::Confident
    } else if detections_after_tc > 0 && spc_correctable {
        Scenario::Corrected
    } else {
        Scenario::Unreliable
    }
}

/// The per-image output record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub image_id: String,
    pub scenario: Scenario,
    pub classifier_label: String,
    pub classifier_prob: f64,
    pub final_label: String,
    pub contributing_objects: Vec<String>,
    pub sentence: String,
    pub spc_scores: Option<ClassScores>,
    /// Set when detections existed but SPC had no weights for any of them,
    /// so an image that would have been corrected fell back to scenario 3.
    #[serde(default)]
    pub spc_fallback: bool,
}

/// Explains images against a trained model, thresholds and templates.
#[derive(Clone, Copy, Debug)]
pub struct Explainer<'a> {
    model: &'a SpcModel,
    cfg: &'a ThresholdConfig,
    templates: &'a TemplateSet,
}

impl<'a> Explainer<'a> {
    pub fn new(
        model: &'a SpcModel,
        cfg: &'a ThresholdConfig,
        templates: &'a TemplateSet,
    ) -> Result<Self, PipelineError> {
        cfg.validate()?;
        templates.validate()?;
        Ok(Explainer {
            model,
            cfg,
            templates,
        })
    }

    pub fn model(&self) -> &SpcModel {
        self.model
    }

    pub fn config(&self) -> &ThresholdConfig {
        self.cfg
    }

    /// Explains an image whose heatmap is already in memory.
    pub fn explain(
        &self,
        probs: &ProbVector,
        detections: &DetectionSet,
        heatmap: Option<&Heatmap>,
    ) -> Result<Explanation, PipelineError> {
        self.explain_with(probs, detections, || Ok(heatmap.cloned()))
    }

    /// Explains an image, calling `load_heatmap` only if scenario 1 needs
    /// to validate objects.
    pub fn explain_with<F>(
        &self,
        probs: &ProbVector,
        detections: &DetectionSet,
        load_heatmap: F,
    ) -> Result<Explanation, PipelineError>
    where
        F: FnOnce() -> Result<Option<Heatmap>, PipelineError>,
    {
        if probs.image_id != detections.image_id {
            return Err(PipelineError::ImageIdMismatch {
                probs: probs.image_id.clone(),
                detections: detections.image_id.clone(),
            });
        }
        let passing: Vec<&Detection> = detections.above_confidence(self.cfg.t_c).collect();
        self.assemble(&detections.image_id, probs, &passing, |passing| {
            let heatmap = load_heatmap()?
                .ok_or_else(|| PipelineError::MissingHeatmap(detections.image_id.clone()))?;
            if heatmap.width() != detections.width || heatmap.height() != detections.height {
                return Err(PipelineError::DimensionMismatch {
                    image_id: detections.image_id.clone(),
                    heatmap_w: heatmap.width(),
                    heatmap_h: heatmap.height(),
                    image_w: detections.width,
                    image_h: detections.height,
                });
            }
            let mask = binarize(&heatmap, self.cfg.binarize)?;
            let owned: Vec<Detection> = passing.iter().map(|d| (*d).clone()).collect();
            Ok(validate_objects(&mask, &owned, self.cfg.t_c, self.cfg.t_r)?)
        })
    }

    /// Explains an image from detections whose overlap scores were computed
    /// ahead of time (threshold sweeps reuse them).
    pub fn explain_scored(
        &self,
        image_id: &str,
        probs: &ProbVector,
        scored: &[ScoredDetection],
    ) -> Result<Explanation, PipelineError> {
        let passing: Vec<&Detection> = scored
            .iter()
            .map(|s| &s.detection)
            .filter(|d| d.confidence > self.cfg.t_c)
            .collect();
        self.assemble(image_id, probs, &passing, |_| {
            Ok(validate_scored(scored, self.cfg.t_c, self.cfg.t_r)?)
        })
    }

    fn assemble<F>(
        &self,
        image_id: &str,
        probs: &ProbVector,
        passing: &[&Detection],
        validate: F,
    ) -> Result<Explanation, PipelineError>
    where
        F: FnOnce(&[&Detection]) -> Result<Vec<ValidatedObject>, PipelineError>,
    {
        if probs.class_names != self.model.class_names() {
            return Err(PipelineError::ClassMismatch {
                image_id: image_id.to_string(),
                expected: self.model.class_names().to_vec(),
                found: probs.class_names.clone(),
            });
        }
        let (top, prob) = probs.top();
        let classifier_label = probs.class_names[top].clone();

        let spc_scores = if prob > self.cfg.t_p || passing.is_empty() {
            None
        } else {
            let labels: Vec<&str> = passing.iter().map(|d| d.label.as_str()).collect();
            Some(self.model.score_classes(&labels))
        };
        let correctable = spc_scores.as_ref().is_some_and(ClassScores::is_informative);
        let scenario = select_scenario(prob, passing.len(), correctable, self.cfg.t_p);

        let (final_label, contributing_objects) = match scenario {
            Scenario::Confident => {
                let validated = if passing.is_empty() {
                    Vec::new()
                } else {
                    validate(passing)?
                };
                (
                    classifier_label.clone(),
                    validated.into_iter().map(|v| v.label).collect(),
                )
            }
            Scenario::Corrected => {
                let winner = spc_scores.as_ref().expect("scored when correctable").winner;
                (
                    self.model.class_names()[winner].clone(),
                    passing.iter().map(|d| d.label.clone()).collect(),
                )
            }
            Scenario::Unreliable => (classifier_label.clone(), Vec::new()),
        };
        let sentence = self
            .templates
            .render(scenario, &final_label, &contributing_objects)?;
        Ok(Explanation {
            image_id: image_id.to_string(),
            spc_fallback: scenario == Scenario::Unreliable && !passing.is_empty(),
            scenario,
            classifier_label,
            classifier_prob: prob,
            final_label,
            contributing_objects,
            sentence,
            spc_scores,
        })
    }
}

/// Outcome of one manifest record in a batch.
#[derive(Debug)]
pub struct BatchItem {
    pub image_id: String,
    pub result: Result<Explanation, PipelineError>,
}

/// Explains one manifest record, loading its heatmap only when needed.
pub fn explain_record(
    explainer: &Explainer<'_>,
    manifest: &Manifest,
    record: &ingest::ImageRecord,
) -> Result<Explanation, PipelineError> {
    let inputs = ingest::load_image_inputs(manifest, record)?;
    explainer.explain_with(&inputs.probs, &inputs.detections, || {
        Ok(ingest::load_heatmap(manifest, record)?)
    })
}

/// Explains every record independently; output order follows the manifest
/// and failures are kept per record. Runs on the current rayon pool.
pub fn explain_batch(explainer: &Explainer<'_>, manifest: &Manifest) -> Vec<BatchItem> {
    manifest
        .records
        .par_iter()
        .map(|record| BatchItem {
            image_id: record.image_id.clone(),
            result: explain_record(explainer, manifest, record),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::validation::BoundingBox;

    fn classes() -> Vec<String> {
        ["bedroom", "kitchen", "bar"].map(String::from).to_vec()
    }

    fn probs(id: &str, p: [f64; 3]) -> ProbVector {
        ProbVector::new(id, classes(), p.to_vec()).unwrap()
    }

    fn dets(id: &str, items: &[(&str, f64, [f64; 4])]) -> DetectionSet {
        DetectionSet {
            image_id: id.into(),
            width: 8,
            height: 8,
            detections: items
                .iter()
                .map(|(l, c, b)| Detection::new(*l, *c, BoundingBox::from(*b)))
                .collect(),
        }
    }

    fn kitchen_model() -> SpcModel {
        let mut m = SpcModel::new(classes()).unwrap();
        for _ in 0..9 {
            m.train_accumulate(&["oven", "refrigerator"], "kitchen")
                .unwrap();
        }
        m.train_accumulate(&["refrigerator"], "bar").unwrap();
        m.train_accumulate(&["bed"], "bedroom").unwrap();
        m
    }

    fn run(
        p: &ProbVector,
        d: &DetectionSet,
        hm: Option<&Heatmap>,
    ) -> Result<Explanation, PipelineError> {
        let model = kitchen_model();
        let cfg = ThresholdConfig::default();
        let templates = TemplateSet::default();
        Explainer::new(&model, &cfg, &templates)?.explain(p, d, hm)
    }

    #[test]
    fn scenario_rule_examples() {
        assert_eq!(select_scenario(0.9, 0, false, 0.7), Scenario::Confident);
        assert_eq!(select_scenario(0.5, 3, true, 0.7), Scenario::Corrected);
        assert_eq!(select_scenario(0.5, 0, true, 0.7), Scenario::Unreliable);
        assert_eq!(select_scenario(0.5, 2, false, 0.7), Scenario::Unreliable);
        assert_eq!(select_scenario(0.7, 2, true, 0.7), Scenario::Corrected);
    }

    #[test]
    fn confident_image_cites_validated_objects() {
        let hm = Heatmap::filled(8, 8, 1.0).unwrap();
        let d = dets("a", &[("bed", 0.9, [0.0, 0.0, 4.0, 4.0])]);
        let e = run(&probs("a", [0.95, 0.03, 0.02]), &d, Some(&hm)).unwrap();
        assert_eq!(e.scenario, Scenario::Confident);
        assert_eq!(e.final_label, "bedroom");
        assert_eq!(e.contributing_objects, ["bed"]);
        assert!(e.spc_scores.is_none());
    }

    #[test]
    fn unreliable_image_is_corrected_by_objects() {
        let d = dets(
            "b",
            &[
                ("oven", 0.8, [0.0, 0.0, 2.0, 2.0]),
                ("refrigerator", 0.7, [2.0, 2.0, 3.0, 3.0]),
            ],
        );
        let e = run(&probs("b", [0.3, 0.3, 0.4]), &d, None).unwrap();
        assert_eq!(e.scenario, Scenario::Corrected);
        assert_eq!(e.classifier_label, "bar");
        assert_eq!(e.final_label, "kitchen");
        assert_eq!(e.contributing_objects, ["oven", "refrigerator"]);
        // oven 9/9 kitchen, refrigerator 9/10 kitchen and 1/10 bar
        let s = e.spc_scores.unwrap();
        assert_eq!(s.scores, vec![0.0, 1.0 + 0.9, 0.1]);
    }

    #[test]
    fn nothing_detected_is_unreliable() {
        let e = run(&probs("c", [0.3, 0.3, 0.4]), &dets("c", &[]), None).unwrap();
        assert_eq!(e.scenario, Scenario::Unreliable);
        assert_eq!(e.final_label, "bar");
        assert!(e.contributing_objects.is_empty());
        assert!(!e.spc_fallback);
    }

    #[test]
    fn unseen_objects_fall_back_to_unreliable() {
        let d = dets("d", &[("piano", 0.9, [0.0, 0.0, 2.0, 2.0])]);
        let e = run(&probs("d", [0.3, 0.3, 0.4]), &d, None).unwrap();
        assert_eq!(e.scenario, Scenario::Unreliable);
        assert!(e.spc_fallback);
        assert_eq!(e.final_label, "bar");
    }

    #[test]
    fn low_confidence_detections_are_ignored() {
        let d = dets("e", &[("oven", 0.1, [0.0, 0.0, 2.0, 2.0])]);
        let e = run(&probs("e", [0.3, 0.3, 0.4]), &d, None).unwrap();
        assert_eq!(e.scenario, Scenario::Unreliable);
        assert!(!e.spc_fallback);
    }

    #[test]
    fn boundary_probability_is_not_confident() {
        let d = dets("f", &[("oven", 0.9, [0.0, 0.0, 2.0, 2.0])]);
        let e = run(&probs("f", [0.7, 0.2, 0.1]), &d, None).unwrap();
        assert_eq!(e.scenario, Scenario::Corrected);
    }

    #[test]
    fn heatmap_only_required_for_confident_images_with_objects() {
        let d = dets("g", &[("bed", 0.9, [0.0, 0.0, 4.0, 4.0])]);
        assert!(matches!(
            run(&probs("g", [0.95, 0.03, 0.02]), &d, None),
            Err(PipelineError::MissingHeatmap(_))
        ));
        let e = run(&probs("g", [0.95, 0.03, 0.02]), &dets("g", &[]), None).unwrap();
        assert_eq!(e.scenario, Scenario::Confident);
        assert!(e.contributing_objects.is_empty());

        let model = kitchen_model();
        let cfg = ThresholdConfig::default();
        let t = TemplateSet::default();
        let ex = Explainer::new(&model, &cfg, &t).unwrap();
        let mut called = false;
        ex.explain_with(
            &probs("h", [0.3, 0.3, 0.4]),
            &dets("h", &[("oven", 0.9, [0.0, 0.0, 1.0, 1.0])]),
            || {
                called = true;
                Ok(None)
            },
        )
        .unwrap();
        assert!(!called);
    }

    #[test]
    fn mismatched_heatmap_is_rejected() {
        let hm = Heatmap::filled(4, 4, 1.0).unwrap();
        let d = dets("i", &[("bed", 0.9, [0.0, 0.0, 4.0, 4.0])]);
        assert!(matches!(
            run(&probs("i", [0.95, 0.03, 0.02]), &d, Some(&hm)),
            Err(PipelineError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn class_list_must_match_model() {
        let p = ProbVector::new("j", vec!["x".into(), "y".into()], vec![0.5, 0.5]).unwrap();
        assert!(matches!(
            run(&p, &dets("j", &[]), None),
            Err(PipelineError::ClassMismatch { .. })
        ));
        assert!(matches!(
            run(&probs("k", [0.3, 0.3, 0.4]), &dets("other", &[]), None),
            Err(PipelineError::ImageIdMismatch { .. })
        ));
    }

    #[test]
    fn invalid_config_is_rejected() {
        let model = kitchen_model();
        let t = TemplateSet::default();
        let cfg = ThresholdConfig::new(0.2, 1.5, 0.7);
        assert!(Explainer::new(&model, &cfg, &t).is_err());
    }

    #[test]
    fn scored_path_matches_heatmap_path() {
        let values: Vec<f32> = (0..64).map(|i| (i % 8) as f32 / 8.0).collect();
        let hm = Heatmap::new(8, 8, values).unwrap();
        let d = dets(
            "l",
            &[
                ("bed", 0.9, [4.0, 0.0, 4.0, 8.0]),
                ("lamp", 0.5, [0.0, 0.0, 6.0, 3.0]),
                ("rug", 0.1, [0.0, 0.0, 8.0, 8.0]),
            ],
        );
        let model = kitchen_model();
        let cfg = ThresholdConfig::default();
        let t = TemplateSet::default();
        let ex = Explainer::new(&model, &cfg, &t).unwrap();
        let p = probs("l", [0.9, 0.05, 0.05]);
        let direct = ex.explain(&p, &d, Some(&hm)).unwrap();
        let mask = binarize(&hm, cfg.binarize).unwrap();
        let scored = crate::validation::score_detections(&mask, &d.detections).unwrap();
        assert_eq!(ex.explain_scored("l", &p, &scored).unwrap(), direct);
        assert_eq!(direct.contributing_objects, ["bed", "lamp"]);
    }

    #[test]
    fn explanation_json_uses_numeric_scenarios() {
        let e = run(&probs("m", [0.3, 0.3, 0.4]), &dets("m", &[]), None).unwrap();
        let json = serde_json::to_value(&e).unwrap();
        assert_eq!(json["scenario"], 3);
        let back: Explanation = serde_json::from_value(json).unwrap();
        assert_eq!(back, e);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn partition_is_exhaustive(p in 0.0f64..=1.0, n in 0usize..4, c in any::<bool>(), tp in 0.0f64..=1.0) {
                let s = select_scenario(p, n, c, tp);
                let expect_1 = p > tp;
                let expect_2 = !expect_1 && n > 0 && c;
                prop_assert_eq!(s == Scenario::Confident, expect_1);
                prop_assert_eq!(s == Scenario::Corrected, expect_2);
                prop_assert_eq!(s == Scenario::Unreliable, !expect_1 && !expect_2);
            }

            #[test]
            fn raising_tp_never_makes_confident(p in 0.0f64..=1.0, n in 0usize..4, c in any::<bool>(), tp in 0.0f64..=1.0, dt in 0.0f64..=1.0) {
                let low = select_scenario(p, n, c, tp);
                let high = select_scenario(p, n, c, (tp + dt).min(1.0));
                if low != Scenario::Confident {
                    prop_assert_ne!(high, Scenario::Confident);
                }
            }
        }
    }
}
