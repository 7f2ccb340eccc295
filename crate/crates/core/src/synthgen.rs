//! Synthetic corpora with planted statistics.
//!
//! Each class lists the objects that may appear in its scenes, how often,
//! and how they relate to the saliency heatmap:
//!
//! * `salient` objects get a Gaussian blob centered on their box, so their
//!   overlap score is close to 1;
//! * `relevance` objects are placed at random and given a confidence that
//!   puts their relevance score (confidence times overlap, measured on the
//!   binarized heatmap) inside a target range;
//! * `background` objects are placed at random with no link to the heatmap.
//!
//! The simulated classifier is confident (top probability above the
//! confident range's floor) or not, and right or wrong, by exact quotas.
//! Generation is deterministic per seed: image `i` draws from its own
//! ChaCha8 stream, so images can be generated in parallel.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{self, ImageInputs, ImageRecord, IngestError, ProbVector, EMPTY_ANNOTATION};
use crate::saliency::{binarize, BinarizeMode, Heatmap};
use crate::validation::{overlap_score, BoundingBox, Detection, DetectionSet};

/// Tries per relevance-placed instance before it is dropped.
const PLACEMENT_ATTEMPTS: usize = 64;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("need at least one image")]
    NoImages,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Ingest(#[from] IngestError),
}

/// How an object's box relates to the heatmap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Placement {
    Salient {
        confidence: (f64, f64),
    },
    Relevance {
        relevance: (f64, f64),
        confidence: (f64, f64),
    },
    Background {
        confidence: (f64, f64),
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectProfile {
    pub label: String,
    /// Chance that the object appears in a scene of this class.
    pub probability: f64,
    #[serde(default = "one")]
    pub min_instances: u32,
    #[serde(default = "one")]
    pub max_instances: u32,
    pub placement: Placement,
    /// Counts toward annotations and `require_class_object`.
    #[serde(default)]
    pub representative: bool,
}

fn one() -> u32 {
    1
}

impl ObjectProfile {
    pub fn new(label: &str, probability: f64, instances: (u32, u32), placement: Placement) -> Self {
        ObjectProfile {
            label: label.to_string(),
            probability,
            min_instances: instances.0,
            max_instances: instances.1,
            placement,
            representative: false,
        }
    }

    pub fn representative(mut self) -> Self {
        self.representative = true;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassProfile {
    pub name: String,
    pub objects: Vec<ObjectProfile>,
}

/// Simulated classifier behavior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierProfile {
    /// Fraction of images whose top probability falls in `unconfident_prob`.
    pub unconfident_rate: f64,
    pub unconfident_prob: (f64, f64),
    pub confident_prob: (f64, f64),
    /// Fraction of unconfident images whose top class is wrong.
    pub unconfident_flip_rate: f64,
    /// Fraction of confident images whose top class is wrong.
    pub confident_flip_rate: f64,
}

impl Default for ClassifierProfile {
    fn default() -> Self {
        ClassifierProfile {
            unconfident_rate: 0.4,
            unconfident_prob: (0.4, 0.69),
            confident_prob: (0.72, 0.99),
            unconfident_flip_rate: 1.0,
            confident_flip_rate: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub classes: Vec<ClassProfile>,
    #[serde(default)]
    pub classifier: ClassifierProfile,
    #[serde(default = "default_side")]
    pub width: u32,
    #[serde(default = "default_side")]
    pub height: u32,
    /// Box side range as a fraction of the shorter image side.
    #[serde(default = "default_box_fraction")]
    pub box_fraction: (f64, f64),
    /// Mask used to place `relevance` objects; match the pipeline's setting.
    #[serde(default)]
    pub binarize: BinarizeMode,
    /// Force one representative object into scenes that drew none.
    #[serde(default)]
    pub require_class_object: bool,
    #[serde(default)]
    pub annotate: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_side() -> u32 {
    64
}

fn default_box_fraction() -> (f64, f64) {
    (0.12, 0.25)
}

impl Default for SynthSpec {
    /// Four indoor scene classes. Each has one salient and one faint
    /// class-specific object, plus a shared `wall` that is common in
    /// kitchens, always faint, and a low-confidence `person`. With default
    /// thresholds the salient and faint objects are kept, `wall` never
    /// survives training and `person` never passes the confidence gate.
    fn default() -> Self {
        let scenes = [
            ("kitchen", "oven", "refrigerator"),
            ("bedroom", "bed", "lamp"),
            ("bathroom", "bathtub", "toilet"),
            ("office", "desk", "monitor"),
        ];
        let classes = scenes
            .iter()
            .enumerate()
            .map(|(i, (name, salient, faint))| {
                let wall = if i == 0 { (0.9, (2, 4)) } else { (0.3, (1, 2)) };
                ClassProfile {
                    name: name.to_string(),
                    objects: vec![
                        ObjectProfile::new(
                            salient,
                            0.5,
                            (1, 1),
                            Placement::Salient {
                                confidence: (0.45, 0.95),
                            },
                        )
                        .representative(),
                        ObjectProfile::new(
                            faint,
                            0.7,
                            (1, 1),
                            Placement::Relevance {
                                relevance: (0.085, 0.115),
                                confidence: (0.22, 0.38),
                            },
                        )
                        .representative(),
                        ObjectProfile::new(
                            "wall",
                            wall.0,
                            wall.1,
                            Placement::Relevance {
                                relevance: (0.045, 0.075),
                                confidence: (0.22, 0.38),
                            },
                        ),
                        ObjectProfile::new(
                            "person",
                            0.3,
                            (1, 2),
                            Placement::Background {
                                confidence: (0.02, 0.2),
                            },
                        ),
                    ],
                }
            })
            .collect();
        SynthSpec {
            classes,
            classifier: ClassifierProfile::default(),
            width: default_side(),
            height: default_side(),
            box_fraction: default_box_fraction(),
            binarize: BinarizeMode::default(),
            require_class_object: true,
            annotate: true,
            seed: 0,
        }
    }
}

fn check_unit(what: &str, v: f64) -> Result<(), SynthError> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(SynthError::InvalidSpec(format!(
            "{what} = {v} is outside [0, 1]"
        )))
    }
}

fn check_range(what: &str, (lo, hi): (f64, f64)) -> Result<(), SynthError> {
    check_unit(what, lo)?;
    check_unit(what, hi)?;
    if lo > hi {
        return Err(SynthError::InvalidSpec(format!(
            "{what} range ({lo}, {hi}) is reversed"
        )));
    }
    Ok(())
}

impl SynthSpec {
    pub fn from_json(text: &str) -> Result<Self, SynthError> {
        let spec: SynthSpec =
            serde_json::from_str(text).map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SynthError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| SynthError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let k = self.classes.len();
        if k < 2 {
            return Err(SynthError::InvalidSpec("need at least two classes".into()));
        }
        for (i, c) in self.classes.iter().enumerate() {
            if self.classes[..i].iter().any(|o| o.name == c.name) {
                return Err(SynthError::InvalidSpec(format!(
                    "duplicate class '{}'",
                    c.name
                )));
            }
            if c.objects.is_empty() {
                return Err(SynthError::InvalidSpec(format!(
                    "class '{}' has no objects",
                    c.name
                )));
            }
            if self.require_class_object && !c.objects.iter().any(|o| o.representative) {
                return Err(SynthError::InvalidSpec(format!(
                    "class '{}' has no representative object to require",
                    c.name
                )));
            }
            for o in &c.objects {
                check_unit(
                    &format!("{}.{}.probability", c.name, o.label),
                    o.probability,
                )?;
                if o.min_instances > o.max_instances {
                    return Err(SynthError::InvalidSpec(format!(
                        "{}.{}: min_instances exceeds max_instances",
                        c.name, o.label
                    )));
                }
                match &o.placement {
                    Placement::Salient { confidence } | Placement::Background { confidence } => {
                        check_range("confidence", *confidence)?
                    }
                    Placement::Relevance {
                        relevance,
                        confidence,
                    } => {
                        check_range("relevance", *relevance)?;
                        check_range("confidence", *confidence)?;
                    }
                }
            }
        }
        let p = &self.classifier;
        check_unit("unconfident_rate", p.unconfident_rate)?;
        check_unit("unconfident_flip_rate", p.unconfident_flip_rate)?;
        check_unit("confident_flip_rate", p.confident_flip_rate)?;
        check_range("unconfident_prob", p.unconfident_prob)?;
        check_range("confident_prob", p.confident_prob)?;
        // the top class must stay on top after spreading the remainder evenly
        let floor = 1.0 / k as f64;
        if p.unconfident_prob.0 <= floor || p.confident_prob.0 <= floor {
            return Err(SynthError::InvalidSpec(format!(
                "top probabilities must exceed 1/{k} for {k} classes"
            )));
        }
        if self.width < 4 || self.height < 4 {
            return Err(SynthError::InvalidSpec(
                "images must be at least 4x4".into(),
            ));
        }
        let (lo, hi) = self.box_fraction;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(SynthError::InvalidSpec(format!(
                "box_fraction ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1"
            )));
        }
        self.binarize
            .validate()
            .map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
        Ok(())
    }
}

/// One generated image, fully in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthImage {
    pub image_id: String,
    pub true_label: String,
    pub probs: ProbVector,
    pub detections: DetectionSet,
    pub heatmap: Heatmap,
    pub annotation: Option<Vec<String>>,
}

impl SynthImage {
    pub fn record(&self) -> ImageRecord {
        ImageRecord {
            image_id: self.image_id.clone(),
            width: self.detections.width,
            height: self.detections.height,
            true_label: Some(self.true_label.clone()),
            detections: PathBuf::from("detections").join(format!("{}.json", self.image_id)),
            heatmap: Some(PathBuf::from("heatmaps").join(format!("{}.tbxh", self.image_id))),
            probs: PathBuf::from("probs").join(format!("{}.json", self.image_id)),
            annotation: self.annotation.clone(),
        }
    }

    /// The artifacts as if read back from disk.
    pub fn inputs(&self) -> ImageInputs {
        ImageInputs {
            record: self.record(),
            probs: self.probs.clone(),
            detections: self.detections.clone(),
        }
    }
}

pub fn image_id(index: usize) -> String {
    format!("img_{index:05}")
}

#[derive(Clone, Copy)]
struct Plan {
    class: usize,
    confident: bool,
    flipped: bool,
}

fn quota(n: usize, rate: f64) -> usize {
    ((n as f64 * rate).round() as usize).min(n)
}

/// Class, confidence and correctness of every image. Classes are balanced
/// and the classifier profile rates are met exactly up to rounding.
fn plan(spec: &SynthSpec, n: usize) -> Vec<Plan> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let k = spec.classes.len();
    let mut classes: Vec<usize> = (0..n).map(|i| i % k).collect();
    classes.shuffle(&mut rng);

    let p = &spec.classifier;
    let n_unconfident = quota(n, p.unconfident_rate);
    let n_confident = n - n_unconfident;
    let mut tags: Vec<(bool, bool)> = Vec::with_capacity(n);
    let wrong_u = quota(n_unconfident, p.unconfident_flip_rate);
    let wrong_c = quota(n_confident, p.confident_flip_rate);
    tags.extend((0..n_unconfident).map(|i| (false, i < wrong_u)));
    tags.extend((0..n_confident).map(|i| (true, i < wrong_c)));
    tags.shuffle(&mut rng);

    classes
        .into_iter()
        .zip(tags)
        .map(|(class, (confident, flipped))| Plan {
            class,
            confident,
            flipped,
        })
        .collect()
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

fn random_box(rng: &mut ChaCha8Rng, spec: &SynthSpec) -> BoundingBox {
    let short = f64::from(spec.width.min(spec.height));
    let side = |rng: &mut ChaCha8Rng, limit: u32| {
        let s = (uniform(rng, spec.box_fraction) * short).round().max(2.0);
        s.min(f64::from(limit))
    };
    let w = side(rng, spec.width);
    let h = side(rng, spec.height);
    let x = rng.random_range(0..=(spec.width - w as u32));
    let y = rng.random_range(0..=(spec.height - h as u32));
    BoundingBox::new(f64::from(x), f64::from(y), w, h)
}

/// Sum of Gaussian blobs (one per box, sigma half the box side), scaled to
/// a maximum of 1.
fn blob_heatmap(width: u32, height: u32, boxes: &[BoundingBox]) -> Heatmap {
    let mut raw = vec![0.0f64; width as usize * height as usize];
    for b in boxes {
        let (cx, cy) = (b.x + b.w / 2.0, b.y + b.h / 2.0);
        let (sx, sy) = (b.w / 2.0, b.h / 2.0);
        for row in 0..height as usize {
            let dy = (row as f64 + 0.5 - cy) / sy;
            for col in 0..width as usize {
                let dx = (col as f64 + 0.5 - cx) / sx;
                raw[row * width as usize + col] += (-0.5 * (dx * dx + dy * dy)).exp();
            }
        }
    }
    let max = raw.iter().cloned().fold(0.0, f64::max);
    let values = raw.iter().map(|v| (v / max) as f32).collect();
    Heatmap::new(width, height, values).expect("normalized blob map")
}

/// Softmax-like vector with `p` on `top` and the remainder spread at random
/// over the other classes, each kept below `p`.
fn fabricate_probs(rng: &mut ChaCha8Rng, k: usize, top: usize, p: f64) -> Vec<f64> {
    let rest = 1.0 - p;
    let even = rest / (k - 1) as f64;
    let mut shares = vec![even; k - 1];
    for _ in 0..16 {
        let w: Vec<f64> = (0..k - 1).map(|_| rng.random::<f64>() + 0.05).collect();
        let total: f64 = w.iter().sum();
        let candidate: Vec<f64> = w.iter().map(|x| rest * x / total).collect();
        if candidate.iter().all(|&s| s < p) {
            shares = candidate;
            break;
        }
    }
    let mut probs = Vec::with_capacity(k);
    let mut others = shares.into_iter();
    for c in 0..k {
        probs.push(if c == top {
            p
        } else {
            others.next().expect("k - 1 shares")
        });
    }
    probs
}

struct Drawn<'a> {
    profile: &'a ObjectProfile,
    instances: u32,
}

fn draw_objects<'a>(
    rng: &mut ChaCha8Rng,
    class: &'a ClassProfile,
    require: bool,
) -> Vec<Drawn<'a>> {
    let mut drawn: Vec<Option<Drawn<'a>>> = class
        .objects
        .iter()
        .map(|o| {
            let present = rng.random_bool(o.probability);
            let instances = rng.random_range(o.min_instances..=o.max_instances);
            (present && instances > 0).then_some(Drawn {
                profile: o,
                instances,
            })
        })
        .collect();
    let has_rep = drawn.iter().flatten().any(|d| d.profile.representative);
    if require && !has_rep {
        let reps: Vec<usize> = (0..class.objects.len())
            .filter(|&i| class.objects[i].representative)
            .collect();
        let i = *reps
            .choose(rng)
            .expect("validated: class has a representative object");
        let o = &class.objects[i];
        drawn[i] = Some(Drawn {
            profile: o,
            instances: o.min_instances.max(1),
        });
    }
    drawn.into_iter().flatten().collect()
}

/// Generates image `index` of a corpus.
fn generate_image(spec: &SynthSpec, index: usize, plan: Plan) -> SynthImage {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64 + 1);
    let id = image_id(index);
    let class = &spec.classes[plan.class];
    let drawn = draw_objects(&mut rng, class, spec.require_class_object);

    // salient boxes first: they shape the heatmap
    let mut placed: Vec<(usize, Detection)> = Vec::new();
    let mut blobs = Vec::new();
    for (slot, d) in drawn.iter().enumerate() {
        if let Placement::Salient { confidence } = d.profile.placement {
            for _ in 0..d.instances {
                let bbox = random_box(&mut rng, spec);
                blobs.push(bbox);
                placed.push((
                    slot,
                    Detection::new(&d.profile.label, uniform(&mut rng, confidence), bbox),
                ));
            }
        }
    }
    if blobs.is_empty() {
        // the classifier looked somewhere even if nothing salient is there
        blobs.push(random_box(&mut rng, spec));
    }
    let heatmap = blob_heatmap(spec.width, spec.height, &blobs);
    let mask = binarize(&heatmap, spec.binarize).expect("validated binarize mode");

    for (slot, d) in drawn.iter().enumerate() {
        match d.profile.placement {
            Placement::Salient { .. } => {}
            Placement::Background { confidence } => {
                for _ in 0..d.instances {
                    let bbox = random_box(&mut rng, spec);
                    placed.push((
                        slot,
                        Detection::new(&d.profile.label, uniform(&mut rng, confidence), bbox),
                    ));
                }
            }
            Placement::Relevance {
                relevance,
                confidence,
            } => {
                for _ in 0..d.instances {
                    for _ in 0..PLACEMENT_ATTEMPTS {
                        let bbox = random_box(&mut rng, spec);
                        let probe = Detection::new(&d.profile.label, 1.0, bbox);
                        let os = overlap_score(&mask, &probe).expect("box inside image");
                        if os <= 0.0 {
                            continue;
                        }
                        let lo = confidence.0.max(relevance.0 / os);
                        let hi = confidence.1.min(relevance.1 / os);
                        if lo < hi {
                            let dc = rng.random_range(lo..hi);
                            placed.push((slot, Detection::new(&d.profile.label, dc, bbox)));
                            break;
                        }
                    }
                }
            }
        }
    }
    placed.sort_by_key(|(slot, _)| *slot);
    let detections: Vec<Detection> = placed.into_iter().map(|(_, d)| d).collect();

    let annotation = spec.annotate.then(|| {
        let mut labels: Vec<String> = Vec::new();
        for d in &detections {
            let rep = class
                .objects
                .iter()
                .any(|o| o.representative && o.label == d.label);
            if rep && !labels.contains(&d.label) && labels.len() < 3 {
                labels.push(d.label.clone());
            }
        }
        labels.resize(3, EMPTY_ANNOTATION.to_string());
        labels
    });

    let k = spec.classes.len();
    let top = if plan.flipped {
        let wrong: Vec<usize> = (0..k).filter(|&c| c != plan.class).collect();
        *wrong.choose(&mut rng).expect("at least two classes")
    } else {
        plan.class
    };
    let range = if plan.confident {
        spec.classifier.confident_prob
    } else {
        spec.classifier.unconfident_prob
    };
    let p = uniform(&mut rng, range);
    let probs = fabricate_probs(&mut rng, k, top, p);

    SynthImage {
        true_label: class.name.clone(),
        probs: ProbVector::new(id.clone(), spec.class_names(), probs)
            .expect("valid fabricated probabilities"),
        detections: DetectionSet {
            image_id: id.clone(),
            width: spec.width,
            height: spec.height,
            detections,
        },
        heatmap,
        annotation,
        image_id: id,
    }
}

/// Generates `n` images in memory.
pub fn generate(spec: &SynthSpec, n: usize) -> Result<Vec<SynthImage>, SynthError> {
    spec.validate()?;
    if n == 0 {
        return Err(SynthError::NoImages);
    }
    let plans = plan(spec, n);
    Ok(plans
        .into_par_iter()
        .enumerate()
        .map(|(i, p)| generate_image(spec, i, p))
        .collect())
}

/// Writes a corpus as `manifest.jsonl` plus `detections/`, `heatmaps/` and
/// `probs/` under `out`. Returns the manifest path.
pub fn write_corpus(images: &[SynthImage], out: impl AsRef<Path>) -> Result<PathBuf, SynthError> {
    let out = out.as_ref();
    for sub in ["detections", "heatmaps", "probs"] {
        let dir = out.join(sub);
        fs::create_dir_all(&dir).map_err(|source| SynthError::Io { path: dir, source })?;
    }
    images
        .par_iter()
        .try_for_each(|img| -> Result<(), SynthError> {
            let rec = img.record();
            ingest::write_detections(&img.detections, out.join(&rec.detections))?;
            ingest::write_heatmap(
                &img.heatmap,
                out.join(rec.heatmap.as_ref().expect("always written")),
            )?;
            ingest::write_probs(&img.probs, out.join(&rec.probs))?;
            Ok(())
        })?;
    let records: Vec<ImageRecord> = images.iter().map(SynthImage::record).collect();
    let manifest = out.join("manifest.jsonl");
    ingest::write_manifest(&records, &manifest)?;
    Ok(manifest)
}

/// Generates `n` images and writes them under `out`.
pub fn generate_to_dir(
    spec: &SynthSpec,
    n: usize,
    out: impl AsRef<Path>,
) -> Result<PathBuf, SynthError> {
    write_corpus(&generate(spec, n)?, out)
}
