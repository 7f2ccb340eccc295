//! File formats and boundary validation.
//!
//! Everything the pipeline consumes passes through here, so no downstream
//! module ever sees an out-of-range confidence, probability or box.
//!
//! | artifact     | format |
//! |--------------|--------|
//! | heatmap      | `TBXH`, version byte `1`, `u32` LE width, `u32` LE height, `f32` LE row-major values |
//! | detections   | JSON `{"image_id", "detections": [{"label", "confidence", "bbox": [x, y, w, h]}]}` |
//! | probabilities| JSON `{"image_id", "class_names": [...], "probs": [...]}` |
//! | manifest     | JSON lines, one [`ImageRecord`] per line |
//! | SPC model    | JSON `{"version": 1, "class_names", "objects": {label: {"counts", "total"}}}` |

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::saliency::Heatmap;
use crate::spc::SpcModel;
use crate::validation::{Detection, DetectionSet};

pub const HEATMAP_MAGIC: [u8; 4] = *b"TBXH";
pub const HEATMAP_VERSION: u8 = 1;
pub const HEATMAP_HEADER_LEN: usize = 13;
pub const SPC_MODEL_VERSION: u32 = 1;

/// Slack allowed on probability sums and heatmap cells.
pub const TOLERANCE: f64 = 1e-6;

/// Placeholder for an unused annotation slot.
pub const EMPTY_ANNOTATION: &str = "empty";

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: not a heatmap file (bad magic {found:?})")]
    BadMagic { path: PathBuf, found: Vec<u8> },
    #[error("{path}: unsupported heatmap version {version}")]
    BadVersion { path: PathBuf, version: u8 },
    #[error("{path}: bad header: {reason}")]
    BadHeader { path: PathBuf, reason: String },
    #[error("{path}: payload holds {actual} bytes, expected {expected}")]
    TruncatedPayload {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },
    #[error("{path}: {actual} trailing bytes after the payload")]
    TrailingBytes { path: PathBuf, actual: usize },
    #[error("{path}: value {value} at index {index} is outside [0, 1]")]
    ValueOutOfRange {
        path: PathBuf,
        index: usize,
        value: f64,
    },
    #[error("{path}: {message}")]
    Schema { path: PathBuf, message: String },
    #[error(
        "{path}: detection {index} ('{label}') box {bbox:?} is outside the {width}x{height} image"
    )]
    BboxOutOfImage {
        path: PathBuf,
        index: usize,
        label: String,
        bbox: [f64; 4],
        width: u32,
        height: u32,
    },
    #[error("{path}: detection {index} ('{label}') confidence {confidence} is outside [0, 1]")]
    ConfidenceOutOfRange {
        path: PathBuf,
        index: usize,
        label: String,
        confidence: f64,
    },
    #[error("{path}: probabilities sum to {sum}")]
    ProbSum { path: PathBuf, sum: f64 },
    #[error("{path}: image id '{image_id}' appears more than once")]
    DuplicateImageId { path: PathBuf, image_id: String },
    #[error("{path}: object '{label}' stores total {stored}, counts sum to {actual}")]
    CountMismatch {
        path: PathBuf,
        label: String,
        stored: u64,
        actual: u64,
    },
}

impl IngestError {
    fn io(path: &Path, source: io::Error) -> Self {
        IngestError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    fn schema(path: &Path, message: impl Into<String>) -> Self {
        IngestError::Schema {
            path: path.to_path_buf(),
            message: message.into(),
        }
    }
}

// ---------------------------------------------------------------------------
// heatmaps

pub fn encode_heatmap(hm: &Heatmap) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEATMAP_HEADER_LEN + hm.values().len() * 4);
    out.extend_from_slice(&HEATMAP_MAGIC);
    out.push(HEATMAP_VERSION);
    out.extend_from_slice(&hm.width().to_le_bytes());
    out.extend_from_slice(&hm.height().to_le_bytes());
    for v in hm.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes a heatmap. `path` is only used in error messages.
pub fn decode_heatmap(bytes: &[u8], path: &Path) -> Result<Heatmap, IngestError> {
    let header = |reason: &str| IngestError::BadHeader {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 4 || bytes[..4] != HEATMAP_MAGIC {
        return Err(IngestError::BadMagic {
            path: path.to_path_buf(),
            found: bytes[..bytes.len().min(4)].to_vec(),
        });
    }
    let version = *bytes.get(4).ok_or_else(|| header("missing version byte"))?;
    if version != HEATMAP_VERSION {
        return Err(IngestError::BadVersion {
            path: path.to_path_buf(),
            version,
        });
    }
    if bytes.len() < HEATMAP_HEADER_LEN {
        return Err(header("missing dimensions"));
    }
    let width = u32::from_le_bytes(bytes[5..9].try_into().unwrap());
    let height = u32::from_le_bytes(bytes[9..13].try_into().unwrap());
    if width == 0 || height == 0 {
        return Err(header(&format!("zero dimension {width}x{height}")));
    }
    let cells = width as usize * height as usize;
    let payload = &bytes[HEATMAP_HEADER_LEN..];
    let expected = cells * 4;
    if payload.len() < expected {
        return Err(IngestError::TruncatedPayload {
            path: path.to_path_buf(),
            expected,
            actual: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(IngestError::TrailingBytes {
            path: path.to_path_buf(),
            actual: payload.len() - expected,
        });
    }
    let mut values = Vec::with_capacity(cells);
    for (index, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        let wide = f64::from(v);
        let v = if (0.0..=1.0).contains(&wide) {
            v
        } else if wide > 1.0 && wide <= 1.0 + TOLERANCE {
            1.0
        } else if (-TOLERANCE..0.0).contains(&wide) {
            0.0
        } else {
            return Err(IngestError::ValueOutOfRange {
                path: path.to_path_buf(),
                index,
                value: wide,
            });
        };
        values.push(v);
    }
    Heatmap::new(width, height, values).map_err(|e| header(&e.to_string()))
}

pub fn read_heatmap(path: impl AsRef<Path>) -> Result<Heatmap, IngestError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| IngestError::io(path, e))?;
    decode_heatmap(&bytes, path)
}

pub fn write_heatmap(hm: &Heatmap, path: impl AsRef<Path>) -> Result<(), IngestError> {
    let path = path.as_ref();
    fs::write(path, encode_heatmap(hm)).map_err(|e| IngestError::io(path, e))
}

// ---------------------------------------------------------------------------
// detections

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectionsFile {
    image_id: String,
    detections: Vec<Detection>,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, IngestError> {
    let file = File::open(path).map_err(|e| IngestError::io(path, e))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| {
        if e.is_io() {
            IngestError::io(path, e.into())
        } else {
            IngestError::schema(path, e.to_string())
        }
    })
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), IngestError> {
    let mut bytes = serde_json::to_vec(value).expect("serializable value");
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| IngestError::io(path, e))
}

/// Checks confidences and boxes against the image size.
pub fn check_detections(
    detections: &[Detection],
    image_w: u32,
    image_h: u32,
    path: &Path,
) -> Result<(), IngestError> {
    for (index, d) in detections.iter().enumerate() {
        if !(0.0..=1.0).contains(&d.confidence) {
            return Err(IngestError::ConfidenceOutOfRange {
                path: path.to_path_buf(),
                index,
                label: d.label.clone(),
                confidence: d.confidence,
            });
        }
        if !d.bbox.fits_within(f64::from(image_w), f64::from(image_h)) {
            return Err(IngestError::BboxOutOfImage {
                path: path.to_path_buf(),
                index,
                label: d.label.clone(),
                bbox: d.bbox.into(),
                width: image_w,
                height: image_h,
            });
        }
        if d.label.is_empty() {
            return Err(IngestError::schema(
                path,
                format!("detection {index} has an empty label"),
            ));
        }
    }
    Ok(())
}

pub fn read_detections(
    path: impl AsRef<Path>,
    image_w: u32,
    image_h: u32,
) -> Result<DetectionSet, IngestError> {
    let path = path.as_ref();
    let file: DetectionsFile = read_json(path)?;
    check_detections(&file.detections, image_w, image_h, path)?;
    Ok(DetectionSet {
        image_id: file.image_id,
        width: image_w,
        height: image_h,
        detections: file.detections,
    })
}

pub fn write_detections(set: &DetectionSet, path: impl AsRef<Path>) -> Result<(), IngestError> {
    let file = DetectionsFile {
        image_id: set.image_id.clone(),
        detections: set.detections.clone(),
    };
    write_json(&file, path.as_ref())
}

// ---------------------------------------------------------------------------
// probabilities

/// Classifier softmax output over a fixed class list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbVector {
    pub image_id: String,
    pub class_names: Vec<String>,
    pub probs: Vec<f64>,
}

impl ProbVector {
    /// Validates class names and the probability simplex.
    pub fn new(
        image_id: impl Into<String>,
        class_names: Vec<String>,
        probs: Vec<f64>,
    ) -> Result<Self, IngestError> {
        let pv = ProbVector {
            image_id: image_id.into(),
            class_names,
            probs,
        };
        pv.check(Path::new("<memory>"))?;
        Ok(pv)
    }

    fn check(&self, path: &Path) -> Result<(), IngestError> {
        if self.class_names.len() < 2 {
            return Err(IngestError::schema(path, "need at least two classes"));
        }
        if self.class_names.len() != self.probs.len() {
            return Err(IngestError::schema(
                path,
                format!(
                    "{} class names but {} probabilities",
                    self.class_names.len(),
                    self.probs.len()
                ),
            ));
        }
        let mut seen = HashSet::new();
        for name in &self.class_names {
            if !seen.insert(name) {
                return Err(IngestError::schema(
                    path,
                    format!("duplicate class name '{name}'"),
                ));
            }
        }
        if let Some((index, &p)) = self
            .probs
            .iter()
            .enumerate()
            .find(|(_, p)| !(0.0..=1.0).contains(*p))
        {
            return Err(IngestError::ValueOutOfRange {
                path: path.to_path_buf(),
                index,
                value: p,
            });
        }
        let sum: f64 = self.probs.iter().sum();
        if (sum - 1.0).abs() > TOLERANCE {
            return Err(IngestError::ProbSum {
                path: path.to_path_buf(),
                sum,
            });
        }
        Ok(())
    }

    /// Index and probability of the top class; the lowest index wins ties.
    pub fn top(&self) -> (usize, f64) {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        (best, self.probs[best])
    }

    pub fn top_label(&self) -> &str {
        &self.class_names[self.top().0]
    }
}

pub fn read_probs(path: impl AsRef<Path>) -> Result<ProbVector, IngestError> {
    let path = path.as_ref();
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Raw {
        image_id: String,
        class_names: Vec<String>,
        probs: Vec<f64>,
    }
    let raw: Raw = read_json(path)?;
    let pv = ProbVector {
        image_id: raw.image_id,
        class_names: raw.class_names,
        probs: raw.probs,
    };
    pv.check(path)?;
    Ok(pv)
}

pub fn write_probs(pv: &ProbVector, path: impl AsRef<Path>) -> Result<(), IngestError> {
    write_json(pv, path.as_ref())
}

// ---------------------------------------------------------------------------
// manifests

/// One manifest line. Artifact paths are relative to the manifest's
/// directory unless absolute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub true_label: Option<String>,
    pub detections: PathBuf,
    pub heatmap: Option<PathBuf>,
    pub probs: PathBuf,
    pub annotation: Option<Vec<String>>,
}

impl ImageRecord {
    /// Annotated labels other than the `"empty"` placeholder.
    pub fn annotated_objects(&self) -> impl Iterator<Item = &str> {
        self.annotation
            .iter()
            .flatten()
            .map(String::as_str)
            .filter(|l| *l != EMPTY_ANNOTATION)
    }
}

/// A parsed manifest with its base directory for resolving artifact paths.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub base_dir: PathBuf,
    pub records: Vec<ImageRecord>,
}

impl Manifest {
    pub fn resolve(&self, relative: &Path) -> PathBuf {
        if relative.is_absolute() {
            relative.to_path_buf()
        } else {
            self.base_dir.join(relative)
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

fn check_record(record: &ImageRecord, line: usize, path: &Path) -> Result<(), IngestError> {
    let err = |msg: String| IngestError::schema(path, format!("line {line}: {msg}"));
    if record.image_id.is_empty() {
        return Err(err("empty image_id".into()));
    }
    if record.width == 0 || record.height == 0 {
        return Err(err(format!(
            "image '{}' has zero dimension {}x{}",
            record.image_id, record.width, record.height
        )));
    }
    if let Some(ann) = &record.annotation {
        if ann.len() != 3 {
            return Err(err(format!(
                "image '{}' annotation has {} entries, expected 3",
                record.image_id,
                ann.len()
            )));
        }
    }
    Ok(())
}

/// Loads every record or fails without returning any.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest, IngestError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| IngestError::io(path, e))?;
    let mut records = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| IngestError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ImageRecord = serde_json::from_str(&line)
            .map_err(|e| IngestError::schema(path, format!("line {}: {e}", i + 1)))?;
        check_record(&record, i + 1, path)?;
        if !ids.insert(record.image_id.clone()) {
            return Err(IngestError::DuplicateImageId {
                path: path.to_path_buf(),
                image_id: record.image_id,
            });
        }
        records.push(record);
    }
    let base_dir = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    Ok(Manifest { base_dir, records })
}

pub fn write_manifest(records: &[ImageRecord], path: impl AsRef<Path>) -> Result<(), IngestError> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| IngestError::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut out, r).expect("serializable record");
        out.write_all(b"\n").map_err(|e| IngestError::io(path, e))?;
    }
    out.flush().map_err(|e| IngestError::io(path, e))
}

/// The three per-image artifacts, loaded and cross-checked against the
/// manifest record. The heatmap is loaded separately on demand.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageInputs {
    pub record: ImageRecord,
    pub probs: ProbVector,
    pub detections: DetectionSet,
}

pub fn load_image_inputs(
    manifest: &Manifest,
    record: &ImageRecord,
) -> Result<ImageInputs, IngestError> {
    let probs_path = manifest.resolve(&record.probs);
    let probs = read_probs(&probs_path)?;
    if probs.image_id != record.image_id {
        return Err(IngestError::schema(
            &probs_path,
            format!(
                "image_id '{}' does not match manifest '{}'",
                probs.image_id, record.image_id
            ),
        ));
    }
    let det_path = manifest.resolve(&record.detections);
    let detections = read_detections(&det_path, record.width, record.height)?;
    if detections.image_id != record.image_id {
        return Err(IngestError::schema(
            &det_path,
            format!(
                "image_id '{}' does not match manifest '{}'",
                detections.image_id, record.image_id
            ),
        ));
    }
    Ok(ImageInputs {
        record: record.clone(),
        probs,
        detections,
    })
}

/// Reads the record's heatmap, if it has one.
pub fn load_heatmap(
    manifest: &Manifest,
    record: &ImageRecord,
) -> Result<Option<Heatmap>, IngestError> {
    record
        .heatmap
        .as_ref()
        .map(|p| read_heatmap(manifest.resolve(p)))
        .transpose()
}

// ---------------------------------------------------------------------------
// SPC models

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpcModelFile {
    version: u32,
    class_names: Vec<String>,
    objects: BTreeMap<String, ObjectCounts>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObjectCounts {
    counts: Vec<u64>,
    total: u64,
}

pub fn spc_to_json(model: &SpcModel) -> String {
    let file = SpcModelFile {
        version: SPC_MODEL_VERSION,
        class_names: model.class_names().to_vec(),
        objects: model
            .objects()
            .map(|(label, counts)| {
                (
                    label.to_string(),
                    ObjectCounts {
                        counts: counts.to_vec(),
                        total: counts.iter().sum(),
                    },
                )
            })
            .collect(),
    };
    serde_json::to_string_pretty(&file).expect("serializable model")
}

pub fn spc_from_json(text: &str, path: &Path) -> Result<SpcModel, IngestError> {
    let file: SpcModelFile =
        serde_json::from_str(text).map_err(|e| IngestError::schema(path, e.to_string()))?;
    if file.version != SPC_MODEL_VERSION {
        return Err(IngestError::schema(
            path,
            format!("unsupported model version {}", file.version),
        ));
    }
    let mut counts = BTreeMap::new();
    for (label, obj) in file.objects {
        let actual: u64 = obj.counts.iter().sum();
        if actual != obj.total {
            return Err(IngestError::CountMismatch {
                path: path.to_path_buf(),
                label,
                stored: obj.total,
                actual,
            });
        }
        counts.insert(label, obj.counts);
    }
    SpcModel::from_counts(file.class_names, counts)
        .map_err(|e| IngestError::schema(path, e.to_string()))
}

pub fn save_spc(model: &SpcModel, path: impl AsRef<Path>) -> Result<(), IngestError> {
    let path = path.as_ref();
    let mut text = spc_to_json(model);
    text.push('\n');
    fs::write(path, text).map_err(|e| IngestError::io(path, e))
}

pub fn load_spc(path: impl AsRef<Path>) -> Result<SpcModel, IngestError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| IngestError::io(path, e))?;
    spc_from_json(&text, path)
}
