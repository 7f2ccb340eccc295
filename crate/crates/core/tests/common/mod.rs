#![allow(dead_code)]

use std::path::{Path, PathBuf};

use tbx::ingest::{self, ImageRecord};
use tbx::synthgen::{ClassifierProfile, SynthSpec};
use tbx::{BoundingBox, Detection, DetectionSet, Heatmap, ProbVector, SpcModel};

pub const CLASSES: [&str; 3] = ["bedroom", "kitchen", "bar"];

pub fn classes() -> Vec<String> {
    CLASSES.map(String::from).to_vec()
}

/// Nine kitchens with an oven and a refrigerator, one bar with a
/// refrigerator, one bedroom with a bed.
pub fn kitchen_model() -> SpcModel {
    let mut m = SpcModel::new(classes()).unwrap();
    for _ in 0..9 {
        m.train_accumulate(&["oven", "refrigerator"], "kitchen")
            .unwrap();
    }
    m.train_accumulate(&["refrigerator"], "bar").unwrap();
    m.train_accumulate(&["bed"], "bedroom").unwrap();
    m
}

/// 16x16, hot (1.0) in rows 0..8 x cols 0..10 and 0 elsewhere. The 80 hot
/// pixels are exactly the top-30% quantile mask.
pub fn focus_heatmap() -> Heatmap {
    let mut v = vec![0.0f32; 256];
    for row in 0..8 {
        for col in 0..10 {
            v[row * 16 + col] = 1.0;
        }
    }
    Heatmap::new(16, 16, v).unwrap()
}

pub struct SceneFixture {
    pub probs: ProbVector,
    pub detections: DetectionSet,
    pub heatmap: Heatmap,
    pub true_label: &'static str,
}

fn det(label: &str, conf: f64, b: [f64; 4]) -> Detection {
    Detection::new(label, conf, BoundingBox::from(b))
}

/// One image per scenario: a confident bedroom, an unsure "bar" that the
/// kitchen objects relabel, and an unsure "bar" with nothing detected.
pub fn scene_fixtures() -> Vec<SceneFixture> {
    let make = |id: &str, p: [f64; 3], dets: Vec<Detection>, truth| SceneFixture {
        probs: ProbVector::new(id, classes(), p.to_vec()).unwrap(),
        detections: DetectionSet {
            image_id: id.into(),
            width: 16,
            height: 16,
            detections: dets,
        },
        heatmap: focus_heatmap(),
        true_label: truth,
    };
    vec![
        make(
            "scene_1",
            [0.92, 0.05, 0.03],
            vec![
                det("bed", 0.9, [0.0, 0.0, 6.0, 6.0]),
                det("lamp", 0.6, [6.0, 2.0, 3.0, 3.0]),
                det("window", 0.5, [12.0, 10.0, 3.0, 3.0]),
            ],
            "bedroom",
        ),
        make(
            "scene_2",
            [0.25, 0.35, 0.4],
            vec![
                det("oven", 0.8, [2.0, 9.0, 4.0, 4.0]),
                det("refrigerator", 0.7, [10.0, 1.0, 5.0, 8.0]),
            ],
            "kitchen",
        ),
        make("scene_3", [0.3, 0.3, 0.4], vec![], "bar"),
    ]
}

/// Writes fixtures as a corpus under `dir` and returns the manifest path.
pub fn write_fixtures(dir: &Path, fixtures: &[SceneFixture]) -> PathBuf {
    for sub in ["probs", "detections", "heatmaps"] {
        std::fs::create_dir_all(dir.join(sub)).unwrap();
    }
    let records: Vec<ImageRecord> = fixtures
        .iter()
        .map(|f| {
            let id = &f.probs.image_id;
            let rec = ImageRecord {
                image_id: id.clone(),
                width: f.detections.width,
                height: f.detections.height,
                true_label: Some(f.true_label.to_string()),
                detections: format!("detections/{id}.json").into(),
                heatmap: Some(format!("heatmaps/{id}.tbxh").into()),
                probs: format!("probs/{id}.json").into(),
                annotation: None,
            };
            ingest::write_probs(&f.probs, dir.join(&rec.probs)).unwrap();
            ingest::write_detections(&f.detections, dir.join(&rec.detections)).unwrap();
            ingest::write_heatmap(&f.heatmap, dir.join(rec.heatmap.as_ref().unwrap())).unwrap();
            rec
        })
        .collect();
    let manifest = dir.join("manifest.jsonl");
    ingest::write_manifest(&records, &manifest).unwrap();
    manifest
}

pub fn golden(name: &str) -> String {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name);
    std::fs::read_to_string(path)
        .unwrap()
        .trim_end_matches('\n')
        .to_string()
}

/// The default corpus with a classifier that is right on 55% of images:
/// 40% of images are unsure and all of those are wrong, and 100 of 1,200
/// confident images are wrong too.
pub fn degraded_spec(seed: u64) -> SynthSpec {
    SynthSpec {
        seed,
        classifier: ClassifierProfile {
            unconfident_rate: 0.4,
            unconfident_flip_rate: 1.0,
            confident_flip_rate: 100.0 / 1200.0,
            ..ClassifierProfile::default()
        },
        ..SynthSpec::default()
    }
}

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_tbx")
}
