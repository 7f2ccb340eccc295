mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tbx::ingest;
use tbx::Explanation;

fn tbx(args: &[&str]) -> Output {
    Command::new(common::bin())
        .args(args)
        .env("TBX_LOG", "warn")
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Vec<T> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn explain_fixture_covers_all_scenarios() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = common::write_fixtures(&dir.path().join("in"), &common::scene_fixtures());
    let model = dir.path().join("model.json");
    ingest::save_spc(&common::kitchen_model(), &model).unwrap();
    let out = dir.path().join("out");
    let o = tbx(&[
        "explain",
        "--manifest",
        s(&manifest),
        "--model",
        s(&model),
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let lines: Vec<Explanation> = read_jsonl(&out.join("explanations.jsonl"));
    let scenarios: Vec<u8> = lines.iter().map(|e| e.scenario.number()).collect();
    assert_eq!(scenarios, [1, 2, 3]);
    let sentences = fs::read_to_string(out.join("sentences.txt")).unwrap();
    for (i, line) in sentences.lines().enumerate() {
        let (id, sentence) = line.split_once('\t').unwrap();
        assert_eq!(id, format!("scene_{}", i + 1));
        assert_eq!(sentence, common::golden(&format!("scenario{}.txt", i + 1)));
    }
    assert_eq!(fs::read_to_string(out.join("errors.jsonl")).unwrap(), "");
}

#[test]
fn missing_heatmap_is_a_per_record_error() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = common::write_fixtures(dir.path(), &common::scene_fixtures());
    fs::remove_file(dir.path().join("heatmaps/scene_1.tbxh")).unwrap();
    let model = dir.path().join("model.json");
    ingest::save_spc(&common::kitchen_model(), &model).unwrap();
    let out = dir.path().join("out");
    let o = tbx(&[
        "explain",
        "--manifest",
        s(&manifest),
        "--model",
        s(&model),
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let errors: Vec<serde_json::Value> = read_jsonl(&out.join("errors.jsonl"));
    assert_eq!(errors.len(), 1);
    assert_eq!(errors[0]["image_id"], "scene_1");
    // the other two records still get explained; only scenario 1 needs the heatmap
    let lines: Vec<Explanation> = read_jsonl(&out.join("explanations.jsonl"));
    assert_eq!(lines.len(), 2);
}

#[test]
fn train_matches_a_tally_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c");
    let o = tbx(&[
        "generate",
        "--images",
        "80",
        "--seed",
        "4",
        "--out",
        s(&corpus),
    ]);
    assert!(o.status.success());
    let manifest = corpus.join("manifest.jsonl");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(tbx(&["train", "--manifest", s(&manifest), "--out", s(&a)])
        .status
        .success());
    assert!(tbx(&[
        "--jobs",
        "1",
        "train",
        "--manifest",
        s(&manifest),
        "--out",
        s(&b)
    ])
    .status
    .success());
    let bytes = fs::read(a.join("spc_model.json")).unwrap();
    assert_eq!(bytes, fs::read(b.join("spc_model.json")).unwrap());

    // tally: every detection passing both gates on the true-label heatmap
    let m = ingest::load_manifest(&manifest).unwrap();
    let mask_mode = tbx::BinarizeMode::default();
    let mut tally: std::collections::BTreeMap<(String, String), u64> = Default::default();
    for r in &m.records {
        let inputs = ingest::load_image_inputs(&m, r).unwrap();
        let hm = ingest::load_heatmap(&m, r).unwrap().unwrap();
        let mask = tbx::saliency::binarize(&hm, mask_mode).unwrap();
        for d in &inputs.detections.detections {
            if d.confidence > 0.2 {
                let os = tbx::validation::overlap_score(&mask, d).unwrap();
                if d.confidence * os > 0.08 {
                    *tally
                        .entry((d.label.clone(), r.true_label.clone().unwrap()))
                        .or_default() += 1;
                }
            }
        }
    }
    let model = ingest::load_spc(a.join("spc_model.json")).unwrap();
    let mut from_model = std::collections::BTreeMap::new();
    for (label, counts) in model.objects() {
        for (c, &n) in counts.iter().enumerate() {
            if n > 0 {
                from_model.insert((label.to_string(), model.class_names()[c].clone()), n);
            }
        }
    }
    assert_eq!(from_model, tally);
}

#[test]
fn empty_manifest_fails() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("manifest.jsonl");
    fs::write(&manifest, "").unwrap();
    let o = tbx(&[
        "train",
        "--manifest",
        s(&manifest),
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no records"));
}

#[test]
fn evaluate_writes_report_and_confusion() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c");
    assert!(tbx(&[
        "generate",
        "--images",
        "60",
        "--seed",
        "2",
        "--out",
        s(&corpus)
    ])
    .status
    .success());
    let manifest = corpus.join("manifest.jsonl");
    assert!(tbx(&[
        "train",
        "--manifest",
        s(&manifest),
        "--out",
        s(&dir.path().join("t"))
    ])
    .status
    .success());
    let out = dir.path().join("e");
    let model = dir.path().join("t/spc_model.json");
    let o = tbx(&[
        "evaluate",
        "--manifest",
        s(&manifest),
        "--model",
        s(&model),
        "--out",
        s(&out),
        "--fidelity",
        "any",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["images"], 60);
    assert!(
        report["accuracy"].as_f64().unwrap() >= report["classifier_accuracy"].as_f64().unwrap()
    );
    assert!(report["fidelity"]["score"].as_f64().unwrap() > 0.5);
    let csv = fs::read_to_string(out.join("confusion.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.starts_with("true\\predicted,kitchen,bedroom,bathroom,office"));
}

#[test]
fn tune_with_single_config_grid() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c");
    assert!(tbx(&["generate", "--images", "40", "--out", s(&corpus)])
        .status
        .success());
    let grid = dir.path().join("grid.json");
    fs::write(
        &grid,
        r#"{"t_c": [0.2], "t_r_multipliers": [0.4], "t_p": [0.7], "folds": 4}"#,
    )
    .unwrap();
    let out = dir.path().join("tune");
    let o = tbx(&[
        "tune",
        "--manifest",
        s(&corpus.join("manifest.jsonl")),
        "--grid",
        s(&grid),
        "--folds",
        "2",
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = fs::read_to_string(out.join("scores.csv")).unwrap();
    assert_eq!(summary.lines().count(), 2);
    assert!(summary.lines().nth(1).unwrap().starts_with("0.2,0.08,0.7,"));
    assert_eq!(
        fs::read_to_string(out.join("scores_by_fold.csv"))
            .unwrap()
            .lines()
            .count(),
        3
    );
    let best: tbx::ThresholdConfig =
        serde_json::from_str(&fs::read_to_string(out.join("best_config.json")).unwrap()).unwrap();
    assert_eq!((best.t_c, best.t_r, best.t_p), (0.2, 0.08, 0.7));
}

#[test]
fn default_tune_writes_160_rows() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c");
    assert!(tbx(&["generate", "--images", "40", "--out", s(&corpus)])
        .status
        .success());
    let out = dir.path().join("tune");
    assert!(tbx(&[
        "tune",
        "--manifest",
        s(&corpus.join("manifest.jsonl")),
        "--out",
        s(&out)
    ])
    .status
    .success());
    let summary = fs::read_to_string(out.join("scores.csv")).unwrap();
    assert_eq!(summary.lines().count(), 161);
    assert_eq!(summary.lines().next().unwrap(), "t_c,t_r,t_p,mean_accuracy");
}

#[test]
fn threshold_flags_are_validated() {
    let o = tbx(&["train", "--manifest", "x", "--out", "y", "--tc", "1.2"]);
    assert_eq!(o.status.code(), Some(2));
}
