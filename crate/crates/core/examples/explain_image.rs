//! Explain three images, one per scenario.

use tbx::{
    BoundingBox, Detection, DetectionSet, Explainer, Heatmap, ProbVector, SpcModel, TemplateSet,
    ThresholdConfig,
};

fn detections(id: &str, items: &[(&str, f64, [f64; 4])]) -> DetectionSet {
    DetectionSet {
        image_id: id.into(),
        width: 16,
        height: 16,
        detections: items
            .iter()
            .map(|(l, c, b)| Detection::new(*l, *c, BoundingBox::from(*b)))
            .collect(),
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let classes = vec!["bedroom".to_string(), "kitchen".into(), "bar".into()];
    let mut model = SpcModel::new(classes.clone())?;
    for _ in 0..9 {
        model.train_accumulate(&["oven", "refrigerator"], "kitchen")?;
    }
    model.train_accumulate(&["refrigerator"], "bar")?;
    model.train_accumulate(&["bed"], "bedroom")?;

    // hot in the top-left 8x10 block, which is exactly the top 30% of pixels
    let values: Vec<f32> = (0..16)
        .flat_map(|r| (0..16).map(move |c| if r < 8 && c < 10 { 1.0 } else { 0.0 }))
        .collect();
    let heatmap = Heatmap::new(16, 16, values)?;

    let cfg = ThresholdConfig::default();
    let templates = TemplateSet::default();
    let explainer = Explainer::new(&model, &cfg, &templates)?;

    let images = [
        (
            ProbVector::new("confident", classes.clone(), vec![0.9, 0.06, 0.04])?,
            detections(
                "confident",
                &[
                    ("bed", 0.9, [1.0, 1.0, 5.0, 5.0]),
                    ("window", 0.7, [10.0, 10.0, 4.0, 4.0]),
                ],
            ),
        ),
        (
            ProbVector::new("unsure", classes.clone(), vec![0.25, 0.35, 0.4])?,
            detections(
                "unsure",
                &[
                    ("oven", 0.8, [2.0, 9.0, 4.0, 4.0]),
                    ("refrigerator", 0.7, [10.0, 1.0, 5.0, 8.0]),
                ],
            ),
        ),
        (
            ProbVector::new("empty", classes, vec![0.3, 0.3, 0.4])?,
            detections("empty", &[]),
        ),
    ];
    for (probs, dets) in &images {
        let e = explainer.explain(probs, dets, Some(&heatmap))?;
        println!(
            "[{}] scenario {}: {} -> {}",
            e.image_id, e.scenario, e.classifier_label, e.final_label
        );
        println!("    {}", e.sentence);
    }
    Ok(())
}
