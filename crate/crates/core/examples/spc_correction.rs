//! Learn object-class statistics and use them to relabel a scene.

use tbx::SpcModel;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut model = SpcModel::new(["bedroom", "kitchen", "bar"])?;
    let training: &[(&[&str], &str)] = &[
        (&["bed", "lamp"], "bedroom"),
        (&["bed", "window"], "bedroom"),
        (&["oven", "refrigerator", "sink"], "kitchen"),
        (&["oven", "sink"], "kitchen"),
        (&["refrigerator", "stool", "stool"], "bar"),
        (&["bottle", "stool"], "bar"),
    ];
    for (objects, class) in training {
        model.train_accumulate(objects, class)?;
    }

    println!("{:<13} {}", "object", model.class_names().join("  "));
    for (label, _) in model.objects() {
        let w = model.weights(label).unwrap_or_default();
        let cells: Vec<String> = w.iter().map(|x| format!("{x:>7.3}")).collect();
        println!("{label:<13} {}", cells.join(""));
    }

    for scene in [
        &["refrigerator", "sink"][..],
        &["stool", "refrigerator"],
        &["piano"],
    ] {
        let scores = model.score_classes(scene);
        let verdict = model.correct(scene).unwrap_or("(no evidence)");
        println!("{scene:?} -> scores {:.3?} -> {verdict}", scores.scores);
    }
    Ok(())
}
