//! Score detections against a saliency mask and keep the relevant ones.

use tbx::saliency::binarize;
use tbx::validation::{overlap_score, validate_objects};
use tbx::{BinarizeMode, BoundingBox, Detection, Heatmap};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // the classifier looked at the left half of a 20x10 image
    let values: Vec<f32> = (0..10)
        .flat_map(|_| (0..20).map(|c| if c < 10 { 0.9 } else { 0.1 }))
        .collect();
    let mask = binarize(&Heatmap::new(20, 10, values)?, BinarizeMode::Absolute(0.5))?;

    let detections = vec![
        Detection::new("bed", 0.92, BoundingBox::new(1.0, 2.0, 6.0, 5.0)),
        Detection::new("lamp", 0.55, BoundingBox::new(8.0, 0.0, 4.0, 4.0)),
        Detection::new("window", 0.80, BoundingBox::new(13.0, 1.0, 5.0, 6.0)),
        Detection::new("rug", 0.15, BoundingBox::new(2.0, 7.0, 6.0, 3.0)),
    ];
    println!("{:<8} {:>5} {:>6} {:>6}", "object", "conf", "OS", "RS");
    for d in &detections {
        let os = overlap_score(&mask, d)?;
        println!(
            "{:<8} {:>5.2} {:>6.3} {:>6.3}",
            d.label,
            d.confidence,
            os,
            d.confidence * os
        );
    }

    let (t_c, t_r) = (0.2, 0.08);
    println!("\nkept with t_c={t_c}, t_r={t_r}:");
    for v in validate_objects(&mask, &detections, t_c, t_r)? {
        println!("  {} (relevance {:.3})", v.label, v.relevance_score);
    }
    Ok(())
}
