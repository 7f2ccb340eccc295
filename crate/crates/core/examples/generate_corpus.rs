//! Write a synthetic corpus to disk and read it back through ingest.
//!
//! cargo run --example generate_corpus -- [out-dir] [images]

use tbx::ingest;
use tbx::synthgen::{self, SynthSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let out = args
        .next()
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("tbx-corpus"));
    let n: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(20);

    let spec = SynthSpec::default();
    let manifest_path = synthgen::generate_to_dir(&spec, n, &out)?;
    let manifest = ingest::load_manifest(&manifest_path)?;
    println!("{} records in {}", manifest.len(), manifest_path.display());

    for record in manifest.records.iter().take(3) {
        let inputs = ingest::load_image_inputs(&manifest, record)?;
        let (top, p) = inputs.probs.top();
        let labels: Vec<String> = inputs
            .detections
            .detections
            .iter()
            .map(|d| format!("{}@{:.2}", d.label, d.confidence))
            .collect();
        println!(
            "{}: true {}, classifier {} ({p:.2}), detections [{}]",
            record.image_id,
            record.true_label.as_deref().unwrap_or("?"),
            inputs.probs.class_names[top],
            labels.join(", ")
        );
    }
    println!("\nspec used:\n{}", serde_json::to_string_pretty(&spec)?);
    Ok(())
}
