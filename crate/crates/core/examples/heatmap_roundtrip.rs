//! Write a heatmap in the binary format, read it back, and binarize it.

use tbx::ingest;
use tbx::saliency::{binarize, mask_area};
use tbx::{BinarizeMode, Heatmap};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (w, h) = (12u32, 8u32);
    // a ramp rising toward the bottom right corner
    let values: Vec<f32> = (0..h)
        .flat_map(|r| (0..w).map(move |c| (r * w + c) as f32 / (w * h - 1) as f32))
        .collect();
    let hm = Heatmap::new(w, h, values)?;

    let dir = std::env::temp_dir().join("tbx-heatmap-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("ramp.tbxh");
    ingest::write_heatmap(&hm, &path)?;
    let back = ingest::read_heatmap(&path)?;
    assert_eq!(back, hm);
    println!(
        "{} bytes written to {}",
        std::fs::metadata(&path)?.len(),
        path.display()
    );

    for mode in [
        BinarizeMode::Quantile(0.7),
        BinarizeMode::Quantile(0.9),
        BinarizeMode::Absolute(0.5),
    ] {
        let mask = binarize(&back, mode)?;
        println!(
            "{mode:<14} threshold {:.3}, {} of {} pixels set",
            mask.threshold_used(),
            mask_area(&mask),
            w * h
        );
        for r in 0..h {
            let row: String = (0..w)
                .map(|c| if mask.is_set(r, c) { '#' } else { '.' })
                .collect();
            println!("  {row}");
        }
    }
    Ok(())
}
