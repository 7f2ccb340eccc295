//! Cross-validated threshold search on a synthetic corpus whose objects are
//! only trustworthy above known thresholds.
//!
//! cargo run --release --example grid_search -- [images] [seed]

use std::time::Instant;

use tbx::synthgen::{self, SynthSpec};
use tbx::tuning::{self, GridSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(500);
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(7);

    let spec = SynthSpec {
        seed,
        ..SynthSpec::default()
    };
    let corpus = synthgen::generate(&spec, n)?;
    let prepared = corpus
        .iter()
        .map(|img| tuning::prepare(&img.inputs(), Some(&img.heatmap), spec.binarize))
        .collect::<Result<Vec<_>, _>>()?;

    let grid = GridSpec::default();
    let started = Instant::now();
    let result = tuning::grid_search(&prepared, &grid, spec.binarize, seed)?;
    println!(
        "{} configurations, {}-fold, {:.2?}",
        result.rows.len(),
        grid.folds,
        started.elapsed()
    );

    let mut ranked: Vec<_> = result.rows.iter().collect();
    ranked.sort_by(|a, b| b.mean_accuracy.total_cmp(&a.mean_accuracy));
    println!("{:>5} {:>6} {:>5} {:>9}", "t_c", "t_r", "t_p", "accuracy");
    for row in ranked.iter().take(8) {
        let c = &row.config;
        println!(
            "{:>5.2} {:>6.3} {:>5.2} {:>9.4}",
            c.t_c, c.t_r, c.t_p, row.mean_accuracy
        );
    }
    let best = &result.best().config;
    println!(
        "selected t_c={} t_r={:.3} t_p={}",
        best.t_c, best.t_r, best.t_p
    );
    Ok(())
}
