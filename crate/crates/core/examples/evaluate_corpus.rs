//! Train on one synthetic corpus, evaluate on another, and report accuracy,
//! the confusion matrix and annotation fidelity.

use tbx::synthgen::{self, SynthSpec};
use tbx::tuning::{self, MatchRule};
use tbx::ThresholdConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = ThresholdConfig::default();
    let prepare = |seed: u64, n: usize| -> Result<_, Box<dyn std::error::Error>> {
        let spec = SynthSpec {
            seed,
            ..SynthSpec::default()
        };
        let images = synthgen::generate(&spec, n)?;
        let prepared = images
            .iter()
            .map(|img| tuning::prepare(&img.inputs(), Some(&img.heatmap), cfg.binarize))
            .collect::<Result<Vec<_>, _>>()?;
        Ok((spec, images, prepared))
    };
    let (spec, _, train) = prepare(1, 800)?;
    let (_, test_images, test) = prepare(2, 400)?;

    let model = tuning::train_spc(&spec.class_names(), &train, cfg.t_c, cfg.t_r)?;
    let mut report = tuning::evaluate(&test, &model, &cfg)?;
    let explanations = tuning::explain_prepared(&test, &model, &cfg, &Default::default())?;
    let records: Vec<_> = test_images.iter().map(|i| i.record()).collect();
    report.fidelity = Some(tuning::fidelity_for_records(
        &records,
        &explanations,
        MatchRule::AnyMatch,
    )?);

    println!("images              {}", report.images);
    println!("classifier accuracy {:.4}", report.classifier_accuracy);
    println!("pipeline accuracy   {:.4}", report.accuracy);
    println!("scenarios 1/2/3     {:?}", report.scenario_counts);
    if let Some(f) = &report.fidelity {
        println!(
            "fidelity (any)      {:.4} ({} of {})",
            f.score, f.hits, f.annotated
        );
    }
    println!();
    report.confusion.write_csv(std::io::stdout())?;
    Ok(())
}
