//! Render explanations with a template file instead of the built-in wording.

use tbx::{Scenario, TemplateSet};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let templates = TemplateSet::from_json(
        r#"{
            "scenario1": "Looks like a {class}: I can see {objects}.",
            "scenario2": "Not sure at first, but {objects} make this a {class}.",
            "scenario3": "Probably a {class}, but I have nothing to back that up.",
            "article": "a"
        }"#,
    )?;
    let objects = ["stool", "bottle", "stool"];
    println!(
        "{}",
        templates.render(Scenario::Confident, "bar", &objects)?
    );
    println!(
        "{}",
        templates.render(Scenario::Corrected, "bar", &objects)?
    );
    println!(
        "{}",
        templates.render::<&str>(Scenario::Unreliable, "bar", &[])?
    );

    let counted = TemplateSet::default().with_counts(true);
    println!("{}", counted.render(Scenario::Confident, "bar", &objects)?);

    // a template missing a slot is rejected
    let bad = TemplateSet::from_json(
        r#"{"scenario1": "no slots", "scenario2": "{class} {objects}", "scenario3": "{class}"}"#,
    );
    println!("invalid file: {}", bad.unwrap_err());
    Ok(())
}
