// Generate a synthetic cohort, write it as CSV and read it back.

use std::error::Error;

use uqchi::panel::{load_panel, ColumnSchema, Label};
use uqchi::simulator::{simulate, SimConfig};

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let config = SimConfig {
        n_per_class: 20,
        seed: 7,
        ..SimConfig::default()
    };
    let sim = simulate(&config)?;
    let counts = sim.panel.label_counts();
    println!(
        "{} subjects, d = {}, labels: {} positive / {} negative / {} hidden",
        sim.panel.len(),
        sim.panel.dim(),
        counts.positive,
        counts.negative,
        counts.unobserved
    );
    println!("informative features: {:?}", sim.echo.informative_features);

    let dir = tempfile::tempdir()?;
    let csv = dir.path().join("panel.csv");
    sim.save(&csv, dir.path().join("panel.echo.json"))?;
    let reloaded = load_panel(&csv, &ColumnSchema::default())?;
    assert_eq!(reloaded.len(), sim.panel.len());
    assert_eq!(reloaded.labels(), sim.panel.labels());

    let diseased = sim.truth.iter().filter(|&&l| l == Label::Positive).count();
    println!("{diseased} diseased subjects in truth, round trip ok");
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
