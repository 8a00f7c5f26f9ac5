// Run a small experiment grid over c and rejection rates.

use std::error::Error;

use uqchi::harness::{run_pipeline, DataSource, ExperimentSpec, Method};
use uqchi::simulator::SimConfig;

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let spec = ExperimentSpec {
        source: DataSource::Simulate(SimConfig::default()),
        c_grid: vec![1.5, 10.0, 100.0],
        label_ratios: vec![0.2],
        train_ratios: vec![0.7],
        rejection_rates: vec![0.0, 0.3, 0.6],
        n_seeds: 5,
        methods: vec![Method::Uqchi],
        ..ExperimentSpec::default()
    };
    let output = run_pipeline(&spec)?;
    println!("method  c      rate  accuracy       abstained");
    for row in &output.table.rows {
        println!(
            "{:<7} {:<6} {:<5} {:.3} +/- {:.3}  {:.1}",
            row.method.name(),
            row.c.map_or("-".to_string(), |c| c.to_string()),
            row.rejection_rate,
            row.mean_accuracy.unwrap_or(f64::NAN),
            row.std_accuracy.unwrap_or(f64::NAN),
            row.mean_abstained.unwrap_or(f64::NAN)
        );
    }
    let dir = tempfile::tempdir()?;
    let (results, log) = output.write_to(dir.path())?;
    println!("wrote {} and {}", results.display(), log.display());
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
