// Choose c by subject-level cross-validation on a training split.

use std::error::Error;

use uqchi::harness::{cross_validate_c, FitOptions};
use uqchi::panel::split_and_mask;
use uqchi::simulator::{simulate, SimConfig};

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let grid = [1.5, 3.0, 5.0, 10.0, 20.0, 100.0];
    for seed in 0..3 {
        let sim = simulate(&SimConfig {
            seed,
            ..SimConfig::default()
        })?;
        let (train, _) = split_and_mask(&sim.labeled_panel(), 0.7, 0.2, seed)?;
        let (train, _) = train.standardize();
        let c = cross_validate_c(&train, &grid, 10, seed, &FitOptions::default())?;
        println!("seed {seed}: chosen c = {c}");
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
