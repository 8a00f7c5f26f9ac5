// Trade coverage for accuracy by abstaining on low-confidence subjects.

use std::error::Error;

use uqchi::harness::{evaluate, fit_uqchi, truth_of, FitOptions};
use uqchi::panel::split_and_mask;
use uqchi::predictor::{predict_panel, reject_by_rate, reject_by_threshold};
use uqchi::simulator::{simulate, SimConfig};

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let sim = simulate(&SimConfig {
        n_per_class: 100,
        seed: 3,
        ..SimConfig::default()
    })?;
    let (train, test) = split_and_mask(&sim.labeled_panel(), 0.5, 0.2, 5)?;
    let (train, st) = train.standardize();
    let test = test.apply_standardization(&st)?;
    let fit = fit_uqchi(&train, 1.5, &FitOptions::default())?;
    let records = predict_panel(&fit.posterior, &test)?;
    let truth = truth_of(&test);

    println!("rate  abstained  accuracy");
    for rate in [0.0, 0.2, 0.4, 0.6] {
        let mut r = records.clone();
        reject_by_rate(&mut r, rate)?;
        let ev = evaluate(&r, &truth)?;
        println!("{rate:>4}  {:>9}  {:.3}", ev.abstained, ev.accuracy.unwrap_or(f64::NAN));
    }

    let mut r = records;
    reject_by_threshold(&mut r, 0.6)?;
    let ev = evaluate(&r, &truth)?;
    println!(
        "threshold 0.6: {} abstained, accuracy {}",
        ev.abstained,
        ev.accuracy.map_or("undefined".to_string(), |a| format!("{a:.3}"))
    );
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
