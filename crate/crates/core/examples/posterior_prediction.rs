// Train on a simulated cohort and score held-out subjects with confidence.

use std::error::Error;

use uqchi::harness::{evaluate, fit_uqchi, truth_of, FitOptions};
use uqchi::panel::split_and_mask;
use uqchi::predictor::{index_trajectory, predict_panel};
use uqchi::simulator::{simulate, SimConfig};

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let sim = simulate(&SimConfig::default())?;
    let (train, test) = split_and_mask(&sim.labeled_panel(), 0.7, 0.2, 11)?;
    let (train, st) = train.standardize();
    let test = test.apply_standardization(&st)?;

    let fit = fit_uqchi(&train, 1.5, &FitOptions::default())?;
    println!(
        "dual solved in {} iterations, J = {:.4}, |v| = {:.3}",
        fit.solution.iterations,
        fit.solution.objective,
        fit.posterior.mean().iter().map(|x| x * x).sum::<f64>().sqrt()
    );

    let records = predict_panel(&fit.posterior, &test)?;
    for r in records.iter().take(5) {
        println!(
            "{}: t = {}, index {:+.3} +/- {:.3}, label {:+}, confidence {:.3}",
            r.subject_id,
            r.t_last,
            r.index_mean,
            r.index_std.unwrap_or(f64::NAN),
            r.predicted_label,
            r.confidence.unwrap_or(f64::NAN)
        );
    }
    let traj = index_trajectory(&fit.posterior, &test.subjects()[0])?;
    println!("first subject: {} visits, {} drops in the mean index", traj.points.len(), traj.violations);

    let ev = evaluate(&records, &truth_of(&test))?;
    println!("test accuracy {:.3} on {} subjects", ev.accuracy.unwrap_or(f64::NAN), ev.accepted);
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
