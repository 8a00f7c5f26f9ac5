// Fit the convex CHI baseline and compare it with UQ-CHI on one split.

use std::error::Error;

use uqchi::chi::{chi_objective, chi_predict_panel, chi_train, monotonicity_violations, ChiHyperparams, ChiModel};
use uqchi::harness::{evaluate, fit_uqchi, truth_of, FitOptions};
use uqchi::panel::split_and_mask;
use uqchi::predictor::predict_panel;
use uqchi::simulator::{simulate, SimConfig};

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let sim = simulate(&SimConfig::default())?;
    let (train, test) = split_and_mask(&sim.labeled_panel(), 0.7, 0.2, 1)?;
    let (train, st) = train.standardize();
    let test = test.apply_standardization(&st)?;
    let truth = truth_of(&test);

    let hyper = ChiHyperparams::default();
    let model = chi_train(&train, &hyper, 200, 1.0)?;
    println!(
        "CHI objective {:.3} (zero model {:.3}), {} nonzero weights, {} index drops on train",
        chi_objective(&model, &train, &hyper),
        chi_objective(&ChiModel::zero(train.dim()), &train, &hyper),
        model.w.iter().filter(|w| **w != 0.0).count(),
        monotonicity_violations(&model, &train)
    );
    let chi = evaluate(&chi_predict_panel(&model, &test)?, &truth)?;

    let fit = fit_uqchi(&train, 1.5, &FitOptions::default())?;
    let uq = evaluate(&predict_panel(&fit.posterior, &test)?, &truth)?;
    println!(
        "test accuracy: CHI {:.3}, UQ-CHI {:.3}",
        chi.accuracy.unwrap_or(f64::NAN),
        uq.accuracy.unwrap_or(f64::NAN)
    );
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
