// Ingest a long-format clinical CSV with custom column names.

use std::error::Error;

use uqchi::harness::{fit_uqchi, FitOptions};
use uqchi::panel::{read_panel, ColumnSchema, Standardization};
use uqchi::predictor::predict_panel;

const VISITS: &str = "\
RID,VISCODE,DX,frontal,temporal,parietal
p01,0,+1,1.10,0.92,1.30
p01,12,+1,1.02,0.85,1.22
p01,24,+1,0.91,0.80,1.15
p02,0,-1,1.21,1.05,1.41
p02,6,-1,1.20,1.07,1.40
p03,0,,1.15,0.99,1.35
p03,12,,1.08,0.95,1.31
p03,36,,0.99,0.88,1.24
p04,0,-1,1.25,1.01,1.38
p04,24,-1,1.24,1.03,1.39
";

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let schema = ColumnSchema {
        subject: "RID".into(),
        time: "VISCODE".into(),
        label: Some("DX".into()),
        features: None,
    };
    let panel = read_panel(VISITS.as_bytes(), &schema)?;
    println!("features: {:?}", panel.feature_names());
    for s in panel.subjects() {
        println!("{}: visits at {:?}, label {:?}", s.id(), s.times(), s.label());
    }

    // metabolism declines with disease, so flip signs to make the index rise
    let flip = Standardization {
        mean: vec![0.0; panel.dim()],
        scale: vec![-1.0; panel.dim()],
    };
    let (panel, _) = panel.apply_standardization(&flip)?.standardize();
    let fit = fit_uqchi(&panel, 1.5, &FitOptions::default())?;
    for r in predict_panel(&fit.posterior, &panel)? {
        println!("{}: label {:+}, confidence {:.3}", r.subject_id, r.predicted_label, r.confidence.unwrap_or(f64::NAN));
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
