//! Convex CHI baseline.
//!
//! Minimizes over `(w, b)`:
//!
//! ```text
//! 1/2 |w|^2
//!   + beta  * sum_{labeled n} max(0, 1 - y_n (x_{n,T_n} . w + b))
//!   + alpha * sum_{n, t}      max(0, 1 - z_{n,t} . w)
//!   + lambda_var / 2 * (1/N+) sum_{y_n = +1} ((x_{n,T_n} - mean+) . w)^2
//!   + lambda_var / 2 * (1/N-) sum_{y_n = -1} ((x_{n,T_n} - mean-) . w)^2
//!   + gamma_l1 * |w|_1
//! ```
//!
//! Unlabeled subjects only enter the monotonicity term.

use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{axpy, dot, norm};
use crate::panel::LongitudinalPanel;
use crate::predictor::{sign_with_tie, PredictionRecord};

pub const CHI_MODEL_VERSION: &str = "chi-model/1";

#[derive(Debug, Error)]
pub enum ChiError {
    #[error("hyperparameter {name} = {value} must be finite and non-negative")]
    InvalidHyperparameter { name: &'static str, value: f64 },
    #[error("invalid training setting: {0}")]
    InvalidSetting(String),
    #[error("training panel has no labeled subjects")]
    NoLabels,
    #[error("objective became non-finite at step {step} (last finite objective {last_finite})")]
    NonFinite { step: usize, last_finite: f64 },
    #[error("feature vector has dimension {found}, model expects {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("unsupported model file version `{0}`")]
    Version(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl ChiError {
    pub fn is_numerical(&self) -> bool {
        matches!(self, ChiError::NonFinite { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChiHyperparams {
    /// Monotonicity hinge weight.
    pub alpha: f64,
    /// Classification hinge weight.
    pub beta: f64,
    /// Within-class variance weight.
    pub lambda_var: f64,
    pub gamma_l1: f64,
}

impl Default for ChiHyperparams {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            lambda_var: 1.0,
            gamma_l1: 0.1,
        }
    }
}

impl ChiHyperparams {
    pub fn validate(&self) -> Result<(), ChiError> {
        for (name, value) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("lambda_var", self.lambda_var),
            ("gamma_l1", self.gamma_l1),
        ] {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(ChiError::InvalidHyperparameter { name, value });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChiModel {
    pub w: Vec<f64>,
    pub b: f64,
}

impl ChiModel {
    pub fn zero(dim: usize) -> Self {
        Self {
            w: vec![0.0; dim],
            b: 0.0,
        }
    }
}

/// Panel data in the layout the objective needs.
struct ChiData {
    dim: usize,
    // (terminal visit, label) of labeled subjects
    labeled: Vec<(Vec<f64>, f64)>,
    diffs: Vec<Vec<f64>>,
    centered_pos: Vec<Vec<f64>>,
    centered_neg: Vec<Vec<f64>>,
}

impl ChiData {
    fn new(panel: &LongitudinalPanel) -> Self {
        let dim = panel.dim();
        let mut labeled = Vec::new();
        let mut diffs = Vec::new();
        for s in panel.subjects() {
            if let Some(y) = s.label().sign() {
                labeled.push((s.terminal().to_vec(), f64::from(y)));
            }
            diffs.extend(s.differences());
        }
        let centered = |class: f64| -> Vec<Vec<f64>> {
            let members: Vec<&Vec<f64>> = labeled
                .iter()
                .filter(|(_, y)| *y == class)
                .map(|(x, _)| x)
                .collect();
            if members.is_empty() {
                return Vec::new();
            }
            let mut mean = vec![0.0; dim];
            for x in &members {
                axpy(1.0 / members.len() as f64, x, &mut mean);
            }
            members
                .iter()
                .map(|x| x.iter().zip(&mean).map(|(a, m)| a - m).collect())
                .collect()
        };
        let centered_pos = centered(1.0);
        let centered_neg = centered(-1.0);
        Self {
            dim,
            labeled,
            diffs,
            centered_pos,
            centered_neg,
        }
    }

    fn objective(&self, w: &[f64], b: f64, h: &ChiHyperparams) -> f64 {
        self.evaluate(w, b, h).0
    }

    #[cfg(test)]
    fn subgradient(&self, w: &[f64], b: f64, h: &ChiHyperparams) -> (Vec<f64>, f64) {
        let (_, gw, gb) = self.evaluate(w, b, h);
        (gw, gb)
    }

    /// Objective and a subgradient of every term except the L1 penalty, from
    /// one pass over the data.
    fn evaluate(&self, w: &[f64], b: f64, h: &ChiHyperparams) -> (f64, Vec<f64>, f64) {
        let mut total = 0.5 * dot(w, w);
        let mut gw = w.to_vec();
        let mut gb = 0.0;
        for (x, y) in &self.labeled {
            let slack = 1.0 - y * (dot(x, w) + b);
            if slack > 0.0 {
                total += h.beta * slack;
                axpy(-h.beta * y, x, &mut gw);
                gb -= h.beta * y;
            }
        }
        for z in &self.diffs {
            let slack = 1.0 - dot(z, w);
            if slack > 0.0 {
                total += h.alpha * slack;
                axpy(-h.alpha, z, &mut gw);
            }
        }
        for class in [&self.centered_pos, &self.centered_neg] {
            if !class.is_empty() {
                let scale = h.lambda_var / class.len() as f64;
                for c in class {
                    let proj = dot(c, w);
                    total += 0.5 * scale * proj * proj;
                    axpy(scale * proj, c, &mut gw);
                }
            }
        }
        total += h.gamma_l1 * w.iter().map(|v| v.abs()).sum::<f64>();
        (total, gw, gb)
    }
}

/// Exact value of the CHI objective on `panel`.
pub fn chi_objective(model: &ChiModel, panel: &LongitudinalPanel, hyper: &ChiHyperparams) -> f64 {
    ChiData::new(panel).objective(&model.w, model.b, hyper)
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    v.signum() * (v.abs() - t).max(0.0)
}

/// Proximal subgradient descent from `w = 0, b = 0`.
///
/// Step `k` moves a distance `step_size / sqrt(k)` along the normalized
/// subgradient of the non-L1 terms, then soft-thresholds with the matching
/// prox parameter. The best iterate by objective is returned, so the result
/// never scores worse than the zero model.
pub fn chi_train(
    panel: &LongitudinalPanel,
    hyper: &ChiHyperparams,
    steps: usize,
    step_size: f64,
) -> Result<ChiModel, ChiError> {
    hyper.validate()?;
    if !(step_size > 0.0 && step_size.is_finite()) {
        return Err(ChiError::InvalidSetting(format!("step_size must be positive, got {step_size}")));
    }
    let data = ChiData::new(panel);
    if data.labeled.is_empty() {
        return Err(ChiError::NoLabels);
    }
    let mut w = vec![0.0; data.dim];
    let mut b = 0.0;
    let (mut obj, mut gw, mut gb) = data.evaluate(&w, b, hyper);
    let mut best = ChiModel::zero(data.dim);
    let mut best_obj = obj;

    for k in 1..=steps {
        let gnorm = (norm(&gw).powi(2) + gb * gb).sqrt();
        let eta = step_size / (k as f64).sqrt();
        let t = if gnorm > 0.0 { eta / gnorm } else { eta };
        for (wi, gi) in w.iter_mut().zip(&gw) {
            *wi = soft_threshold(*wi - t * gi, t * hyper.gamma_l1);
        }
        b -= t * gb;
        (obj, gw, gb) = data.evaluate(&w, b, hyper);
        if !obj.is_finite() {
            return Err(ChiError::NonFinite {
                step: k,
                last_finite: best_obj,
            });
        }
        if obj < best_obj {
            best_obj = obj;
            best = ChiModel { w: w.clone(), b };
        }
    }
    Ok(best)
}

/// `sign(x . w + b)`, with `+1` at zero.
pub fn chi_predict(model: &ChiModel, x: &[f64]) -> Result<i8, ChiError> {
    if x.len() != model.w.len() {
        return Err(ChiError::DimensionMismatch {
            expected: model.w.len(),
            found: x.len(),
        });
    }
    Ok(sign_with_tie(dot(x, &model.w) + model.b))
}

/// Predictions at the last visit of every subject. The index is `x . w`;
/// there is no confidence score.
pub fn chi_predict_panel(
    model: &ChiModel,
    panel: &LongitudinalPanel,
) -> Result<Vec<PredictionRecord>, ChiError> {
    panel
        .subjects()
        .iter()
        .map(|s| {
            let index_values: Vec<f64> = s.observations().iter().map(|x| dot(x, &model.w)).collect();
            Ok(PredictionRecord {
                subject_id: s.id().to_string(),
                t_last: s.last_time(),
                index_mean: *index_values.last().expect("non-empty series"),
                index_values,
                index_std: None,
                predicted_label: chi_predict(model, s.terminal())?,
                confidence: None,
                abstained: false,
            })
        })
        .collect()
}

/// Count of visits where the index `x . w` drops, summed over subjects.
pub fn monotonicity_violations(model: &ChiModel, panel: &LongitudinalPanel) -> usize {
    panel
        .subjects()
        .iter()
        .map(|s| {
            s.observations()
                .windows(2)
                .filter(|p| dot(&p[1], &model.w) < dot(&p[0], &model.w))
                .count()
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChiModelFile {
    pub version: String,
    pub d: usize,
    pub w: Vec<f64>,
    pub b: f64,
    pub hyper: ChiHyperparams,
}

impl ChiModelFile {
    pub fn new(model: &ChiModel, hyper: ChiHyperparams) -> Self {
        Self {
            version: CHI_MODEL_VERSION.into(),
            d: model.w.len(),
            w: model.w.clone(),
            b: model.b,
            hyper,
        }
    }

    pub fn model(&self) -> ChiModel {
        ChiModel {
            w: self.w.clone(),
            b: self.b,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ChiError> {
        serde_json::to_writer_pretty(File::create(path)?, self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ChiError> {
        let file: Self = serde_json::from_reader(File::open(path)?)?;
        if file.version != CHI_MODEL_VERSION {
            return Err(ChiError::Version(file.version));
        }
        if file.w.len() != file.d {
            return Err(ChiError::DimensionMismatch {
                expected: file.d,
                found: file.w.len(),
            });
        }
        Ok(file)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::{Label, SubjectSeries};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn series(id: &str, xs: &[f64], label: Label) -> SubjectSeries {
        let times = (1..=xs.len() as i64).collect();
        SubjectSeries::new(id, times, xs.iter().map(|&x| vec![x]).collect(), label).unwrap()
    }

    /// Diseased subjects climb to x = +2, healthy subjects sit at x = -2.
    fn toy_1d() -> LongitudinalPanel {
        LongitudinalPanel::new(vec![
            series("p1", &[1.0, 1.5, 2.0], Label::Positive),
            series("p2", &[1.2, 2.0], Label::Positive),
            series("n1", &[-2.0, -2.0], Label::Negative),
            series("n2", &[-2.1, -1.9, -2.0], Label::Negative),
        ])
        .unwrap()
    }

    fn random_panel(rng: &mut ChaCha8Rng, n: usize, d: usize) -> LongitudinalPanel {
        let subjects = (0..n)
            .map(|i| {
                let visits = rng.random_range(1..5);
                let xs = (0..visits)
                    .map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect())
                    .collect();
                let label = [Label::Positive, Label::Negative, Label::Unobserved][i % 3];
                SubjectSeries::new(format!("s{i}"), (1..=visits as i64).collect(), xs, label).unwrap()
            })
            .collect();
        LongitudinalPanel::new(subjects).unwrap()
    }

    #[test]
    fn objective_at_zero_counts_hinges() {
        let panel = toy_1d();
        let h = ChiHyperparams {
            alpha: 0.7,
            beta: 1.3,
            lambda_var: 2.0,
            gamma_l1: 5.0,
        };
        // 4 labeled subjects, 2 + 1 + 1 + 2 = 6 differences
        let expected = 1.3 * 4.0 + 0.7 * 6.0;
        assert!((chi_objective(&ChiModel::zero(1), &panel, &h) - expected).abs() < 1e-12);
    }

    #[test]
    fn objective_isolates_ridge_term() {
        let panel = toy_1d();
        let h = ChiHyperparams {
            alpha: 0.0,
            beta: 0.0,
            lambda_var: 0.0,
            gamma_l1: 0.0,
        };
        let m = ChiModel { w: vec![3.0], b: 1.0 };
        assert_eq!(chi_objective(&m, &panel, &h), 4.5);
    }

    #[test]
    fn missing_class_skips_variance_term() {
        let panel = LongitudinalPanel::new(vec![
            series("p1", &[1.0, 2.0], Label::Positive),
            series("p2", &[0.0, 3.0], Label::Positive),
        ])
        .unwrap();
        let h = ChiHyperparams {
            alpha: 0.0,
            beta: 0.0,
            lambda_var: 1.0,
            gamma_l1: 0.0,
        };
        let m = ChiModel { w: vec![1.0], b: 0.0 };
        // 1/2 + 1/2 * (1/2) * (0.5^2 + 0.5^2)
        let value = chi_objective(&m, &panel, &h);
        assert!(value.is_finite());
        assert!((value - 0.625).abs() < 1e-12);
    }

    #[test]
    fn separable_toy_learns_positive_weight() {
        let panel = toy_1d();
        let h = ChiHyperparams {
            alpha: 1.0,
            beta: 1.0,
            lambda_var: 0.0,
            gamma_l1: 0.0,
        };
        // line-search oracle over (w, b) on a grid
        let mut best = (f64::INFINITY, 0.0);
        for i in -400..=400 {
            for j in -40..=40 {
                let m = ChiModel {
                    w: vec![i as f64 * 0.005],
                    b: j as f64 * 0.05,
                };
                let v = chi_objective(&m, &panel, &h);
                if v < best.0 {
                    best = (v, m.w[0]);
                }
            }
        }
        assert!(best.1 > 0.0);
        let model = chi_train(&panel, &h, 2000, 0.5).unwrap();
        assert!(model.w[0] > 0.0, "{model:?}");
        let trained = chi_objective(&model, &panel, &h);
        assert!(trained <= best.0 + 0.05, "{trained} vs grid {}", best.0);
        assert_eq!(chi_predict(&model, &[2.0]).unwrap(), 1);
        assert_eq!(chi_predict(&model, &[-2.0]).unwrap(), -1);
    }

    #[test]
    fn zero_hyperparameters_keep_zero_weights() {
        let h = ChiHyperparams {
            alpha: 0.0,
            beta: 0.0,
            lambda_var: 0.0,
            gamma_l1: 0.0,
        };
        let model = chi_train(&toy_1d(), &h, 200, 0.1).unwrap();
        assert!(norm(&model.w) <= 1e-3);
    }

    #[test]
    fn large_l1_weight_shrinks_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (panel, _) = random_panel(&mut rng, 30, 4).standardize();
        let h = ChiHyperparams {
            alpha: 1.0,
            beta: 1.0,
            lambda_var: 1.0,
            gamma_l1: 1e3,
        };
        let model = chi_train(&panel, &h, 300, 0.1).unwrap();
        assert!(model.w.iter().map(|v| v.abs()).sum::<f64>() <= 1e-6);
        assert!(chi_objective(&model, &panel, &h) <= chi_objective(&ChiModel::zero(4), &panel, &h));
    }

    #[test]
    fn training_never_worse_than_zero_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..5 {
            let panel = random_panel(&mut rng, 20, 3);
            let h = ChiHyperparams {
                alpha: rng.random_range(0.0..10.0),
                beta: rng.random_range(0.0..10.0),
                lambda_var: rng.random_range(0.0..10.0),
                gamma_l1: rng.random_range(0.0..1.0),
            };
            let model = chi_train(&panel, &h, 100, 1.0).unwrap();
            assert!(chi_objective(&model, &panel, &h) <= chi_objective(&ChiModel::zero(3), &panel, &h));
        }
    }

    #[test]
    fn training_errors() {
        let unlabeled = LongitudinalPanel::new(vec![series("u", &[1.0, 2.0], Label::Unobserved)]).unwrap();
        assert!(matches!(
            chi_train(&unlabeled, &ChiHyperparams::default(), 10, 0.1),
            Err(ChiError::NoLabels)
        ));
        let bad = ChiHyperparams {
            alpha: -1.0,
            ..ChiHyperparams::default()
        };
        assert!(matches!(
            chi_train(&toy_1d(), &bad, 10, 0.1),
            Err(ChiError::InvalidHyperparameter { name: "alpha", .. })
        ));
        assert!(chi_train(&toy_1d(), &ChiHyperparams::default(), 10, 0.0).is_err());
        let huge = ChiHyperparams {
            beta: f64::MAX,
            ..ChiHyperparams::default()
        };
        assert!(matches!(
            chi_train(&toy_1d(), &huge, 10, f64::MAX),
            Err(ChiError::NonFinite { .. })
        ));
    }

    #[test]
    fn predict_examples() {
        let m = ChiModel { w: vec![1.0, 0.0], b: -1.0 };
        assert_eq!(chi_predict(&m, &[2.0, 5.0]).unwrap(), 1);
        assert_eq!(chi_predict(&ChiModel::zero(2), &[2.0, 5.0]).unwrap(), 1);
        let m = ChiModel { w: vec![1.0], b: 0.0 };
        assert_eq!(chi_predict(&m, &[-0.5]).unwrap(), -1);
        assert!(chi_predict(&m, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn objective_is_convex_along_chords() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let panel = random_panel(&mut rng, 15, 3);
        let h = ChiHyperparams {
            alpha: 1.5,
            beta: 2.0,
            lambda_var: 3.0,
            gamma_l1: 0.5,
        };
        for _ in 0..500 {
            let m1 = ChiModel {
                w: (0..3).map(|_| rng.random_range(-3.0..3.0)).collect(),
                b: rng.random_range(-2.0..2.0),
            };
            let m2 = ChiModel {
                w: (0..3).map(|_| rng.random_range(-3.0..3.0)).collect(),
                b: rng.random_range(-2.0..2.0),
            };
            let th: f64 = rng.random_range(0.0..1.0);
            let mid = ChiModel {
                w: m1.w.iter().zip(&m2.w).map(|(a, b)| th * a + (1.0 - th) * b).collect(),
                b: th * m1.b + (1.0 - th) * m2.b,
            };
            let lhs = chi_objective(&mid, &panel, &h);
            let rhs = th * chi_objective(&m1, &panel, &h) + (1.0 - th) * chi_objective(&m2, &panel, &h);
            assert!(lhs <= rhs + 1e-9);
        }
    }

    #[test]
    fn smooth_subgradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let panel = random_panel(&mut rng, 12, 3);
        let data = ChiData::new(&panel);
        let h = ChiHyperparams {
            alpha: 1.0,
            beta: 1.0,
            lambda_var: 2.0,
            gamma_l1: 0.0,
        };
        let w: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b = 0.3;
        let (gw, gb) = data.subgradient(&w, b, &h);
        let step = 1e-6;
        for k in 0..3 {
            let mut up = w.clone();
            let mut dn = w.clone();
            up[k] += step;
            dn[k] -= step;
            let fd = (data.objective(&up, b, &h) - data.objective(&dn, b, &h)) / (2.0 * step);
            assert!((fd - gw[k]).abs() / gw[k].abs().max(1.0) < 1e-5, "{k}: {fd} vs {}", gw[k]);
        }
        let fd = (data.objective(&w, b + step, &h) - data.objective(&w, b - step, &h)) / (2.0 * step);
        assert!((fd - gb).abs() / gb.abs().max(1.0) < 1e-5);
    }

    #[test]
    fn model_file_round_trip() {
        let m = ChiModel { w: vec![0.5, -1.0], b: 0.25 };
        let file = ChiModelFile::new(&m, ChiHyperparams::default());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chi.json");
        file.save(&path).unwrap();
        let back = ChiModelFile::load(&path).unwrap();
        assert_eq!(back.model(), m);
    }
}
