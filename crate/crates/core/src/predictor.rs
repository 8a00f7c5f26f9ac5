//! Prediction, confidence and the rejection option.
//!
//! Under the posterior `w ~ N(v, I)` the index of a visit `x` is
//! `h = w . x ~ N(v . x, |x|^2)`. The predicted label is the sign of the
//! posterior mean index (ties go to `+1`) and the confidence is the larger of
//! the two class probabilities, `Phi(|v . x| / |x|)`, which lies in
//! `[0.5, 1]`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::linalg::{dot, norm};
use crate::med::WeightPosterior;
use crate::panel::{LongitudinalPanel, SubjectSeries};

#[derive(Debug, Error)]
pub enum PredictError {
    #[error("feature vector has dimension {found}, model expects {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("confidence is undefined for the zero feature vector")]
    ZeroFeatureVector,
    #[error("rejection threshold {0} is outside [0.5, 1]")]
    InvalidThreshold(f64),
    #[error("rejection rate {0} is outside [0, 1)")]
    InvalidRate(f64),
    #[error("record for `{0}` has no confidence score")]
    MissingConfidence(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Prediction for one subject at its last visit.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub subject_id: String,
    pub t_last: i64,
    /// Posterior mean index `v . x_t` at every visit.
    pub index_values: Vec<f64>,
    /// Index mean at the decision visit.
    pub index_mean: f64,
    pub index_std: Option<f64>,
    /// `+1` or `-1`.
    pub predicted_label: i8,
    pub confidence: Option<f64>,
    pub abstained: bool,
}

impl PredictionRecord {
    /// Rejection-aware label: `0` when abstained.
    pub fn decision(&self) -> i8 {
        if self.abstained {
            0
        } else {
            self.predicted_label
        }
    }
}

fn check_dim(posterior: &WeightPosterior, x: &[f64]) -> Result<(), PredictError> {
    if x.len() != posterior.dim() {
        return Err(PredictError::DimensionMismatch {
            expected: posterior.dim(),
            found: x.len(),
        });
    }
    Ok(())
}

pub(crate) fn sign_with_tie(value: f64) -> i8 {
    if value >= 0.0 {
        1
    } else {
        -1
    }
}

pub fn standard_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// `sign(v . x)`, with `+1` at exactly zero.
pub fn predict(posterior: &WeightPosterior, x: &[f64]) -> Result<i8, PredictError> {
    check_dim(posterior, x)?;
    Ok(sign_with_tie(dot(posterior.mean(), x)))
}

/// `Phi(|v . x| / |x|)`.
pub fn confidence(posterior: &WeightPosterior, x: &[f64]) -> Result<f64, PredictError> {
    check_dim(posterior, x)?;
    let scale = norm(x);
    if scale == 0.0 {
        return Err(PredictError::ZeroFeatureVector);
    }
    Ok(standard_normal_cdf(dot(posterior.mean(), x).abs() / scale))
}

pub fn predict_subject(
    posterior: &WeightPosterior,
    series: &SubjectSeries,
) -> Result<PredictionRecord, PredictError> {
    let x = series.terminal();
    check_dim(posterior, x)?;
    let index_values = series
        .observations()
        .iter()
        .map(|o| dot(posterior.mean(), o))
        .collect();
    let index_mean = dot(posterior.mean(), x);
    Ok(PredictionRecord {
        subject_id: series.id().to_string(),
        t_last: series.last_time(),
        index_values,
        index_mean,
        index_std: Some(norm(x)),
        predicted_label: sign_with_tie(index_mean),
        confidence: Some(confidence(posterior, x)?),
        abstained: false,
    })
}

pub fn predict_panel(
    posterior: &WeightPosterior,
    panel: &LongitudinalPanel,
) -> Result<Vec<PredictionRecord>, PredictError> {
    panel
        .subjects()
        .iter()
        .map(|s| predict_subject(posterior, s))
        .collect()
}

fn confidences(records: &[PredictionRecord]) -> Result<Vec<f64>, PredictError> {
    records
        .iter()
        .map(|r| {
            r.confidence
                .ok_or_else(|| PredictError::MissingConfidence(r.subject_id.clone()))
        })
        .collect()
}

/// Abstains exactly on records with confidence below `threshold`.
pub fn reject_by_threshold(records: &mut [PredictionRecord], threshold: f64) -> Result<(), PredictError> {
    if !(0.5..=1.0).contains(&threshold) {
        return Err(PredictError::InvalidThreshold(threshold));
    }
    let conf = confidences(records)?;
    for (r, c) in records.iter_mut().zip(conf) {
        r.abstained = c < threshold;
    }
    Ok(())
}

/// Abstains on the `floor(rate * M)` least confident records; equal
/// confidences are taken in input order.
pub fn reject_by_rate(records: &mut [PredictionRecord], rate: f64) -> Result<(), PredictError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(PredictError::InvalidRate(rate));
    }
    let conf = confidences(records)?;
    let count = (rate * records.len() as f64 + 1e-9).floor() as usize;
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| conf[a].total_cmp(&conf[b]));
    for r in records.iter_mut() {
        r.abstained = false;
    }
    for &i in &order[..count] {
        records[i].abstained = true;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryPoint {
    pub t: i64,
    pub mean: f64,
    pub std: f64,
}

/// Posterior index trajectory of one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexTrajectory {
    pub points: Vec<TrajectoryPoint>,
    /// Number of visits where the mean index drops.
    pub violations: usize,
}

pub fn index_trajectory(
    posterior: &WeightPosterior,
    series: &SubjectSeries,
) -> Result<IndexTrajectory, PredictError> {
    check_dim(posterior, series.terminal())?;
    let points: Vec<TrajectoryPoint> = series
        .times()
        .iter()
        .zip(series.observations())
        .map(|(&t, x)| TrajectoryPoint {
            t,
            mean: dot(posterior.mean(), x),
            std: norm(x),
        })
        .collect();
    let violations = points.windows(2).filter(|w| w[1].mean < w[0].mean).count();
    Ok(IndexTrajectory { points, violations })
}

/// One row of the prediction CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub subject_id: String,
    pub t_last: i64,
    pub index_mean: f64,
    pub index_std: Option<f64>,
    /// `1`, `-1`, or `0` for an abstention.
    pub pred: i8,
    pub confidence: Option<f64>,
    pub abstained: bool,
}

impl From<&PredictionRecord> for PredictionRow {
    fn from(r: &PredictionRecord) -> Self {
        Self {
            subject_id: r.subject_id.clone(),
            t_last: r.t_last,
            index_mean: r.index_mean,
            index_std: r.index_std,
            pred: r.decision(),
            confidence: r.confidence,
            abstained: r.abstained,
        }
    }
}

impl From<PredictionRow> for PredictionRecord {
    fn from(row: PredictionRow) -> Self {
        let predicted_label = if row.pred == 0 {
            sign_with_tie(row.index_mean)
        } else {
            row.pred
        };
        Self {
            subject_id: row.subject_id,
            t_last: row.t_last,
            index_values: Vec::new(),
            index_mean: row.index_mean,
            index_std: row.index_std,
            predicted_label,
            confidence: row.confidence,
            abstained: row.abstained || row.pred == 0,
        }
    }
}

/// Writes `subject_id,t_last,index_mean,index_std,pred,confidence,abstained`.
pub fn write_predictions<W: Write>(writer: W, records: &[PredictionRecord]) -> Result<(), PredictError> {
    let mut wtr = csv::Writer::from_writer(writer);
    for r in records {
        wtr.serialize(PredictionRow::from(r))?;
    }
    wtr.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_predictions<R: Read>(reader: R) -> Result<Vec<PredictionRecord>, PredictError> {
    let mut rdr = csv::Reader::from_reader(reader);
    rdr.deserialize::<PredictionRow>()
        .map(|row| Ok(row?.into()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::Label;
    use proptest::prelude::*;

    fn post(v: &[f64]) -> WeightPosterior {
        WeightPosterior::from_mean(v.to_vec())
    }

    fn record(id: &str, conf: f64) -> PredictionRecord {
        PredictionRecord {
            subject_id: id.into(),
            t_last: 1,
            index_values: vec![],
            index_mean: 1.0,
            index_std: Some(1.0),
            predicted_label: 1,
            confidence: Some(conf),
            abstained: false,
        }
    }

    fn mask(records: &[PredictionRecord]) -> Vec<bool> {
        records.iter().map(|r| r.abstained).collect()
    }

    /// Composite Simpson integration of the normal density from 0 to z.
    fn cdf_by_quadrature(z: f64) -> f64 {
        let n = 20_000;
        let h = z / n as f64;
        let pdf = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut s = pdf(0.0) + pdf(z);
        for i in 1..n {
            s += pdf(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        0.5 + s * h / 3.0
    }

    #[test]
    fn predict_examples() {
        assert_eq!(predict(&post(&[1.0, -1.0]), &[2.0, 1.0]).unwrap(), 1);
        assert_eq!(predict(&post(&[0.0, 0.0]), &[2.0, 1.0]).unwrap(), 1);
        assert_eq!(confidence(&post(&[0.0, 0.0]), &[2.0, 1.0]).unwrap(), 0.5);
        assert_eq!(predict(&post(&[0.3]), &[-2.0]).unwrap(), -1);
        assert!(matches!(
            predict(&post(&[0.3]), &[1.0, 2.0]),
            Err(PredictError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn confidence_examples() {
        let c = confidence(&post(&[1.959_964]), &[1.0]).unwrap();
        assert!((c - cdf_by_quadrature(1.959_964)).abs() < 1e-10);
        assert!((c - 0.975).abs() < 1e-6);
        let c = confidence(&post(&[40.0]), &[1.0]).unwrap();
        assert_eq!(c, 1.0);
        assert!(matches!(
            confidence(&post(&[1.0, 1.0]), &[0.0, 0.0]),
            Err(PredictError::ZeroFeatureVector)
        ));
    }

    #[test]
    fn cdf_matches_quadrature() {
        for z in [0.1, 0.5, 1.0, 2.5, 4.0] {
            assert!((standard_normal_cdf(z) - cdf_by_quadrature(z)).abs() < 1e-10, "{z}");
        }
    }

    #[test]
    fn threshold_rejection() {
        let mut r = vec![record("a", 0.6), record("b", 0.9)];
        reject_by_threshold(&mut r, 0.7).unwrap();
        assert_eq!(mask(&r), vec![true, false]);
        assert_eq!(r[0].decision(), 0);
        assert_eq!(r[1].decision(), 1);
        reject_by_threshold(&mut r, 0.5).unwrap();
        assert_eq!(mask(&r), vec![false, false]);
        let mut r = vec![record("a", 0.999), record("b", 1.0)];
        reject_by_threshold(&mut r, 1.0).unwrap();
        assert_eq!(mask(&r), vec![true, false]);
        assert!(reject_by_threshold(&mut r, 0.4).is_err());
        assert!(reject_by_threshold(&mut r, 1.1).is_err());
    }

    #[test]
    fn rate_rejection() {
        let mut r: Vec<_> = [0.9, 0.55, 0.8, 0.6, 0.7]
            .iter()
            .enumerate()
            .map(|(i, &c)| record(&i.to_string(), c))
            .collect();
        reject_by_rate(&mut r, 0.0).unwrap();
        assert!(mask(&r).iter().all(|m| !m));
        reject_by_rate(&mut r, 0.4).unwrap();
        assert_eq!(mask(&r), vec![false, true, false, true, false]);

        let mut r: Vec<_> = (0..4).map(|i| record(&i.to_string(), 0.7)).collect();
        reject_by_rate(&mut r, 0.5).unwrap();
        assert_eq!(mask(&r), vec![true, true, false, false]);
        assert!(reject_by_rate(&mut r, 1.0).is_err());

        let mut missing = vec![record("x", 0.7)];
        missing[0].confidence = None;
        assert!(matches!(
            reject_by_rate(&mut missing, 0.5),
            Err(PredictError::MissingConfidence(_))
        ));
    }

    #[test]
    fn trajectory_examples() {
        let s = SubjectSeries::new(
            "s",
            vec![1, 2, 5],
            vec![vec![1.0, 9.0], vec![2.0, 9.0], vec![3.0, 9.0]],
            Label::Positive,
        )
        .unwrap();
        let tr = index_trajectory(&post(&[1.0, 0.0]), &s).unwrap();
        let means: Vec<f64> = tr.points.iter().map(|p| p.mean).collect();
        assert_eq!(means, vec![1.0, 2.0, 3.0]);
        assert_eq!(tr.violations, 0);
        assert_eq!(tr.points[2].t, 5);

        let tr = index_trajectory(&post(&[0.0, 0.0]), &s).unwrap();
        assert!(tr.points.iter().all(|p| p.mean == 0.0));
        assert_eq!(tr.points[0].std, 82f64.sqrt());

        let s = SubjectSeries::new("s", vec![1, 2], vec![vec![3.0], vec![2.0]], Label::Unobserved).unwrap();
        assert_eq!(index_trajectory(&post(&[1.0]), &s).unwrap().violations, 1);
    }

    #[test]
    fn prediction_csv_round_trip() {
        let mut r = vec![record("a", 0.6), record("b", 0.9)];
        r[1].predicted_label = -1;
        r[1].index_mean = -2.0;
        reject_by_threshold(&mut r, 0.7).unwrap();
        let mut buf = Vec::new();
        write_predictions(&mut buf, &r).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("subject_id,t_last,index_mean,index_std,pred,confidence,abstained\n"));
        assert!(text.contains("a,1,1.0,1.0,0,0.6,true"));
        let back = read_predictions(buf.as_slice()).unwrap();
        assert_eq!(back.iter().map(|b| b.decision()).collect::<Vec<_>>(), vec![0, -1]);
    }

    proptest! {
        #[test]
        fn predict_is_scale_invariant(
            v in prop::collection::vec(-5.0f64..5.0, 3),
            x in prop::collection::vec(-5.0f64..5.0, 3),
            s in 0.01f64..100.0,
            t in 0.01f64..100.0,
        ) {
            let base = predict(&post(&v), &x).unwrap();
            let vs: Vec<f64> = v.iter().map(|a| a * s).collect();
            let xs: Vec<f64> = x.iter().map(|a| a * t).collect();
            let dot_base = dot(&v, &x);
            // sign flips of a product that underflows to zero are not meaningful
            prop_assume!(dot_base.abs() > 1e-9);
            prop_assert_eq!(predict(&post(&vs), &xs).unwrap(), base);
        }

        #[test]
        fn confidence_is_bounded_and_monotone(a in 0.0f64..8.0, b in 0.0f64..8.0) {
            let ca = confidence(&post(&[a]), &[1.0]).unwrap();
            let cb = confidence(&post(&[b]), &[1.0]).unwrap();
            prop_assert!((0.5..=1.0).contains(&ca));
            if a <= b { prop_assert!(ca <= cb); }
        }

        #[test]
        fn rejection_regions_are_nested(
            conf in prop::collection::vec(0.5f64..1.0, 1..40),
            r1 in 0.0f64..0.99,
            r2 in 0.0f64..0.99,
        ) {
            let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
            let mut a: Vec<_> = conf.iter().enumerate().map(|(i, &c)| record(&i.to_string(), c)).collect();
            let mut b = a.clone();
            reject_by_rate(&mut a, lo).unwrap();
            reject_by_rate(&mut b, hi).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!(!x.abstained || y.abstained);
            }
        }
    }
}
