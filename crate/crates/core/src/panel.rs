//! Irregular multivariate longitudinal panels.
//!
//! A panel holds one [`SubjectSeries`] per subject: an increasing list of
//! integer visit times, a feature vector per visit and an optionally observed
//! binary label. Irregular sampling is represented by gaps in the time index;
//! consecutive differences are always taken between observed visits.
//!
//! The dual problem only sees the panel through [`SubjectAggregate`]s, which
//! fold the expected label and the visit-to-visit differences of a subject
//! into a single vector.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PanelError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("panel has no feature columns")]
    NoFeatures,
    #[error("row {row}: expected {expected} features, found {found}")]
    DimensionMismatch {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("row {row}: column `{column}` has non-numeric value `{value}`")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row}: invalid time index `{value}`")]
    InvalidTime { row: usize, value: String },
    #[error("row {row}: invalid label `{value}` (expected 1, -1 or blank)")]
    InvalidLabel { row: usize, value: String },
    #[error("subject `{subject}` has duplicate time index {t}")]
    DuplicateTimeIndex { subject: String, t: i64 },
    #[error("subject `{subject}` has conflicting labels")]
    ConflictingLabels { subject: String },
    #[error("subject `{subject}`: {reason}")]
    InvalidSeries { subject: String, reason: String },
    #[error("panel has no subjects")]
    Empty,
    #[error("subject `{subject}` has dimension {found}, panel dimension is {expected}")]
    SubjectDimension {
        subject: String,
        expected: usize,
        found: usize,
    },
    #[error("vector has dimension {found}, expected {expected}")]
    VectorDimension { expected: usize, found: usize },
    #[error("{count} entries supplied for {expected} subjects")]
    SubjectCount { expected: usize, count: usize },
    #[error("{name} = {value} is outside [0, 1]")]
    InvalidFraction { name: &'static str, value: f64 },
    #[error("split leaves the {0} set empty")]
    EmptySplit(&'static str),
}

/// Binary disease label, possibly unobserved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Positive,
    Negative,
    Unobserved,
}

impl Label {
    /// `+1`, `-1`, or `None` when unobserved.
    pub fn sign(self) -> Option<i8> {
        match self {
            Label::Positive => Some(1),
            Label::Negative => Some(-1),
            Label::Unobserved => None,
        }
    }

    pub fn from_sign(sign: i8) -> Label {
        if sign >= 0 {
            Label::Positive
        } else {
            Label::Negative
        }
    }

    pub fn is_observed(self) -> bool {
        self != Label::Unobserved
    }

    fn parse(s: &str) -> Option<Label> {
        match s.trim() {
            "" => Some(Label::Unobserved),
            "1" | "+1" => Some(Label::Positive),
            "-1" => Some(Label::Negative),
            _ => None,
        }
    }

    fn csv_field(self) -> &'static str {
        match self {
            Label::Positive => "1",
            Label::Negative => "-1",
            Label::Unobserved => "",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Positive => write!(f, "+1"),
            Label::Negative => write!(f, "-1"),
            Label::Unobserved => write!(f, "unobserved"),
        }
    }
}

/// Visits of one subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectSeries {
    id: String,
    times: Vec<i64>,
    observations: Vec<Vec<f64>>,
    label: Label,
}

impl SubjectSeries {
    pub fn new(
        id: impl Into<String>,
        times: Vec<i64>,
        observations: Vec<Vec<f64>>,
        label: Label,
    ) -> Result<Self, PanelError> {
        let id = id.into();
        let invalid = |reason: &str| PanelError::InvalidSeries {
            subject: id.clone(),
            reason: reason.to_string(),
        };
        if times.is_empty() {
            return Err(invalid("no visits"));
        }
        if times.len() != observations.len() {
            return Err(invalid("times and observations differ in length"));
        }
        let dim = observations[0].len();
        if dim == 0 {
            return Err(invalid("empty feature vector"));
        }
        if observations.iter().any(|x| x.len() != dim) {
            return Err(invalid("observations differ in dimension"));
        }
        if observations.iter().flatten().any(|v| !v.is_finite()) {
            return Err(invalid("non-finite feature value"));
        }
        if let Some(w) = times.windows(2).find(|w| w[1] <= w[0]) {
            if w[1] == w[0] {
                return Err(PanelError::DuplicateTimeIndex {
                    subject: id,
                    t: w[0],
                });
            }
            return Err(invalid("times are not strictly increasing"));
        }
        Ok(Self {
            id,
            times,
            observations,
            label,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn times(&self) -> &[i64] {
        &self.times
    }

    pub fn observations(&self) -> &[Vec<f64>] {
        &self.observations
    }

    pub fn label(&self) -> Label {
        self.label
    }

    pub fn with_label(mut self, label: Label) -> Self {
        self.label = label;
        self
    }

    /// Number of visits `T_n`.
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.observations[0].len()
    }

    /// Last visit, used as the decision visit.
    pub fn terminal(&self) -> &[f64] {
        self.observations.last().expect("series has at least one visit")
    }

    pub fn first(&self) -> &[f64] {
        &self.observations[0]
    }

    pub fn last_time(&self) -> i64 {
        *self.times.last().expect("series has at least one visit")
    }

    /// Consecutive differences `z_t = x_{t+1} - x_t`; empty for a single visit.
    pub fn differences(&self) -> Vec<Vec<f64>> {
        self.observations
            .windows(2)
            .map(|w| w[1].iter().zip(&w[0]).map(|(b, a)| b - a).collect())
            .collect()
    }
}

/// Counts of observed and unobserved labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LabelCounts {
    pub positive: usize,
    pub negative: usize,
    pub unobserved: usize,
}

/// Per-feature affine map `(x - mean) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardization {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    /// Mean and population standard deviation over every visit of every
    /// subject. Constant features get scale 1.
    pub fn fit(panel: &LongitudinalPanel) -> Self {
        let dim = panel.dim();
        let mut mean = vec![0.0; dim];
        let mut count = 0usize;
        for x in panel.subjects.iter().flat_map(|s| s.observations.iter()) {
            for (m, v) in mean.iter_mut().zip(x) {
                *m += v;
            }
            count += 1;
        }
        for m in &mut mean {
            *m /= count as f64;
        }
        let mut var = vec![0.0; dim];
        for x in panel.subjects.iter().flat_map(|s| s.observations.iter()) {
            for ((s, v), m) in var.iter_mut().zip(x).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let scale = var
            .into_iter()
            .map(|s| {
                let sd = (s / count as f64).sqrt();
                if sd > 0.0 && sd.is_finite() {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, scale }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    pub fn invert(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| v * s + m)
            .collect()
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<(), PanelError> {
        let file = File::create(path)?;
        serde_json::to_writer_pretty(file, self)?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self, PanelError> {
        let file = File::open(path)?;
        Ok(serde_json::from_reader(file)?)
    }
}

/// Validated collection of subjects sharing one feature dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalPanel {
    subjects: Vec<SubjectSeries>,
    feature_names: Vec<String>,
    dim: usize,
    standardization: Option<Standardization>,
}

impl LongitudinalPanel {
    pub fn new(subjects: Vec<SubjectSeries>) -> Result<Self, PanelError> {
        let dim = subjects.first().ok_or(PanelError::Empty)?.dim();
        let names = (1..=dim).map(|k| format!("f{k}")).collect();
        Self::with_feature_names(subjects, names)
    }

    pub fn with_feature_names(
        subjects: Vec<SubjectSeries>,
        feature_names: Vec<String>,
    ) -> Result<Self, PanelError> {
        let dim = subjects.first().ok_or(PanelError::Empty)?.dim();
        if let Some(s) = subjects.iter().find(|s| s.dim() != dim) {
            return Err(PanelError::SubjectDimension {
                subject: s.id.clone(),
                expected: dim,
                found: s.dim(),
            });
        }
        if feature_names.len() != dim {
            return Err(PanelError::VectorDimension {
                expected: dim,
                found: feature_names.len(),
            });
        }
        Ok(Self {
            subjects,
            feature_names,
            dim,
            standardization: None,
        })
    }

    pub fn subjects(&self) -> &[SubjectSeries] {
        &self.subjects
    }

    pub fn subject(&self, id: &str) -> Option<&SubjectSeries> {
        self.subjects.iter().find(|s| s.id == id)
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of subjects `N`.
    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn labels(&self) -> Vec<Label> {
        self.subjects.iter().map(|s| s.label).collect()
    }

    pub fn label_counts(&self) -> LabelCounts {
        let mut counts = LabelCounts::default();
        for s in &self.subjects {
            match s.label {
                Label::Positive => counts.positive += 1,
                Label::Negative => counts.negative += 1,
                Label::Unobserved => counts.unobserved += 1,
            }
        }
        counts
    }

    /// Standardization already applied to the stored features, if any.
    pub fn standardization(&self) -> Option<&Standardization> {
        self.standardization.as_ref()
    }

    /// Fits a standardization on this panel and applies it.
    pub fn standardize(&self) -> (LongitudinalPanel, Standardization) {
        let st = Standardization::fit(self);
        let panel = self
            .apply_standardization(&st)
            .expect("fitted standardization matches panel dimension");
        (panel, st)
    }

    pub fn apply_standardization(&self, st: &Standardization) -> Result<Self, PanelError> {
        if st.dim() != self.dim {
            return Err(PanelError::VectorDimension {
                expected: self.dim,
                found: st.dim(),
            });
        }
        let subjects = self
            .subjects
            .iter()
            .map(|s| SubjectSeries {
                id: s.id.clone(),
                times: s.times.clone(),
                observations: s.observations.iter().map(|x| st.apply(x)).collect(),
                label: s.label,
            })
            .collect();
        Ok(Self {
            subjects,
            feature_names: self.feature_names.clone(),
            dim: self.dim,
            standardization: Some(st.clone()),
        })
    }

    /// Replaces every subject's label, in subject order.
    pub fn with_labels(&self, labels: &[Label]) -> Result<Self, PanelError> {
        if labels.len() != self.len() {
            return Err(PanelError::SubjectCount {
                expected: self.len(),
                count: labels.len(),
            });
        }
        let mut out = self.clone();
        for (s, &l) in out.subjects.iter_mut().zip(labels) {
            s.label = l;
        }
        Ok(out)
    }

    /// Subset by subject index, preserving the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            subjects: indices.iter().map(|&i| self.subjects[i].clone()).collect(),
            feature_names: self.feature_names.clone(),
            dim: self.dim,
            standardization: self.standardization.clone(),
        }
    }
}

/// Prior probability `p0(y_n = +1)` per subject.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelPrior {
    probabilities: Vec<f64>,
}

impl LabelPrior {
    /// Observed positives get 1, observed negatives 0 and unobserved subjects
    /// `unobserved`.
    pub fn from_panel(panel: &LongitudinalPanel, unobserved: f64) -> Result<Self, PanelError> {
        if !(0.0..=1.0).contains(&unobserved) {
            return Err(PanelError::InvalidFraction {
                name: "unobserved label prior",
                value: unobserved,
            });
        }
        let probabilities = panel
            .subjects
            .iter()
            .map(|s| match s.label {
                Label::Positive => 1.0,
                Label::Negative => 0.0,
                Label::Unobserved => unobserved,
            })
            .collect();
        Ok(Self { probabilities })
    }

    pub fn from_probabilities(probabilities: Vec<f64>) -> Result<Self, PanelError> {
        if let Some(&p) = probabilities.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(PanelError::InvalidFraction {
                name: "label prior",
                value: p,
            });
        }
        Ok(Self { probabilities })
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn len(&self) -> usize {
        self.probabilities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probabilities.is_empty()
    }
}

/// `E[y_n] = 2 p0(y_n = +1) - 1`, in `[-1, 1]`.
pub fn expected_label(prior: &LabelPrior, n: usize) -> f64 {
    2.0 * prior.probabilities[n] - 1.0
}

/// Constraint data of one subject: `a_n = E[y_n] x_{n,T_n} + sum_t z_{n,t}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectAggregate {
    pub expected_label: f64,
    /// Sum of consecutive differences, `x_{T_n} - x_1` up to rounding.
    pub drift: Vec<f64>,
    pub vector: Vec<f64>,
}

pub fn aggregates(
    panel: &LongitudinalPanel,
    prior: &LabelPrior,
) -> Result<Vec<SubjectAggregate>, PanelError> {
    if prior.len() != panel.len() {
        return Err(PanelError::SubjectCount {
            expected: panel.len(),
            count: prior.len(),
        });
    }
    Ok(panel
        .subjects
        .iter()
        .enumerate()
        .map(|(n, s)| {
            let ybar = expected_label(prior, n);
            let mut drift = vec![0.0; panel.dim];
            for z in s.differences() {
                for (acc, v) in drift.iter_mut().zip(&z) {
                    *acc += v;
                }
            }
            let vector = s
                .terminal()
                .iter()
                .zip(&drift)
                .map(|(x, z)| ybar * x + z)
                .collect();
            SubjectAggregate {
                expected_label: ybar,
                drift,
                vector,
            }
        })
        .collect())
}

/// Column names of the long-format CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub subject: String,
    pub time: String,
    pub label: Option<String>,
    /// Feature columns in order; `None` takes every remaining column.
    pub features: Option<Vec<String>>,
}

impl Default for ColumnSchema {
    fn default() -> Self {
        Self {
            subject: "subject_id".into(),
            time: "t".into(),
            label: Some("label".into()),
            features: None,
        }
    }
}

pub fn load_panel(
    path: impl AsRef<Path>,
    schema: &ColumnSchema,
) -> Result<LongitudinalPanel, PanelError> {
    read_panel(File::open(path)?, schema)
}

/// Parses a long-format panel: one row per `(subject, t)` visit.
pub fn read_panel<R: Read>(reader: R, schema: &ColumnSchema) -> Result<LongitudinalPanel, PanelError> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| PanelError::MissingColumn(name.to_string()))
    };
    let subject_col = column(&schema.subject)?;
    let time_col = column(&schema.time)?;
    let label_col = schema.label.as_deref().map(column).transpose()?;
    let feature_cols: Vec<usize> = match &schema.features {
        Some(names) => names.iter().map(|n| column(n)).collect::<Result<_, _>>()?,
        None => (0..headers.len())
            .filter(|&i| i != subject_col && i != time_col && Some(i) != label_col)
            .collect(),
    };
    if feature_cols.is_empty() {
        return Err(PanelError::NoFeatures);
    }
    let feature_names: Vec<String> = feature_cols.iter().map(|&i| headers[i].to_string()).collect();
    let dim = feature_cols.len();

    struct Pending {
        rows: Vec<(i64, Vec<f64>)>,
        label: Label,
    }
    let mut order: Vec<String> = Vec::new();
    let mut pending: HashMap<String, Pending> = HashMap::new();

    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        // 1-based data row, header excluded
        let row = i + 1;
        if record.len() != headers.len() {
            return Err(PanelError::DimensionMismatch {
                row,
                expected: dim,
                found: record.len().saturating_sub(headers.len() - dim),
            });
        }
        let subject = record[subject_col].to_string();
        let t: i64 = record[time_col]
            .parse()
            .map_err(|_| PanelError::InvalidTime {
                row,
                value: record[time_col].to_string(),
            })?;
        let label = match label_col {
            Some(c) => Label::parse(&record[c]).ok_or_else(|| PanelError::InvalidLabel {
                row,
                value: record[c].to_string(),
            })?,
            None => Label::Unobserved,
        };
        let x = feature_cols
            .iter()
            .map(|&c| {
                let raw = &record[c];
                raw.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| PanelError::NonNumeric {
                        row,
                        column: headers[c].to_string(),
                        value: raw.to_string(),
                    })
            })
            .collect::<Result<Vec<_>, _>>()?;

        let entry = pending.entry(subject.clone()).or_insert_with(|| {
            order.push(subject.clone());
            Pending {
                rows: Vec::new(),
                label: Label::Unobserved,
            }
        });
        if label.is_observed() {
            if entry.label.is_observed() && entry.label != label {
                return Err(PanelError::ConflictingLabels { subject });
            }
            entry.label = label;
        }
        entry.rows.push((t, x));
    }

    let mut subjects = Vec::with_capacity(order.len());
    for id in order {
        let mut p = pending.remove(&id).expect("every ordered id has rows");
        p.rows.sort_by_key(|(t, _)| *t);
        if let Some(w) = p.rows.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(PanelError::DuplicateTimeIndex {
                subject: id,
                t: w[0].0,
            });
        }
        let (times, observations) = p.rows.into_iter().unzip();
        subjects.push(SubjectSeries::new(id, times, observations, p.label)?);
    }
    LongitudinalPanel::with_feature_names(subjects, feature_names)
}

/// Writes the panel in long format with header `subject_id,t,label,<features>`.
pub fn write_panel<W: Write>(writer: W, panel: &LongitudinalPanel) -> Result<(), PanelError> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["subject_id".to_string(), "t".into(), "label".into()];
    header.extend(panel.feature_names.iter().cloned());
    wtr.write_record(&header)?;
    let mut row: Vec<String> = Vec::with_capacity(header.len());
    for s in &panel.subjects {
        for (t, x) in s.times.iter().zip(&s.observations) {
            row.clear();
            row.push(s.id.clone());
            row.push(t.to_string());
            row.push(s.label.csv_field().to_string());
            row.extend(x.iter().map(|v| v.to_string()));
            wtr.write_record(&row)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

pub fn save_panel(path: impl AsRef<Path>, panel: &LongitudinalPanel) -> Result<(), PanelError> {
    write_panel(File::create(path)?, panel)
}

/// Subject-level train/test split followed by label masking in the train part.
///
/// `round(train_fraction * N)` subjects go to train. Within train,
/// `round(unlabeled_fraction * N_train)` subjects have their labels replaced
/// by [`Label::Unobserved`]. The split only depends on `seed` and
/// `train_fraction`, and masks for growing `unlabeled_fraction` are nested.
pub fn split_and_mask(
    panel: &LongitudinalPanel,
    train_fraction: f64,
    unlabeled_fraction: f64,
    seed: u64,
) -> Result<(LongitudinalPanel, LongitudinalPanel), PanelError> {
    for (name, value) in [
        ("train_fraction", train_fraction),
        ("unlabeled_fraction", unlabeled_fraction),
    ] {
        if !(0.0..=1.0).contains(&value) {
            return Err(PanelError::InvalidFraction { name, value });
        }
    }
    let n = panel.len();
    let n_train = (train_fraction * n as f64).round() as usize;
    if n_train == 0 {
        return Err(PanelError::EmptySplit("train"));
    }
    if n_train >= n {
        return Err(PanelError::EmptySplit("test"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut train_idx = order[..n_train].to_vec();
    let mut test_idx = order[n_train..].to_vec();
    train_idx.sort_unstable();
    test_idx.sort_unstable();

    let mut mask_order: Vec<usize> = (0..n_train).collect();
    mask_order.shuffle(&mut rng);
    let n_mask = (unlabeled_fraction * n_train as f64).round() as usize;

    let mut train = panel.select(&train_idx);
    for &k in &mask_order[..n_mask] {
        train.subjects[k].label = Label::Unobserved;
    }
    Ok((train, panel.select(&test_idx)))
}
