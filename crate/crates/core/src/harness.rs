//! Experiment driver: split, mask, train, predict, reject, score.
//!
//! [`run_pipeline`] walks every (seed, train ratio, label ratio, method, c,
//! rejection rate) cell of an [`ExperimentSpec`] and emits one
//! [`SeedRecord`] per cell and seed. [`ResultTable::from_records`] reduces the
//! records to mean/std rows, so every table cell can be recomputed from the
//! JSONL log written next to it.
//!
//! Seeds are derived from `(base_seed, seed index, train ratio)` only, so the
//! same split is shared by every method, c value and label ratio of a seed,
//! and growing label ratios mask nested subject sets.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chi::{chi_predict, chi_predict_panel, chi_train, ChiHyperparams, ChiModel};
use crate::med::{posterior, solve_dual_with, DualProblem, DualSolution, SolverOptions, WeightPosterior};
use crate::panel::{
    aggregates, load_panel, split_and_mask, ColumnSchema, Label, LabelPrior, LongitudinalPanel,
};
use crate::predictor::{predict, predict_panel, reject_by_rate, PredictionRecord};
use crate::simulator::{simulate, SimConfig};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment spec: {0}")]
    InvalidSpec(String),
    #[error("{cell}: {source}")]
    Cell {
        cell: String,
        source: Box<crate::Error>,
    },
    #[error("{predictions} predictions for {truth} truth labels")]
    LengthMismatch { predictions: usize, truth: usize },
    #[error("no truth label for subject `{0}`")]
    IdMismatch(String),
    #[error("truth label of subject `{0}` is unobserved")]
    UnlabeledTruth(String),
    #[error("subject `{0}` appears twice")]
    DuplicateId(String),
    #[error("need at least 2 labeled subjects for validation, found {0}")]
    InsufficientLabels(usize),
    #[error("every candidate failed during cross-validation")]
    NoCandidate,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Uqchi,
    Chi,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Uqchi => "uqchi",
            Method::Chi => "chi",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uqchi" => Ok(Method::Uqchi),
            "chi" => Ok(Method::Chi),
            other => Err(format!("unknown method `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    /// Fresh simulation per seed; seed `s` uses `config.seed + s`.
    Simulate(SimConfig),
    Csv {
        path: PathBuf,
        #[serde(default)]
        schema: ColumnSchema,
    },
}

/// How UQ-CHI picks `c`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CSelection {
    /// One row per grid value.
    Fixed,
    /// One row with `c` chosen by cross-validation on the training split.
    CrossValidated,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChiSettings {
    /// Candidate values for each of the four weights when tuning.
    pub grid: Vec<f64>,
    pub steps: usize,
    pub step_size: f64,
    /// Cross-validate the weights over `grid^4`; otherwise use `hyper`.
    pub tune: bool,
    pub hyper: ChiHyperparams,
}

impl Default for ChiSettings {
    fn default() -> Self {
        Self {
            grid: vec![0.1, 1.0, 10.0],
            steps: 100,
            step_size: 1.0,
            tune: true,
            hyper: ChiHyperparams::default(),
        }
    }
}

/// Settings shared by every UQ-CHI fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// `p0(y = +1)` of subjects without a label.
    pub unobserved_prior: f64,
    pub solver: SolverOptions,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            unobserved_prior: 0.5,
            solver: SolverOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub source: DataSource,
    pub c_grid: Vec<f64>,
    pub c_selection: CSelection,
    /// Fraction of training subjects whose labels are hidden.
    pub label_ratios: Vec<f64>,
    /// Fraction of subjects used for training.
    pub train_ratios: Vec<f64>,
    pub rejection_rates: Vec<f64>,
    pub n_seeds: usize,
    pub base_seed: u64,
    pub cv_folds: usize,
    pub methods: Vec<Method>,
    /// Z-score features with statistics of the training split.
    pub standardize: bool,
    pub fit: FitOptions,
    pub chi: ChiSettings,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            source: DataSource::Simulate(SimConfig::default()),
            c_grid: vec![1.5, 3.0, 5.0, 10.0, 20.0, 100.0],
            c_selection: CSelection::Fixed,
            label_ratios: vec![0.1, 0.2, 0.5],
            train_ratios: vec![0.3, 0.5, 0.7],
            rejection_rates: vec![0.0, 0.2, 0.4, 0.6],
            n_seeds: 20,
            base_seed: 0,
            cv_folds: 10,
            methods: vec![Method::Uqchi, Method::Chi],
            standardize: true,
            fit: FitOptions::default(),
            chi: ChiSettings::default(),
        }
    }
}

impl ExperimentSpec {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let spec: Self = serde_json::from_reader(std::fs::File::open(path)?)?;
        Ok(spec)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), HarnessError> {
        serde_json::to_writer_pretty(std::fs::File::create(path)?, self)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let fail = |msg: String| Err(HarnessError::InvalidSpec(msg));
        let grids: [(&str, &[f64]); 4] = [
            ("c_grid", &self.c_grid),
            ("label_ratios", &self.label_ratios),
            ("train_ratios", &self.train_ratios),
            ("rejection_rates", &self.rejection_rates),
        ];
        for (name, grid) in grids {
            if grid.is_empty() {
                return fail(format!("{name} is empty"));
            }
        }
        if let Some(c) = self.c_grid.iter().find(|c| !(c.is_finite() && **c > 0.0)) {
            return fail(format!("c values must be positive and finite, got {c}"));
        }
        if let Some(r) = self.train_ratios.iter().find(|r| !(**r > 0.0 && **r < 1.0)) {
            return fail(format!("train ratios must lie in (0, 1), got {r}"));
        }
        if let Some(r) = self.label_ratios.iter().find(|r| !(0.0..1.0).contains(*r)) {
            return fail(format!("label ratios must lie in [0, 1), got {r}"));
        }
        if let Some(r) = self.rejection_rates.iter().find(|r| !(0.0..1.0).contains(*r)) {
            return fail(format!("rejection rates must lie in [0, 1), got {r}"));
        }
        if self.n_seeds == 0 {
            return fail("n_seeds must be at least 1".into());
        }
        if self.cv_folds < 2 {
            return fail(format!("cv_folds must be at least 2, got {}", self.cv_folds));
        }
        if self.methods.is_empty() {
            return fail("no methods selected".into());
        }
        if !(0.0..=1.0).contains(&self.fit.unobserved_prior) {
            return fail(format!("unobserved_prior must lie in [0, 1], got {}", self.fit.unobserved_prior));
        }
        if self.methods.contains(&Method::Chi) {
            if self.chi.tune && self.chi.grid.is_empty() {
                return fail("chi grid is empty".into());
            }
            if !(self.chi.step_size > 0.0 && self.chi.step_size.is_finite()) {
                return fail(format!("chi step_size must be positive, got {}", self.chi.step_size));
            }
            let candidates = if self.chi.tune { self.chi.grid.clone() } else { vec![] };
            if candidates.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return fail("chi grid values must be finite and non-negative".into());
            }
            self.chi
                .hyper
                .validate()
                .map_err(|e| HarnessError::InvalidSpec(e.to_string()))?;
        }
        if let DataSource::Simulate(cfg) = &self.source {
            cfg.validate()
                .map_err(|e| HarnessError::InvalidSpec(e.to_string()))?;
        }
        Ok(())
    }
}

/// Counts over accepted predictions; the positive class is `+1`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub true_positive: usize,
    pub false_positive: usize,
    pub true_negative: usize,
    pub false_negative: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// `correct / accepted`; `None` when every prediction abstained.
    pub accuracy: Option<f64>,
    pub accepted: usize,
    pub abstained: usize,
    pub correct: usize,
    pub confusion: Confusion,
}

/// Scores predictions against observed truth labels, matched by subject id.
pub fn evaluate(
    predictions: &[PredictionRecord],
    truth: &[(String, Label)],
) -> Result<Evaluation, HarnessError> {
    if predictions.len() != truth.len() {
        return Err(HarnessError::LengthMismatch {
            predictions: predictions.len(),
            truth: truth.len(),
        });
    }
    let mut lookup = HashMap::with_capacity(truth.len());
    for (id, label) in truth {
        if lookup.insert(id.as_str(), *label).is_some() {
            return Err(HarnessError::DuplicateId(id.clone()));
        }
    }
    let mut seen = std::collections::HashSet::with_capacity(predictions.len());
    let mut confusion = Confusion::default();
    let mut abstained = 0;
    for p in predictions {
        if !seen.insert(p.subject_id.as_str()) {
            return Err(HarnessError::DuplicateId(p.subject_id.clone()));
        }
        let label = *lookup
            .get(p.subject_id.as_str())
            .ok_or_else(|| HarnessError::IdMismatch(p.subject_id.clone()))?;
        let y = label
            .sign()
            .ok_or_else(|| HarnessError::UnlabeledTruth(p.subject_id.clone()))?;
        match (p.decision(), y) {
            (0, _) => abstained += 1,
            (1, 1) => confusion.true_positive += 1,
            (1, _) => confusion.false_positive += 1,
            (_, 1) => confusion.false_negative += 1,
            _ => confusion.true_negative += 1,
        }
    }
    let correct = confusion.true_positive + confusion.true_negative;
    let accepted = predictions.len() - abstained;
    Ok(Evaluation {
        accuracy: (accepted > 0).then(|| correct as f64 / accepted as f64),
        accepted,
        abstained,
        correct,
        confusion,
    })
}

/// `(id, label)` pairs of the subjects of `panel`.
pub fn truth_of(panel: &LongitudinalPanel) -> Vec<(String, Label)> {
    panel
        .subjects()
        .iter()
        .map(|s| (s.id().to_string(), s.label()))
        .collect()
}

/// A trained UQ-CHI model with the problem it solved.
#[derive(Debug, Clone)]
pub struct UqchiFit {
    pub problem: DualProblem,
    pub solution: DualSolution,
    pub posterior: WeightPosterior,
}

/// Training step: label prior, aggregates, dual solve, posterior.
pub fn fit_uqchi(train: &LongitudinalPanel, c: f64, opts: &FitOptions) -> crate::Result<UqchiFit> {
    let prior = LabelPrior::from_panel(train, opts.unobserved_prior)?;
    let aggs = aggregates(train, &prior)?;
    let problem = DualProblem::from_aggregates(&aggs, c)?;
    let solution = solve_dual_with(&problem, &opts.solver)?;
    let posterior = posterior(&solution, &problem)?;
    Ok(UqchiFit {
        problem,
        solution,
        posterior,
    })
}

fn derive_seed(parts: &[u64]) -> u64 {
    // splitmix64 over the parts
    let mut state = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        state ^= p;
        state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        state = z ^ (z >> 31);
    }
    state
}

/// `(training indices, validation indices)` of one fold.
type Fold = (Vec<usize>, Vec<usize>);

/// Subject-level validation splits over the labeled subjects of `panel`.
///
/// Labeled subjects are shuffled and dealt round-robin into `folds` folds;
/// unlabeled subjects always stay in training. With fewer labeled subjects
/// than folds a single 70/30 holdout is used instead.
fn fold_plan(
    panel: &LongitudinalPanel,
    folds: usize,
    seed: u64,
) -> Result<Vec<Fold>, HarnessError> {
    let mut labeled: Vec<usize> = (0..panel.len())
        .filter(|&i| panel.subjects()[i].label().is_observed())
        .collect();
    if labeled.len() < 2 {
        return Err(HarnessError::InsufficientLabels(labeled.len()));
    }
    labeled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let groups: Vec<Vec<usize>> = if labeled.len() >= folds {
        (0..folds)
            .map(|f| labeled.iter().skip(f).step_by(folds).copied().collect())
            .collect()
    } else {
        warn!(
            "{} labeled subjects for {folds} folds; falling back to a holdout split",
            labeled.len()
        );
        let n_val = ((0.3 * labeled.len() as f64).round() as usize).clamp(1, labeled.len() - 1);
        vec![labeled[..n_val].to_vec()]
    };
    Ok(groups
        .into_iter()
        .map(|mut val| {
            val.sort_unstable();
            let train = (0..panel.len()).filter(|i| val.binary_search(i).is_err()).collect();
            (train, val)
        })
        .collect())
}

/// Mean validation accuracy of every candidate; `None` if any fold failed.
fn cv_scores<T>(
    panel: &LongitudinalPanel,
    candidates: &[T],
    folds: usize,
    seed: u64,
    mut classify: impl FnMut(&LongitudinalPanel, &T, &LongitudinalPanel) -> crate::Result<Vec<i8>>,
) -> Result<Vec<Option<f64>>, HarnessError> {
    let plan = fold_plan(panel, folds, seed)?;
    let splits: Vec<(LongitudinalPanel, LongitudinalPanel)> = plan
        .iter()
        .map(|(tr, va)| (panel.select(tr), panel.select(va)))
        .collect();
    Ok(candidates
        .iter()
        .map(|cand| {
            let mut total = 0.0;
            for (train, val) in &splits {
                match classify(train, cand, val) {
                    Ok(pred) => {
                        let correct = pred
                            .iter()
                            .zip(val.subjects())
                            .filter(|(p, s)| s.label().sign() == Some(**p))
                            .count();
                        total += correct as f64 / val.len() as f64;
                    }
                    Err(e) => {
                        warn!("candidate skipped: {e}");
                        return None;
                    }
                }
            }
            Some(total / splits.len() as f64)
        })
        .collect())
}

/// Index of the best score; the first wins ties.
fn argmax_first(scores: &[Option<f64>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scores.iter().enumerate() {
        if let Some(s) = *s {
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
    }
    best.map(|(i, _)| i)
}

/// Picks the `c` with the best mean fold accuracy; ties go to the smaller `c`.
pub fn cross_validate_c(
    train: &LongitudinalPanel,
    c_grid: &[f64],
    folds: usize,
    seed: u64,
    opts: &FitOptions,
) -> crate::Result<f64> {
    let mut grid = c_grid.to_vec();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    match grid.len() {
        0 => return Err(HarnessError::InvalidSpec("c_grid is empty".into()).into()),
        1 => return Ok(grid[0]),
        _ => {}
    }
    let scores = cv_scores(train, &grid, folds, seed, |tr, &c, val| {
        let fit = fit_uqchi(tr, c, opts)?;
        val.subjects()
            .iter()
            .map(|s| Ok(predict(&fit.posterior, s.terminal())?))
            .collect()
    })?;
    let best = argmax_first(&scores).ok_or(HarnessError::NoCandidate)?;
    Ok(grid[best])
}

/// Every `(alpha, beta, lambda_var, gamma_l1)` combination of `grid`.
pub fn chi_candidates(grid: &[f64]) -> Vec<ChiHyperparams> {
    let mut out = Vec::with_capacity(grid.len().pow(4));
    for &alpha in grid {
        for &beta in grid {
            for &lambda_var in grid {
                for &gamma_l1 in grid {
                    out.push(ChiHyperparams {
                        alpha,
                        beta,
                        lambda_var,
                        gamma_l1,
                    });
                }
            }
        }
    }
    out
}

/// Cross-validates the CHI weights over `grid^4`; ties go to the first
/// candidate in lexicographic grid order.
pub fn tune_chi(
    train: &LongitudinalPanel,
    settings: &ChiSettings,
    folds: usize,
    seed: u64,
) -> crate::Result<ChiHyperparams> {
    let candidates = chi_candidates(&settings.grid);
    if candidates.len() == 1 {
        return Ok(candidates[0]);
    }
    let scores = cv_scores(train, &candidates, folds, seed, |tr, hyper, val| {
        let model = chi_train(tr, hyper, settings.steps, settings.step_size)?;
        val.subjects()
            .iter()
            .map(|s| Ok(chi_predict(&model, s.terminal())?))
            .collect()
    })?;
    let best = argmax_first(&scores).ok_or(HarnessError::NoCandidate)?;
    Ok(candidates[best])
}

/// One (cell, seed) outcome; a line of the JSONL log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub method: Method,
    pub label_ratio: f64,
    pub train_ratio: f64,
    pub rejection_rate: f64,
    /// Fixed `c` of the cell; `None` for CHI and cross-validated cells.
    pub c: Option<f64>,
    pub cv: bool,
    pub seed: usize,
    pub chosen_c: Option<f64>,
    pub chi_hyper: Option<ChiHyperparams>,
    pub accuracy: Option<f64>,
    pub accepted: usize,
    pub abstained: usize,
    pub correct: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: Method,
    pub label_ratio: f64,
    pub train_ratio: f64,
    pub rejection_rate: f64,
    pub c: Option<f64>,
    pub cv: bool,
    pub mean_accuracy: Option<f64>,
    /// Sample standard deviation over seeds; 0 for a single seed.
    pub std_accuracy: Option<f64>,
    /// Seeds with a defined accuracy.
    pub n_seeds: usize,
    pub mean_abstained: Option<f64>,
    pub n_failed: usize,
}

impl ResultRow {
    fn c_label(&self) -> String {
        match (self.cv, self.c) {
            (true, _) => "cv".into(),
            (false, Some(c)) => c.to_string(),
            (false, None) => String::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

type RowKey = (Method, u64, u64, u64, Option<u64>, bool);

fn row_key(r: &SeedRecord) -> RowKey {
    (
        r.method,
        r.label_ratio.to_bits(),
        r.train_ratio.to_bits(),
        r.rejection_rate.to_bits(),
        r.c.map(f64::to_bits),
        r.cv,
    )
}

fn opt_num(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl ResultTable {
    /// Groups records by cell in first-seen order.
    pub fn from_records(records: &[SeedRecord]) -> Self {
        let mut order: Vec<RowKey> = Vec::new();
        let mut groups: HashMap<RowKey, Vec<&SeedRecord>> = HashMap::new();
        for r in records {
            let key = row_key(r);
            groups
                .entry(key)
                .or_insert_with(|| {
                    order.push(key);
                    Vec::new()
                })
                .push(r);
        }
        let rows = order
            .iter()
            .map(|key| {
                let group = &groups[key];
                let first = group[0];
                let ok: Vec<&&SeedRecord> = group.iter().filter(|r| r.error.is_none()).collect();
                let acc: Vec<f64> = ok.iter().filter_map(|r| r.accuracy).collect();
                let mean = (!acc.is_empty()).then(|| acc.iter().sum::<f64>() / acc.len() as f64);
                let std = mean.map(|m| {
                    if acc.len() < 2 {
                        0.0
                    } else {
                        (acc.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (acc.len() - 1) as f64).sqrt()
                    }
                });
                let mean_abstained = (!ok.is_empty())
                    .then(|| ok.iter().map(|r| r.abstained as f64).sum::<f64>() / ok.len() as f64);
                ResultRow {
                    method: first.method,
                    label_ratio: first.label_ratio,
                    train_ratio: first.train_ratio,
                    rejection_rate: first.rejection_rate,
                    c: first.c,
                    cv: first.cv,
                    mean_accuracy: mean,
                    std_accuracy: std,
                    n_seeds: acc.len(),
                    mean_abstained,
                    n_failed: group.len() - ok.len(),
                }
            })
            .collect();
        Self { rows }
    }

    /// First row matching the given cell.
    pub fn find(
        &self,
        method: Method,
        label_ratio: f64,
        train_ratio: f64,
        rejection_rate: f64,
        c: Option<f64>,
    ) -> Option<&ResultRow> {
        self.rows.iter().find(|r| {
            r.method == method
                && r.label_ratio == label_ratio
                && r.train_ratio == train_ratio
                && r.rejection_rate == rejection_rate
                && r.c == c
        })
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), HarnessError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "method",
            "label_ratio",
            "train_ratio",
            "rejection_rate",
            "c",
            "mean_accuracy",
            "std_accuracy",
            "n_seeds",
            "mean_abstained",
            "n_failed",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.method.name().to_string(),
                r.label_ratio.to_string(),
                r.train_ratio.to_string(),
                r.rejection_rate.to_string(),
                r.c_label(),
                opt_num(r.mean_accuracy),
                opt_num(r.std_accuracy),
                r.n_seeds.to_string(),
                opt_num(r.mean_abstained),
                r.n_failed.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn write_seed_log<W: Write>(mut writer: W, records: &[SeedRecord]) -> Result<(), HarnessError> {
    for r in records {
        serde_json::to_writer(&mut writer, r)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_seed_log<R: std::io::BufRead>(reader: R) -> Result<Vec<SeedRecord>, HarnessError> {
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutput {
    pub table: ResultTable,
    pub records: Vec<SeedRecord>,
}

impl SweepOutput {
    /// Writes `results.csv` and `seeds.jsonl` into `dir`.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<(PathBuf, PathBuf), HarnessError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let results = dir.join("results.csv");
        let log = dir.join("seeds.jsonl");
        self.table.write_csv(std::fs::File::create(&results)?)?;
        write_seed_log(std::io::BufWriter::new(std::fs::File::create(&log)?), &self.records)?;
        Ok((results, log))
    }
}

/// Panel and true labels for seed index `s`.
fn load_source(spec: &ExperimentSpec, s: usize, cache: &mut Option<LongitudinalPanel>) -> crate::Result<LongitudinalPanel> {
    match &spec.source {
        DataSource::Simulate(cfg) => {
            let cfg = SimConfig {
                seed: cfg.seed.wrapping_add(s as u64),
                ..cfg.clone()
            };
            // label availability is controlled by the label-ratio grid
            Ok(simulate(&cfg)?.labeled_panel())
        }
        DataSource::Csv { path, schema } => {
            if cache.is_none() {
                *cache = Some(load_panel(path, schema)?);
            }
            Ok(cache.clone().expect("loaded above"))
        }
    }
}

struct Cell<'a> {
    spec: &'a ExperimentSpec,
    seed: usize,
    train_ratio: f64,
    label_ratio: f64,
}

impl Cell<'_> {
    fn record(&self, method: Method, rate: f64, c: Option<f64>, cv: bool) -> SeedRecord {
        SeedRecord {
            method,
            label_ratio: self.label_ratio,
            train_ratio: self.train_ratio,
            rejection_rate: rate,
            c,
            cv,
            seed: self.seed,
            chosen_c: None,
            chi_hyper: None,
            accuracy: None,
            accepted: 0,
            abstained: 0,
            correct: 0,
            error: None,
        }
    }

    fn coordinates(&self, method: Method, c: Option<f64>, cv: bool) -> String {
        let c = match (cv, c) {
            (true, _) => "cv".to_string(),
            (false, Some(c)) => c.to_string(),
            (false, None) => "-".to_string(),
        };
        format!(
            "cell(method={}, label_ratio={}, train_ratio={}, c={c}, seed={})",
            method.name(),
            self.label_ratio,
            self.train_ratio,
            self.seed
        )
    }

    fn failed(&self, method: Method, rates: &[f64], c: Option<f64>, cv: bool, err: crate::Error) -> Vec<SeedRecord> {
        let err = HarnessError::Cell {
            cell: self.coordinates(method, c, cv),
            source: Box::new(err),
        };
        warn!("{err}");
        rates
            .iter()
            .map(|&rate| SeedRecord {
                error: Some(err.to_string()),
                ..self.record(method, rate, c, cv)
            })
            .collect()
    }

    fn scored(
        &self,
        method: Method,
        records: &[PredictionRecord],
        rates: &[f64],
        truth: &[(String, Label)],
        c: Option<f64>,
        cv: bool,
    ) -> crate::Result<Vec<SeedRecord>> {
        rates
            .iter()
            .map(|&rate| {
                let mut preds = records.to_vec();
                if rate > 0.0 {
                    reject_by_rate(&mut preds, rate)?;
                }
                let ev = evaluate(&preds, truth)?;
                Ok(SeedRecord {
                    accuracy: ev.accuracy,
                    accepted: ev.accepted,
                    abstained: ev.abstained,
                    correct: ev.correct,
                    ..self.record(method, rate, c, cv)
                })
            })
            .collect()
    }

    fn uqchi(
        &self,
        train: &LongitudinalPanel,
        test: &LongitudinalPanel,
        truth: &[(String, Label)],
        c: f64,
    ) -> crate::Result<Vec<SeedRecord>> {
        let fit = fit_uqchi(train, c, &self.spec.fit)?;
        let preds = predict_panel(&fit.posterior, test)?;
        self.scored(Method::Uqchi, &preds, &self.spec.rejection_rates, truth, Some(c), false)
    }

    fn uqchi_cv(
        &self,
        train: &LongitudinalPanel,
        test: &LongitudinalPanel,
        truth: &[(String, Label)],
        cv_seed: u64,
    ) -> crate::Result<Vec<SeedRecord>> {
        let c = cross_validate_c(train, &self.spec.c_grid, self.spec.cv_folds, cv_seed, &self.spec.fit)?;
        let fit = fit_uqchi(train, c, &self.spec.fit)?;
        let preds = predict_panel(&fit.posterior, test)?;
        let mut out = self.scored(Method::Uqchi, &preds, &self.spec.rejection_rates, truth, None, true)?;
        for r in &mut out {
            r.chosen_c = Some(c);
        }
        Ok(out)
    }

    fn chi(
        &self,
        train: &LongitudinalPanel,
        test: &LongitudinalPanel,
        truth: &[(String, Label)],
        cv_seed: u64,
    ) -> crate::Result<Vec<SeedRecord>> {
        let settings = &self.spec.chi;
        let hyper = if settings.tune {
            tune_chi(train, settings, self.spec.cv_folds, cv_seed)?
        } else {
            settings.hyper
        };
        let model: ChiModel = chi_train(train, &hyper, settings.steps, settings.step_size)?;
        let preds = chi_predict_panel(&model, test)?;
        let mut out = self.scored(Method::Chi, &preds, &[0.0], truth, None, false)?;
        for r in &mut out {
            r.chi_hyper = Some(hyper);
        }
        Ok(out)
    }
}

/// Runs every cell of `spec`. Module failures inside a cell are logged and
/// recorded with their coordinates; only spec and data-source errors abort.
pub fn run_pipeline(spec: &ExperimentSpec) -> crate::Result<SweepOutput> {
    spec.validate()?;
    let mut records = Vec::new();
    let mut cache = None;
    for s in 0..spec.n_seeds {
        let panel = load_source(spec, s, &mut cache)?;
        info!("seed {s}: {} subjects, d = {}", panel.len(), panel.dim());
        for &train_ratio in &spec.train_ratios {
            let split_seed = derive_seed(&[spec.base_seed, s as u64, train_ratio.to_bits()]);
            for &label_ratio in &spec.label_ratios {
                let (train, test) = split_and_mask(&panel, train_ratio, label_ratio, split_seed)?;
                let (train, test) = if spec.standardize {
                    let (train, st) = train.standardize();
                    let test = test.apply_standardization(&st)?;
                    (train, test)
                } else {
                    (train, test)
                };
                // unlabeled test subjects cannot be scored
                let scored: Vec<usize> = (0..test.len())
                    .filter(|&i| test.subjects()[i].label().is_observed())
                    .collect();
                let test = test.select(&scored);
                let truth = truth_of(&test);
                let cell = Cell {
                    spec,
                    seed: s,
                    train_ratio,
                    label_ratio,
                };
                let cv_seed = derive_seed(&[split_seed, label_ratio.to_bits()]);
                for &method in &spec.methods {
                    match method {
                        Method::Uqchi => {
                            if spec.c_selection != CSelection::CrossValidated {
                                for &c in &spec.c_grid {
                                    records.extend(cell.uqchi(&train, &test, &truth, c).unwrap_or_else(|e| {
                                        cell.failed(method, &spec.rejection_rates, Some(c), false, e)
                                    }));
                                }
                            }
                            if spec.c_selection != CSelection::Fixed {
                                records.extend(cell.uqchi_cv(&train, &test, &truth, cv_seed).unwrap_or_else(
                                    |e| cell.failed(method, &spec.rejection_rates, None, true, e),
                                ));
                            }
                        }
                        Method::Chi => {
                            records.extend(
                                cell.chi(&train, &test, &truth, cv_seed)
                                    .unwrap_or_else(|e| cell.failed(method, &[0.0], None, false, e)),
                            );
                        }
                    }
                }
            }
        }
    }
    Ok(SweepOutput {
        table: ResultTable::from_records(&records),
        records,
    })
}
