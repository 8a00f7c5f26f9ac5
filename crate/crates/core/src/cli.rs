//! Command implementations behind the `uqchi` binary.
//!
//! Exit codes: 0 on success, 2 for invalid input or arguments, 3 for
//! numerical failures (see [`exit_code`]).

use std::fs::File;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::chi::{chi_predict_panel, chi_train, ChiHyperparams, ChiModelFile, CHI_MODEL_VERSION};
use crate::harness::{
    cross_validate_c, evaluate, fit_uqchi, run_pipeline, truth_of, CSelection, DataSource, ExperimentSpec,
    FitOptions, Method,
};
use crate::med::{SolverOptions, UqchiModel, DEFAULT_MAX_ITER, DEFAULT_TOL, MODEL_VERSION};
use crate::panel::{load_panel, ColumnSchema, Label, LongitudinalPanel, Standardization};
use crate::predictor::{predict_panel, read_predictions, reject_by_rate, reject_by_threshold, write_predictions};
use crate::simulator::{simulate, SimConfig};
use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "uqchi", version, about = "Uncertainty-quantified health index")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort.
    Simulate(SimulateArgs),
    /// Fit a model on a panel CSV.
    Train(TrainArgs),
    /// Score the last visit of every subject.
    Predict(PredictArgs),
    /// Compare predictions with truth labels.
    Evaluate(EvaluateArgs),
    /// Run an experiment grid.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct SchemaArgs {
    #[arg(long, default_value = "subject_id")]
    pub subject_col: String,
    #[arg(long, default_value = "t")]
    pub time_col: String,
    #[arg(long, default_value = "label")]
    pub label_col: String,
    /// Feature columns; defaults to every other column.
    #[arg(long, value_delimiter = ',')]
    pub features: Option<Vec<String>>,
}

impl SchemaArgs {
    fn schema(&self) -> ColumnSchema {
        ColumnSchema {
            subject: self.subject_col.clone(),
            time: self.time_col.clone(),
            label: Some(self.label_col.clone()),
            features: self.features.clone(),
        }
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Panel CSV to write.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON config; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Config echo path; defaults to `<out>.echo.json`.
    #[arg(long)]
    pub echo: Option<PathBuf>,
    /// Truth labels CSV; defaults to `<out>.truth.csv`.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub n_per_class: Option<usize>,
    #[arg(long)]
    pub normal_proportion: Option<f64>,
    #[arg(long)]
    pub visits_min: Option<usize>,
    #[arg(long)]
    pub visits_max: Option<usize>,
    #[arg(long)]
    pub degradation_rate: Option<f64>,
    #[arg(long)]
    pub informative_k: Option<usize>,
    #[arg(long)]
    pub label_fraction: Option<f64>,
    #[arg(long)]
    pub baseline_mean: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Uqchi,
    Chi,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Model JSON to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "uqchi")]
    pub method: MethodArg,
    #[arg(long, default_value_t = 1.5)]
    pub c: f64,
    /// Choose c by cross-validation over `--c-grid`.
    #[arg(long)]
    pub cv: bool,
    #[arg(long, value_delimiter = ',', default_value = "1.5,3,5,10,20,100")]
    pub c_grid: Vec<f64>,
    #[arg(long, default_value_t = 10)]
    pub folds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.5)]
    pub unobserved_prior: f64,
    #[arg(long, default_value_t = DEFAULT_TOL)]
    pub tol: f64,
    #[arg(long, default_value_t = DEFAULT_MAX_ITER)]
    pub max_iter: usize,
    #[arg(long)]
    pub no_standardize: bool,
    /// Standardization JSON to write; defaults to `<out>.standardization.json`.
    #[arg(long)]
    pub standardization: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    pub chi_alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    pub chi_beta: f64,
    #[arg(long, default_value_t = 1.0)]
    pub chi_lambda_var: f64,
    #[arg(long, default_value_t = 0.1)]
    pub chi_gamma_l1: f64,
    #[arg(long, default_value_t = 100)]
    pub chi_steps: usize,
    #[arg(long, default_value_t = 1.0)]
    pub chi_step_size: f64,
    #[command(flatten)]
    pub schema: SchemaArgs,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Predictions CSV to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Standardization JSON; defaults to the model's sidecar when present.
    #[arg(long)]
    pub standardization: Option<PathBuf>,
    /// Abstain when confidence is below this value.
    #[arg(long, conflicts_with = "reject_rate")]
    pub threshold: Option<f64>,
    /// Abstain on this share of least confident subjects.
    #[arg(long)]
    pub reject_rate: Option<f64>,
    #[command(flatten)]
    pub schema: SchemaArgs,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    /// CSV with `subject_id,label` columns.
    #[arg(long, required_unless_present = "truth_panel", conflicts_with = "truth_panel")]
    pub truth: Option<PathBuf>,
    /// Panel CSV whose labels serve as truth.
    #[arg(long)]
    pub truth_panel: Option<PathBuf>,
    /// Evaluation JSON to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Experiment spec JSON; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "sweep_out")]
    pub out_dir: PathBuf,
    /// Panel CSV to use instead of simulation.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub n_seeds: Option<usize>,
    #[arg(long)]
    pub base_seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    pub c_grid: Option<Vec<f64>>,
    #[arg(long, value_enum)]
    pub c_selection: Option<CSelectionArg>,
    #[arg(long, value_delimiter = ',')]
    pub label_ratios: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub train_ratios: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub rejection_rates: Option<Vec<f64>>,
    #[arg(long)]
    pub cv_folds: Option<usize>,
    #[arg(long, value_enum, value_delimiter = ',')]
    pub methods: Option<Vec<MethodArg>>,
    /// Use fixed CHI weights instead of cross-validating them.
    #[arg(long)]
    pub no_chi_tune: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CSelectionArg {
    Fixed,
    Cv,
    Both,
}

/// 0 success, 2 invalid input, 3 numerical failure.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_numerical() {
        3
    } else {
        2
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(args) => run_simulate(args),
        Command::Train(args) => run_train(args),
        Command::Predict(args) => run_predict(args),
        Command::Evaluate(args) => run_evaluate(args),
        Command::Sweep(args) => run_sweep(args),
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

/// Default standardization sidecar of a model file.
pub fn standardization_path(model: &Path) -> PathBuf {
    sibling(model, "standardization.json")
}

fn run_simulate(args: SimulateArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => serde_json::from_reader(File::open(path)?)?,
        None => SimConfig::default(),
    };
    macro_rules! set {
        ($($field:ident <- $arg:expr),*) => {$(if let Some(v) = $arg { cfg.$field = v; })*};
    }
    set!(d <- args.d, n_per_class <- args.n_per_class, visits_min <- args.visits_min,
         visits_max <- args.visits_max, degradation_rate <- args.degradation_rate,
         informative_k <- args.informative_k, label_observed_fraction <- args.label_fraction,
         baseline_mean <- args.baseline_mean, seed <- args.seed);
    if args.normal_proportion.is_some() {
        cfg.normal_proportion = args.normal_proportion;
    }
    let sim = simulate(&cfg)?;
    let echo = args.echo.unwrap_or_else(|| sibling(&args.out, "echo.json"));
    let truth = args.truth.unwrap_or_else(|| sibling(&args.out, "truth.csv"));
    sim.save(&args.out, &echo)?;
    let mut w = csv::Writer::from_path(&truth).map_err(csv_error)?;
    w.write_record(["subject_id", "label"]).map_err(csv_error)?;
    for (s, label) in sim.panel.subjects().iter().zip(&sim.truth) {
        w.write_record([s.id(), &label_text(*label)]).map_err(csv_error)?;
    }
    w.flush()?;
    println!(
        "wrote {} subjects ({} normal, {} diseased) to {}",
        sim.panel.len(),
        sim.echo.n_normal,
        sim.echo.n_diseased,
        args.out.display()
    );
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    crate::harness::HarnessError::Csv(e).into()
}

fn label_text(label: Label) -> String {
    label.sign().map(|s| s.to_string()).unwrap_or_default()
}

fn run_train(args: TrainArgs) -> Result<()> {
    let raw = load_panel(&args.data, &args.schema.schema())?;
    let (panel, st) = if args.no_standardize {
        let st = Standardization::identity(raw.dim());
        (raw, st)
    } else {
        raw.standardize()
    };
    let st_path = args
        .standardization
        .clone()
        .unwrap_or_else(|| standardization_path(&args.out));
    match args.method {
        MethodArg::Uqchi => {
            let fit_opts = FitOptions {
                unobserved_prior: args.unobserved_prior,
                solver: SolverOptions {
                    tol: args.tol,
                    max_iter: args.max_iter,
                },
            };
            let c = if args.cv {
                cross_validate_c(&panel, &args.c_grid, args.folds, args.seed, &fit_opts)?
            } else {
                args.c
            };
            let fit = fit_uqchi(&panel, c, &fit_opts)?;
            UqchiModel::new(&fit.problem, &fit.solution, &fit.posterior).save(&args.out)?;
            println!(
                "c = {c}, objective = {}, iterations = {}, |pg| = {:e}",
                fit.solution.objective, fit.solution.iterations, fit.solution.grad_norm
            );
        }
        MethodArg::Chi => {
            let hyper = ChiHyperparams {
                alpha: args.chi_alpha,
                beta: args.chi_beta,
                lambda_var: args.chi_lambda_var,
                gamma_l1: args.chi_gamma_l1,
            };
            let model = chi_train(&panel, &hyper, args.chi_steps, args.chi_step_size)?;
            ChiModelFile::new(&model, hyper).save(&args.out)?;
            println!("trained CHI model, |w|_0 = {}", model.w.iter().filter(|w| **w != 0.0).count());
        }
    }
    st.save_json(&st_path)?;
    info!("wrote {} and {}", args.out.display(), st_path.display());
    Ok(())
}

enum AnyModel {
    Uqchi(UqchiModel),
    Chi(ChiModelFile),
}

#[derive(Deserialize)]
struct VersionProbe {
    version: String,
}

fn load_model(path: &Path) -> Result<AnyModel> {
    let probe: VersionProbe = serde_json::from_reader(File::open(path)?)?;
    match probe.version.as_str() {
        MODEL_VERSION => Ok(AnyModel::Uqchi(UqchiModel::load(path)?)),
        CHI_MODEL_VERSION => Ok(AnyModel::Chi(ChiModelFile::load(path)?)),
        other => Err(Error::Invalid(format!("unknown model version `{other}`"))),
    }
}

fn run_predict(args: PredictArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let raw = load_panel(&args.data, &args.schema.schema())?;
    let st_path = args
        .standardization
        .clone()
        .or_else(|| Some(standardization_path(&args.model)).filter(|p| p.exists()));
    let panel: LongitudinalPanel = match st_path {
        Some(p) => raw.apply_standardization(&Standardization::load_json(p)?)?,
        None => {
            warn!("no standardization file; using raw features");
            raw
        }
    };
    let records = match model {
        AnyModel::Uqchi(m) => {
            let mut records = predict_panel(&m.posterior(), &panel)?;
            if let Some(t) = args.threshold {
                reject_by_threshold(&mut records, t)?;
            }
            if let Some(r) = args.reject_rate {
                reject_by_rate(&mut records, r)?;
            }
            records
        }
        AnyModel::Chi(m) => {
            if args.threshold.is_some() || args.reject_rate.is_some() {
                return Err(Error::Invalid("CHI models have no confidence score to reject on".into()));
            }
            chi_predict_panel(&m.model(), &panel)?
        }
    };
    write_predictions(File::create(&args.out)?, &records)?;
    let abstained = records.iter().filter(|r| r.abstained).count();
    println!("{} predictions, {abstained} abstained", records.len());
    Ok(())
}

#[derive(Deserialize)]
struct TruthRow {
    subject_id: String,
    label: String,
}

fn read_truth(path: &Path) -> Result<Vec<(String, Label)>> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_error)?;
    reader
        .deserialize::<TruthRow>()
        .map(|row| {
            let row = row.map_err(csv_error)?;
            let label = match row.label.trim() {
                "" => Label::Unobserved,
                "1" | "+1" => Label::Positive,
                "-1" => Label::Negative,
                other => return Err(Error::Invalid(format!("bad label `{other}` for {}", row.subject_id))),
            };
            Ok((row.subject_id, label))
        })
        .collect()
}

#[derive(Serialize)]
struct EvaluationReport {
    #[serde(flatten)]
    evaluation: crate::harness::Evaluation,
    skipped_unlabeled: usize,
}

fn run_evaluate(args: EvaluateArgs) -> Result<()> {
    let predictions = read_predictions(File::open(&args.predictions)?)?;
    let truth = match (&args.truth, &args.truth_panel) {
        (Some(path), _) => read_truth(path)?,
        (None, Some(path)) => truth_of(&load_panel(path, &ColumnSchema::default())?),
        (None, None) => unreachable!("clap requires one truth source"),
    };
    let labeled: std::collections::HashSet<&str> = truth
        .iter()
        .filter(|(_, l)| l.is_observed())
        .map(|(id, _)| id.as_str())
        .collect();
    let kept: Vec<_> = predictions
        .into_iter()
        .filter(|p| labeled.contains(p.subject_id.as_str()))
        .collect();
    let truth: Vec<_> = truth.into_iter().filter(|(_, l)| l.is_observed()).collect();
    let skipped = truth.len().saturating_sub(kept.len());
    if skipped > 0 {
        warn!("{skipped} labeled subjects have no prediction");
    }
    let kept_ids: std::collections::HashSet<&str> = kept.iter().map(|p| p.subject_id.as_str()).collect();
    let truth: Vec<_> = truth
        .iter()
        .filter(|(id, _)| kept_ids.contains(id.as_str()))
        .cloned()
        .collect();
    let evaluation = evaluate(&kept, &truth)?;
    match evaluation.accuracy {
        Some(a) => println!(
            "accuracy {a:.4} on {} accepted, {} abstained",
            evaluation.accepted, evaluation.abstained
        ),
        None => println!("accuracy undefined, {} abstained", evaluation.abstained),
    }
    if let Some(out) = &args.out {
        let report = EvaluationReport {
            evaluation,
            skipped_unlabeled: skipped,
        };
        serde_json::to_writer_pretty(File::create(out)?, &report)?;
    }
    Ok(())
}

fn run_sweep(args: SweepArgs) -> Result<()> {
    let mut spec = match &args.config {
        Some(path) => ExperimentSpec::load(path)?,
        None => ExperimentSpec::default(),
    };
    if let Some(path) = &args.data {
        spec.source = DataSource::Csv {
            path: path.clone(),
            schema: ColumnSchema::default(),
        };
    }
    macro_rules! set {
        ($($field:ident <- $arg:expr),*) => {$(if let Some(v) = $arg { spec.$field = v; })*};
    }
    set!(n_seeds <- args.n_seeds, base_seed <- args.base_seed, c_grid <- args.c_grid,
         label_ratios <- args.label_ratios, train_ratios <- args.train_ratios,
         rejection_rates <- args.rejection_rates, cv_folds <- args.cv_folds);
    if let Some(sel) = args.c_selection {
        spec.c_selection = match sel {
            CSelectionArg::Fixed => CSelection::Fixed,
            CSelectionArg::Cv => CSelection::CrossValidated,
            CSelectionArg::Both => CSelection::Both,
        };
    }
    if let Some(methods) = args.methods {
        spec.methods = methods
            .into_iter()
            .map(|m| match m {
                MethodArg::Uqchi => Method::Uqchi,
                MethodArg::Chi => Method::Chi,
            })
            .collect();
    }
    if args.no_chi_tune {
        spec.chi.tune = false;
    }
    let output = run_pipeline(&spec)?;
    let (results, log) = output.write_to(&args.out_dir)?;
    spec.save(args.out_dir.join("spec.json"))?;
    println!(
        "{} rows to {}, {} seed records to {}",
        output.table.rows.len(),
        results.display(),
        output.records.len(),
        log.display()
    );
    Ok(())
}
