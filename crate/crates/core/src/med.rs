//! Maximum-entropy dual problem over per-subject multipliers.
//!
//! With a standard normal prior on the index weights and the exponential
//! margin prior `p0(gamma) = c exp(-c (1 - gamma))`, the log normalizer of
//! the maximum-entropy solution is
//!
//! ```text
//! log Z(lambda) = 1/2 |v(lambda)|^2 + sum_n [ -lambda_n - log(1 - lambda_n / c) ]
//! v(lambda)     = sum_n lambda_n a_n
//! ```
//!
//! and training maximizes the concave dual `J = -log Z` over the box
//! `0 <= lambda_n < c`. The weight posterior is `N(v(lambda*), I)`.

use std::fs::File;
use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{axpy, dot, norm, norm_sq};
use crate::panel::SubjectAggregate;

/// Relative gap kept between the multipliers and `c`.
pub const BOX_MARGIN: f64 = 1e-8;
pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 10_000;
pub const MODEL_VERSION: &str = "uqchi-model/1";

// Armijo sufficient-increase fraction.
const ARMIJO: f64 = 1e-4;
// Upper cap on the active-set detection threshold.
const ACTIVE_EPS: f64 = 1e-3;
const MIN_STEP: f64 = 1e-20;

#[derive(Debug, Error)]
pub enum DualError {
    #[error("expected {expected} multipliers, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("aggregate {index} has dimension {found}, expected {expected}")]
    AggregateDimension {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("multiplier {index} = {value} is outside [0, c) with c = {c}")]
    Domain { index: usize, value: f64, c: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("dual problem has no subjects")]
    Empty,
    #[error("all aggregates are zero and c = {c} <= 1: the maximizer is the boundary lambda = 0")]
    Degenerate { c: f64 },
    #[error(
        "dual solver stopped after {} iterations with projected gradient norm {:.3e}",
        .0.iterations,
        .0.grad_norm
    )]
    NonConvergence(Box<DualSolution>),
    #[error("refusing to build a posterior from an unconverged solution")]
    Unconverged,
    #[error("model dimension {found} does not match {expected}")]
    ModelDimension { expected: usize, found: usize },
    #[error("unsupported model file version `{0}`")]
    Version(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl DualError {
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            DualError::Degenerate { .. } | DualError::NonConvergence(_) | DualError::Unconverged
        )
    }
}

/// Aggregates `a_n` and the margin-prior rate `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct DualProblem {
    aggregates: Vec<Vec<f64>>,
    c: f64,
    dim: usize,
}

impl DualProblem {
    pub fn new(aggregates: Vec<Vec<f64>>, c: f64) -> Result<Self, DualError> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(DualError::InvalidParameter(format!("c must be positive and finite, got {c}")));
        }
        let dim = aggregates.first().ok_or(DualError::Empty)?.len();
        for (index, a) in aggregates.iter().enumerate() {
            if a.len() != dim {
                return Err(DualError::AggregateDimension {
                    index,
                    expected: dim,
                    found: a.len(),
                });
            }
            if a.iter().any(|v| !v.is_finite()) {
                return Err(DualError::InvalidParameter(format!("aggregate {index} is not finite")));
            }
        }
        if c <= 1.0 {
            warn!("margin-prior rate c = {c} <= 1: the barrier term is maximized at lambda = 0");
        }
        Ok(Self { aggregates, c, dim })
    }

    pub fn from_aggregates(aggregates: &[SubjectAggregate], c: f64) -> Result<Self, DualError> {
        Self::new(aggregates.iter().map(|a| a.vector.clone()).collect(), c)
    }

    pub fn aggregates(&self) -> &[Vec<f64>] {
        &self.aggregates
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    /// Number of subjects `N`.
    pub fn len(&self) -> usize {
        self.aggregates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.aggregates.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Largest admissible multiplier, `c - BOX_MARGIN * c`.
    pub fn upper_bound(&self) -> f64 {
        self.c - BOX_MARGIN * self.c
    }

    fn check_domain(&self, lambda: &[f64]) -> Result<(), DualError> {
        if lambda.len() != self.len() {
            return Err(DualError::LengthMismatch {
                expected: self.len(),
                found: lambda.len(),
            });
        }
        for (index, &value) in lambda.iter().enumerate() {
            if !(value >= 0.0 && value < self.c) {
                return Err(DualError::Domain {
                    index,
                    value,
                    c: self.c,
                });
            }
        }
        Ok(())
    }

    fn gram(&self) -> DMatrix<f64> {
        let n = self.len();
        let mut g = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = dot(&self.aggregates[i], &self.aggregates[j]);
                g[(i, j)] = v;
                g[(j, i)] = v;
            }
        }
        g
    }
}

/// `v(lambda) = sum_n lambda_n a_n`.
pub fn potential_vector(lambda: &[f64], aggregates: &[Vec<f64>]) -> Result<Vec<f64>, DualError> {
    if lambda.len() != aggregates.len() {
        return Err(DualError::LengthMismatch {
            expected: aggregates.len(),
            found: lambda.len(),
        });
    }
    let dim = aggregates.first().map_or(0, Vec::len);
    let mut v = vec![0.0; dim];
    for (l, a) in lambda.iter().zip(aggregates) {
        axpy(*l, a, &mut v);
    }
    Ok(v)
}

/// `log Z = log Z_w + sum_n log Z_gamma,n` with `Z_w = exp(|v|^2 / 2)` and
/// `Z_gamma,n = c / (c - lambda_n) * exp(-lambda_n)`.
pub fn log_partition(lambda: &[f64], problem: &DualProblem) -> Result<f64, DualError> {
    problem.check_domain(lambda)?;
    let v = potential_vector(lambda, &problem.aggregates)?;
    let c = problem.c;
    let log_zw = 0.5 * norm_sq(&v);
    let log_zgamma: f64 = lambda.iter().map(|&l| (c / (c - l)).ln() - l).sum();
    Ok(log_zw + log_zgamma)
}

/// `J(lambda) = sum_n [lambda_n + log(1 - lambda_n / c)] - 1/2 |v(lambda)|^2`.
pub fn dual_objective(lambda: &[f64], problem: &DualProblem) -> Result<f64, DualError> {
    problem.check_domain(lambda)?;
    let v = potential_vector(lambda, &problem.aggregates)?;
    let c = problem.c;
    let barrier: f64 = lambda.iter().map(|&l| l + (-l / c).ln_1p()).sum();
    Ok(barrier - 0.5 * norm_sq(&v))
}

/// `dJ/dlambda_n = 1 - 1 / (c - lambda_n) - a_n . v(lambda)`.
pub fn dual_gradient(lambda: &[f64], problem: &DualProblem) -> Result<Vec<f64>, DualError> {
    problem.check_domain(lambda)?;
    let v = potential_vector(lambda, &problem.aggregates)?;
    let c = problem.c;
    Ok(lambda
        .iter()
        .zip(&problem.aggregates)
        .map(|(&l, a)| 1.0 - 1.0 / (c - l) - dot(a, &v))
        .collect())
}

/// Gradient projected onto the tangent cone of `[0, upper]^N`.
pub fn projected_gradient(lambda: &[f64], gradient: &[f64], upper: f64) -> Vec<f64> {
    lambda
        .iter()
        .zip(gradient)
        .map(|(&l, &g)| {
            if l <= 0.0 {
                g.max(0.0)
            } else if l >= upper {
                g.min(0.0)
            } else {
                g
            }
        })
        .collect()
}

/// Optimal multipliers and convergence diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualSolution {
    pub lambda: Vec<f64>,
    pub objective: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after every accepted iterate, starting point included.
    #[serde(skip)]
    pub trace: Vec<f64>,
}

impl DualSolution {
    /// First-order optimality on the box: zero multipliers have
    /// `dJ/dlambda <= tol`, interior ones `|dJ/dlambda| <= tol`.
    pub fn satisfies_kkt(&self, problem: &DualProblem, tol: f64) -> bool {
        let Ok(g) = dual_gradient(&self.lambda, problem) else {
            return false;
        };
        let upper = problem.upper_bound();
        self.lambda.iter().zip(&g).all(|(&l, &gi)| {
            if l <= 0.0 {
                gi <= tol
            } else if l >= upper {
                gi >= -tol
            } else {
                gi.abs() <= tol
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Exit threshold on the Euclidean norm of the projected gradient.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
        }
    }
}

/// Maximizes the dual on `[0, c - BOX_MARGIN c]^N`.
///
/// Projected Newton ascent with an active set: multipliers pinned at a bound
/// with the gradient pointing outward take a diagonally scaled gradient step,
/// the remaining ones a Newton step on the reduced Hessian
/// `-(G + diag(1 / (c - lambda)^2))`, where `G` is the Gram matrix of the
/// aggregates. The step length is chosen by Armijo backtracking along the
/// projection arc, so `J` never decreases between accepted iterates.
pub fn solve_dual(problem: &DualProblem, tol: f64, max_iter: usize) -> Result<DualSolution, DualError> {
    solve_dual_with(problem, &SolverOptions { tol, max_iter })
}

pub fn solve_dual_with(problem: &DualProblem, opts: &SolverOptions) -> Result<DualSolution, DualError> {
    if opts.tol.is_nan() || opts.tol <= 0.0 {
        return Err(DualError::InvalidParameter(format!("tol must be positive, got {}", opts.tol)));
    }
    let c = problem.c;
    if c <= 1.0 && problem.aggregates.iter().flatten().all(|&v| v == 0.0) {
        return Err(DualError::Degenerate { c });
    }
    let n = problem.len();
    let upper = problem.upper_bound();
    let gram = problem.gram();

    let start = 0.5f64.min(((c - 1.0) / 2.0).max(1e-3)).min(upper);
    let mut lambda = vec![start; n];
    let mut trace = vec![objective_from_gram(&lambda, &gram, c)];
    let mut iterations = 0;

    loop {
        let g = gradient_from_gram(&lambda, &gram, c);
        let pg = projected_gradient(&lambda, &g, upper);
        if norm(&pg) <= opts.tol || iterations >= opts.max_iter {
            break;
        }

        let step = newton_direction(&lambda, &g, &gram, c, upper);
        let accepted = line_search(&lambda, &g, &step, &gram, c, upper).or_else(|| {
            // Newton direction failed to make progress; fall back to a
            // plain projected gradient step.
            let plain = Direction {
                d: g.clone(),
                free: vec![false; n],
            };
            line_search(&lambda, &g, &plain, &gram, c, upper)
        });
        let Some(next) = accepted else {
            break;
        };
        lambda = next;
        trace.push(objective_from_gram(&lambda, &gram, c));
        iterations += 1;
    }

    let objective = dual_objective(&lambda, problem)?;
    let gradient = dual_gradient(&lambda, problem)?;
    let grad_norm = norm(&projected_gradient(&lambda, &gradient, upper));
    let solution = DualSolution {
        lambda,
        objective,
        grad_norm,
        iterations,
        converged: grad_norm <= opts.tol,
        trace,
    };
    if solution.converged {
        Ok(solution)
    } else {
        Err(DualError::NonConvergence(Box::new(solution)))
    }
}

struct Direction {
    d: Vec<f64>,
    // Free coordinates enter the Armijo test through `alpha * g . d`, active
    // ones through the actual projected displacement.
    free: Vec<bool>,
}

fn objective_from_gram(lambda: &[f64], gram: &DMatrix<f64>, c: f64) -> f64 {
    let l = DVector::from_column_slice(lambda);
    let quad = l.dot(&(gram * &l));
    let barrier: f64 = lambda.iter().map(|&x| x + (-x / c).ln_1p()).sum();
    barrier - 0.5 * quad
}

fn gradient_from_gram(lambda: &[f64], gram: &DMatrix<f64>, c: f64) -> Vec<f64> {
    let l = DVector::from_column_slice(lambda);
    let gl = gram * l;
    lambda
        .iter()
        .zip(gl.iter())
        .map(|(&x, &q)| 1.0 - 1.0 / (c - x) - q)
        .collect()
}

fn newton_direction(lambda: &[f64], g: &[f64], gram: &DMatrix<f64>, c: f64, upper: f64) -> Direction {
    let n = lambda.len();
    let curvature: Vec<f64> = lambda
        .iter()
        .enumerate()
        .map(|(i, &x)| gram[(i, i)] + 1.0 / ((c - x) * (c - x)))
        .collect();

    let width = lambda
        .iter()
        .zip(g)
        .map(|(&x, &gi)| {
            let moved = (x + gi).clamp(0.0, upper);
            (x - moved) * (x - moved)
        })
        .sum::<f64>()
        .sqrt();
    let eps = ACTIVE_EPS.min(width);

    let free: Vec<bool> = lambda
        .iter()
        .zip(g)
        .map(|(&x, &gi)| !((x <= eps && gi < 0.0) || (x >= upper - eps && gi > 0.0)))
        .collect();

    let mut d: Vec<f64> = g.iter().zip(&curvature).map(|(gi, h)| gi / h).collect();
    let idx: Vec<usize> = (0..n).filter(|&i| free[i]).collect();
    if !idx.is_empty() {
        let k = idx.len();
        let h = DMatrix::from_fn(k, k, |r, s| {
            let (i, j) = (idx[r], idx[s]);
            if i == j {
                curvature[i]
            } else {
                gram[(i, j)]
            }
        });
        let rhs = DVector::from_iterator(k, idx.iter().map(|&i| g[i]));
        if let Some(chol) = h.cholesky() {
            let sol = chol.solve(&rhs);
            for (r, &i) in idx.iter().enumerate() {
                d[i] = sol[r];
            }
        }
    }
    Direction { d, free }
}

/// `J(lambda + delta) - J(lambda)`, evaluated from the step itself so that it
/// stays accurate when the increment is far below the rounding level of `J`.
fn increment(lambda: &[f64], delta: &[f64], g_lambda: &DVector<f64>, gram: &DMatrix<f64>, c: f64) -> f64 {
    let dv = DVector::from_column_slice(delta);
    let barrier: f64 = lambda
        .iter()
        .zip(delta)
        .map(|(&x, &dx)| dx + (-dx / (c - x)).ln_1p())
        .sum();
    barrier - dv.dot(g_lambda) - 0.5 * dv.dot(&(gram * &dv))
}

fn line_search(
    lambda: &[f64],
    g: &[f64],
    dir: &Direction,
    gram: &DMatrix<f64>,
    c: f64,
    upper: f64,
) -> Option<Vec<f64>> {
    let q = gram * DVector::from_column_slice(lambda);
    let mut alpha = 1.0;
    let mut trial = vec![0.0; lambda.len()];
    let mut delta = vec![0.0; lambda.len()];
    while alpha >= MIN_STEP {
        let mut predicted = 0.0;
        for i in 0..lambda.len() {
            trial[i] = (lambda[i] + alpha * dir.d[i]).clamp(0.0, upper);
            delta[i] = trial[i] - lambda[i];
            predicted += if dir.free[i] {
                alpha * g[i] * dir.d[i]
            } else {
                g[i] * delta[i]
            };
        }
        let gain = increment(lambda, &delta, &q, gram, c);
        if gain.is_finite() && gain >= ARMIJO * predicted && delta.iter().any(|&x| x != 0.0) {
            return Some(trial);
        }
        alpha *= 0.5;
    }
    None
}

/// Gaussian posterior `N(mean, I)` over the index weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightPosterior {
    mean: Vec<f64>,
}

impl WeightPosterior {
    pub fn from_mean(mean: Vec<f64>) -> Self {
        Self { mean }
    }

    /// The prior `N(0, I)`.
    pub fn prior(dim: usize) -> Self {
        Self::from_mean(vec![0.0; dim])
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Posterior of a converged solution.
pub fn posterior(solution: &DualSolution, problem: &DualProblem) -> Result<WeightPosterior, DualError> {
    if !solution.converged {
        return Err(DualError::Unconverged);
    }
    posterior_unchecked(solution, problem)
}

/// Posterior without the convergence check.
pub fn posterior_unchecked(
    solution: &DualSolution,
    problem: &DualProblem,
) -> Result<WeightPosterior, DualError> {
    Ok(WeightPosterior::from_mean(potential_vector(
        &solution.lambda,
        &problem.aggregates,
    )?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRecord {
    pub objective: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Persisted UQ-CHI model: multipliers, posterior mean and diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UqchiModel {
    pub version: String,
    pub d: usize,
    pub n: usize,
    pub c: f64,
    pub lambda: Vec<f64>,
    pub v: Vec<f64>,
    pub convergence: ConvergenceRecord,
}

impl UqchiModel {
    pub fn new(problem: &DualProblem, solution: &DualSolution, posterior: &WeightPosterior) -> Self {
        Self {
            version: MODEL_VERSION.to_string(),
            d: problem.dim(),
            n: problem.len(),
            c: problem.c(),
            lambda: solution.lambda.clone(),
            v: posterior.mean().to_vec(),
            convergence: ConvergenceRecord {
                objective: solution.objective,
                grad_norm: solution.grad_norm,
                iterations: solution.iterations,
                converged: solution.converged,
            },
        }
    }

    pub fn posterior(&self) -> WeightPosterior {
        WeightPosterior::from_mean(self.v.clone())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DualError> {
        serde_json::to_writer_pretty(File::create(path)?, self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DualError> {
        let model: Self = serde_json::from_reader(File::open(path)?)?;
        if model.version != MODEL_VERSION {
            return Err(DualError::Version(model.version));
        }
        if model.v.len() != model.d {
            return Err(DualError::ModelDimension {
                expected: model.d,
                found: model.v.len(),
            });
        }
        Ok(model)
    }
}
