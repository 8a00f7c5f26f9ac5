//! Acceptance gate. Every criterion prints one PASS/FAIL line to stderr,
//! bypassing the test harness capture, then asserts.

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use uqchi::harness::{run_pipeline, DataSource, ExperimentSpec, Method, ResultTable};
use uqchi::med::{
    dual_gradient, dual_objective, log_partition, potential_vector, solve_dual, DualProblem, DEFAULT_MAX_ITER,
    DEFAULT_TOL,
};
use uqchi::simulator::SimConfig;

fn report(id: u32, name: &str, pass: bool, detail: String) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr();
    let _ = writeln!(err, "acceptance criterion {id:>2} [{verdict}] {name}: {detail}");
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
}

fn random_problem(rng: &mut ChaCha8Rng, n: usize, d: usize, c: f64) -> DualProblem {
    let aggs = (0..n)
        .map(|_| (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    DualProblem::new(aggs, c).unwrap()
}

fn random_lambda(rng: &mut ChaCha8Rng, n: usize, c: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0.0..0.9 * c)).collect()
}

#[test]
fn criterion_01_gradient_matches_finite_differences() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for k in 0..100 {
        let c = if k % 2 == 0 { 1.5 } else { 5.0 };
        let n = rng.random_range(1..=10);
        let d = rng.random_range(1..=5);
        let p = random_problem(&mut rng, n, d, c);
        let lambda = random_lambda(&mut rng, n, c);
        let g = dual_gradient(&lambda, &p).unwrap();
        for i in 0..n {
            let h = 1e-5;
            let mut up = lambda.clone();
            let mut dn = lambda.clone();
            up[i] += h;
            dn[i] -= h;
            if dn[i] < 0.0 {
                dn[i] = 0.0;
                up[i] = 2.0 * h;
            }
            let fd = (dual_objective(&up, &p).unwrap() - dual_objective(&dn, &p).unwrap()) / (up[i] - dn[i]);
            // one-sided shift at zero moves the evaluation point; correct with the curvature oracle
            let center = 0.5 * (up[i] + dn[i]);
            let fd = if center != lambda[i] {
                let mut at = lambda.clone();
                at[i] = center;
                let shift = dual_gradient(&at, &p).unwrap()[i] - g[i];
                fd - shift
            } else {
                fd
            };
            worst = worst.max((fd - g[i]).abs() / g[i].abs().max(1.0));
        }
    }
    let elapsed = start.elapsed();
    report(
        1,
        "dual gradient vs central differences",
        worst < 1e-6 && elapsed < Duration::from_secs(10),
        format!("max relative error {worst:.2e}, {elapsed:.2?}"),
    );
}

/// Dual objective of a two-subject problem from its Gram entries.
struct TwoSubject {
    g11: f64,
    g12: f64,
    g22: f64,
    c: f64,
}

impl TwoSubject {
    fn barrier(&self, x: f64) -> f64 {
        x + (1.0 - x / self.c).ln()
    }

    fn value(&self, x: f64, y: f64) -> f64 {
        self.barrier(x) + self.barrier(y) - 0.5 * (self.g11 * x * x + 2.0 * self.g12 * x * y + self.g22 * y * y)
    }
}

fn golden_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = b - r * (b - a);
    let mut x2 = a + r * (b - a);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..200 {
        if f1 < f2 {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + r * (b - a);
            f2 = f(x2);
        } else {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - r * (b - a);
            f1 = f(x1);
        }
    }
    // the endpoints can beat the interior for boundary maxima
    [a, b, 0.5 * (a + b)]
        .into_iter()
        .max_by(|p, q| f(*p).total_cmp(&f(*q)))
        .unwrap()
}

#[test]
fn criterion_02_solver_matches_grid_search() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut worst_obj, mut worst_lambda): (f64, f64) = (0.0, 0.0);
    for k in 0..50 {
        let c = if k % 2 == 0 { 1.5 } else { 5.0 };
        let d = rng.random_range(1..=3);
        let p = random_problem(&mut rng, 2, d, c);
        let a = p.aggregates();
        let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(x, y)| x * y).sum::<f64>();
        let f = TwoSubject {
            g11: dot(&a[0], &a[0]),
            g12: dot(&a[0], &a[1]),
            g22: dot(&a[1], &a[1]),
            c,
        };
        let upper = p.upper_bound();
        let step = 1e-3;
        let grid: Vec<f64> = (0..)
            .map(|i| i as f64 * step)
            .take_while(|&x| x < upper)
            .chain(std::iter::once(upper))
            .collect();
        let barrier: Vec<f64> = grid.iter().map(|&x| f.barrier(x)).collect();
        let (mut bx, mut by, mut best) = (0.0, 0.0, f64::NEG_INFINITY);
        for (i, &x) in grid.iter().enumerate() {
            let row = barrier[i] - 0.5 * f.g11 * x * x;
            let cross = f.g12 * x;
            for (j, &y) in grid.iter().enumerate() {
                let v = row + barrier[j] - y * (cross + 0.5 * f.g22 * y);
                if v > best {
                    (bx, by, best) = (x, y, v);
                }
            }
        }
        // cyclic coordinate refinement around the grid optimum
        for _ in 0..100 {
            bx = golden_max(|x| f.value(x, by), (bx - 2.0 * step).max(0.0), (bx + 2.0 * step).min(upper));
            by = golden_max(|y| f.value(bx, y), (by - 2.0 * step).max(0.0), (by + 2.0 * step).min(upper));
        }
        let oracle = f.value(bx, by);
        let sol = solve_dual(&p, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        worst_obj = worst_obj.max((sol.objective - oracle).abs());
        worst_lambda = worst_lambda.max((sol.lambda[0] - bx).abs()).max((sol.lambda[1] - by).abs());
    }
    let elapsed = start.elapsed();
    report(
        2,
        "N = 2 solver vs grid search",
        worst_obj <= 1e-6 && worst_lambda <= 1e-3 && elapsed < Duration::from_secs(60),
        format!("max |dJ| {worst_obj:.2e}, max |dlambda| {worst_lambda:.2e}, {elapsed:.2?}"),
    );
}

#[test]
fn criterion_03_closed_form_fixtures() {
    let p = DualProblem::new(vec![vec![1.0]], 2.0).unwrap();
    let sol = solve_dual(&p, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
    // stationarity 1 - 1/(2 - l) - l = 0  <=>  l^2 - 3l + 1 = 0
    let root = (3.0 - 5f64.sqrt()) / 2.0;
    let e1 = (sol.lambda[0] - root).abs();

    let p = DualProblem::new(vec![vec![0.0, 0.0]; 3], 3.0).unwrap();
    let sol = solve_dual(&p, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
    let e2 = sol.lambda.iter().map(|l| (l - 2.0).abs()).fold(0.0, f64::max);
    report(
        3,
        "closed-form fixtures",
        e1 <= 1e-8 && e2 <= 1e-8,
        format!("|lambda - (3 - sqrt 5)/2| = {e1:.2e}, |lambda - 2| = {e2:.2e}"),
    );
}

#[test]
fn criterion_04_monte_carlo_log_partition() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let d = rng.random_range(1..=3);
        let dir: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let len = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        let radius = rng.random_range(0.5..1.5);
        let v: Vec<f64> = dir.iter().map(|x| x * radius / len).collect();

        let draws = 1_000_000;
        let mean_exp = (0..draws)
            .map(|_| {
                let wv: f64 = v.iter().map(|vi| vi * rng.sample::<f64, _>(StandardNormal)).sum();
                wv.exp()
            })
            .sum::<f64>()
            / draws as f64;
        let mc = mean_exp.ln();

        // library route: one subject with a = v at lambda = 1
        let p = DualProblem::new(vec![v.clone()], 3.0).unwrap();
        let pv = potential_vector(&[1.0], p.aggregates()).unwrap();
        let closed = 0.5 * pv.iter().map(|x| x * x).sum::<f64>();
        let gamma_part = (3.0f64 / 2.0).ln() - 1.0;
        let lib = log_partition(&[1.0], &p).unwrap() - gamma_part;
        assert!((lib - closed).abs() < 1e-12);
        worst = worst.max((mc - closed).abs() / closed);
    }
    let elapsed = start.elapsed();
    report(
        4,
        "Monte Carlo log E[exp(w.v)] vs |v|^2 / 2",
        worst < 0.02 && elapsed < Duration::from_secs(60),
        format!("max relative error {:.3}%, {elapsed:.2?}", 100.0 * worst),
    );
}

#[test]
fn criterion_05_identity_concavity_kkt() {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut identity: f64 = 0.0;
    let mut chord: f64 = f64::INFINITY;
    for k in 0..1000 {
        let c = [1.5, 3.0, 5.0, 20.0][k % 4];
        let n = rng.random_range(1..=10);
        let d = rng.random_range(1..=5);
        let p = random_problem(&mut rng, n, d, c);
        let l1 = random_lambda(&mut rng, n, c);
        let l2 = random_lambda(&mut rng, n, c);
        let j1 = dual_objective(&l1, &p).unwrap();
        identity = identity.max((j1 + log_partition(&l1, &p).unwrap()).abs());
        let t: f64 = rng.random();
        let mid: Vec<f64> = l1.iter().zip(&l2).map(|(a, b)| t * a + (1.0 - t) * b).collect();
        let gap = dual_objective(&mid, &p).unwrap() - (t * j1 + (1.0 - t) * dual_objective(&l2, &p).unwrap());
        chord = chord.min(gap);
    }
    let mut kkt_failures = 0;
    let solves = 300;
    for k in 0..solves {
        let c = [1.5, 3.0, 5.0, 10.0, 20.0, 100.0][k % 6];
        let n = rng.random_range(1..=40);
        let d = rng.random_range(1..=8);
        let p = random_problem(&mut rng, n, d, c);
        let sol = solve_dual(&p, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        kkt_failures += usize::from(!sol.satisfies_kkt(&p, DEFAULT_TOL));
    }
    report(
        5,
        "J = -log Z, concavity, KKT at exit",
        identity <= 1e-12 && chord >= -1e-9 && kkt_failures == 0,
        format!(
            "max |J + log Z| {identity:.2e}, min chord gap {chord:.2e}, KKT failures {kkt_failures}/{solves}"
        ),
    );
}

fn default_grid(label_ratios: Vec<f64>, methods: Vec<Method>) -> ExperimentSpec {
    ExperimentSpec {
        source: DataSource::Simulate(SimConfig::default()),
        c_grid: vec![1.5, 100.0],
        label_ratios,
        train_ratios: vec![0.7],
        rejection_rates: vec![0.0, 0.2, 0.4, 0.6],
        n_seeds: 20,
        methods,
        ..ExperimentSpec::default()
    }
}

fn mean_acc(table: &ResultTable, method: Method, label: f64, rate: f64, c: Option<f64>) -> f64 {
    let row = table.find(method, label, 0.7, rate, c).expect("row present");
    assert_eq!(row.n_failed, 0);
    assert_eq!(row.n_seeds, 20);
    row.mean_accuracy.unwrap()
}

#[test]
fn criterion_06_rejection_trend() {
    let start = Instant::now();
    let out = run_pipeline(&default_grid(vec![0.2], vec![Method::Uqchi])).unwrap();
    let acc: Vec<f64> = [0.0, 0.2, 0.4, 0.6]
        .iter()
        .map(|&r| mean_acc(&out.table, Method::Uqchi, 0.2, r, Some(1.5)))
        .collect();
    let elapsed = start.elapsed();
    report(
        6,
        "accuracy non-decreasing in rejection rate",
        acc.windows(2).all(|w| w[1] >= w[0] - 0.005) && elapsed < Duration::from_secs(180),
        format!("rates 0/0.2/0.4/0.6 -> {acc:.4?}, {elapsed:.2?}"),
    );
}

#[test]
fn criterion_07_c_sweep_trend() {
    let start = Instant::now();
    let out = run_pipeline(&default_grid(vec![0.2], vec![Method::Uqchi])).unwrap();
    let small = mean_acc(&out.table, Method::Uqchi, 0.2, 0.0, Some(1.5));
    let large = mean_acc(&out.table, Method::Uqchi, 0.2, 0.0, Some(100.0));
    let elapsed = start.elapsed();
    report(
        7,
        "accuracy at c = 1.5 >= at c = 100",
        small >= large && elapsed < Duration::from_secs(180),
        format!("c = 1.5 -> {small:.4}, c = 100 -> {large:.4}, {elapsed:.2?}"),
    );
}

#[test]
fn criterion_08_label_ratio_trend() {
    let out = run_pipeline(&default_grid(vec![0.1, 0.2, 0.5], vec![Method::Uqchi])).unwrap();
    let acc: Vec<f64> = [0.1, 0.2, 0.5]
        .iter()
        .map(|&l| mean_acc(&out.table, Method::Uqchi, l, 0.0, Some(1.5)))
        .collect();
    report(
        8,
        "accuracy non-increasing in unlabeled fraction",
        acc.windows(2).all(|w| w[1] <= w[0] + 0.01),
        format!("unlabeled 0.1/0.2/0.5 -> {acc:.4?}"),
    );
}

#[test]
fn criterion_09_uqchi_with_rejection_beats_chi() {
    let start = Instant::now();
    let mut spec = default_grid(vec![0.2], vec![Method::Uqchi, Method::Chi]);
    spec.c_grid = vec![1.5];
    let out = run_pipeline(&spec).unwrap();
    let uq = mean_acc(&out.table, Method::Uqchi, 0.2, 0.6, Some(1.5));
    let chi = mean_acc(&out.table, Method::Chi, 0.2, 0.0, None);
    report(
        9,
        "UQ-CHI at rejection 0.6 >= CHI",
        uq >= chi,
        format!("UQ-CHI {uq:.4}, CHI (10-fold tuned) {chi:.4}, {:.2?}", start.elapsed()),
    );
}

fn sweep(config: &Path, out: &Path) -> Vec<u8> {
    let run = Command::new(env!("CARGO_BIN_EXE_uqchi"))
        .args(["sweep", "--config", config.to_str().unwrap(), "--out-dir", out.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    std::fs::read(out.join("results.csv")).unwrap()
}

#[test]
fn criterion_10_sweep_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = default_grid(vec![0.2, 0.5], vec![Method::Uqchi, Method::Chi]);
    spec.n_seeds = 2;
    spec.c_grid = vec![1.5, 5.0, 100.0];
    spec.chi.grid = vec![0.1, 1.0];
    let config = dir.path().join("spec.json");
    spec.save(&config).unwrap();
    let first = sweep(&config, &dir.path().join("a"));
    let second = sweep(&config, &dir.path().join("b"));
    let log_a = std::fs::read(dir.path().join("a/seeds.jsonl")).unwrap();
    let log_b = std::fs::read(dir.path().join("b/seeds.jsonl")).unwrap();
    report(
        10,
        "sweep output byte-identical across runs",
        first == second && log_a == log_b && !first.is_empty(),
        format!("results.csv {} bytes, seeds.jsonl {} bytes", first.len(), log_a.len()),
    );
}
