// Solve a small dual problem and inspect the optimality certificate.

use std::error::Error;

use uqchi::med::{dual_gradient, log_partition, posterior, solve_dual, DualProblem, DEFAULT_MAX_ITER, DEFAULT_TOL};

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let aggregates = vec![
        vec![1.0, 0.2],
        vec![0.8, -0.1],
        vec![-0.3, 0.9],
        vec![0.0, 0.0],
    ];
    for c in [1.5, 5.0, 100.0] {
        let problem = DualProblem::new(aggregates.clone(), c)?;
        let sol = solve_dual(&problem, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
        let grad = dual_gradient(&sol.lambda, &problem)?;
        let log_z = log_partition(&sol.lambda, &problem)?;
        println!(
            "c = {c:>5}: lambda = {:.4?}, J = {:.6}, -log Z = {:.6}, iterations = {}",
            sol.lambda, sol.objective, -log_z, sol.iterations
        );
        let grad: Vec<String> = grad.iter().map(|g| format!("{g:.1e}")).collect();
        println!("          gradient = {grad:?}, kkt = {}", sol.satisfies_kkt(&problem, DEFAULT_TOL));
        let post = posterior(&sol, &problem)?;
        println!("          posterior mean v = {:.4?}", post.mean());
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
