//! Numerical self-checks shared by `ranrc check` and the test suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::consensus::StepMatrices;
use crate::costs::{check_derivatives, BinomialDeviance, CostModel};
use crate::linalg::{solve_spd, Matrix, Vector};
use crate::nrc::{Network, NrcError};
use crate::sim::{
    assumption_monitors, run_on, ActivationPolicy, CostSpec, GraphSpec, LossModel, Problem,
    SimConfig, SimError,
};

/// Largest entry-wise gap between a network round and its matrix form,
/// plus the column-sum error of `M`. Performs the round on `net`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatrixFormReport {
    pub state_error: f64,
    pub column_sum_error: f64,
}

pub fn matrix_form_round(
    net: &mut Network,
    active: usize,
    reliable: &[usize],
) -> Result<MatrixFormReport, NrcError> {
    let before = net.augmented();
    let matrices = StepMatrices::build(net.graph(), active, reliable)?;
    net.broadcast_round(active, reliable)?;
    let (dg, dh) = net.increments();
    let predicted = matrices.apply(&before, &dg, &dh);
    Ok(MatrixFormReport {
        state_error: predicted.max_abs_diff(&net.augmented()),
        column_sum_error: matrices.column_sum_error(),
    })
}

/// `alpha(x_1..x_N) = (sum_l h_l(x_l))^{-1} sum_l g_l(x_l)` with exact
/// Hessians.
pub fn alpha_map(models: &[CostModel], xs: &[Vector]) -> Result<Vector, SimError> {
    let dim = xs.first().map_or(0, Vector::len);
    let mut g = Vector::zeros(dim);
    let mut h = Matrix::zeros(dim, dim);
    for (m, x) in models.iter().zip(xs) {
        let hess = m.hessian(x)?;
        g += &hess * x - m.gradient(x)?;
        h += hess;
    }
    solve_spd(&h, &g).ok_or(SimError::InvalidConfig("sum of Hessians is singular".into()))
}

/// Central-difference Jacobians `d alpha / d x_i` at `x_i = x` for all `i`.
pub fn alpha_jacobians(models: &[CostModel], x: &Vector, step: f64) -> Result<Vec<Matrix>, SimError> {
    let n = x.len();
    let base = vec![x.clone(); models.len()];
    let mut out = Vec::with_capacity(models.len());
    for i in 0..models.len() {
        let mut jac = Matrix::zeros(n, n);
        for k in 0..n {
            let mut plus = base.clone();
            let mut minus = base.clone();
            plus[i][k] += step;
            minus[i][k] -= step;
            let col = (alpha_map(models, &plus)? - alpha_map(models, &minus)?) / (2.0 * step);
            jac.set_column(k, &col);
        }
        out.push(jac);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Self {
            name,
            passed,
            detail,
        }
    }

    fn failed(name: &'static str, err: impl std::fmt::Display) -> Self {
        Self::new(name, false, format!("error: {err}"))
    }
}

/// Synthetic logistic-loss problem: `samples` points with `features`
/// Gaussian features spread over `nodes` nodes.
pub fn synthetic_deviance(
    nodes: usize,
    samples: usize,
    features: usize,
    gamma: f64,
    seed: u64,
) -> Vec<CostModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..features).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut rows = vec![Vec::new(); nodes];
    let mut labels = vec![Vec::new(); nodes];
    for s in 0..samples {
        let row: Vec<f64> = (0..features).map(|_| rng.random_range(-1.0..1.0)).collect();
        let score: f64 = row.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + 0.2;
        let label = if rng.random::<f64>() < 1.0 / (1.0 + (-2.0 * score).exp()) {
            1.0
        } else {
            -1.0
        };
        rows[s % nodes].push(row);
        labels[s % nodes].push(label);
    }
    rows.iter()
        .zip(&labels)
        .map(|(r, l)| {
            BinomialDeviance::with_width(r, l, features, gamma)
                .expect("consistent synthetic rows")
                .into()
        })
        .collect()
}

/// Runs the invariant suite on a small seeded random instance.
pub fn run_invariant_suite(seed: u64) -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    let graph = GraphSpec::Geometric {
        nodes: 6,
        radius: 0.6,
        seed,
    };
    let quad = CostSpec::Quadratic {
        dimension: 2,
        max_condition: 10.0,
        seed: seed.wrapping_add(1),
    };
    let problem = match Problem::build(&graph, &quad) {
        Ok(p) => p,
        Err(e) => return vec![CheckOutcome::failed("instance", e)],
    };

    let mut cfg = SimConfig::new(graph.clone(), quad.clone());
    cfg.seed = seed;
    cfg.epsilon = 0.05;
    cfg.loss = LossModel::Bernoulli(0.3);
    cfg.max_iters = 3000;
    out.push(match run_on(&problem, &cfg) {
        Ok(t) => {
            let worst = t
                .records
                .iter()
                .map(|r| r.mass_residual.max() / (1.0 + r.g_sum_norm))
                .fold(0.0, f64::max);
            CheckOutcome::new(
                "mass conservation",
                worst <= 1e-9,
                format!("max relative residual {worst:e}"),
            )
        }
        Err(e) => CheckOutcome::failed("mass conservation", e),
    });

    out.push(match matrix_form_suite(&problem, seed) {
        Ok(r) => CheckOutcome::new(
            "matrix form",
            r.state_error <= 1e-12 && r.column_sum_error <= 1e-12,
            format!(
                "state error {:e}, column-sum error {:e}",
                r.state_error, r.column_sum_error
            ),
        ),
        Err(e) => CheckOutcome::failed("matrix form", e),
    });

    out.push(match (run_on(&problem, &cfg), run_on(&problem, &cfg)) {
        (Ok(a), Ok(b)) => CheckOutcome::new(
            "determinism",
            a.to_csv() == b.to_csv(),
            format!("{} rows compared", a.records.len()),
        ),
        (Err(e), _) | (_, Err(e)) => CheckOutcome::failed("determinism", e),
    });

    let mut conv = cfg.clone();
    conv.loss = LossModel::Bernoulli(0.1);
    conv.max_iters = 20_000;
    conv.stop.mse_below = Some(1e-12);
    out.push(match run_on(&problem, &conv) {
        Ok(t) => CheckOutcome::new(
            "quadratic convergence",
            t.final_mse() < 1e-10,
            format!("final MSE {:e} after {} iterations", t.final_mse(), t.records.len()),
        ),
        Err(e) => CheckOutcome::failed("quadratic convergence", e),
    });

    let mut rr = cfg.clone();
    rr.activation = ActivationPolicy::RoundRobin;
    rr.loss = LossModel::Burst(3);
    rr.max_iters = 600;
    out.push(match run_on(&problem, &rr) {
        Ok(t) => {
            let m = assumption_monitors(&t);
            CheckOutcome::new(
                "monitors",
                m.tau_hat == 6 && m.l_hat <= 3,
                format!("tau_hat {} (expect 6), L_hat {} (cap 3)", m.tau_hat, m.l_hat),
            )
        }
        Err(e) => CheckOutcome::failed("monitors", e),
    });

    let models = synthetic_deviance(4, 80, 3, 0.1, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    let mut worst = 0.0f64;
    let mut deriv_err = None;
    for _ in 0..20 {
        let x = Vector::from_fn(4, |_, _| rng.random_range(-2.0..2.0));
        for m in &models {
            match check_derivatives(m, &x, 1e-5) {
                Ok(r) => worst = worst.max(r.max_grad_err).max(r.max_hess_err),
                Err(e) => deriv_err = Some(e),
            }
        }
    }
    out.push(match deriv_err {
        None => CheckOutcome::new(
            "derivatives",
            worst <= 1e-5,
            format!("max relative error {worst:e}"),
        ),
        Some(e) => CheckOutcome::failed("derivatives", e),
    });

    out.push(match stationarity(&models) {
        Ok(norm) => CheckOutcome::new(
            "stationarity at optimum",
            norm <= 1e-6,
            format!("max Jacobian norm {norm:e}"),
        ),
        Err(e) => CheckOutcome::failed("stationarity at optimum", e),
    });
    out
}

fn matrix_form_suite(problem: &Problem, seed: u64) -> Result<MatrixFormReport, SimError> {
    let params = crate::nrc::NrcParams::new(0.2, 1e-4, Default::default())?;
    let n = problem.graph.node_count();
    let mut net = Network::new(
        problem.graph.clone(),
        problem.models.clone(),
        Vector::zeros(problem.dimension()),
        params,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(3));
    let mut worst = MatrixFormReport {
        state_error: 0.0,
        column_sum_error: 0.0,
    };
    for _ in 0..200 {
        let active = rng.random_range(0..n);
        let reliable: Vec<usize> = problem
            .graph
            .out_neighbors(active)
            .iter()
            .copied()
            .filter(|_| rng.random::<f64>() < 0.6)
            .collect();
        let r = matrix_form_round(&mut net, active, &reliable)?;
        worst.state_error = worst.state_error.max(r.state_error);
        worst.column_sum_error = worst.column_sum_error.max(r.column_sum_error);
    }
    Ok(worst)
}

/// Largest Frobenius norm of `d alpha / d x_i` at the centralized optimum.
pub fn stationarity(models: &[CostModel]) -> Result<f64, SimError> {
    let dim = models.first().map_or(0, CostModel::dimension);
    let x_star = crate::sim::centralized_newton(models, &Vector::zeros(dim), 1e-10, 100)?;
    Ok(alpha_jacobians(models, &x_star, 1e-5)?
        .iter()
        .map(Matrix::norm)
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costs::Quadratic;

    #[test]
    fn alpha_is_identity_on_consensus_for_quadratics() {
        // g = A x - A (x - c) = A c, so alpha is the weighted mean of the
        // centers regardless of x.
        let q = |a: f64, c: f64| -> CostModel {
            Quadratic::new(Matrix::from_element(1, 1, a), Vector::from_element(1, c))
                .unwrap()
                .into()
        };
        let models = vec![q(1.0, 1.0), q(3.0, 5.0)];
        let xs = vec![Vector::from_element(1, -7.0), Vector::from_element(1, 2.0)];
        let a = alpha_map(&models, &xs).unwrap();
        assert!((a[0] - 4.0).abs() < 1e-15);
        let jac = alpha_jacobians(&models, &Vector::from_element(1, 0.3), 1e-5).unwrap();
        assert!(jac.iter().all(|j| j.amax() < 1e-9));
    }

    #[test]
    fn alpha_jacobian_vanishes_only_at_optimum() {
        let models = synthetic_deviance(3, 60, 2, 0.1, 5);
        assert!(stationarity(&models).unwrap() < 1e-6);
        let off = Vector::from_vec(vec![1.0, -1.0, 0.5]);
        let far = alpha_jacobians(&models, &off, 1e-5).unwrap();
        assert!(far.iter().map(Matrix::norm).fold(0.0, f64::max) > 1e-3);
    }

    #[test]
    fn suite_passes_on_small_instances() {
        for seed in [0, 1] {
            for outcome in run_invariant_suite(seed) {
                assert!(outcome.passed, "seed {seed}: {} ({})", outcome.name, outcome.detail);
            }
        }
    }
}
