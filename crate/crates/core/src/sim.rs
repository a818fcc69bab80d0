//! Seeded discrete-event simulation of the asymmetric broadcast protocol.
//!
//! One iteration activates a single node; the loss model then decides which
//! of its out-links deliver. Everything random flows from
//! [`SimConfig::seed`], so a [`Trace`] is a pure function of its config.

use std::fmt::Write as _;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::consensus::MassResidual;
use crate::costs::{CostError, CostModel, DescentVariant, Quadratic};
use crate::graph::{generate_connected_geometric, DirectedGraph, GraphError};
use crate::ingest::{self, IngestError};
use crate::linalg::{solve_spd, Matrix, Vector};
use crate::nrc::{Network, NrcError, NrcParams};

/// Geometric graphs are resampled at most this many times.
pub const MAX_GRAPH_ATTEMPTS: usize = 10_000;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Nrc(#[from] NrcError),
    #[error("communication graph is not strongly connected")]
    Disconnected,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("newton oracle did not converge in {iterations} steps (gradient norm {gradient_norm:e})")]
    NoConvergence { iterations: usize, gradient_norm: f64 },
    #[error("diverged at iteration {iteration}: MSE {mse:e}")]
    Diverged {
        iteration: usize,
        mse: f64,
        trace: Box<Trace>,
    },
    #[error("need at least {needed} samples for a rate estimate, found {found}")]
    InsufficientSamples { needed: usize, found: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum GraphSpec {
    /// Strongly connected random geometric graph in the unit square.
    Geometric { nodes: usize, radius: f64, seed: u64 },
    Fixed(DirectedGraph),
}

#[derive(Debug, Clone, PartialEq)]
pub enum CostSpec {
    /// One random quadratic per node with condition number at most
    /// `max_condition`.
    Quadratic {
        dimension: usize,
        max_condition: f64,
        seed: u64,
    },
    /// Logistic loss on spambase samples spread across the nodes.
    Spambase {
        path: PathBuf,
        features: Vec<usize>,
        gamma: f64,
        partition_seed: u64,
        balanced: bool,
        standardize: bool,
    },
    Explicit(Vec<CostModel>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ActivationPolicy {
    /// Active node drawn uniformly at every iteration.
    #[default]
    Uniform,
    /// Node `k mod N` at iteration `k`.
    RoundRobin,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossModel {
    /// Each (edge, transmission) fails independently with probability `p`.
    Bernoulli(f64),
    /// Every edge fails exactly `L` times in a row and then delivers once,
    /// with a seeded per-edge phase.
    Burst(usize),
}

impl Default for LossModel {
    fn default() -> Self {
        LossModel::Bernoulli(0.0)
    }
}

/// Optional early exits, checked after each iteration.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StopRule {
    pub mse_below: Option<f64>,
    pub consensus_below: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub graph: GraphSpec,
    pub cost: CostSpec,
    pub epsilon: f64,
    pub c: f64,
    pub variant: DescentVariant,
    pub activation: ActivationPolicy,
    pub loss: LossModel,
    pub seed: u64,
    pub max_iters: usize,
    /// Common starting point; zeros when absent.
    pub x0: Option<Vector>,
    /// Step size drops to zero from this iteration on.
    pub freeze_after: Option<usize>,
    pub stop: StopRule,
    /// Store every node's estimate each `stride` iterations.
    pub snapshot_stride: Option<usize>,
    pub divergence_threshold: f64,
}

impl SimConfig {
    pub fn new(graph: GraphSpec, cost: CostSpec) -> Self {
        Self {
            graph,
            cost,
            epsilon: 0.01,
            c: 1e-4,
            variant: DescentVariant::NewtonRaphson,
            activation: ActivationPolicy::Uniform,
            loss: LossModel::Bernoulli(0.0),
            seed: 0,
            max_iters: 2000,
            x0: None,
            freeze_after: None,
            stop: StopRule::default(),
            snapshot_stride: None,
            divergence_threshold: 1e12,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidConfig(m));
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if !(self.c > 0.0) {
            return bad(format!("c must be positive, got {}", self.c));
        }
        if let LossModel::Bernoulli(p) = self.loss {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("loss probability must be in [0, 1], got {p}"));
            }
        }
        if self.max_iters < 1 {
            return bad("max_iters must be at least 1".into());
        }
        if self.snapshot_stride == Some(0) {
            return bad("snapshot stride must be positive".into());
        }
        Ok(())
    }
}

/// Graph, private costs and the centralized optimum of their sum.
#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    pub graph: DirectedGraph,
    pub models: Vec<CostModel>,
    pub x_star: Vector,
}

impl Problem {
    pub fn build(graph: &GraphSpec, cost: &CostSpec) -> Result<Self, SimError> {
        let graph = match graph {
            GraphSpec::Geometric {
                nodes,
                radius,
                seed,
            } => generate_connected_geometric(*nodes, *radius, *seed, MAX_GRAPH_ATTEMPTS)?,
            GraphSpec::Fixed(g) => g.clone(),
        };
        if !graph.is_strongly_connected() {
            return Err(SimError::Disconnected);
        }
        let n = graph.node_count();
        let models = match cost {
            CostSpec::Quadratic {
                dimension,
                max_condition,
                seed,
            } => {
                if *dimension == 0 || !(*max_condition >= 1.0) {
                    return Err(SimError::InvalidConfig(
                        "quadratic costs need dimension >= 1 and condition >= 1".into(),
                    ));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                (0..n)
                    .map(|_| Quadratic::random(*dimension, *max_condition, &mut rng).into())
                    .collect()
            }
            CostSpec::Spambase {
                path,
                features,
                gamma,
                partition_seed,
                balanced,
                standardize,
            } => {
                let mut data = ingest::load_spambase(path, features)?;
                if *standardize {
                    data = data.standardized();
                }
                let parts = if *balanced {
                    ingest::partition_balanced(data.len(), n, *partition_seed)?
                } else {
                    ingest::partition_dataset(&data, n, *partition_seed)?
                };
                data.node_models(&parts, *gamma)?
            }
            CostSpec::Explicit(models) => {
                if models.len() != n {
                    return Err(SimError::InvalidConfig(format!(
                        "{} cost models for {n} nodes",
                        models.len()
                    )));
                }
                models.clone()
            }
        };
        Self::from_parts(graph, models)
    }

    pub fn from_parts(graph: DirectedGraph, models: Vec<CostModel>) -> Result<Self, SimError> {
        let dim = models.first().map(CostModel::dimension).unwrap_or(0);
        if let Some(bad) = models.iter().find(|m| m.dimension() != dim) {
            return Err(SimError::DimensionMismatch {
                expected: dim,
                found: bad.dimension(),
            });
        }
        let start = Vector::zeros(dim);
        let scale = total_gradient(&models, &start)?.norm().max(1.0);
        let x_star = centralized_newton(&models, &start, 1e-10 * scale, 100)?;
        Ok(Self {
            graph,
            models,
            x_star,
        })
    }

    pub fn dimension(&self) -> usize {
        self.x_star.len()
    }
}

fn total_gradient(models: &[CostModel], x: &Vector) -> Result<Vector, SimError> {
    let mut g = Vector::zeros(x.len());
    for m in models {
        g += m.gradient(x)?;
    }
    Ok(g)
}

/// Pure Newton iteration on the sum of the local costs. Stops as soon as the
/// total gradient norm is at most `tol`.
pub fn centralized_newton(
    models: &[CostModel],
    x0: &Vector,
    tol: f64,
    max_iter: usize,
) -> Result<Vector, SimError> {
    let dim = x0.len();
    let mut x = x0.clone();
    for step in 0..=max_iter {
        let grad = total_gradient(models, &x)?;
        let norm = grad.norm();
        if norm <= tol {
            return Ok(x);
        }
        if step == max_iter || !norm.is_finite() {
            return Err(SimError::NoConvergence {
                iterations: step,
                gradient_norm: norm,
            });
        }
        let mut hess = Matrix::zeros(dim, dim);
        for m in models {
            hess += m.hessian(&x)?;
        }
        let dx = solve_spd(&hess, &grad).ok_or(SimError::NoConvergence {
            iterations: step,
            gradient_norm: norm,
        })?;
        x -= dx;
    }
    unreachable!("loop returns on its last step")
}

/// `1/N sum_i |x_i - x*|^2`.
pub fn mse<'a>(xs: impl IntoIterator<Item = &'a Vector>, x_star: &Vector) -> Result<f64, SimError> {
    let mut total = 0.0;
    let mut count = 0usize;
    for x in xs {
        if x.len() != x_star.len() {
            return Err(SimError::DimensionMismatch {
                expected: x_star.len(),
                found: x.len(),
            });
        }
        total += (x - x_star).norm_squared();
        count += 1;
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub k: usize,
    pub active: usize,
    pub reliable: Vec<usize>,
    pub mse: f64,
    pub mass_residual: MassResidual,
    pub g_sum_norm: f64,
    pub h_sum_norm: f64,
    /// `max_i |z_i^{-1} y_i - (sum h)^{-1} sum g|`.
    pub consensus_error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Outcome {
    /// Ran all `max_iters` iterations.
    Completed,
    /// A stop rule fired after iteration `k`.
    Stopped { k: usize },
    /// MSE exceeded the divergence threshold at iteration `k`.
    Diverged { k: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub seed: u64,
    pub out_neighbors: Vec<Vec<usize>>,
    pub x_star: Vector,
    pub initial_mse: f64,
    pub records: Vec<Record>,
    pub snapshots: Vec<(usize, Vec<Vector>)>,
    pub outcome: Outcome,
}

/// Empirical persistence and loss bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Monitors {
    /// Smallest window length in which every node was active at least once.
    pub tau_hat: usize,
    /// Longest run of consecutive failed transmissions on any edge.
    pub l_hat: usize,
    /// Some edge whose source transmitted never delivered.
    pub unbounded_loss: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub iterations: usize,
    pub final_mse: f64,
    pub final_consensus_error: f64,
    pub max_mass_residual: MassResidual,
    pub tail_slope: Option<f64>,
    pub monitors: Monitors,
    pub outcome: Outcome,
}

pub const TRACE_CSV_HEADER: &str = "iteration,active_node,mse,mass_residual_y,mass_residual_z";

impl Trace {
    pub fn node_count(&self) -> usize {
        self.out_neighbors.len()
    }

    pub fn final_mse(&self) -> f64 {
        self.records.last().map_or(self.initial_mse, |r| r.mse)
    }

    pub fn mse_series(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.mse).collect()
    }

    /// First iteration whose MSE is below `threshold`.
    pub fn first_below(&self, threshold: f64) -> Option<usize> {
        self.records.iter().find(|r| r.mse < threshold).map(|r| r.k)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::with_capacity(64 * (self.records.len() + 1));
        s.push_str(TRACE_CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{:e},{:e},{:e}",
                r.k, r.active, r.mse, r.mass_residual.y, r.mass_residual.z
            );
        }
        s
    }

    /// `k,x_0[0],...,x_{N-1}[n-1]` for every stored snapshot.
    pub fn snapshots_csv(&self) -> String {
        let mut s = String::new();
        for (k, xs) in &self.snapshots {
            let _ = write!(s, "{k}");
            for v in xs.iter().flat_map(|x| x.iter()) {
                let _ = write!(s, ",{v:e}");
            }
            s.push('\n');
        }
        s
    }

    pub fn summary(&self, tail_fraction: f64) -> Summary {
        let mut max_res = MassResidual::default();
        for r in &self.records {
            max_res.y = max_res.y.max(r.mass_residual.y);
            max_res.z = max_res.z.max(r.mass_residual.z);
        }
        Summary {
            iterations: self.records.len(),
            final_mse: self.final_mse(),
            final_consensus_error: self.records.last().map_or(f64::NAN, |r| r.consensus_error),
            max_mass_residual: max_res,
            tail_slope: estimate_rate(self, tail_fraction).ok(),
            monitors: assumption_monitors(self),
            outcome: self.outcome,
        }
    }
}

impl Summary {
    /// `key = value` lines.
    pub fn to_text(&self, seed: u64) -> String {
        let outcome = match self.outcome {
            Outcome::Completed => "completed".to_string(),
            Outcome::Stopped { k } => format!("stopped@{k}"),
            Outcome::Diverged { k } => format!("diverged@{k}"),
        };
        let slope = self
            .tail_slope
            .map_or_else(|| "nan".to_string(), |s| format!("{s:e}"));
        format!(
            "seed = {seed}\n\
             iterations = {}\n\
             final_mse = {:e}\n\
             final_consensus_error = {:e}\n\
             max_mass_residual_y = {:e}\n\
             max_mass_residual_z = {:e}\n\
             tail_slope = {slope}\n\
             tau_hat = {}\n\
             l_hat = {}\n\
             unbounded_loss = {}\n\
             outcome = {outcome}\n",
            self.iterations,
            self.final_mse,
            self.final_consensus_error,
            self.max_mass_residual.y,
            self.max_mass_residual.z,
            self.monitors.tau_hat,
            self.monitors.l_hat,
            self.monitors.unbounded_loss,
        )
    }
}

/// `tau_hat` and `L_hat` from the activation and delivery history.
pub fn assumption_monitors(t: &Trace) -> Monitors {
    let n = t.node_count();
    let total = t.records.len();
    let mut last: Vec<Option<usize>> = vec![None; n];
    let mut tau = 0usize;
    for r in &t.records {
        let gap = match last[r.active] {
            Some(prev) => r.k - prev,
            None => r.k + 1,
        };
        tau = tau.max(gap);
        last[r.active] = Some(r.k);
    }
    for l in &last {
        let trailing = match l {
            Some(prev) => total - prev,
            None => total + 1,
        };
        tau = tau.max(trailing);
    }

    let mut l_hat = 0usize;
    let mut unbounded = false;
    for (i, outs) in t.out_neighbors.iter().enumerate() {
        for &j in outs {
            let mut streak = 0usize;
            let mut sent = false;
            let mut delivered = false;
            for r in t.records.iter().filter(|r| r.active == i) {
                sent = true;
                if r.reliable.contains(&j) {
                    delivered = true;
                    streak = 0;
                } else {
                    streak += 1;
                    l_hat = l_hat.max(streak);
                }
            }
            unbounded |= sent && !delivered;
        }
    }
    Monitors {
        tau_hat: tau,
        l_hat,
        unbounded_loss: unbounded,
    }
}

/// Least-squares slope of `log10(v)` against the sample index over the last
/// `tail_fraction` of `values`. Values are floored at `1e-300`.
pub fn fit_log10_slope(values: &[(usize, f64)], tail_fraction: f64) -> Result<f64, SimError> {
    const NEEDED: usize = 10;
    let frac = tail_fraction.clamp(0.0, 1.0);
    let take = ((values.len() as f64) * frac).ceil() as usize;
    let tail = &values[values.len() - take.min(values.len())..];
    if tail.len() < NEEDED {
        return Err(SimError::InsufficientSamples {
            needed: NEEDED,
            found: tail.len(),
        });
    }
    let m = tail.len() as f64;
    let pts: Vec<(f64, f64)> = tail
        .iter()
        .map(|&(k, v)| (k as f64, v.max(1e-300).log10()))
        .collect();
    let mean_k = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let mean_v = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (k, v) in pts {
        sxy += (k - mean_k) * (v - mean_v);
        sxx += (k - mean_k) * (k - mean_k);
    }
    Ok(if sxx > 0.0 { sxy / sxx } else { 0.0 })
}

/// Tail slope of `log10 MSE` per iteration.
pub fn estimate_rate(t: &Trace, tail_fraction: f64) -> Result<f64, SimError> {
    let series: Vec<(usize, f64)> = t.records.iter().map(|r| (r.k, r.mse)).collect();
    fit_log10_slope(&series, tail_fraction)
}

struct LossState {
    rng: ChaCha8Rng,
    model: LossModel,
    /// Remaining forced failures per edge, indexed like `graph.edges()`.
    burst_left: Vec<usize>,
}

impl LossState {
    fn new(model: LossModel, graph: &DirectedGraph, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let burst_left = match model {
            LossModel::Burst(l) => (0..graph.edge_count())
                .map(|_| rng.random_range(0..=l))
                .collect(),
            LossModel::Bernoulli(_) => Vec::new(),
        };
        Self {
            rng,
            model,
            burst_left,
        }
    }

    fn delivered(&mut self, graph: &DirectedGraph, i: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(graph.out_degree(i));
        for &j in graph.out_neighbors(i) {
            let ok = match self.model {
                LossModel::Bernoulli(p) => self.rng.random::<f64>() >= p,
                LossModel::Burst(l) => {
                    let e = graph.edge_index(i, j).expect("out-neighbor edge");
                    if self.burst_left[e] > 0 {
                        self.burst_left[e] -= 1;
                        false
                    } else {
                        self.burst_left[e] = l;
                        true
                    }
                }
            };
            if ok {
                out.push(j);
            }
        }
        out
    }
}

pub fn run_simulation(cfg: &SimConfig) -> Result<Trace, SimError> {
    let problem = Problem::build(&cfg.graph, &cfg.cost)?;
    run_on(&problem, cfg)
}

/// Runs `cfg` on an already-built problem; `cfg.graph` and `cfg.cost` are
/// ignored.
pub fn run_on(problem: &Problem, cfg: &SimConfig) -> Result<Trace, SimError> {
    cfg.validate()?;
    let graph = &problem.graph;
    if !graph.is_strongly_connected() {
        return Err(SimError::Disconnected);
    }
    let n = graph.node_count();
    let dim = problem.dimension();
    let x0 = cfg.x0.clone().unwrap_or_else(|| Vector::zeros(dim));
    if x0.len() != dim {
        return Err(SimError::DimensionMismatch {
            expected: dim,
            found: x0.len(),
        });
    }

    let params = NrcParams::new(cfg.epsilon, cfg.c, cfg.variant)?;
    let mut net = Network::new(graph.clone(), problem.models.clone(), x0, params)?;
    let mut activation_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut loss = LossState::new(cfg.loss, graph, cfg.seed);

    let mut trace = Trace {
        seed: cfg.seed,
        out_neighbors: (0..n).map(|i| graph.out_neighbors(i).to_vec()).collect(),
        x_star: problem.x_star.clone(),
        initial_mse: mse(net.xs(), &problem.x_star)?,
        records: Vec::with_capacity(cfg.max_iters.min(1 << 20)),
        snapshots: Vec::new(),
        outcome: Outcome::Completed,
    };

    for k in 0..cfg.max_iters {
        if cfg.freeze_after == Some(k) {
            net.set_epsilon(0.0)?;
        }
        let active = match cfg.activation {
            ActivationPolicy::Uniform => activation_rng.random_range(0..n),
            ActivationPolicy::RoundRobin => k % n,
        };
        let reliable = loss.delivered(graph, active);
        net.broadcast_round(active, &reliable)?;

        let err = mse(net.xs(), &problem.x_star)?;
        let g_sum = net.g_sum();
        let h_sum = net.h_sum();
        trace.records.push(Record {
            k,
            active,
            reliable,
            mse: err,
            mass_residual: net.mass_residual(),
            g_sum_norm: g_sum.norm(),
            h_sum_norm: h_sum.norm(),
            consensus_error: net.consensus_error(),
        });
        if let Some(stride) = cfg.snapshot_stride {
            if k % stride == 0 {
                trace.snapshots.push((k, net.xs().cloned().collect()));
            }
        }

        if !(err <= cfg.divergence_threshold) {
            trace.outcome = Outcome::Diverged { k };
            return Err(SimError::Diverged {
                iteration: k,
                mse: err,
                trace: Box::new(trace),
            });
        }
        let last = trace.records.last().expect("just pushed");
        let stop_mse = cfg.stop.mse_below.is_some_and(|t| last.mse < t);
        let stop_cons = cfg.stop.consensus_below.is_some_and(|t| last.consensus_error < t);
        if stop_mse || stop_cons {
            trace.outcome = Outcome::Stopped { k };
            break;
        }
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costs::BinomialDeviance;

    fn scalar_quadratic(curv: f64, center: f64) -> CostModel {
        Quadratic::new(
            Matrix::from_element(1, 1, curv),
            Vector::from_element(1, center),
        )
        .unwrap()
        .into()
    }

    fn small_config(loss: LossModel) -> SimConfig {
        let mut cfg = SimConfig::new(
            GraphSpec::Geometric {
                nodes: 6,
                radius: 0.6,
                seed: 3,
            },
            CostSpec::Quadratic {
                dimension: 2,
                max_condition: 10.0,
                seed: 4,
            },
        );
        cfg.loss = loss;
        cfg.epsilon = 0.05;
        cfg.max_iters = 400;
        cfg.seed = 11;
        cfg
    }

    #[test]
    fn newton_solves_quadratics_in_one_step() {
        let models = vec![scalar_quadratic(1.0, 1.0), scalar_quadratic(1.0, 3.0)];
        let x = centralized_newton(&models, &Vector::zeros(1), 1e-12, 1).unwrap();
        assert!((x[0] - 2.0).abs() < 1e-15);
    }

    fn toy_deviance() -> CostModel {
        let rows = vec![
            vec![0.1, 0.0, 1.2],
            vec![0.0, 0.5, 0.3],
            vec![2.0, 0.1, 0.0],
            vec![0.3, 0.3, 0.3],
            vec![1.1, 0.0, 0.7],
        ];
        let labels = vec![1.0, -1.0, 1.0, -1.0, -1.0];
        BinomialDeviance::new(&rows, &labels, 0.05).unwrap().into()
    }

    #[test]
    fn newton_matches_gradient_descent_oracle() {
        let model = toy_deviance();
        let models = vec![model.clone()];
        let x = centralized_newton(&models, &Vector::zeros(4), 1e-12, 50).unwrap();
        assert!(model.gradient(&x).unwrap().norm() < 1e-12);

        // Independent oracle: fixed-step gradient descent from the origin.
        let mut y = Vector::zeros(4);
        for _ in 0..200_000 {
            let g = model.gradient(&y).unwrap();
            if g.norm() < 1e-13 {
                break;
            }
            y -= g * 0.2;
        }
        assert!((x - y).amax() < 1e-9);
    }

    #[test]
    fn newton_reports_non_convergence() {
        let models = vec![toy_deviance()];
        assert!(matches!(
            centralized_newton(&models, &Vector::zeros(4), 1e-12, 1),
            Err(SimError::NoConvergence { iterations: 1, .. })
        ));
    }

    #[test]
    fn mse_formula() {
        let x_star = Vector::from_vec(vec![1.0, 2.0]);
        let same = vec![x_star.clone(), x_star.clone()];
        assert_eq!(mse(&same, &x_star).unwrap(), 0.0);
        let shifted = vec![Vector::from_vec(vec![2.0, 2.0]), x_star.clone()];
        assert_eq!(mse(&shifted, &x_star).unwrap(), 0.5);
        assert!(matches!(
            mse(&[Vector::zeros(3)], &x_star),
            Err(SimError::DimensionMismatch { .. })
        ));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xs: Vec<Vector> = (0..7)
            .map(|_| Vector::from_fn(3, |_, _| rng.random_range(-1.0..1.0)))
            .collect();
        let target = Vector::from_vec(vec![0.1, -0.2, 0.3]);
        let mut naive = 0.0;
        for x in &xs {
            for c in 0..3 {
                naive += (x[c] - target[c]).powi(2);
            }
        }
        naive /= 7.0;
        assert!((mse(&xs, &target).unwrap() - naive).abs() < 1e-15);
    }

    fn synthetic_trace(values: &[f64]) -> Trace {
        Trace {
            seed: 0,
            out_neighbors: vec![vec![]],
            x_star: Vector::zeros(1),
            initial_mse: 1.0,
            records: values
                .iter()
                .enumerate()
                .map(|(k, &mse)| Record {
                    k,
                    active: 0,
                    reliable: vec![],
                    mse,
                    mass_residual: MassResidual::default(),
                    g_sum_norm: 0.0,
                    h_sum_norm: 0.0,
                    consensus_error: 0.0,
                })
                .collect(),
            snapshots: vec![],
            outcome: Outcome::Completed,
        }
    }

    #[test]
    fn rate_of_geometric_sequence() {
        let rho: f64 = 0.9;
        let values: Vec<f64> = (0..50).map(|k| rho.powi(k)).collect();
        let slope = estimate_rate(&synthetic_trace(&values), 0.5).unwrap();
        assert!((slope - rho.log10()).abs() < 1e-12);

        let flat = estimate_rate(&synthetic_trace(&[3.0; 40]), 1.0).unwrap();
        assert_eq!(flat, 0.0);

        assert!(matches!(
            estimate_rate(&synthetic_trace(&[1.0; 12]), 0.5),
            Err(SimError::InsufficientSamples { needed: 10, found: 6 })
        ));
        // Exact zeros are floored rather than producing -inf.
        let with_zero = estimate_rate(&synthetic_trace(&[1.0, 0.1, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]), 1.0)
            .unwrap();
        assert!(with_zero.is_finite() && with_zero < 0.0);
    }

    #[test]
    fn config_validation() {
        let mut cfg = small_config(LossModel::Bernoulli(0.1));
        cfg.epsilon = 0.0;
        assert!(matches!(cfg.validate(), Err(SimError::InvalidConfig(_))));
        let mut cfg = small_config(LossModel::Bernoulli(1.5));
        assert!(cfg.validate().is_err());
        cfg.loss = LossModel::Bernoulli(1.0);
        cfg.max_iters = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn disconnected_graph_is_rejected() {
        let g = DirectedGraph::from_edges(2, [(0, 1)]).unwrap();
        let cfg = SimConfig::new(
            GraphSpec::Fixed(g),
            CostSpec::Explicit(vec![scalar_quadratic(1.0, 0.0), scalar_quadratic(1.0, 1.0)]),
        );
        assert!(matches!(run_simulation(&cfg), Err(SimError::Disconnected)));
    }

    #[test]
    fn runs_are_deterministic() {
        let cfg = small_config(LossModel::Bernoulli(0.3));
        let a = run_simulation(&cfg).unwrap();
        let b = run_simulation(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_csv(), b.to_csv());
        let mut other = cfg.clone();
        other.seed += 1;
        assert_ne!(run_simulation(&other).unwrap().to_csv(), a.to_csv());
    }

    #[test]
    fn records_are_ordered_and_conserve_mass() {
        let trace = run_simulation(&small_config(LossModel::Bernoulli(0.5))).unwrap();
        assert_eq!(trace.records.len(), 400);
        assert!(trace.records.windows(2).all(|w| w[0].k < w[1].k));
        for r in &trace.records {
            assert!(r.mass_residual.max() <= 1e-9 * (1.0 + r.g_sum_norm));
        }
        let s = trace.summary(0.5);
        assert_eq!(s.iterations, 400);
        assert_eq!(s.final_mse, trace.final_mse());
    }

    #[test]
    fn total_loss_isolates_nodes() {
        let trace = run_simulation(&small_config(LossModel::Bernoulli(1.0))).unwrap();
        assert!(trace.records.iter().all(|r| r.reliable.is_empty()));
        let m = assumption_monitors(&trace);
        assert!(m.unbounded_loss);
        assert!(m.l_hat > 10);
    }

    #[test]
    fn round_robin_monitors() {
        let mut cfg = small_config(LossModel::Bernoulli(0.0));
        cfg.activation = ActivationPolicy::RoundRobin;
        let trace = run_simulation(&cfg).unwrap();
        let m = assumption_monitors(&trace);
        assert_eq!(m.tau_hat, 6);
        assert_eq!(m.l_hat, 0);
        assert!(!m.unbounded_loss);
    }

    #[test]
    fn burst_loss_respects_cap() {
        for l in [0, 1, 5] {
            let trace = run_simulation(&small_config(LossModel::Burst(l))).unwrap();
            let m = assumption_monitors(&trace);
            assert!(m.l_hat <= l, "L = {l}, observed {}", m.l_hat);
            if l > 0 {
                assert!(m.l_hat >= 1);
            }
        }
    }

    #[test]
    fn stop_rule_and_snapshots() {
        let mut cfg = small_config(LossModel::Bernoulli(0.1));
        cfg.max_iters = 20_000;
        cfg.epsilon = 0.1;
        cfg.stop.mse_below = Some(1e-12);
        cfg.snapshot_stride = Some(100);
        let trace = run_simulation(&cfg).unwrap();
        let Outcome::Stopped { k } = trace.outcome else {
            panic!("expected early stop, got {:?}", trace.outcome);
        };
        assert_eq!(trace.records.len(), k + 1);
        assert!(trace.final_mse() < 1e-12);
        assert_eq!(trace.snapshots.len(), k / 100 + 1);
        assert_eq!(trace.snapshots[0].1.len(), 6);
        assert!(estimate_rate(&trace, 0.5).unwrap() < 0.0);
    }

    #[test]
    fn divergence_is_reported_with_partial_trace() {
        let mut cfg = small_config(LossModel::Bernoulli(0.0));
        cfg.divergence_threshold = 1e-3;
        cfg.x0 = Some(Vector::from_element(2, 50.0));
        match run_simulation(&cfg) {
            Err(SimError::Diverged { iteration, trace, .. }) => {
                assert_eq!(iteration, 0);
                assert_eq!(trace.records.len(), 1);
                assert_eq!(trace.outcome, Outcome::Diverged { k: 0 });
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn csv_layout() {
        let trace = run_simulation(&small_config(LossModel::Bernoulli(0.2))).unwrap();
        let csv = trace.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(TRACE_CSV_HEADER));
        let first: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(first.len(), 5);
        assert_eq!(first[0], "0");
        assert_eq!(first[2].parse::<f64>().unwrap(), trace.records[0].mse);
        assert_eq!(csv.lines().count(), trace.records.len() + 1);
    }
}
