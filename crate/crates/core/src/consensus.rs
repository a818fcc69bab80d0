//! Push-sum and packet-loss-robust ratio consensus.
//!
//! Each node keeps a numerator `y` (vector) and a denominator `z` (square
//! matrix); the consensus estimate is `z^{-1} y`. The robust variant adds a
//! running sum `sigma` of everything a node has ever sent and, per
//! in-neighbor, a copy `rho` of the last `sigma` actually received. Mass that
//! was sent but lost stays on the edge as `nu = sigma - rho` and is absorbed
//! in full by the next successful delivery.
//!
//! [`StepMatrices`] and [`AugmentedState`] express one broadcast step as a
//! column-stochastic linear map on node and edge masses. They exist to
//! cross-check the state machine and are not used on the hot path.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::graph::DirectedGraph;
use crate::linalg::{max_abs, solve_spd, Matrix, Vector};

#[derive(Debug, Error, PartialEq)]
pub enum ConsensusError {
    #[error("node {index} out of range for {n} nodes")]
    NodeOutOfRange { index: usize, n: usize },
    #[error("{to} is not an out-neighbor of {from}")]
    NotOutNeighbor { from: usize, to: usize },
    #[error("message from {from}, which is not an in-neighbor of {to}")]
    NotInNeighbor { from: usize, to: usize },
    #[error("expected {expected} per-node values, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
}

/// Broadcast payload: the sender's cumulative sent mass.
#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub transmitter: usize,
    pub sigma_y: Vector,
    pub sigma_z: Matrix,
}

/// Consensus variables of one node.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioNode {
    pub y: Vector,
    pub z: Matrix,
    pub sigma_y: Vector,
    pub sigma_z: Matrix,
    rho: BTreeMap<usize, (Vector, Matrix)>,
}

impl RatioNode {
    /// Zero counters, one `rho` slot per in-neighbor.
    pub fn new(y: Vector, z: Matrix, in_neighbors: &[usize]) -> Self {
        let n = y.len();
        let rho = in_neighbors
            .iter()
            .map(|&j| (j, (Vector::zeros(n), Matrix::zeros(n, n))))
            .collect();
        Self {
            sigma_y: Vector::zeros(n),
            sigma_z: Matrix::zeros(n, n),
            y,
            z,
            rho,
        }
    }

    pub fn dimension(&self) -> usize {
        self.y.len()
    }

    /// Last received `(sigma_y, sigma_z)` from in-neighbor `j`.
    pub fn rho(&self, j: usize) -> Option<(&Vector, &Matrix)> {
        self.rho.get(&j).map(|(y, z)| (y, z))
    }

    pub fn rho_mut(&mut self, j: usize) -> Option<(&mut Vector, &mut Matrix)> {
        self.rho.get_mut(&j).map(|(y, z)| (y, z))
    }

    pub fn in_neighbors(&self) -> impl Iterator<Item = usize> + '_ {
        self.rho.keys().copied()
    }

    /// Keeps `1/(d+1)` of the local mass and adds it to the sent totals.
    pub fn transmit(&mut self, id: usize, out_degree: usize) -> Message {
        let share = 1.0 / (out_degree as f64 + 1.0);
        self.y *= share;
        self.z *= share;
        self.sigma_y += &self.y;
        self.sigma_z += &self.z;
        Message {
            transmitter: id,
            sigma_y: self.sigma_y.clone(),
            sigma_z: self.sigma_z.clone(),
        }
    }

    /// Absorbs everything `msg.transmitter` sent since its last delivery.
    /// `me` is only used for the error report.
    pub fn receive(&mut self, me: usize, msg: &Message) -> Result<(), ConsensusError> {
        let (rho_y, rho_z) =
            self.rho
                .get_mut(&msg.transmitter)
                .ok_or(ConsensusError::NotInNeighbor {
                    from: msg.transmitter,
                    to: me,
                })?;
        self.y += &msg.sigma_y - &*rho_y;
        self.z += &msg.sigma_z - &*rho_z;
        rho_y.copy_from(&msg.sigma_y);
        rho_z.copy_from(&msg.sigma_z);
        Ok(())
    }

    /// `z^{-1} y`, or `None` if `z` is singular.
    pub fn ratio(&self) -> Option<Vector> {
        solve_spd(&self.z, &self.y)
    }
}

/// Sum over nodes of `y + sum of incoming edge masses`, and the `z`
/// analogue. `node(i)` must return node `i` for every `i < n`.
pub fn mass_totals<'a, F>(n: usize, node: F) -> (Vector, Matrix)
where
    F: Fn(usize) -> &'a RatioNode,
{
    let dim = node(0).dimension();
    let mut ty = Vector::zeros(dim);
    let mut tz = Matrix::zeros(dim, dim);
    for i in 0..n {
        let me = node(i);
        ty += &me.y;
        tz += &me.z;
        for (&j, (rho_y, rho_z)) in &me.rho {
            let src = node(j);
            ty += &src.sigma_y - rho_y;
            tz += &src.sigma_z - rho_z;
        }
    }
    (ty, tz)
}

/// Deviation of the stored mass from the driving sums, in max norm.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MassResidual {
    pub y: f64,
    pub z: f64,
}

impl MassResidual {
    pub fn max(&self) -> f64 {
        self.y.max(self.z)
    }
}

pub fn mass_residual_of<'a, F>(n: usize, node: F, g_sum: &Vector, h_sum: &Matrix) -> MassResidual
where
    F: Fn(usize) -> &'a RatioNode,
{
    let (ty, tz) = mass_totals(n, node);
    MassResidual {
        y: max_abs((ty - g_sum).iter().copied()),
        z: max_abs((tz - h_sum).iter().copied()),
    }
}

/// Consensus-only network state over a fixed graph.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioState {
    graph: DirectedGraph,
    nodes: Vec<RatioNode>,
}

impl RatioState {
    pub fn new(graph: DirectedGraph, y0: Vec<Vector>, z0: Vec<Matrix>) -> Result<Self, ConsensusError> {
        let n = graph.node_count();
        for found in [y0.len(), z0.len()] {
            if found != n {
                return Err(ConsensusError::DimensionMismatch { expected: n, found });
            }
        }
        let nodes = y0
            .into_iter()
            .zip(z0)
            .enumerate()
            .map(|(i, (y, z))| RatioNode::new(y, z, graph.in_neighbors(i)))
            .collect();
        Ok(Self { graph, nodes })
    }

    /// Scalar convenience: `y_i(0) = y0[i]`, `z_i(0) = z0[i]`.
    pub fn scalar(graph: DirectedGraph, y0: &[f64], z0: &[f64]) -> Result<Self, ConsensusError> {
        Self::new(
            graph,
            y0.iter().map(|&v| Vector::from_element(1, v)).collect(),
            z0.iter().map(|&v| Matrix::from_element(1, 1, v)).collect(),
        )
    }

    pub fn graph(&self) -> &DirectedGraph {
        &self.graph
    }

    pub fn nodes(&self) -> &[RatioNode] {
        &self.nodes
    }

    pub fn nodes_mut(&mut self) -> &mut [RatioNode] {
        &mut self.nodes
    }

    fn check_step(&self, active: usize, reliable: &[usize]) -> Result<(), ConsensusError> {
        check_reliable(&self.graph, active, reliable)
    }

    /// Plain push-sum: the sender keeps `1/(d+1)` of its mass and each
    /// reliable receiver adds the same share. Lost shares are destroyed.
    /// Mass counters are left untouched.
    pub fn pushsum_step(&mut self, active: usize, reliable: &[usize]) -> Result<(), ConsensusError> {
        self.check_step(active, reliable)?;
        let share = 1.0 / (self.graph.out_degree(active) as f64 + 1.0);
        let sender = &mut self.nodes[active];
        sender.y *= share;
        sender.z *= share;
        let (y, z) = (sender.y.clone(), sender.z.clone());
        for &j in sorted(reliable).iter() {
            self.nodes[j].y += &y;
            self.nodes[j].z += &z;
        }
        Ok(())
    }

    /// Push-sum with every out-neighbor reached.
    pub fn pushsum_step_lossless(&mut self, active: usize) -> Result<(), ConsensusError> {
        let all = self.out_neighbors_of(active)?;
        self.pushsum_step(active, &all)
    }

    fn out_neighbors_of(&self, active: usize) -> Result<Vec<usize>, ConsensusError> {
        let n = self.graph.node_count();
        if active >= n {
            return Err(ConsensusError::NodeOutOfRange { index: active, n });
        }
        Ok(self.graph.out_neighbors(active).to_vec())
    }

    /// Robust ratio consensus broadcast: transmit from `active`, then deliver
    /// to `reliable` in ascending order. Undelivered mass stays on the edge.
    pub fn robust_ratio_step(&mut self, active: usize, reliable: &[usize]) -> Result<(), ConsensusError> {
        self.check_step(active, reliable)?;
        let msg = self.nodes[active].transmit(active, self.graph.out_degree(active));
        for &j in sorted(reliable).iter() {
            self.nodes[j].receive(j, &msg)?;
        }
        Ok(())
    }

    pub fn mass_residual(&self, g_sum: &Vector, h_sum: &Matrix) -> MassResidual {
        mass_residual_of(self.nodes.len(), |i| &self.nodes[i], g_sum, h_sum)
    }

    pub fn augmented(&self) -> AugmentedState {
        AugmentedState::capture(&self.graph, |i| &self.nodes[i])
    }

    /// Largest distance of any node's ratio from `target`; infinite if some
    /// node's `z` is singular.
    pub fn max_ratio_error(&self, target: &Vector) -> f64 {
        self.nodes
            .iter()
            .map(|node| node.ratio().map_or(f64::INFINITY, |p| (p - target).norm()))
            .fold(0.0, f64::max)
    }
}

/// Validates that `reliable` is a duplicate-free subset of the out-neighbors
/// of `active`.
pub fn check_reliable(
    graph: &DirectedGraph,
    active: usize,
    reliable: &[usize],
) -> Result<(), ConsensusError> {
    let n = graph.node_count();
    if active >= n {
        return Err(ConsensusError::NodeOutOfRange { index: active, n });
    }
    let mut seen = Vec::with_capacity(reliable.len());
    for &j in reliable {
        if !graph.has_edge(active, j) || seen.contains(&j) {
            return Err(ConsensusError::NotOutNeighbor { from: active, to: j });
        }
        seen.push(j);
    }
    Ok(())
}

fn sorted(v: &[usize]) -> Vec<usize> {
    let mut v = v.to_vec();
    v.sort_unstable();
    v
}

/// `(sum h)^{-1} sum g`.
pub fn target_ratio(g_sum: &Vector, h_sum: &Matrix) -> Option<Vector> {
    solve_spd(h_sum, g_sum)
}

/// Node masses stacked above edge masses. Row `i < N` holds node `i`; row
/// `N + e` holds `nu` for the `e`-th edge of [`DirectedGraph::edges`].
/// The `z` block stores each matrix flattened column-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedState {
    pub y_a: Matrix,
    pub z_a: Matrix,
}

impl AugmentedState {
    pub fn capture<'a, F>(graph: &DirectedGraph, node: F) -> Self
    where
        F: Fn(usize) -> &'a RatioNode,
    {
        let n = graph.node_count();
        let dim = node(0).dimension();
        let rows = n + graph.edge_count();
        let mut y_a = Matrix::zeros(rows, dim);
        let mut z_a = Matrix::zeros(rows, dim * dim);
        for i in 0..n {
            let me = node(i);
            y_a.row_mut(i).copy_from(&me.y.transpose());
            z_a.row_mut(i).copy_from_slice(me.z.as_slice());
        }
        for (e, &(i, j)) in graph.edges().iter().enumerate() {
            let (src, dst) = (node(i), node(j));
            let (rho_y, rho_z) = dst.rho(i).expect("rho slot for every in-neighbor");
            let nu_y = &src.sigma_y - rho_y;
            let nu_z = &src.sigma_z - rho_z;
            y_a.row_mut(n + e).copy_from(&nu_y.transpose());
            z_a.row_mut(n + e).copy_from_slice(nu_z.as_slice());
        }
        Self { y_a, z_a }
    }

    pub fn max_abs_diff(&self, other: &AugmentedState) -> f64 {
        let dy = max_abs((&self.y_a - &other.y_a).iter().copied());
        let dz = max_abs((&self.z_a - &other.z_a).iter().copied());
        dy.max(dz)
    }
}

/// Linear map of one broadcast step with a given delivery pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMatrices {
    /// `N x N` selector of the nodes that run a descent update.
    pub s: Matrix,
    /// `(N + E) x N` injection of fresh `g - g_old` differences.
    pub t: Matrix,
    /// `(N + E) x (N + E)` column-stochastic mixing matrix.
    pub m: Matrix,
}

impl StepMatrices {
    pub fn build(
        graph: &DirectedGraph,
        active: usize,
        reliable: &[usize],
    ) -> Result<Self, ConsensusError> {
        check_reliable(graph, active, reliable)?;
        let n = graph.node_count();
        let size = n + graph.edge_count();
        let share = 1.0 / (graph.out_degree(active) as f64 + 1.0);
        let edge_row = |i: usize, j: usize| n + graph.edge_index(i, j).expect("edge exists");

        let mut s = Matrix::zeros(n, n);
        let mut t = Matrix::zeros(size, n);
        let mut m = Matrix::zeros(size, size);

        s[(active, active)] = 1.0;
        t[(active, active)] = share;
        m[(active, active)] = share;
        for h in (0..n).filter(|&h| h != active) {
            m[(h, h)] = 1.0;
        }
        for &j in reliable {
            s[(j, j)] = 1.0;
            t[(j, active)] = share;
            t[(j, j)] = 1.0;
            m[(j, active)] = share;
            m[(j, edge_row(active, j))] = 1.0;
        }
        for &j in graph.out_neighbors(active) {
            if reliable.contains(&j) {
                continue;
            }
            let e = edge_row(active, j);
            t[(e, active)] = share;
            m[(e, active)] = share;
            m[(e, e)] = 1.0;
        }
        for &(r, q) in graph.edges() {
            if r != active {
                let e = edge_row(r, q);
                m[(e, e)] = 1.0;
            }
        }
        Ok(Self { s, t, m })
    }

    /// `M state + T delta`, with `delta_g` of shape `N x n` and `delta_h` of
    /// shape `N x n^2` (rows are flattened matrices).
    pub fn apply(&self, state: &AugmentedState, delta_g: &Matrix, delta_h: &Matrix) -> AugmentedState {
        AugmentedState {
            y_a: &self.m * &state.y_a + &self.t * delta_g,
            z_a: &self.m * &state.z_a + &self.t * delta_h,
        }
    }

    /// Largest deviation of a column sum of `M` from one.
    pub fn column_sum_error(&self) -> f64 {
        max_abs(self.m.row_sum().iter().map(|s| s - 1.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::all_strongly_connected;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pair() -> DirectedGraph {
        DirectedGraph::from_edges(2, [(0, 1), (1, 0)]).unwrap()
    }

    fn scalar_y(s: &RatioState) -> Vec<f64> {
        s.nodes().iter().map(|n| n.y[0]).collect()
    }

    fn random_state(graph: &DirectedGraph, dim: usize, rng: &mut ChaCha8Rng) -> RatioState {
        let n = graph.node_count();
        let y0 = (0..n)
            .map(|_| Vector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0)))
            .collect();
        let z0 = (0..n)
            .map(|_| {
                let b = Matrix::from_fn(dim, dim, |_, _| rng.random_range(-1.0..1.0));
                &b * b.transpose() + Matrix::identity(dim, dim)
            })
            .collect();
        RatioState::new(graph.clone(), y0, z0).unwrap()
    }

    fn random_subset(out: &[usize], rng: &mut ChaCha8Rng, p_loss: f64) -> Vec<usize> {
        out.iter().copied().filter(|_| rng.random::<f64>() >= p_loss).collect()
    }

    #[test]
    fn pushsum_two_nodes() {
        let mut s = RatioState::scalar(pair(), &[3.0, 1.0], &[1.0, 1.0]).unwrap();
        s.pushsum_step_lossless(0).unwrap();
        assert_eq!(scalar_y(&s), vec![1.5, 2.5]);
    }

    #[test]
    fn pushsum_loses_mass_without_counters() {
        let mut s = RatioState::scalar(pair(), &[3.0, 1.0], &[1.0, 1.0]).unwrap();
        s.pushsum_step(0, &[]).unwrap();
        assert_eq!(scalar_y(&s).iter().sum::<f64>(), 2.5);
    }

    #[test]
    fn pushsum_converges_to_ratio_of_sums() {
        let graph = DirectedGraph::from_edges(4, [(0, 1), (1, 2), (2, 3), (3, 0), (0, 2), (2, 0)]).unwrap();
        let g = [1.0, -2.0, 4.0, 0.5];
        let h = [2.0, 1.0, 0.5, 3.0];
        let mut s = RatioState::scalar(graph, &g, &h).unwrap();
        let target = Vector::from_element(1, g.iter().sum::<f64>() / h.iter().sum::<f64>());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..2000 {
            s.pushsum_step_lossless(rng.random_range(0..4)).unwrap();
        }
        assert!(s.max_ratio_error(&target) < 1e-10);
    }

    #[test]
    fn robust_matches_pushsum_when_lossless() {
        let graph = DirectedGraph::from_edges(3, [(0, 1), (0, 2), (1, 0), (2, 1)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let start = random_state(&graph, 2, &mut rng);
        let mut a = start.clone();
        let mut b = start;
        a.pushsum_step(0, &[1, 2]).unwrap();
        b.robust_ratio_step(0, &[1, 2]).unwrap();
        for (x, y) in a.nodes().iter().zip(b.nodes()) {
            assert!((&x.y - &y.y).amax() < 1e-15);
            assert!((&x.z - &y.z).amax() < 1e-15);
        }
    }

    #[test]
    fn lost_packets_are_recovered_on_delivery() {
        let mut s = RatioState::scalar(pair(), &[8.0, 0.0], &[1.0, 1.0]).unwrap();
        let zero = (Vector::zeros(1), Matrix::zeros(1, 1));
        let g_sum = Vector::from_element(1, 8.0);
        let h_sum = Matrix::from_element(1, 1, 2.0);
        for _ in 0..3 {
            s.robust_ratio_step(0, &[]).unwrap();
            assert!(s.mass_residual(&g_sum, &h_sum).max() < 1e-12);
        }
        // Sender kept 8 -> 4 -> 2 -> 1; the edge holds 4 + 2 + 1.
        assert_eq!(s.nodes()[0].y[0], 1.0);
        assert_eq!(s.nodes()[1].y[0], 0.0);
        assert_eq!(s.nodes()[1].rho(0).unwrap().0, &zero.0);
        s.robust_ratio_step(0, &[1]).unwrap();
        // Fourth transmission keeps 0.5 and the receiver absorbs 4+2+1+0.5.
        assert_eq!(scalar_y(&s), vec![0.5, 7.5]);
        assert!(s.mass_residual(&g_sum, &h_sum).max() < 1e-12);
    }

    #[test]
    fn duplicate_delivery_is_idempotent() {
        let graph = pair();
        let mut s = RatioState::scalar(graph, &[2.0, 1.0], &[1.0, 1.0]).unwrap();
        let msg = s.nodes_mut()[0].transmit(0, 1);
        s.nodes_mut()[1].receive(1, &msg).unwrap();
        let once = s.clone();
        s.nodes_mut()[1].receive(1, &msg).unwrap();
        assert_eq!(s, once);
    }

    #[test]
    fn message_from_stranger_is_rejected() {
        let graph = DirectedGraph::from_edges(3, [(0, 1), (1, 2), (2, 0)]).unwrap();
        let mut s = RatioState::scalar(graph, &[1.0; 3], &[1.0; 3]).unwrap();
        let msg = s.nodes_mut()[1].transmit(1, 1);
        assert_eq!(
            s.nodes_mut()[0].receive(0, &msg),
            Err(ConsensusError::NotInNeighbor { from: 1, to: 0 })
        );
    }

    #[test]
    fn zero_mass_stays_zero() {
        let graph = DirectedGraph::from_edges(3, [(0, 1), (1, 2), (2, 0), (1, 0)]).unwrap();
        let mut s = RatioState::scalar(graph, &[0.0; 3], &[1.0; 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let i = rng.random_range(0..3);
            let rel = random_subset(s.graph().out_neighbors(i), &mut rng, 0.5);
            s.robust_ratio_step(i, &rel).unwrap();
            let (ty, _) = mass_totals(3, |k| &s.nodes()[k]);
            assert_eq!(ty[0], 0.0);
        }
    }

    #[test]
    fn residual_detects_corruption() {
        let graph = pair();
        let mut s = RatioState::scalar(graph, &[1.0, 2.0], &[1.0, 1.0]).unwrap();
        let g_sum = Vector::from_element(1, 3.0);
        let h_sum = Matrix::from_element(1, 1, 2.0);
        assert_eq!(s.mass_residual(&g_sum, &h_sum).max(), 0.0);
        s.robust_ratio_step(0, &[]).unwrap();
        assert!(s.mass_residual(&g_sum, &h_sum).max() < 1e-15);
        s.nodes_mut()[1].rho_mut(0).unwrap().0[0] += 0.25;
        assert!((s.mass_residual(&g_sum, &h_sum).y - 0.25).abs() < 1e-15);
    }

    #[test]
    fn step_validation() {
        let graph = DirectedGraph::from_edges(3, [(0, 1), (1, 2), (2, 0)]).unwrap();
        let mut s = RatioState::scalar(graph.clone(), &[1.0; 3], &[1.0; 3]).unwrap();
        assert_eq!(
            s.robust_ratio_step(5, &[]),
            Err(ConsensusError::NodeOutOfRange { index: 5, n: 3 })
        );
        assert_eq!(
            s.robust_ratio_step(0, &[2]),
            Err(ConsensusError::NotOutNeighbor { from: 0, to: 2 })
        );
        assert_eq!(
            StepMatrices::build(&graph, 0, &[1, 1]),
            Err(ConsensusError::NotOutNeighbor { from: 0, to: 1 })
        );
    }

    #[test]
    fn lossless_step_has_no_edge_inflow() {
        let graph = DirectedGraph::from_edges(3, [(0, 1), (0, 2), (1, 0), (2, 0), (1, 2)]).unwrap();
        let sm = StepMatrices::build(&graph, 0, &[1, 2]).unwrap();
        let n = 3;
        let size = n + graph.edge_count();
        for r in n..size {
            for c in 0..n {
                assert_eq!(sm.m[(r, c)], 0.0);
            }
            for c in n..size {
                let (src, _) = graph.edges()[r - n];
                let expected = if r == c && src != 0 { 1.0 } else { 0.0 };
                assert_eq!(sm.m[(r, c)], expected);
            }
        }
    }

    #[test]
    fn star_with_one_loss_matches_matrix_form() {
        let graph = DirectedGraph::from_edges(3, [(0, 1), (0, 2), (1, 0), (2, 0)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut s = random_state(&graph, 2, &mut rng);
        // Park some mass on edges first.
        s.robust_ratio_step(1, &[]).unwrap();
        s.robust_ratio_step(0, &[2]).unwrap();
        let before = s.augmented();
        let sm = StepMatrices::build(&graph, 0, &[1]).unwrap();
        s.robust_ratio_step(0, &[1]).unwrap();
        let predicted = sm.apply(&before, &Matrix::zeros(3, 2), &Matrix::zeros(3, 4));
        assert!(predicted.max_abs_diff(&s.augmented()) < 1e-14);
        assert!(sm.column_sum_error() < 1e-15);
    }

    #[test]
    fn matrix_form_matches_state_machine_on_small_graphs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in 2..=3 {
            for graph in all_strongly_connected(n) {
                let mut s = random_state(&graph, 2, &mut rng);
                for _ in 0..3 {
                    let i = rng.random_range(0..n);
                    let rel = random_subset(graph.out_neighbors(i), &mut rng, 0.5);
                    s.robust_ratio_step(i, &rel).unwrap();
                }
                for i in 0..n {
                    let out = graph.out_neighbors(i);
                    for mask in 0..(1u32 << out.len()) {
                        let rel: Vec<usize> = out
                            .iter()
                            .enumerate()
                            .filter(|(b, _)| mask >> b & 1 == 1)
                            .map(|(_, &j)| j)
                            .collect();
                        let sm = StepMatrices::build(&graph, i, &rel).unwrap();
                        assert!(sm.column_sum_error() < 1e-12);
                        let mut next = s.clone();
                        next.robust_ratio_step(i, &rel).unwrap();
                        let predicted =
                            sm.apply(&s.augmented(), &Matrix::zeros(n, 2), &Matrix::zeros(n, 4));
                        assert!(predicted.max_abs_diff(&next.augmented()) < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn robust_ratio_converges_under_loss() {
        let graph = DirectedGraph::from_edges(4, [(0, 1), (1, 2), (2, 3), (3, 0), (1, 3), (3, 1)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s0 = random_state(&graph, 2, &mut rng);
        let (g_sum, h_sum) = mass_totals(4, |k| &s0.nodes()[k]);
        let target = target_ratio(&g_sum, &h_sum).unwrap();
        let mut s = s0;
        for _ in 0..6000 {
            let i = rng.random_range(0..4);
            let rel = random_subset(graph.out_neighbors(i), &mut rng, 0.3);
            s.robust_ratio_step(i, &rel).unwrap();
        }
        assert!(s.max_ratio_error(&target) < 1e-10);
        assert!(s.mass_residual(&g_sum, &h_sum).max() < 1e-9 * (1.0 + g_sum.norm()));
    }
}
