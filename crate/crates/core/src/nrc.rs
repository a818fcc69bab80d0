//! Node state machine of the robust asynchronous Newton-Raphson consensus
//! and the asymmetric-broadcast round that drives it.
//!
//! A node runs three atomic blocks: estimate update (a damped Newton step
//! toward its current consensus ratio, then a refresh of the shared
//! `(g, h)` mass), data transmission and data reception. In one
//! [`Network::broadcast_round`] the activated node updates and transmits;
//! every out-neighbor whose link delivers then receives and updates.

use thiserror::Error;

use crate::consensus::{
    check_reliable, mass_residual_of, AugmentedState, ConsensusError, MassResidual, Message,
    RatioNode,
};
use crate::costs::{CostError, CostModel, DescentVariant};
use crate::graph::DirectedGraph;
use crate::linalg::{is_symmetric, min_eigenvalue, solve_spd, Matrix, Vector};

#[derive(Debug, Error, PartialEq)]
pub enum NrcError {
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Consensus(#[from] ConsensusError),
    #[error("descent matrix is not symmetric")]
    NotSymmetric,
    #[error("descent matrix is singular after the floor guard")]
    Singular,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("expected {expected} cost models, found {found}")]
    ModelCount { expected: usize, found: usize },
}

/// Step size, curvature floor and descent variant shared by every node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NrcParams {
    pub epsilon: f64,
    pub c: f64,
    pub variant: DescentVariant,
}

impl NrcParams {
    pub fn new(epsilon: f64, c: f64, variant: DescentVariant) -> Result<Self, NrcError> {
        if !(epsilon >= 0.0) || !epsilon.is_finite() {
            return Err(NrcError::InvalidParameter(format!(
                "step size must be finite and non-negative, got {epsilon}"
            )));
        }
        if !(c > 0.0) {
            return Err(NrcError::InvalidParameter(format!(
                "curvature floor must be positive, got {c}"
            )));
        }
        Ok(Self {
            epsilon,
            c,
            variant,
        })
    }
}

/// Returns `z` when `z - c I` is positive semidefinite and `c I` otherwise.
/// The whole matrix is replaced; eigenvalues are not clipped individually.
pub fn cmax(z: &Matrix, c: f64) -> Result<Matrix, NrcError> {
    if !is_symmetric(z, 1e-9) {
        return Err(NrcError::NotSymmetric);
    }
    if min_eigenvalue(z) >= c {
        Ok(z.clone())
    } else {
        let n = z.nrows();
        Ok(Matrix::identity(n, n) * c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Flags {
    pub transmit: bool,
    pub receive: bool,
    pub update: bool,
}

/// Everything one node stores.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeState {
    pub x: Vector,
    pub g: Vector,
    pub g_old: Vector,
    pub h: Matrix,
    pub h_old: Matrix,
    /// `y`, `z` and the mass counters.
    pub mass: RatioNode,
    pub flags: Flags,
}

impl NodeState {
    /// Start-up values: `y = g = g_old = 0`, `z = h = h_old = I`, zero
    /// counters, only the transmit flag raised.
    pub fn new(x0: Vector, in_neighbors: &[usize]) -> Self {
        let n = x0.len();
        let eye = Matrix::identity(n, n);
        Self {
            g: Vector::zeros(n),
            g_old: Vector::zeros(n),
            h: eye.clone(),
            h_old: eye.clone(),
            mass: RatioNode::new(Vector::zeros(n), eye, in_neighbors),
            flags: Flags {
                transmit: true,
                receive: false,
                update: false,
            },
            x: x0,
        }
    }

    pub fn y(&self) -> &Vector {
        &self.mass.y
    }

    pub fn z(&self) -> &Matrix {
        &self.mass.z
    }

    /// Damped Newton step toward `cmax(z)^{-1} y`, then refresh of `g`, `h`
    /// and of the consensus mass by their increments.
    pub fn estimate_update(&mut self, model: &CostModel, params: &NrcParams) -> Result<(), NrcError> {
        let guarded = cmax(&self.mass.z, params.c)?;
        let target = solve_spd(&guarded, &self.mass.y).ok_or(NrcError::Singular)?;
        let eps = params.epsilon;
        self.x = &self.x * (1.0 - eps) + target * eps;

        let (g, h) = model.local_pair(&self.x, params.variant)?;
        self.g_old = std::mem::replace(&mut self.g, g);
        self.h_old = std::mem::replace(&mut self.h, h);
        self.mass.y += &self.g - &self.g_old;
        self.mass.z += &self.h - &self.h_old;

        self.flags.update = false;
        self.flags.transmit = true;
        Ok(())
    }

    pub fn data_transmission(&mut self, id: usize, out_degree: usize) -> Message {
        let msg = self.mass.transmit(id, out_degree);
        self.flags.transmit = false;
        msg
    }

    pub fn data_reception(&mut self, id: usize, msg: &Message) -> Result<(), NrcError> {
        self.mass.receive(id, msg)?;
        self.flags.receive = false;
        self.flags.update = true;
        Ok(())
    }
}

/// The whole simulated network: topology, private costs and node states.
#[derive(Debug, Clone)]
pub struct Network {
    graph: DirectedGraph,
    models: Vec<CostModel>,
    nodes: Vec<NodeState>,
    params: NrcParams,
}

impl Network {
    /// Every node starts from the same `x0`.
    pub fn new(
        graph: DirectedGraph,
        models: Vec<CostModel>,
        x0: Vector,
        params: NrcParams,
    ) -> Result<Self, NrcError> {
        let n = graph.node_count();
        if models.len() != n {
            return Err(NrcError::ModelCount {
                expected: n,
                found: models.len(),
            });
        }
        for m in &models {
            if m.dimension() != x0.len() {
                return Err(CostError::DimensionMismatch {
                    expected: m.dimension(),
                    found: x0.len(),
                }
                .into());
            }
        }
        let nodes = (0..n)
            .map(|i| NodeState::new(x0.clone(), graph.in_neighbors(i)))
            .collect();
        Ok(Self {
            graph,
            models,
            nodes,
            params,
        })
    }

    pub fn graph(&self) -> &DirectedGraph {
        &self.graph
    }

    pub fn models(&self) -> &[CostModel] {
        &self.models
    }

    pub fn nodes(&self) -> &[NodeState] {
        &self.nodes
    }

    pub fn nodes_mut(&mut self) -> &mut [NodeState] {
        &mut self.nodes
    }

    pub fn params(&self) -> &NrcParams {
        &self.params
    }

    pub fn set_epsilon(&mut self, epsilon: f64) -> Result<(), NrcError> {
        self.params = NrcParams::new(epsilon, self.params.c, self.params.variant)?;
        Ok(())
    }

    /// One iteration: node `active` updates and broadcasts; each node in
    /// `reliable` (visited in ascending order) receives and updates.
    pub fn broadcast_round(&mut self, active: usize, reliable: &[usize]) -> Result<(), NrcError> {
        check_reliable(&self.graph, active, reliable)?;
        let params = self.params;

        let sender = &mut self.nodes[active];
        sender.flags.update = true;
        sender.estimate_update(&self.models[active], &params)?;
        sender.flags.transmit = true;
        let msg = sender.data_transmission(active, self.graph.out_degree(active));

        let mut receivers = reliable.to_vec();
        receivers.sort_unstable();
        for j in receivers {
            let node = &mut self.nodes[j];
            node.flags.receive = true;
            node.data_reception(j, &msg)?;
            node.estimate_update(&self.models[j], &params)?;
        }
        Ok(())
    }

    pub fn xs(&self) -> impl Iterator<Item = &Vector> {
        self.nodes.iter().map(|n| &n.x)
    }

    pub fn g_sum(&self) -> Vector {
        let dim = self.nodes[0].g.len();
        self.nodes.iter().fold(Vector::zeros(dim), |acc, n| acc + &n.g)
    }

    pub fn h_sum(&self) -> Matrix {
        let dim = self.nodes[0].g.len();
        self.nodes
            .iter()
            .fold(Matrix::zeros(dim, dim), |acc, n| acc + &n.h)
    }

    /// Rows `g_i - g_i^old` (N x n) and column-major `h_i - h_i^old`
    /// (N x n^2), the input of the matrix form of a round.
    pub fn increments(&self) -> (Matrix, Matrix) {
        let n = self.nodes.len();
        let dim = self.nodes[0].g.len();
        let dg = Matrix::from_fn(n, dim, |r, c| self.nodes[r].g[c] - self.nodes[r].g_old[c]);
        let dh = Matrix::from_fn(n, dim * dim, |r, c| {
            let node = &self.nodes[r];
            node.h.as_slice()[c] - node.h_old.as_slice()[c]
        });
        (dg, dh)
    }

    /// Distance of the stored node and edge mass from `(sum g, sum h)`.
    pub fn mass_residual(&self) -> MassResidual {
        mass_residual_of(
            self.nodes.len(),
            |i| &self.nodes[i].mass,
            &self.g_sum(),
            &self.h_sum(),
        )
    }

    pub fn augmented(&self) -> AugmentedState {
        AugmentedState::capture(&self.graph, |i| &self.nodes[i].mass)
    }

    /// `max_i |z_i^{-1} y_i - (sum h)^{-1} sum g|`; infinite when a ratio is
    /// undefined.
    pub fn consensus_error(&self) -> f64 {
        let Some(target) = solve_spd(&self.h_sum(), &self.g_sum()) else {
            return f64::INFINITY;
        };
        self.nodes
            .iter()
            .map(|n| n.mass.ratio().map_or(f64::INFINITY, |p| (p - &target).norm()))
            .fold(0.0, f64::max)
    }
}
