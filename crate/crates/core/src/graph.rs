//! Directed communication topologies.
//!
//! A [`DirectedGraph`] is fixed for the lifetime of a run. Edges are kept in
//! lexicographic order; that order also fixes the position of each edge's
//! virtual mass in the augmented consensus state.

use std::collections::VecDeque;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("node index {index} out of range for graph with {n} nodes")]
    NodeOutOfRange { index: usize, n: usize },
    #[error("self-loop on node {0}")]
    SelfLoop(usize),
    #[error("graph must have at least one node")]
    Empty,
    #[error("radius must be positive, got {0}")]
    InvalidRadius(f64),
    #[error("no strongly connected geometric graph found after {attempts} attempts")]
    NotConnected { attempts: usize },
    #[error("edge list line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

/// Fixed directed graph with optional planar node coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectedGraph {
    n: usize,
    edges: Vec<(usize, usize)>,
    out: Vec<Vec<usize>>,
    inn: Vec<Vec<usize>>,
    positions: Option<Vec<[f64; 2]>>,
}

impl DirectedGraph {
    /// Builds a graph from an edge list. Duplicate edges are collapsed.
    pub fn from_edges(
        n: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self, GraphError> {
        if n == 0 {
            return Err(GraphError::Empty);
        }
        let mut list = Vec::new();
        for (i, j) in edges {
            for index in [i, j] {
                if index >= n {
                    return Err(GraphError::NodeOutOfRange { index, n });
                }
            }
            if i == j {
                return Err(GraphError::SelfLoop(i));
            }
            list.push((i, j));
        }
        list.sort_unstable();
        list.dedup();

        let mut out = vec![Vec::new(); n];
        let mut inn = vec![Vec::new(); n];
        for &(i, j) in &list {
            out[i].push(j);
            inn[j].push(i);
        }
        // `list` is sorted by (i, j), so out lists are ascending; in lists too
        // because sources are visited in ascending order.
        Ok(Self {
            n,
            edges: list,
            out,
            inn,
            positions: None,
        })
    }

    pub fn with_positions(mut self, positions: Vec<[f64; 2]>) -> Result<Self, GraphError> {
        if positions.len() != self.n {
            return Err(GraphError::NodeOutOfRange {
                index: positions.len(),
                n: self.n,
            });
        }
        self.positions = Some(positions);
        Ok(self)
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn out_neighbors(&self, i: usize) -> &[usize] {
        &self.out[i]
    }

    pub fn in_neighbors(&self, i: usize) -> &[usize] {
        &self.inn[i]
    }

    pub fn out_degree(&self, i: usize) -> usize {
        self.out[i].len()
    }

    pub fn positions(&self) -> Option<&[[f64; 2]]> {
        self.positions.as_deref()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        i < self.n && self.out[i].binary_search(&j).is_ok()
    }

    /// Position of edge `(i, j)` in [`edges`](Self::edges).
    pub fn edge_index(&self, i: usize, j: usize) -> Option<usize> {
        self.edges.binary_search(&(i, j)).ok()
    }

    /// True iff every node reaches every other node along directed edges.
    pub fn is_strongly_connected(&self) -> bool {
        reaches_all(self.n, &self.out) && reaches_all(self.n, &self.inn)
    }

    /// Plain-text edge list: node count, one `i j` line per edge, then one
    /// `i x y` line per node when coordinates are known.
    pub fn to_edge_list(&self) -> String {
        let mut s = format!("{}\n", self.n);
        for &(i, j) in &self.edges {
            let _ = writeln!(s, "{i} {j}");
        }
        if let Some(pos) = &self.positions {
            for (i, p) in pos.iter().enumerate() {
                let _ = writeln!(s, "{i} {:?} {:?}", p[0], p[1]);
            }
        }
        s
    }

    pub fn from_edge_list(text: &str) -> Result<Self, GraphError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(k, l)| (k + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let (first, header) = lines.next().ok_or(GraphError::Empty)?;
        let n: usize = header.parse().map_err(|_| GraphError::Parse {
            line: first,
            reason: format!("expected node count, found {header:?}"),
        })?;

        let mut edges = Vec::new();
        let mut coords: Vec<Option<[f64; 2]>> = vec![None; n];
        let mut any_coords = false;
        for (line, l) in lines {
            let tokens: Vec<&str> = l.split_whitespace().collect();
            let bad = |reason: String| GraphError::Parse { line, reason };
            let index = |t: &str| {
                t.parse::<usize>()
                    .map_err(|_| bad(format!("invalid node index {t:?}")))
            };
            match tokens.as_slice() {
                [i, j] => edges.push((index(i)?, index(j)?)),
                [i, x, y] => {
                    let i = index(i)?;
                    let coord = |t: &str| {
                        t.parse::<f64>()
                            .map_err(|_| bad(format!("invalid coordinate {t:?}")))
                    };
                    let slot = coords
                        .get_mut(i)
                        .ok_or(GraphError::NodeOutOfRange { index: i, n })?;
                    *slot = Some([coord(x)?, coord(y)?]);
                    any_coords = true;
                }
                _ => return Err(bad(format!("expected 2 or 3 fields, found {}", tokens.len()))),
            }
        }

        let graph = Self::from_edges(n, edges)?;
        if !any_coords {
            return Ok(graph);
        }
        let positions = coords
            .into_iter()
            .enumerate()
            .map(|(i, c)| {
                c.ok_or(GraphError::Parse {
                    line: 0,
                    reason: format!("missing coordinates for node {i}"),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        graph.with_positions(positions)
    }
}

fn reaches_all(n: usize, adjacency: &[Vec<usize>]) -> bool {
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([0]);
    seen[0] = true;
    let mut count = 1;
    while let Some(u) = queue.pop_front() {
        for &v in &adjacency[u] {
            if !seen[v] {
                seen[v] = true;
                count += 1;
                queue.push_back(v);
            }
        }
    }
    count == n
}

/// Random geometric graph in the unit square. Nodes are drawn i.i.d.
/// uniform from a generator seeded with `seed`; `(i, j)` and `(j, i)` are
/// both present iff the Euclidean distance is at most `radius`.
pub fn generate_random_geometric(
    n: usize,
    radius: f64,
    seed: u64,
) -> Result<DirectedGraph, GraphError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    geometric_from_rng(n, radius, &mut rng)
}

fn geometric_from_rng(
    n: usize,
    radius: f64,
    rng: &mut ChaCha8Rng,
) -> Result<DirectedGraph, GraphError> {
    if n == 0 {
        return Err(GraphError::Empty);
    }
    if !(radius > 0.0) {
        return Err(GraphError::InvalidRadius(radius));
    }
    let positions: Vec<[f64; 2]> = (0..n)
        .map(|_| [rng.random::<f64>(), rng.random::<f64>()])
        .collect();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let dx = positions[i][0] - positions[j][0];
                let dy = positions[i][1] - positions[j][1];
                if dx.hypot(dy) <= radius {
                    edges.push((i, j));
                }
            }
        }
    }
    DirectedGraph::from_edges(n, edges)?.with_positions(positions)
}

/// Draws geometric graphs from one seeded stream until a strongly connected
/// one appears, giving up after `max_attempts`.
pub fn generate_connected_geometric(
    n: usize,
    radius: f64,
    seed: u64,
    max_attempts: usize,
) -> Result<DirectedGraph, GraphError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..max_attempts {
        let g = geometric_from_rng(n, radius, &mut rng)?;
        if g.is_strongly_connected() {
            return Ok(g);
        }
    }
    Err(GraphError::NotConnected {
        attempts: max_attempts,
    })
}

/// Every labeled strongly connected digraph on `n` nodes. Exponential in
/// `n(n-1)`; meant for exhaustive checks on tiny graphs.
pub fn all_strongly_connected(n: usize) -> Vec<DirectedGraph> {
    assert!((1..=5).contains(&n), "exhaustive enumeration only for n <= 5");
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .collect();
    let mut out = Vec::new();
    for mask in 0u64..(1u64 << pairs.len()) {
        let edges = pairs
            .iter()
            .enumerate()
            .filter(|(b, _)| mask >> b & 1 == 1)
            .map(|(_, &e)| e);
        let g = DirectedGraph::from_edges(n, edges).expect("valid pairs");
        if g.is_strongly_connected() {
            out.push(g);
        }
    }
    out
}
