//! Consensus geometry: the communication graph, the per-edge agreement
//! subspaces, and the projections the solver is built from.
//!
//! For an edge {i, j} the full-edge subspace is H = {x : [x]_i = [x]_j};
//! the single-coordinate variant constrains one coordinate k only. Its
//! orthogonal complement consists of vectors supported on blocks i and j
//! with opposite signs, so an element of H-perp is stored as one payload
//! vector t with [z]_i = t and [z]_j = -t (i being the smaller endpoint).
//!
//! `decompose_edge_duals` splits an aggregate with zero block-sum into such
//! per-edge duals over an active edge set. Writing t_e = p_i - p_j for node
//! potentials p turns the sum constraint into a graph Laplacian system
//! L p = divergence, one system per coordinate; potential flows are exactly
//! the minimum-norm solutions, and a mean-zero gauge plus a rank-one
//! correction makes the singular system solvable by dense LU.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::stacked::StackedVector;

/// Undirected simple graph on nodes `0..num_nodes`.
///
/// Edges are stored normalized (smaller endpoint first) in insertion order;
/// self-loops and duplicates are rejected.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Graph {
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
}

impl Graph {
    pub fn new(num_nodes: usize, edges: Vec<(usize, usize)>) -> Result<Self> {
        if num_nodes == 0 {
            return Err(Error::Structural("graph needs >= 1 node".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        let mut normalized = Vec::with_capacity(edges.len());
        for (a, b) in edges {
            if a == b {
                return Err(Error::Structural(format!("self-loop at node {a}")));
            }
            if a >= num_nodes || b >= num_nodes {
                return Err(Error::Structural(format!(
                    "edge ({a},{b}) out of range for {num_nodes} nodes"
                )));
            }
            let e = (a.min(b), a.max(b));
            if !seen.insert(e) {
                return Err(Error::Structural(format!("duplicate edge ({},{})", e.0, e.1)));
            }
            normalized.push(e);
        }
        Ok(Graph {
            num_nodes,
            edges: normalized,
        })
    }

    /// Star centered at node 0: edges (0,1), ..., (0,n-1).
    pub fn star(num_nodes: usize) -> Result<Self> {
        Graph::new(num_nodes, (1..num_nodes).map(|j| (0, j)).collect())
    }

    /// Cycle 0-1-...-(n-1)-0; needs at least 3 nodes.
    pub fn ring(num_nodes: usize) -> Result<Self> {
        if num_nodes < 3 {
            return Err(Error::Structural("ring needs >= 3 nodes".into()));
        }
        let mut edges: Vec<_> = (0..num_nodes - 1).map(|i| (i, i + 1)).collect();
        edges.push((0, num_nodes - 1));
        Graph::new(num_nodes, edges)
    }

    /// Path 0-1-...-(n-1).
    pub fn path(num_nodes: usize) -> Result<Self> {
        Graph::new(num_nodes, (0..num_nodes.saturating_sub(1)).map(|i| (i, i + 1)).collect())
    }

    /// All pairs.
    pub fn complete(num_nodes: usize) -> Result<Self> {
        let mut edges = Vec::new();
        for i in 0..num_nodes {
            for j in i + 1..num_nodes {
                edges.push((i, j));
            }
        }
        Graph::new(num_nodes, edges)
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        let e = (a.min(b), a.max(b));
        self.edges.contains(&e)
    }
}

/// Which coordinates of the two endpoint blocks an edge subspace ties.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdgeCoords {
    /// [x]_i = [x]_j, all m coordinates.
    All,
    /// Only coordinate k agrees across the edge.
    Single(usize),
}

/// One agreement subspace H attached to an edge.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EdgeSubspace {
    /// Normalized endpoints, first < second.
    pub edge: (usize, usize),
    pub coords: EdgeCoords,
}

impl EdgeSubspace {
    pub fn full(a: usize, b: usize) -> Self {
        EdgeSubspace {
            edge: (a.min(b), a.max(b)),
            coords: EdgeCoords::All,
        }
    }

    pub fn coordinate(a: usize, b: usize, k: usize) -> Self {
        EdgeSubspace {
            edge: (a.min(b), a.max(b)),
            coords: EdgeCoords::Single(k),
        }
    }

    /// Payload length: m for a full edge, 1 for a single coordinate.
    pub fn payload_dim(&self, block_dim: usize) -> usize {
        match self.coords {
            EdgeCoords::All => block_dim,
            EdgeCoords::Single(_) => 1,
        }
    }

    /// Does this subspace constrain coordinate `k`?
    pub fn covers(&self, k: usize) -> bool {
        match self.coords {
            EdgeCoords::All => true,
            EdgeCoords::Single(c) => c == k,
        }
    }

    /// Coordinate support as (node, coordinate) pairs.
    pub fn support(&self, block_dim: usize) -> Vec<(usize, usize)> {
        let (i, j) = self.edge;
        match self.coords {
            EdgeCoords::All => (0..block_dim)
                .flat_map(|k| [(i, k), (j, k)])
                .collect(),
            EdgeCoords::Single(k) => vec![(i, k), (j, k)],
        }
    }

    /// Payload of the orthogonal projection of `u` onto H-perp:
    /// t = ([u]_i - [u]_j) / 2 on the covered coordinates.
    pub fn project_complement(&self, u: &StackedVector) -> Vec<f64> {
        let (i, j) = self.edge;
        let (bi, bj) = (u.block(i), u.block(j));
        match self.coords {
            EdgeCoords::All => bi
                .iter()
                .zip(bj)
                .map(|(a, b)| 0.5 * (a - b))
                .collect(),
            EdgeCoords::Single(k) => vec![0.5 * (bi[k] - bj[k])],
        }
    }

    /// Embed a payload as the stacked vector [z]_i = t, [z]_j = -t.
    pub fn expand(&self, payload: &[f64], num_nodes: usize, block_dim: usize) -> StackedVector {
        let mut z = StackedVector::zeros(num_nodes, block_dim);
        self.add_expanded(payload, &mut z, 1.0);
        z
    }

    /// Accumulate `sign * expand(payload)` into `out` without allocating.
    pub fn add_expanded(&self, payload: &[f64], out: &mut StackedVector, sign: f64) {
        let (i, j) = self.edge;
        match self.coords {
            EdgeCoords::All => {
                for (k, t) in payload.iter().enumerate() {
                    out.block_mut(i)[k] += sign * t;
                    out.block_mut(j)[k] -= sign * t;
                }
            }
            EdgeCoords::Single(k) => {
                out.block_mut(i)[k] += sign * payload[0];
                out.block_mut(j)[k] -= sign * payload[0];
            }
        }
    }

    /// Is `v` inside the subspace H (endpoint blocks agree on covered
    /// coordinates) within `tol`?
    pub fn contains(&self, v: &StackedVector, tol: f64) -> bool {
        let (i, j) = self.edge;
        let (bi, bj) = (v.block(i), v.block(j));
        match self.coords {
            EdgeCoords::All => bi.iter().zip(bj).all(|(a, b)| (a - b).abs() <= tol),
            EdgeCoords::Single(k) => (bi[k] - bj[k]).abs() <= tol,
        }
    }
}

/// An element of one H-perp: the subspace plus its payload.
#[derive(Clone, Debug)]
pub struct EdgeDual {
    pub subspace: EdgeSubspace,
    pub payload: Vec<f64>,
}

impl EdgeDual {
    pub fn expand(&self, num_nodes: usize, block_dim: usize) -> StackedVector {
        self.subspace.expand(&self.payload, num_nodes, block_dim)
    }

    /// Norm of the expanded dual; both endpoints carry the payload, hence
    /// the factor 2 under the root.
    pub fn norm(&self) -> f64 {
        (2.0 * crate::stacked::vecmath::norm_sq(&self.payload)).sqrt()
    }
}

/// Output of `decompose_edge_duals`, including the boundedness witness used
/// by the regularity arguments: the largest single component relative to the
/// input norm.
#[derive(Clone, Debug)]
pub struct DecompositionReport {
    /// One dual per active subspace, in the order they were given.
    pub duals: Vec<EdgeDual>,
    /// max over active edges of the expanded component norm.
    pub max_component_norm: f64,
    /// Norm of the decomposed aggregate.
    pub input_norm: f64,
}

/// True iff the active subspaces pin down full consensus: for every
/// coordinate k, the edges covering k must connect all nodes of the graph.
pub fn connects(active: &[EdgeSubspace], graph: &Graph, block_dim: usize) -> bool {
    let n = graph.num_nodes();
    if n == 1 {
        return true;
    }
    for k in 0..block_dim {
        let mut uf = UnionFind::new(n);
        for s in active {
            if s.covers(k) {
                uf.union(s.edge.0, s.edge.1);
            }
        }
        let root = uf.find(0);
        if (1..n).any(|i| uf.find(i) != root) {
            return false;
        }
    }
    true
}

/// Orthogonal projection onto the consensus diagonal: every block becomes
/// the mean block.
pub fn project_diagonal(u: &StackedVector) -> StackedVector {
    let n = u.num_blocks();
    let m = u.block_dim();
    let mut mean = vec![0.0; m];
    for b in u.blocks() {
        for (s, x) in mean.iter_mut().zip(b) {
            *s += x;
        }
    }
    for s in mean.iter_mut() {
        *s /= n as f64;
    }
    StackedVector::splat(n, &mean)
}

/// Tolerance for the zero-block-sum precondition of the decomposition.
const DIAGONAL_PERP_TOL: f64 = 1e-9;

/// Split an aggregate `v` with zero block-sum into per-edge duals over the
/// active subspaces, summing back to `v` exactly and with minimum total
/// payload norm (potential flow on each coordinate's active subgraph).
pub fn decompose_edge_duals(
    v: &StackedVector,
    active: &[EdgeSubspace],
) -> Result<DecompositionReport> {
    let n = v.num_blocks();
    let m = v.block_dim();

    for k in 0..m {
        let col_sum: f64 = (0..n).map(|i| v.block(i)[k]).sum();
        if col_sum.abs() > DIAGONAL_PERP_TOL {
            return Err(Error::Precondition(format!(
                "aggregate is not in the zero-block-sum subspace: coordinate {k} sums to {col_sum:e}"
            )));
        }
    }
    for s in active {
        if s.edge.1 >= n {
            return Err(Error::Structural(format!(
                "active edge ({},{}) out of range",
                s.edge.0, s.edge.1
            )));
        }
        if let EdgeCoords::Single(k) = s.coords {
            if k >= m {
                return Err(Error::Structural(format!("edge coordinate {k} out of range")));
            }
        }
    }
    // The graph argument below only carries the node count; membership of
    // the active edges in a host graph is the caller's contract.
    let host = Graph {
        num_nodes: n,
        edges: Vec::new(),
    };
    if !connects(active, &host, m) {
        return Err(Error::Precondition(
            "active edge set does not connect all nodes on every coordinate".into(),
        ));
    }

    let mut payloads: Vec<Vec<f64>> = active
        .iter()
        .map(|s| vec![0.0; s.payload_dim(m)])
        .collect();

    // One Laplacian system per coordinate, over the subspaces covering it.
    for k in 0..m {
        let covering: Vec<usize> = (0..active.len())
            .filter(|&e| active[e].covers(k))
            .collect();
        let mut lap = DMatrix::<f64>::zeros(n, n);
        for &e in &covering {
            let (i, j) = active[e].edge;
            lap[(i, i)] += 1.0;
            lap[(j, j)] += 1.0;
            lap[(i, j)] -= 1.0;
            lap[(j, i)] -= 1.0;
        }
        // Rank-one correction: (L + 1 1^T / n) p = rhs has the mean-zero
        // solution of L p = rhs when rhs has zero sum.
        let c = 1.0 / n as f64;
        for i in 0..n {
            for j in 0..n {
                lap[(i, j)] += c;
            }
        }
        let rhs = DVector::<f64>::from_fn(n, |i, _| v.block(i)[k]);
        let p = lap
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Consistency("Laplacian solve failed".into()))?;
        for &e in &covering {
            let (i, j) = active[e].edge;
            let t = p[i] - p[j];
            match active[e].coords {
                EdgeCoords::All => payloads[e][k] = t,
                EdgeCoords::Single(_) => payloads[e][0] = t,
            }
        }
    }

    let duals: Vec<EdgeDual> = active
        .iter()
        .zip(payloads)
        .map(|(s, payload)| EdgeDual {
            subspace: *s,
            payload,
        })
        .collect();
    let max_component_norm = duals.iter().map(EdgeDual::norm).fold(0.0, f64::max);
    Ok(DecompositionReport {
        duals,
        max_component_norm,
        input_norm: v.norm_sq().sqrt(),
    })
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra] = rb;
        }
    }
}
