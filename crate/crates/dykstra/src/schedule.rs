//! Execution schedules: which edges are active each cycle and which blocks
//! are stepped at each inner index.
//!
//! A schedule lists cycles; each cycle has an active edge set and `w_bar`
//! ordered block sets. A block set may hold several nodes and edges as long
//! as their coordinate supports are pairwise disjoint, which keeps the
//! joint subproblem separable. Serialization is JSON: node blocks are bare
//! integers, edge blocks are 2-arrays.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::topology::{connects, EdgeSubspace, Graph};

/// Attempts allowed when rejection-sampling a connected active edge set.
const MAX_SAMPLE_ATTEMPTS: usize = 10_000;

/// One schedulable unit: a node's own dual block or an edge dual.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BlockId {
    Node(usize),
    Edge((usize, usize)),
}

impl BlockId {
    /// Edge endpoints in canonical (low, high) order; nodes unchanged.
    pub fn normalized(self) -> Self {
        match self {
            BlockId::Edge((a, b)) if a > b => BlockId::Edge((b, a)),
            other => other,
        }
    }

    /// Node indices whose coordinates this block can change.
    pub fn support(self) -> Vec<usize> {
        match self {
            BlockId::Node(i) => vec![i],
            BlockId::Edge((a, b)) => vec![a, b],
        }
    }
}

/// One cycle: the active edges and the ordered inner block sets.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleCycle {
    pub active_edges: Vec<(usize, usize)>,
    pub blocks: Vec<Vec<BlockId>>,
}

impl ScheduleCycle {
    /// Last 1-based inner index whose set contains `block`, if any.
    pub fn last_inner_index(&self, block: BlockId) -> Option<usize> {
        let target = block.normalized();
        self.blocks
            .iter()
            .rposition(|set| set.iter().any(|b| b.normalized() == target))
            .map(|idx| idx + 1)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub w_bar: usize,
    pub cycles: Vec<ScheduleCycle>,
    /// Period for running past the listed cycles: cycle n > len uses
    /// listed cycle (n-1) mod period. None makes the schedule finite.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repeat: Option<usize>,
}

impl Schedule {
    /// Cycle for 1-based index `n`, following `repeat` past the list.
    pub fn cycle_for(&self, n: usize) -> Result<&ScheduleCycle> {
        if n == 0 {
            return Err(Error::Precondition("cycle indices are 1-based".into()));
        }
        if n <= self.cycles.len() {
            return Ok(&self.cycles[n - 1]);
        }
        match self.repeat {
            Some(p) if p >= 1 && p <= self.cycles.len() => Ok(&self.cycles[(n - 1) % p]),
            Some(p) => Err(Error::Structural(format!(
                "repeat period {p} outside 1..={}",
                self.cycles.len()
            ))),
            None => Err(Error::Precondition(format!(
                "cycle {n} requested but schedule lists {} and does not repeat",
                self.cycles.len()
            ))),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schedule serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Structural(format!("schedule JSON: {e}")))
    }
}

/// The classic sweep for a star graph: for each leaf in ascending order,
/// step the hub-leaf edge, then the hub and leaf node blocks together.
/// One cycle, repeated forever, all edges active.
pub fn star_schedule(graph: &Graph) -> Result<Schedule> {
    let n = graph.num_nodes();
    if n < 2 {
        return Err(Error::Precondition("star schedule needs at least 2 nodes".into()));
    }
    // The hub is the one node on every edge.
    let edges = graph.edges();
    if edges.len() != n - 1 {
        return Err(Error::Precondition("not a star graph".into()));
    }
    let hub = if n == 2 {
        0
    } else {
        let (a, b) = edges[0];
        let hub = if edges[1..].iter().all(|&(x, y)| x == a || y == a) {
            a
        } else {
            b
        };
        if !edges.iter().all(|&(x, y)| x == hub || y == hub) {
            return Err(Error::Precondition("not a star graph".into()));
        }
        hub
    };
    let mut leaves: Vec<usize> = (0..n).filter(|&i| i != hub).collect();
    leaves.sort_unstable();
    let mut blocks = Vec::with_capacity(2 * leaves.len());
    for &leaf in &leaves {
        let (a, b) = (hub.min(leaf), hub.max(leaf));
        blocks.push(vec![BlockId::Edge((a, b))]);
        blocks.push(vec![BlockId::Node(a), BlockId::Node(b)]);
    }
    Ok(Schedule {
        w_bar: blocks.len(),
        cycles: vec![ScheduleCycle {
            active_edges: edges.to_vec(),
            blocks,
        }],
        repeat: Some(1),
    })
}

/// Block emission order for generic sweeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CyclicOrder {
    /// All edges first, then all remaining nodes.
    EdgesThenNodes,
    /// Each edge followed immediately by its not-yet-seen endpoints.
    Interleaved,
}

fn singleton_sweep(
    edges: &[(usize, usize)],
    num_nodes: usize,
    v4: &BTreeSet<usize>,
    order: CyclicOrder,
) -> Vec<Vec<BlockId>> {
    let mut blocks = Vec::new();
    if !v4.is_empty() {
        blocks.push(v4.iter().map(|&i| BlockId::Node(i)).collect());
    }
    let mut seen: Vec<bool> = (0..num_nodes).map(|i| v4.contains(&i)).collect();
    for &(a, b) in edges {
        blocks.push(vec![BlockId::Edge((a, b))]);
        if order == CyclicOrder::Interleaved {
            for node in [a, b] {
                if !seen[node] {
                    seen[node] = true;
                    blocks.push(vec![BlockId::Node(node)]);
                }
            }
        }
    }
    for (node, done) in seen.iter_mut().enumerate() {
        if !*done {
            *done = true;
            blocks.push(vec![BlockId::Node(node)]);
        }
    }
    blocks
}

/// Singleton sweep visiting every edge and every node once per cycle, with
/// the subdifferentiable nodes grouped into a single leading set.
pub fn cyclic_schedule(graph: &Graph, v4_nodes: &[usize], order: CyclicOrder) -> Result<Schedule> {
    let v4: BTreeSet<usize> = v4_nodes.iter().copied().collect();
    if let Some(&bad) = v4.iter().find(|&&i| i >= graph.num_nodes()) {
        return Err(Error::Precondition(format!("v4 node {bad} out of range")));
    }
    if !graph_connects(graph, graph.edges()) {
        return Err(Error::Precondition("graph is not connected".into()));
    }
    let blocks = singleton_sweep(graph.edges(), graph.num_nodes(), &v4, order);
    Ok(Schedule {
        w_bar: blocks.len(),
        cycles: vec![ScheduleCycle {
            active_edges: graph.edges().to_vec(),
            blocks,
        }],
        repeat: Some(1),
    })
}

fn graph_connects(graph: &Graph, edges: &[(usize, usize)]) -> bool {
    // Full-edge subspaces treat all coordinates alike, so testing one
    // coordinate decides connectivity.
    let subspaces: Vec<EdgeSubspace> = edges
        .iter()
        .map(|&(a, b)| EdgeSubspace::full(a, b))
        .collect();
    connects(&subspaces, graph, 1)
}

/// Per-cycle random active edge sets: each edge survives with probability
/// 1 - `drop_prob`, resampling the whole cycle until the survivors connect
/// the graph. Blocks are an interleaved singleton sweep of the survivors;
/// cycles with fewer survivors are padded up to the common block count by
/// re-stepping their active edges in order, which keeps w_bar uniform.
///
/// Draw order: one uniform draw per graph edge, in edge order, per attempt.
pub fn time_varying_schedule(
    graph: &Graph,
    seed: u64,
    drop_prob: f64,
    num_cycles: usize,
) -> Result<Schedule> {
    if !(0.0..1.0).contains(&drop_prob) {
        return Err(Error::Precondition(format!(
            "drop probability {drop_prob} outside [0, 1)"
        )));
    }
    if num_cycles == 0 {
        return Err(Error::Precondition("need at least one cycle".into()));
    }
    if !graph_connects(graph, graph.edges()) {
        return Err(Error::Precondition("graph is not connected".into()));
    }
    let mut rng = Rng::new(seed);
    let empty = BTreeSet::new();
    let mut cycles = Vec::with_capacity(num_cycles);
    for _ in 0..num_cycles {
        let mut active = Vec::new();
        let mut attempts = 0;
        loop {
            attempts += 1;
            if attempts > MAX_SAMPLE_ATTEMPTS {
                return Err(Error::Structural(format!(
                    "no connected active set after {MAX_SAMPLE_ATTEMPTS} attempts"
                )));
            }
            active.clear();
            for &edge in graph.edges() {
                if rng.uniform() >= drop_prob {
                    active.push(edge);
                }
            }
            if graph_connects(graph, &active) {
                break;
            }
        }
        let blocks = singleton_sweep(&active, graph.num_nodes(), &empty, CyclicOrder::Interleaved);
        cycles.push(ScheduleCycle {
            active_edges: active,
            blocks,
        });
    }
    let w_bar = cycles.iter().map(|c| c.blocks.len()).max().unwrap_or(0);
    for cycle in &mut cycles {
        let mut k = 0;
        while cycle.blocks.len() < w_bar {
            cycle
                .blocks
                .push(vec![BlockId::Edge(cycle.active_edges[k % cycle.active_edges.len()])]);
            k += 1;
        }
    }
    Ok(Schedule {
        w_bar,
        cycles,
        repeat: None,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Error,
    Warning,
}

/// One validation finding; errors make the schedule unrunnable in spirit,
/// warnings flag departures from the synchrony the convergence analysis
/// assumes for subdifferentiable nodes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Finding {
    pub severity: Severity,
    /// 1-based cycle the finding refers to; None for schedule-level issues.
    pub cycle: Option<usize>,
    pub message: String,
}

impl Finding {
    fn error(cycle: Option<usize>, message: String) -> Self {
        Finding {
            severity: Severity::Error,
            cycle,
            message,
        }
    }

    fn warning(cycle: Option<usize>, message: String) -> Self {
        Finding {
            severity: Severity::Warning,
            cycle,
            message,
        }
    }
}

pub fn has_errors(findings: &[Finding]) -> bool {
    findings.iter().any(|f| f.severity == Severity::Error)
}

/// Checks a schedule against a graph and the set of subdifferentiable
/// nodes. Errors: structural breakage, empty sets, active sets that do not
/// match the stepped edges or do not connect, uncovered nodes, mixed
/// subdifferentiable/ordinary sets, overlapping supports. Warnings: the
/// first set is not exactly the subdifferentiable nodes; a block touches a
/// subdifferentiable node after that node's first update of the cycle.
pub fn validate(schedule: &Schedule, graph: &Graph, v4_nodes: &[usize]) -> Vec<Finding> {
    let mut findings = Vec::new();
    let v4: BTreeSet<usize> = v4_nodes.iter().copied().collect();
    if schedule.w_bar == 0 {
        findings.push(Finding::error(None, "w_bar must be at least 1".into()));
    }
    if schedule.cycles.is_empty() {
        findings.push(Finding::error(None, "schedule lists no cycles".into()));
    }
    if let Some(p) = schedule.repeat {
        if p == 0 || p > schedule.cycles.len() {
            findings.push(Finding::error(
                None,
                format!("repeat period {p} outside 1..={}", schedule.cycles.len()),
            ));
        }
    }
    for (idx, cycle) in schedule.cycles.iter().enumerate() {
        validate_cycle(cycle, idx + 1, schedule.w_bar, graph, &v4, &mut findings);
    }
    findings
}

fn validate_cycle(
    cycle: &ScheduleCycle,
    n: usize,
    w_bar: usize,
    graph: &Graph,
    v4: &BTreeSet<usize>,
    findings: &mut Vec<Finding>,
) {
    let at = Some(n);
    if cycle.blocks.len() != w_bar {
        findings.push(Finding::error(
            at,
            format!("{} block sets, expected w_bar = {w_bar}", cycle.blocks.len()),
        ));
    }

    let mut active = BTreeSet::new();
    for &(a, b) in &cycle.active_edges {
        let (a, b) = (a.min(b), a.max(b));
        if !graph.has_edge(a, b) {
            findings.push(Finding::error(at, format!("active edge ({a}, {b}) not in graph")));
        } else if !active.insert((a, b)) {
            findings.push(Finding::error(at, format!("duplicate active edge ({a}, {b})")));
        }
    }
    if !graph_connects(graph, &cycle.active_edges) {
        findings.push(Finding::error(at, "active edges do not connect the graph".into()));
    }

    let mut covered_nodes = BTreeSet::new();
    let mut stepped_edges = BTreeSet::new();
    // Per v4 node, the 1-based index of its first update this cycle.
    let mut first_update: Vec<Option<usize>> = vec![None; graph.num_nodes()];
    for (w0, set) in cycle.blocks.iter().enumerate() {
        let w = w0 + 1;
        if set.is_empty() {
            findings.push(Finding::error(at, format!("block set {w} is empty")));
            continue;
        }
        let mut support = BTreeSet::new();
        let mut v4_members = 0;
        for &block in set {
            match block.normalized() {
                BlockId::Node(i) => {
                    if i >= graph.num_nodes() {
                        findings.push(Finding::error(at, format!("block set {w}: node {i} out of range")));
                        continue;
                    }
                    covered_nodes.insert(i);
                    if v4.contains(&i) {
                        v4_members += 1;
                        first_update[i].get_or_insert(w);
                    }
                    if !support.insert(i) {
                        findings.push(Finding::error(
                            at,
                            format!("block set {w}: overlapping support at node {i}"),
                        ));
                    }
                }
                BlockId::Edge((a, b)) => {
                    if !graph.has_edge(a, b) {
                        findings.push(Finding::error(
                            at,
                            format!("block set {w}: edge ({a}, {b}) not in graph"),
                        ));
                        continue;
                    }
                    if !active.contains(&(a, b)) {
                        findings.push(Finding::error(
                            at,
                            format!("block set {w}: edge ({a}, {b}) stepped but not active"),
                        ));
                    }
                    stepped_edges.insert((a, b));
                    for i in [a, b] {
                        if !support.insert(i) {
                            findings.push(Finding::error(
                                at,
                                format!("block set {w}: overlapping support at node {i}"),
                            ));
                        }
                    }
                }
            }
        }
        if v4_members > 0 && v4_members != set.len() {
            findings.push(Finding::error(
                at,
                format!("block set {w} mixes subdifferentiable and ordinary blocks"),
            ));
        }
    }

    for &edge in &active {
        if !stepped_edges.contains(&edge) {
            findings.push(Finding::error(
                at,
                format!("active edge ({}, {}) never stepped", edge.0, edge.1),
            ));
        }
    }
    for i in 0..graph.num_nodes() {
        if !covered_nodes.contains(&i) {
            // Ascent over the full dual needs every node dual stepped;
            // appearing as an edge endpoint does not count.
            findings.push(Finding::error(at, format!("node {i} never stepped")));
        }
    }

    if !v4.is_empty() {
        let leading: BTreeSet<usize> = cycle
            .blocks
            .first()
            .map(|set| {
                set.iter()
                    .filter_map(|b| match b.normalized() {
                        BlockId::Node(i) => Some(i),
                        BlockId::Edge(_) => None,
                    })
                    .collect()
            })
            .unwrap_or_default();
        if &leading != v4 {
            findings.push(Finding::warning(
                at,
                "first block set is not exactly the subdifferentiable nodes".into(),
            ));
        }
        for (w0, set) in cycle.blocks.iter().enumerate() {
            let w = w0 + 1;
            for &block in set {
                for i in block.normalized().support() {
                    if !v4.contains(&i) {
                        continue;
                    }
                    let own_update = matches!(block.normalized(), BlockId::Node(j) if j == i);
                    let late = match first_update[i] {
                        Some(first) => w > first && !own_update,
                        None => true,
                    };
                    if late {
                        findings.push(Finding::warning(
                            at,
                            format!(
                                "block set {w} touches subdifferentiable node {i} after its update"
                            ),
                        ));
                    }
                }
            }
        }
    }
}
