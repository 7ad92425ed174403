//! The dual block-coordinate ascent state machine.
//!
//! The engine owns all dual variables for one problem instance: a dual
//! block per node (only the node's own component, which is the whole
//! vector by sparsity), a payload per edge subspace, the cached aggregate
//! of the edge duals, and one affine minorant per subdifferentiable node.
//! The primal iterate is always
//!
//! ```text
//!   x = anchor - v_h - (embedded node duals)
//! ```
//!
//! A cycle starts by redistributing the edge aggregate over that cycle's
//! active edges (which never changes the aggregate, hence neither the
//! primal point nor the dual value), then executes the schedule's block
//! sets in order. A block set steps each member to the exact minimizer of
//! the dual restricted to that block; disjoint supports make the joint
//! minimizer separable. Subdifferentiable nodes instead take one bundle
//! step: a fresh tangent cut is combined with the carried minorant, the
//! prox of the two-piece max is solved in closed form, and the minorant
//! collapses back to a single affine function whose slope is the new dual
//! block and whose value at the new primal point equals the two-piece max
//! there. That value choice keeps the working dual exactly consistent
//! with the prox step, which is what makes the per-step ascent inequality
//! hold with no slack.
//!
//! The dual value is `-(1/2)||anchor - v_A||^2 + (1/2)||anchor||^2` minus
//! the sum of node conjugates. Edge conjugates vanish by representation.
//! A node conjugate is known only once the node holds a witness (a primal
//! point together with its function value, produced by the node's first
//! prox) or, for subdifferentiable nodes, while the dual block equals the
//! minorant slope. Until every node has one, the dual value is reported
//! as negative infinity: claiming any finite value without a witness can
//! overshoot the true dual and break weak duality.
//!
//! Every inner step appends one history record and, unless disabled,
//! feeds the runtime invariant families (ascent, gap sign, gap domination
//! of the squared distance, prox consistency, reset neutrality, aggregate
//! consistency, minorant domination, stagnation, and agreement between
//! the incremental and from-scratch dual values).

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::funcs::{prox_max_two_affine, AffineMinorant, NodeClass};
use crate::instances::Instance;
use crate::rng::Rng;
use crate::schedule::{self, BlockId, Schedule};
use crate::stacked::{vecmath, StackedVector};
use crate::topology::{decompose_edge_duals, EdgeCoords, EdgeSubspace};

/// Relative slack allowed when checking per-step dual ascent.
pub const ASCENT_REL_TOL: f64 = 1e-8;
/// Absolute slack for gap nonnegativity and gap-dominates-distance.
pub const GAP_TOL: f64 = 1e-9;
/// Allowed residual of x + z = p after a prox step.
pub const MOREAU_TOL: f64 = 1e-10;
/// Allowed dual-value drift across an edge reset.
pub const RESET_TOL: f64 = 1e-9;
/// Allowed gap between the cached aggregate and the payload sum.
pub const VH_SUM_TOL: f64 = 1e-9;
/// Allowed excess of a minorant over its function at sampled points.
pub const DOMINATION_TOL: f64 = 1e-9;
/// Relative agreement required between the two dual-value paths.
pub const RECOMPUTE_REL_TOL: f64 = 1e-9;
/// A dual block counts as sitting on its minorant slope within this.
pub const SLOPE_MATCH_TOL: f64 = 1e-8;

/// Seed for the sampling used by the minorant-domination check. The draws
/// never influence the iterates, only where the check looks.
const PROBE_SEED: u64 = 0xDA7A_5EED;

/// How generated node classes are overridden for a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Treatment {
    /// Use the classes stored on the instance.
    AsClassified,
    /// Every full-domain node is handled by bundle steps.
    Subdifferentiable,
    /// Every full-domain node is handled by exact prox steps.
    Proximable,
}

/// Known optimum used for gap and distance reporting.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PrimalReference {
    /// Consensus point, one block's worth.
    pub point: Vec<f64>,
    /// Primal objective value at that point.
    pub value: f64,
}

/// One row of the run history, written after every inner step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct HistoryRecord {
    pub cycle: usize,
    pub inner: usize,
    /// Dual objective; negative infinity until every node has a witness.
    pub dual_value: f64,
    /// Reference primal value minus dual value; NaN without a reference.
    pub gap: f64,
    /// Half squared distance of the primal iterate to the reference point.
    pub dist_sq: f64,
    /// Squared norm of the aggregate dual movement in this step.
    pub step_norm_sq: f64,
}

/// Recorded steps of a run, exportable as CSV.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunHistory {
    pub records: Vec<HistoryRecord>,
}

pub const CSV_HEADER: &str = "n,w,dual_value,gap,dist_sq,step_norm_sq";

fn format_float(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        // 17 significant digits round-trip every binary64 exactly.
        format!("{v:.16e}")
    }
}

impl RunHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.records.len() + 1));
        out.push_str(CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.cycle,
                r.inner,
                format_float(r.dual_value),
                format_float(r.gap),
                format_float(r.dist_sq),
                format_float(r.step_norm_sq)
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == CSV_HEADER => {}
            other => {
                return Err(Error::Structural(format!(
                    "bad CSV header: {:?}",
                    other.unwrap_or("")
                )))
            }
        }
        let mut records = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 6 {
                return Err(Error::Structural(format!(
                    "CSV line {}: expected 6 fields, got {}",
                    lineno + 2,
                    fields.len()
                )));
            }
            let parse_int = |s: &str| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|e| Error::Structural(format!("CSV line {}: {e}", lineno + 2)))
            };
            let parse_f = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Structural(format!("CSV line {}: {e}", lineno + 2)))
            };
            records.push(HistoryRecord {
                cycle: parse_int(fields[0])?,
                inner: parse_int(fields[1])?,
                dual_value: parse_f(fields[2])?,
                gap: parse_f(fields[3])?,
                dist_sq: parse_f(fields[4])?,
                step_norm_sq: parse_f(fields[5])?,
            });
        }
        Ok(RunHistory { records })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }

    /// Last record of each cycle, in cycle order.
    pub fn cycle_boundaries(&self) -> Vec<HistoryRecord> {
        let mut out: Vec<HistoryRecord> = Vec::new();
        for r in &self.records {
            match out.last_mut() {
                Some(last) if last.cycle == r.cycle => *last = *r,
                _ => out.push(*r),
            }
        }
        out
    }
}

/// Outcome counters for one runtime invariant family. `worst_margin` is
/// the minimum over all checks of the slack left before the family's
/// tolerance; negative margin means a violation.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct FamilyReport {
    pub checks: usize,
    pub violations: usize,
    pub worst_margin: f64,
    pub first_violation: Option<(usize, usize)>,
}

impl Default for FamilyReport {
    fn default() -> Self {
        FamilyReport {
            checks: 0,
            violations: 0,
            worst_margin: f64::INFINITY,
            first_violation: None,
        }
    }
}

impl FamilyReport {
    fn record(&mut self, margin: f64, at: (usize, usize)) {
        self.checks += 1;
        if margin < self.worst_margin {
            self.worst_margin = margin;
        }
        if margin < 0.0 && self.first_violation.is_none() {
            self.first_violation = Some(at);
        }
        if margin < 0.0 {
            self.violations += 1;
        }
    }
}

/// All runtime invariant families tracked during a run.
#[derive(Clone, Debug, Default, Serialize)]
pub struct InvariantReport {
    pub dual_ascent: FamilyReport,
    pub gap_nonneg: FamilyReport,
    pub gap_dominates_dist: FamilyReport,
    pub moreau: FamilyReport,
    pub reset_neutrality: FamilyReport,
    pub vh_consistency: FamilyReport,
    pub minorant_domination: FamilyReport,
    pub stagnation: FamilyReport,
    pub dual_recompute: FamilyReport,
}

impl InvariantReport {
    pub fn families(&self) -> [(&'static str, &FamilyReport); 9] {
        [
            ("dual_ascent", &self.dual_ascent),
            ("gap_nonneg", &self.gap_nonneg),
            ("gap_dominates_dist", &self.gap_dominates_dist),
            ("moreau", &self.moreau),
            ("reset_neutrality", &self.reset_neutrality),
            ("vh_consistency", &self.vh_consistency),
            ("minorant_domination", &self.minorant_domination),
            ("stagnation", &self.stagnation),
            ("dual_recompute", &self.dual_recompute),
        ]
    }

    pub fn total_violations(&self) -> usize {
        self.families().iter().map(|(_, f)| f.violations).sum()
    }

    /// Family name and coordinates of the earliest recorded violation.
    pub fn first_violation(&self) -> Option<(&'static str, (usize, usize))> {
        self.families()
            .iter()
            .filter_map(|(name, f)| f.first_violation.map(|at| (*name, at)))
            .min_by_key(|&(_, at)| at)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RunOptions {
    /// Evaluate the invariant families at every step.
    pub check_invariants: bool,
    /// Abort the run at the first invariant violation.
    pub fail_fast: bool,
    /// Sample count for the minorant-domination check.
    pub domination_samples: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            check_invariants: true,
            fail_fast: true,
            domination_samples: 100,
        }
    }
}

/// Measured movement caused by one edge reset.
#[derive(Clone, Copy, Debug)]
pub struct ResetOutcome {
    /// Norm of the change of the edge aggregate (should be ~0).
    pub vh_drift: f64,
    /// Absolute change of the dual value (should be ~0).
    pub dual_drift: f64,
}

#[derive(Clone, Debug)]
struct Witness {
    x: Vec<f64>,
    value: f64,
}

#[derive(Debug)]
pub struct Engine {
    instance: Instance,
    schedule: Schedule,
    classes: Vec<NodeClass>,
    subspaces: Vec<EdgeSubspace>,
    pair_index: BTreeMap<(usize, usize), Vec<usize>>,
    node_duals: Vec<Vec<f64>>,
    payloads: Vec<Vec<f64>>,
    v_h: StackedVector,
    minorants: Vec<Option<AffineMinorant>>,
    witnesses: Vec<Option<Witness>>,
    completed_cycles: usize,
    cur_cycle: usize,
    cur_inner: usize,
    prev_dual: f64,
    options: RunOptions,
    history: RunHistory,
    invariants: InvariantReport,
    warnings: Vec<String>,
    primal_ref: Option<PrimalReference>,
    max_reset_vh_drift: f64,
    max_reset_dual_drift: f64,
    probe_rng: Rng,
}

impl Engine {
    pub fn new(instance: Instance, schedule: Schedule, treatment: Treatment) -> Result<Self> {
        Self::with_initial_state(instance, schedule, treatment, None, None)
    }

    /// As `new`, but with explicit starting duals: per-node blocks and an
    /// edge aggregate, which must have zero block sums per coordinate and
    /// is immediately decomposed over the full edge set.
    pub fn with_initial_state(
        instance: Instance,
        schedule: Schedule,
        treatment: Treatment,
        node_init: Option<Vec<Vec<f64>>>,
        edge_aggregate_init: Option<StackedVector>,
    ) -> Result<Self> {
        instance.validate()?;
        let n = instance.graph.num_nodes();
        let m = instance.block_dim;

        let classes: Vec<NodeClass> = instance
            .functions
            .iter()
            .map(|f| match treatment {
                Treatment::AsClassified => f.class,
                Treatment::Subdifferentiable if f.is_full_domain() => NodeClass::Subdifferentiable,
                Treatment::Proximable if f.is_full_domain() => NodeClass::Proximable,
                _ => f.class,
            })
            .collect();
        let v4: Vec<usize> = (0..n)
            .filter(|&i| classes[i] == NodeClass::Subdifferentiable)
            .collect();

        let findings = schedule::validate(&schedule, &instance.graph, &v4);
        if schedule::has_errors(&findings) {
            let msgs: Vec<String> = findings
                .iter()
                .filter(|f| f.severity == schedule::Severity::Error)
                .take(3)
                .map(|f| f.message.clone())
                .collect();
            return Err(Error::UnsupportedSchedule(msgs.join("; ")));
        }
        let warnings: Vec<String> = findings
            .iter()
            .map(|f| match f.cycle {
                Some(c) => format!("cycle {c}: {}", f.message),
                None => f.message.clone(),
            })
            .collect();

        let subspaces = instance.edge_subspaces();
        let mut pair_index: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for (idx, s) in subspaces.iter().enumerate() {
            pair_index.entry(s.edge).or_default().push(idx);
        }

        let node_duals = match node_init {
            Some(z) => {
                if z.len() != n || z.iter().any(|b| b.len() != m) {
                    return Err(Error::Precondition("node dual init has the wrong shape".into()));
                }
                z
            }
            None => vec![vec![0.0; m]; n],
        };

        let mut payloads: Vec<Vec<f64>> =
            subspaces.iter().map(|s| vec![0.0; s.payload_dim(m)]).collect();
        let mut v_h = StackedVector::zeros(n, m);
        if let Some(init) = edge_aggregate_init {
            if init.num_blocks() != n || init.block_dim() != m {
                return Err(Error::Precondition("edge aggregate init has the wrong shape".into()));
            }
            if init.norm_sq() > 0.0 {
                let report = decompose_edge_duals(&init, &subspaces)?;
                for (idx, dual) in report.duals.iter().enumerate() {
                    payloads[idx] = dual.payload.clone();
                }
                for (s, t) in subspaces.iter().zip(&payloads) {
                    s.add_expanded(t, &mut v_h, 1.0);
                }
            }
        }

        let mut minorants: Vec<Option<AffineMinorant>> = vec![None; n];
        let mut witnesses: Vec<Option<Witness>> = vec![None; n];
        for &i in &v4 {
            let point = vecmath::sub(
                &vecmath::sub(instance.anchor.block(i), v_h.block(i)),
                &node_duals[i],
            );
            let tangent = AffineMinorant::tangent(&instance.functions[i], &point)?;
            witnesses[i] = Some(Witness {
                value: tangent.eval(&point),
                x: point,
            });
            minorants[i] = Some(tangent);
        }

        let primal_ref = instance.planted_optimum.as_ref().map(|point| PrimalReference {
            value: crate::instances::primal_value_at(&instance, point),
            point: point.clone(),
        });

        let mut engine = Engine {
            instance,
            schedule,
            classes,
            subspaces,
            pair_index,
            node_duals,
            payloads,
            v_h,
            minorants,
            witnesses,
            completed_cycles: 0,
            cur_cycle: 1,
            cur_inner: 0,
            prev_dual: f64::NEG_INFINITY,
            options: RunOptions::default(),
            history: RunHistory::default(),
            invariants: InvariantReport::default(),
            warnings,
            primal_ref,
            max_reset_vh_drift: 0.0,
            max_reset_dual_drift: 0.0,
            probe_rng: Rng::new(PROBE_SEED),
        };
        engine.prev_dual = engine.dual_value();
        Ok(engine)
    }

    pub fn set_options(&mut self, options: RunOptions) {
        self.options = options;
    }

    pub fn instance(&self) -> &Instance {
        &self.instance
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn effective_class(&self, i: usize) -> NodeClass {
        self.classes[i]
    }

    pub fn v4_nodes(&self) -> Vec<usize> {
        (0..self.classes.len())
            .filter(|&i| self.classes[i] == NodeClass::Subdifferentiable)
            .collect()
    }

    pub fn node_dual(&self, i: usize) -> &[f64] {
        &self.node_duals[i]
    }

    pub fn minorant(&self, i: usize) -> Option<&AffineMinorant> {
        self.minorants[i].as_ref()
    }

    pub fn edge_aggregate(&self) -> &StackedVector {
        &self.v_h
    }

    pub fn history(&self) -> &RunHistory {
        &self.history
    }

    pub fn invariant_report(&self) -> &InvariantReport {
        &self.invariants
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn max_reset_vh_drift(&self) -> f64 {
        self.max_reset_vh_drift
    }

    pub fn max_reset_dual_drift(&self) -> f64 {
        self.max_reset_dual_drift
    }

    pub fn completed_cycles(&self) -> usize {
        self.completed_cycles
    }

    pub fn primal_reference(&self) -> Option<&PrimalReference> {
        self.primal_ref.as_ref()
    }

    pub fn set_primal_reference(&mut self, point: Vec<f64>, value: f64) -> Result<()> {
        if point.len() != self.instance.block_dim {
            return Err(Error::Precondition("reference point has the wrong dimension".into()));
        }
        self.primal_ref = Some(PrimalReference { point, value });
        Ok(())
    }

    /// Prox center of node `i`: its block of anchor - v_h. Other nodes'
    /// duals do not touch block i, so this is the full leave-one-out sum.
    pub fn prox_center(&self, i: usize) -> Vec<f64> {
        vecmath::sub(self.instance.anchor.block(i), self.v_h.block(i))
    }

    /// Current primal iterate: anchor - v_h - embedded node duals.
    pub fn primal_estimate(&self) -> StackedVector {
        let mut x = self.instance.anchor.clone();
        x.sub_assign(&self.v_h);
        for (i, z) in self.node_duals.iter().enumerate() {
            let block = x.block_mut(i);
            for (xk, zk) in block.iter_mut().zip(z) {
                *xk -= zk;
            }
        }
        x
    }

    fn node_conjugate(&self, i: usize) -> f64 {
        match self.classes[i] {
            NodeClass::Subdifferentiable => {
                let minorant = self.minorants[i].as_ref().expect("v4 node has a minorant");
                if minorant.slope_matches(&self.node_duals[i], SLOPE_MATCH_TOL) {
                    -minorant.intercept
                } else {
                    f64::INFINITY
                }
            }
            _ => match &self.witnesses[i] {
                Some(w) => vecmath::dot(&w.x, &self.node_duals[i]) - w.value,
                None => f64::INFINITY,
            },
        }
    }

    /// Dual objective from the cached aggregate and stored witnesses.
    pub fn dual_value(&self) -> f64 {
        let mut v_a = self.v_h.clone();
        for (i, z) in self.node_duals.iter().enumerate() {
            let block = v_a.block_mut(i);
            for (vk, zk) in block.iter_mut().zip(z) {
                *vk += zk;
            }
        }
        let diff = self.instance.anchor.sub(&v_a);
        let quad = -0.5 * diff.norm_sq() + 0.5 * self.instance.anchor.norm_sq();
        let mut conj = 0.0;
        for i in 0..self.classes.len() {
            let c = self.node_conjugate(i);
            if c == f64::INFINITY {
                return f64::NEG_INFINITY;
            }
            conj += c;
        }
        quad - conj
    }

    /// Dual objective recomputed from first principles: the aggregate is
    /// re-summed from edge payloads and witness values are re-evaluated.
    pub fn dual_value_recomputed(&self) -> f64 {
        let n = self.instance.graph.num_nodes();
        let m = self.instance.block_dim;
        let mut v_a = StackedVector::zeros(n, m);
        for (s, t) in self.subspaces.iter().zip(&self.payloads) {
            s.add_expanded(t, &mut v_a, 1.0);
        }
        for (i, z) in self.node_duals.iter().enumerate() {
            let block = v_a.block_mut(i);
            for (vk, zk) in block.iter_mut().zip(z) {
                *vk += zk;
            }
        }
        let diff = self.instance.anchor.sub(&v_a);
        let quad = -0.5 * diff.norm_sq() + 0.5 * self.instance.anchor.norm_sq();
        let mut conj = 0.0;
        for i in 0..self.classes.len() {
            let c = match self.classes[i] {
                NodeClass::Subdifferentiable => {
                    let minorant = self.minorants[i].as_ref().expect("v4 node has a minorant");
                    if minorant.slope_matches(&self.node_duals[i], SLOPE_MATCH_TOL) {
                        -minorant.intercept
                    } else {
                        f64::INFINITY
                    }
                }
                _ => match &self.witnesses[i] {
                    Some(w) => self.instance.functions[i].conjugate_at(&self.node_duals[i], &w.x),
                    None => f64::INFINITY,
                },
            };
            if c == f64::INFINITY {
                return f64::NEG_INFINITY;
            }
            conj += c;
        }
        quad - conj
    }

    /// Reference primal value minus the dual value; NaN without a
    /// reference, +inf while the dual value is -inf.
    pub fn duality_gap(&self) -> f64 {
        match &self.primal_ref {
            Some(r) => r.value - self.dual_value(),
            None => f64::NAN,
        }
    }

    /// Half squared distance from the primal iterate to the reference
    /// consensus point; NaN without a reference.
    pub fn dist_sq(&self) -> f64 {
        match &self.primal_ref {
            Some(r) => {
                let target = StackedVector::splat(self.instance.graph.num_nodes(), &r.point);
                0.5 * self.primal_estimate().sub(&target).norm_sq()
            }
            None => f64::NAN,
        }
    }

    /// Replace a subdifferentiable node's minorant. Exists for fault
    /// injection in verification flows; a minorant lying above the
    /// function must be caught by the domination and gap checks.
    pub fn force_minorant(&mut self, i: usize, minorant: AffineMinorant) -> Result<()> {
        if self.classes[i] != NodeClass::Subdifferentiable {
            return Err(Error::Precondition(format!(
                "node {i} is not handled as subdifferentiable"
            )));
        }
        if minorant.slope.len() != self.instance.block_dim {
            return Err(Error::Precondition("minorant slope has the wrong dimension".into()));
        }
        self.minorants[i] = Some(minorant);
        Ok(())
    }

    /// Redistribute the edge aggregate over `active` edges. The aggregate,
    /// the primal iterate, and the dual value are invariant; inactive
    /// edges end up with zero duals.
    pub fn reset_edges(&mut self, active: &[(usize, usize)]) -> Result<ResetOutcome> {
        let mut idxs: Vec<usize> = Vec::new();
        for &(a, b) in active {
            let pair = (a.min(b), a.max(b));
            match self.pair_index.get(&pair) {
                Some(list) => idxs.extend_from_slice(list),
                None => {
                    return Err(Error::UnsupportedSchedule(format!(
                        "active edge ({a}, {b}) is not a graph edge"
                    )))
                }
            }
        }
        idxs.sort_unstable();
        idxs.dedup();
        let active_subspaces: Vec<EdgeSubspace> =
            idxs.iter().map(|&i| self.subspaces[i]).collect();

        let dual_before = self.dual_value();
        let v_before = self.v_h.clone();
        let report = decompose_edge_duals(&v_before, &active_subspaces)?;

        for t in &mut self.payloads {
            t.iter_mut().for_each(|x| *x = 0.0);
        }
        for (&idx, dual) in idxs.iter().zip(&report.duals) {
            self.payloads[idx] = dual.payload.clone();
        }
        let mut fresh = StackedVector::zeros(
            self.instance.graph.num_nodes(),
            self.instance.block_dim,
        );
        for (s, t) in self.subspaces.iter().zip(&self.payloads) {
            s.add_expanded(t, &mut fresh, 1.0);
        }
        self.v_h = fresh;

        let vh_drift = self.v_h.sub(&v_before).norm_sq().sqrt();
        let dual_after = self.dual_value();
        let dual_drift = if dual_before == f64::NEG_INFINITY && dual_after == f64::NEG_INFINITY {
            0.0
        } else {
            (dual_after - dual_before).abs()
        };
        self.max_reset_vh_drift = self.max_reset_vh_drift.max(vh_drift);
        self.max_reset_dual_drift = self.max_reset_dual_drift.max(dual_drift);
        if self.options.check_invariants {
            let at = (self.cur_cycle, 0);
            self.invariants.reset_neutrality.record(RESET_TOL - dual_drift, at);
            self.invariants.vh_consistency.record(VH_SUM_TOL - vh_drift, at);
        }
        self.prev_dual = dual_after;
        Ok(ResetOutcome { vh_drift, dual_drift })
    }

    /// One bundle step on subdifferentiable node `i`. Returns the squared
    /// norm of the dual block movement.
    pub fn subdiff_update(&mut self, i: usize) -> Result<f64> {
        if self.classes[i] != NodeClass::Subdifferentiable {
            return Err(Error::Precondition(format!(
                "node {i} is not handled as subdifferentiable"
            )));
        }
        self.cur_inner += 1;
        self.subdiff_update_inner(i)
    }

    fn subdiff_update_inner(&mut self, i: usize) -> Result<f64> {
        let f = &self.instance.functions[i];
        let p = self.prox_center(i);
        let z_old = self.node_duals[i].clone();
        let q = vecmath::sub(&p, &z_old);
        let fresh = AffineMinorant::tangent(f, &q)?;
        let old = self.minorants[i].as_ref().expect("v4 node has a minorant");
        let (pr, _theta) = prox_max_two_affine(
            &old.slope,
            old.intercept,
            &fresh.slope,
            fresh.intercept,
            &p,
        );
        // The collapsed minorant passes through the two-piece max at the
        // new primal point; its slope is the new dual block.
        let intercept = pr.witness_value - vecmath::dot(&pr.z, &pr.x);
        let new_minorant = AffineMinorant {
            slope: pr.z.clone(),
            intercept,
        };

        if self.options.check_invariants && self.options.domination_samples > 0 {
            let mut worst = f64::INFINITY;
            for _ in 0..self.options.domination_samples {
                let point: Vec<f64> = pr
                    .x
                    .iter()
                    .map(|&xk| {
                        let half_width = 1.0 + xk.abs();
                        xk + (2.0 * self.probe_rng.uniform() - 1.0) * half_width
                    })
                    .collect();
                let margin = f.eval(&point) + DOMINATION_TOL - new_minorant.eval(&point);
                worst = worst.min(margin);
            }
            self.invariants
                .minorant_domination
                .record(worst, (self.cur_cycle, self.cur_inner));
        }

        let moved = vecmath::norm_sq(&vecmath::sub(&pr.z, &z_old));
        self.minorants[i] = Some(new_minorant);
        self.node_duals[i] = pr.z.clone();
        self.witnesses[i] = Some(Witness {
            value: pr.witness_value,
            x: pr.x,
        });
        Ok(moved)
    }

    /// Execute one block set: exact prox/projection per member, or one
    /// bundle step per member when the set consists of subdifferentiable
    /// nodes. Returns the squared norm of the aggregate dual movement.
    pub fn step_set(&mut self, set: &[BlockId]) -> Result<f64> {
        self.cur_inner += 1;
        self.step_set_inner(set)
    }

    fn step_set_inner(&mut self, set: &[BlockId]) -> Result<f64> {
        if set.is_empty() {
            return Err(Error::UnsupportedSchedule("empty block set".into()));
        }
        let blocks: Vec<BlockId> = set.iter().map(|b| b.normalized()).collect();

        let mut support = BTreeSet::new();
        let mut v4_members = 0;
        for &b in &blocks {
            for i in b.support() {
                if i >= self.instance.graph.num_nodes() {
                    return Err(Error::UnsupportedSchedule(format!("node {i} out of range")));
                }
                if !support.insert(i) {
                    return Err(Error::UnsupportedSchedule(format!(
                        "overlapping support at node {i}"
                    )));
                }
            }
            if matches!(b, BlockId::Node(i) if self.classes[i] == NodeClass::Subdifferentiable) {
                v4_members += 1;
            }
        }
        if v4_members > 0 && v4_members != blocks.len() {
            return Err(Error::UnsupportedSchedule(
                "set mixes subdifferentiable and ordinary blocks".into(),
            ));
        }

        let at = (self.cur_cycle, self.cur_inner);
        let snapshot = if self.options.check_invariants {
            Some((self.payloads.clone(), self.node_duals.clone()))
        } else {
            None
        };

        let mut step_sq = 0.0;
        let mut touched_nodes: BTreeSet<usize> = BTreeSet::new();
        let mut touched_edges: BTreeSet<usize> = BTreeSet::new();

        if v4_members > 0 {
            for &b in &blocks {
                let BlockId::Node(i) = b else { unreachable!() };
                step_sq += self.subdiff_update_inner(i)?;
                touched_nodes.insert(i);
            }
        } else {
            let x_cur = self.primal_estimate();
            for &b in &blocks {
                match b {
                    BlockId::Node(i) => {
                        let p = self.prox_center(i);
                        let pr = self.instance.functions[i].prox(&p)?;
                        if self.options.check_invariants {
                            let err = vecmath::norm(&vecmath::sub(
                                &vecmath::add(&pr.x, &pr.z),
                                &p,
                            ));
                            self.invariants.moreau.record(MOREAU_TOL - err, at);
                        }
                        step_sq += vecmath::norm_sq(&vecmath::sub(&pr.z, &self.node_duals[i]));
                        self.node_duals[i] = pr.z;
                        self.witnesses[i] = Some(Witness {
                            value: pr.witness_value,
                            x: pr.x,
                        });
                        touched_nodes.insert(i);
                    }
                    BlockId::Edge(pair) => {
                        let idxs = self.pair_index.get(&pair).ok_or_else(|| {
                            Error::UnsupportedSchedule(format!(
                                "edge ({}, {}) is not a graph edge",
                                pair.0, pair.1
                            ))
                        })?;
                        for &idx in idxs {
                            let sub = &self.subspaces[idx];
                            let (a, b) = sub.edge;
                            let coords: Vec<usize> = match sub.coords {
                                EdgeCoords::All => (0..self.instance.block_dim).collect(),
                                EdgeCoords::Single(k) => vec![k],
                            };
                            let old = self.payloads[idx].clone();
                            let mut fresh = old.clone();
                            for (slot, &k) in fresh.iter_mut().zip(&coords) {
                                // Putting the old payload back into x and
                                // projecting onto H-perp averages the two
                                // endpoint components.
                                *slot += (x_cur.block(a)[k] - x_cur.block(b)[k]) / 2.0;
                            }
                            let delta = vecmath::sub(&fresh, &old);
                            step_sq += 2.0 * vecmath::norm_sq(&delta);
                            sub.add_expanded(&delta, &mut self.v_h, 1.0);
                            self.payloads[idx] = fresh;
                            touched_edges.insert(idx);
                        }
                    }
                }
            }
        }

        if let Some((old_payloads, old_nodes)) = snapshot {
            let mut clean = true;
            for (idx, old) in old_payloads.iter().enumerate() {
                if !touched_edges.contains(&idx) {
                    clean &= bits_equal(old, &self.payloads[idx]);
                }
            }
            for (i, old) in old_nodes.iter().enumerate() {
                if !touched_nodes.contains(&i) {
                    clean &= bits_equal(old, &self.node_duals[i]);
                }
            }
            self.invariants
                .stagnation
                .record(if clean { 0.0 } else { -1.0 }, at);
        }
        Ok(step_sq)
    }

    /// Execute the next cycle of the schedule: reset, then each block set,
    /// appending one history record per inner step.
    pub fn advance_cycle(&mut self) -> Result<()> {
        let n = self.completed_cycles + 1;
        self.cur_cycle = n;
        self.cur_inner = 0;
        let cycle = self.schedule.cycle_for(n)?.clone();
        self.reset_edges(&cycle.active_edges)
            .map_err(|e| e.at_step(n, 0))?;
        for (w0, set) in cycle.blocks.iter().enumerate() {
            let w = w0 + 1;
            self.cur_inner = w;
            let step_sq = self.step_set_inner(set).map_err(|e| e.at_step(n, w))?;
            self.record_step(n, w, step_sq).map_err(|e| e.at_step(n, w))?;
        }
        self.completed_cycles = n;
        Ok(())
    }

    fn record_step(&mut self, n: usize, w: usize, step_sq: f64) -> Result<()> {
        let dual = self.dual_value();
        let gap = match &self.primal_ref {
            Some(r) => r.value - dual,
            None => f64::NAN,
        };
        let dist = self.dist_sq();
        if self.options.check_invariants {
            let at = (n, w);
            if self.prev_dual > f64::NEG_INFINITY {
                let margin =
                    dual - self.prev_dual - 0.5 * step_sq + ASCENT_REL_TOL * (1.0 + dual.abs());
                self.invariants.dual_ascent.record(margin, at);
            }
            if gap.is_finite() {
                self.invariants.gap_nonneg.record(gap + GAP_TOL, at);
                if dist.is_finite() {
                    self.invariants.gap_dominates_dist.record(gap - dist + GAP_TOL, at);
                }
            }
            let scratch = self.dual_value_recomputed();
            let margin = if dual == scratch {
                RECOMPUTE_REL_TOL
            } else {
                RECOMPUTE_REL_TOL * (1.0 + dual.abs()) - (dual - scratch).abs()
            };
            self.invariants.dual_recompute.record(margin, at);

            let mut fresh = StackedVector::zeros(
                self.instance.graph.num_nodes(),
                self.instance.block_dim,
            );
            for (s, t) in self.subspaces.iter().zip(&self.payloads) {
                s.add_expanded(t, &mut fresh, 1.0);
            }
            let err = fresh.sub(&self.v_h).norm_sq().sqrt();
            self.invariants.vh_consistency.record(VH_SUM_TOL - err, at);
        }
        self.prev_dual = dual;
        self.history.records.push(HistoryRecord {
            cycle: n,
            inner: w,
            dual_value: dual,
            gap,
            dist_sq: dist,
            step_norm_sq: step_sq,
        });
        if self.options.fail_fast && self.options.check_invariants {
            if let Some((family, at)) = self.invariants.first_violation() {
                return Err(Error::Consistency(format!(
                    "invariant family {family} violated (worst at n={}, w={})",
                    at.0, at.1
                )));
            }
        }
        Ok(())
    }

    /// Run `cycles` full cycles from the current state.
    pub fn run(&mut self, cycles: usize) -> Result<()> {
        for _ in 0..cycles {
            self.advance_cycle()?;
        }
        Ok(())
    }
}

fn bits_equal(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}
