//! Problem instances: graph + anchor + per-node functions, with generators
//! that plant a known optimum for experiment baselines.
//!
//! Both generated families place the optimum at e = (1, ..., 1). Each node
//! draws a curvature matrix A_i = v v^T + r I (uniform v, r) and a target
//! subgradient v_i, then shifts its linear term so that v_i lands in the
//! subdifferential at e. Choosing the anchor as e + (sum_i v_i)/|V| makes
//! the first-order condition of
//!
//! ```text
//!   sum_i [ (1/2)||x - anchor_i||^2 + f_i(x) ]
//! ```
//!
//! hold exactly at e. The nonsmooth family splits each node into two
//! quadratic branches b_i +- d with equal values at e, so e is a kink point
//! and the designated subgradient (the branch average) is v_i again.
//!
//! Generation consumes the deterministic stream of `rng::Rng` in a fixed
//! order (per node: v, then r, then v_i, then for the nonsmooth family d
//! with redraws while ||d|| < 1e-6), so identical seeds give bitwise
//! identical instances, including their JSON serialization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::funcs::{symmetric_max_eig, FunctionKind, NodeClass, NodeFunction};
use crate::rng::Rng;
use crate::stacked::{vecmath, StackedVector};
use crate::topology::{EdgeSubspace, Graph};

/// Reject nonsmooth perturbation directions shorter than this.
const MIN_DIRECTION_NORM: f64 = 1e-6;

/// Planted-certificate residual allowed by `validate`.
const PLANTED_CERTIFICATE_TOL: f64 = 1e-10;

/// A complete problem: consensus graph, block dimension, anchor point,
/// one function per node, and optional ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub graph: Graph,
    #[serde(rename = "m")]
    pub block_dim: usize,
    pub anchor: StackedVector,
    pub functions: Vec<NodeFunction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub planted_optimum: Option<Vec<f64>>,
    /// Per-node gradient-Lipschitz modulus (largest eigenvalue of A_i),
    /// recorded by the generators for reporting.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub smoothness: Option<Vec<f64>>,
}

impl Instance {
    /// Structural coherence plus, when a planted optimum is present and all
    /// nodes expose subgradients, the first-order certificate at it.
    pub fn validate(&self) -> Result<()> {
        let n = self.graph.num_nodes();
        if self.functions.len() != n {
            return Err(Error::Structural(format!(
                "{} functions for {} nodes",
                self.functions.len(),
                n
            )));
        }
        if self.anchor.num_blocks() != n || self.anchor.block_dim() != self.block_dim {
            return Err(Error::Structural("anchor shape mismatch".into()));
        }
        for (i, f) in self.functions.iter().enumerate() {
            f.validate(self.block_dim)
                .map_err(|e| Error::Structural(format!("node {i}: {e}")))?;
        }
        if let Some(opt) = &self.planted_optimum {
            if opt.len() != self.block_dim {
                return Err(Error::Structural("planted optimum length".into()));
            }
            if self.functions.iter().all(NodeFunction::is_full_domain) {
                if let Some(resid) = self.certificate_residual()? {
                    if resid > PLANTED_CERTIFICATE_TOL {
                        return Err(Error::Structural(format!(
                            "planted optimum fails its certificate: residual {resid:e}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Norm of sum_i s_i + |V| (opt - anchor_block) with s_i the designated
    /// subgradient at the planted optimum; `None` without a planted point.
    pub fn certificate_residual(&self) -> Result<Option<f64>> {
        let Some(opt) = &self.planted_optimum else {
            return Ok(None);
        };
        let n = self.graph.num_nodes() as f64;
        let mut resid: Vec<f64> = vecmath::scale(n, &vecmath::sub(opt, self.anchor.block(0)));
        for f in &self.functions {
            let s = f.subgradient(opt)?;
            resid = vecmath::add(&resid, &s);
        }
        Ok(Some(vecmath::norm(&resid)))
    }

    /// One full-edge agreement subspace per graph edge.
    pub fn edge_subspaces(&self) -> Vec<EdgeSubspace> {
        self.graph
            .edges()
            .iter()
            .map(|&(a, b)| EdgeSubspace::full(a, b))
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("instance serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let inst: Instance = serde_json::from_str(text)
            .map_err(|e| Error::Structural(format!("instance JSON: {e}")))?;
        inst.validate()?;
        Ok(inst)
    }
}

/// Value of the separable primal objective at the consensus point `x`
/// (every block equal to x): sum_i (1/2)||x - anchor_i||^2 + f_i(x).
/// Infinite when any indicator is violated.
pub fn primal_value_at(instance: &Instance, x: &[f64]) -> f64 {
    let mut total = 0.0;
    for (i, f) in instance.functions.iter().enumerate() {
        let d = vecmath::sub(x, instance.anchor.block(i));
        total += 0.5 * vecmath::norm_sq(&d) + f.eval(x);
    }
    total
}

fn psd_from_draws(v: &[f64], r: f64) -> Vec<Vec<f64>> {
    let m = v.len();
    (0..m)
        .map(|i| {
            (0..m)
                .map(|j| v[i] * v[j] + if i == j { r } else { 0.0 })
                .collect()
        })
        .collect()
}

fn mat_vec(a: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    a.iter().map(|row| vecmath::dot(row, x)).collect()
}

fn assemble(
    graph: Graph,
    block_dim: usize,
    functions: Vec<NodeFunction>,
    target_grad_sum: &[f64],
    smoothness: Vec<f64>,
) -> Instance {
    let n = graph.num_nodes();
    let e = vec![1.0; block_dim];
    // First-order condition at e: sum v_i + |V| (e - anchor) = 0.
    let anchor_block: Vec<f64> = e
        .iter()
        .zip(target_grad_sum)
        .map(|(ek, sk)| ek + sk / n as f64)
        .collect();
    Instance {
        graph,
        block_dim,
        anchor: StackedVector::splat(n, &anchor_block),
        functions,
        planted_optimum: Some(e),
        smoothness: Some(smoothness),
    }
}

/// Smooth family on an arbitrary graph: one strongly convex quadratic per
/// node, optimum planted at e.
pub fn gen_smooth_on(graph: Graph, seed: u64, block_dim: usize) -> Instance {
    let n = graph.num_nodes();
    let e = vec![1.0; block_dim];
    let mut rng = Rng::new(seed);
    let mut functions = Vec::with_capacity(n);
    let mut grad_sum = vec![0.0; block_dim];
    let mut smoothness = Vec::with_capacity(n);
    for _ in 0..n {
        let v = rng.uniform_vec(block_dim);
        let r = rng.uniform();
        let a = psd_from_draws(&v, r);
        let target = rng.uniform_vec(block_dim);
        // b = v_i - A e makes grad f(e) = v_i.
        let b = vecmath::sub(&target, &mat_vec(&a, &e));
        grad_sum = vecmath::add(&grad_sum, &target);
        smoothness.push(symmetric_max_eig(&a));
        functions.push(NodeFunction::new(
            FunctionKind::Quadratic { a, b, c: 0.0 },
            NodeClass::ProximableFullDomain,
        ));
    }
    assemble(graph, block_dim, functions, &grad_sum, smoothness)
}

/// Smooth family on the star graph used by the standard experiments.
pub fn gen_smooth(seed: u64, num_nodes: usize, block_dim: usize) -> Result<Instance> {
    Ok(gen_smooth_on(Graph::star(num_nodes)?, seed, block_dim))
}

/// Nonsmooth family on an arbitrary graph: per node the max of two
/// quadratic branches sharing A_i, split by a direction d so that both
/// branches are active at e and the branch-average gradient is v_i.
pub fn gen_nonsmooth_on(graph: Graph, seed: u64, block_dim: usize) -> Instance {
    let n = graph.num_nodes();
    let e = vec![1.0; block_dim];
    let mut rng = Rng::new(seed);
    let mut functions = Vec::with_capacity(n);
    let mut grad_sum = vec![0.0; block_dim];
    let mut smoothness = Vec::with_capacity(n);
    for _ in 0..n {
        let v = rng.uniform_vec(block_dim);
        let r = rng.uniform();
        let a = psd_from_draws(&v, r);
        let target = rng.uniform_vec(block_dim);
        let mut d = rng.uniform_vec(block_dim);
        while vecmath::norm(&d) < MIN_DIRECTION_NORM {
            d = rng.uniform_vec(block_dim);
        }
        let base = vecmath::sub(&target, &mat_vec(&a, &e));
        let b1 = vecmath::add(&base, &d);
        let b2 = vecmath::sub(&base, &d);
        // Equal branch values at e: (b1 - b2)^T e = 2 d^T e must be offset
        // by the constant of the second branch.
        let c2 = 2.0 * vecmath::dot(&d, &e);
        grad_sum = vecmath::add(&grad_sum, &target);
        smoothness.push(symmetric_max_eig(&a));
        functions.push(NodeFunction::new(
            FunctionKind::MaxTwoQuadratics {
                a,
                b1,
                c1: 0.0,
                b2,
                c2,
            },
            NodeClass::ProximableFullDomain,
        ));
    }
    assemble(graph, block_dim, functions, &grad_sum, smoothness)
}

/// Nonsmooth family on the star graph.
pub fn gen_nonsmooth(seed: u64, num_nodes: usize, block_dim: usize) -> Result<Instance> {
    Ok(gen_nonsmooth_on(Graph::star(num_nodes)?, seed, block_dim))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::funcs::FunctionKind;

    #[test]
    fn smooth_certificate_and_shape() {
        let inst = gen_smooth(7, 5, 4).unwrap();
        inst.validate().unwrap();
        assert_eq!(inst.graph.num_nodes(), 5);
        assert_eq!(inst.graph.edges().len(), 4);
        assert_eq!(inst.planted_optimum.as_deref(), Some(&[1.0; 4][..]));
        let resid = inst.certificate_residual().unwrap().unwrap();
        assert!(resid <= 1e-12, "certificate residual {resid:e}");
        // Anchor is the same on every block.
        for i in 1..5 {
            assert_eq!(inst.anchor.block(i), inst.anchor.block(0));
        }
        // Strong convexity: every A_i is positive definite.
        for f in &inst.functions {
            let FunctionKind::Quadratic { a, .. } = &f.kind else {
                panic!("smooth family must be quadratic")
            };
            let low = -crate::funcs::symmetric_max_eig(
                &a.iter()
                    .map(|row| row.iter().map(|x| -x).collect())
                    .collect::<Vec<Vec<f64>>>(),
            );
            assert!(low > 0.0, "A_i not positive definite");
        }
    }

    #[test]
    fn nonsmooth_branches_tie_at_optimum() {
        let inst = gen_nonsmooth(3, 5, 4).unwrap();
        inst.validate().unwrap();
        let e = vec![1.0; 4];
        for f in &inst.functions {
            let FunctionKind::MaxTwoQuadratics { a, b1, c1, b2, c2 } = &f.kind else {
                panic!("nonsmooth family must be max-two")
            };
            let f1 = NodeFunction::new(
                FunctionKind::Quadratic {
                    a: a.clone(),
                    b: b1.clone(),
                    c: *c1,
                },
                NodeClass::ProximableFullDomain,
            );
            let f2 = NodeFunction::new(
                FunctionKind::Quadratic {
                    a: a.clone(),
                    b: b2.clone(),
                    c: *c2,
                },
                NodeClass::ProximableFullDomain,
            );
            let (v1, v2) = (f1.eval(&e), f2.eval(&e));
            let scale = 1.0f64.max(v1.abs()).max(v2.abs());
            assert!(
                (v1 - v2).abs() <= 1e-12 * scale,
                "branch values differ at e: {v1} vs {v2}"
            );
            // The kink is genuine: branch gradients differ.
            let g1 = f1.subgradient(&e).unwrap();
            let g2 = f2.subgradient(&e).unwrap();
            assert!(vecmath::norm(&vecmath::sub(&g1, &g2)) > 1e-8);
            // Designated subgradient at e is the branch average (tie rule).
            let s = f.subgradient(&e).unwrap();
            let avg = vecmath::lincomb(0.5, &g1, 0.5, &g2);
            assert!(vecmath::max_abs_diff(&s, &avg) <= 1e-12);
        }
        let resid = inst.certificate_residual().unwrap().unwrap();
        assert!(resid <= 1e-12, "certificate residual {resid:e}");
    }

    #[test]
    fn planted_point_beats_neighbors() {
        // Local sanity of the certificate: e is no worse than nearby points.
        for inst in [gen_smooth(11, 5, 4).unwrap(), gen_nonsmooth(11, 5, 4).unwrap()] {
            let e = inst.planted_optimum.clone().unwrap();
            let base = primal_value_at(&inst, &e);
            let mut rng = crate::rng::Rng::new(4242);
            for _ in 0..20 {
                let delta: Vec<f64> = rng.uniform_vec(4).iter().map(|u| 0.2 * (u - 0.5)).collect();
                let y = vecmath::add(&e, &delta);
                assert!(primal_value_at(&inst, &y) >= base - 1e-12);
            }
        }
    }

    #[test]
    fn primal_value_examples() {
        // Single node, f = 0, anchor 0: value 0 at 0.
        let inst = Instance {
            graph: Graph::new(1, vec![]).unwrap(),
            block_dim: 1,
            anchor: StackedVector::zeros(1, 1),
            functions: vec![NodeFunction::new(FunctionKind::Zero, NodeClass::Proximable)],
            planted_optimum: None,
            smoothness: None,
        };
        assert_eq!(primal_value_at(&inst, &[0.0]), 0.0);
        assert_eq!(primal_value_at(&inst, &[2.0]), 2.0);

        // An indicator violation makes the value infinite.
        let boxed = Instance {
            functions: vec![NodeFunction::new(
                FunctionKind::IndicatorBox {
                    lo: vec![0.0],
                    hi: vec![1.0],
                },
                NodeClass::Indicator,
            )],
            ..inst
        };
        assert_eq!(primal_value_at(&boxed, &[2.0]), f64::INFINITY);
    }

    #[test]
    fn generation_is_deterministic_and_seed_sensitive() {
        let a = gen_smooth(42, 5, 4).unwrap();
        let b = gen_smooth(42, 5, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_json(), b.to_json());
        let c = gen_smooth(43, 5, 4).unwrap();
        assert_ne!(a, c);

        let x = gen_nonsmooth(42, 5, 4).unwrap();
        let y = gen_nonsmooth(42, 5, 4).unwrap();
        assert_eq!(x.to_json(), y.to_json());
    }

    #[test]
    fn json_round_trip_is_bitwise() {
        for inst in [gen_smooth(9, 5, 4).unwrap(), gen_nonsmooth(9, 5, 4).unwrap()] {
            let text = inst.to_json();
            let back = Instance::from_json(&text).unwrap();
            assert_eq!(inst, back);
            assert_eq!(text, back.to_json());
            // Float fields survive exactly.
            let (FunctionKind::Quadratic { a, .. } | FunctionKind::MaxTwoQuadratics { a, .. }) =
                &back.functions[0].kind
            else {
                panic!("unexpected kind")
            };
            let (FunctionKind::Quadratic { a: a0, .. }
            | FunctionKind::MaxTwoQuadratics { a: a0, .. }) = &inst.functions[0].kind
            else {
                panic!("unexpected kind")
            };
            assert!(a
                .iter()
                .flatten()
                .zip(a0.iter().flatten())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn validate_rejects_broken_instances() {
        let mut inst = gen_smooth(1, 3, 2).unwrap();
        inst.functions.pop();
        assert!(inst.validate().is_err());

        let mut inst2 = gen_smooth(1, 3, 2).unwrap();
        inst2.planted_optimum = Some(vec![5.0, 5.0]);
        assert!(inst2.validate().is_err(), "bogus planted point must fail");
    }
}
