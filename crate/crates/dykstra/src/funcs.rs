//! The per-node convex functions and the oracles the solver needs from
//! them: evaluation, subgradients, proximal maps and conjugate values.
//!
//! A proximal step solves min_x  (1/2)||x - p||^2 + f(x); its optimality
//! condition says z := p - x is a subgradient of f at x, so every prox
//! result doubles as a Fenchel-Young certificate:
//! f(x) + f*(z) = <x, z> with f*(z) recoverable as <x, z> - f(x).
//! The engine leans on that identity instead of closed-form conjugates.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stacked::vecmath::{self, dot};

/// Relative tolerance for "both branches are active" ties in max-type
/// subgradients; tied branches return the average of the branch gradients.
pub const TIE_REL_TOL: f64 = 1e-12;

/// Bisection on the branch-gap is stopped when the gap is below this value.
pub const BISECT_VALUE_TOL: f64 = 1e-12;

/// Hard iteration cap for the branch-gap bisection.
pub const BISECT_MAX_ITERS: usize = 200;

/// A minorant's conjugate is only defined at its own slope; mismatches
/// beyond this norm are state corruption.
pub const MINORANT_SLOPE_TOL: f64 = 1e-8;

/// How a node is treated by the splitting scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeClass {
    /// Stepped through its exact proximal map.
    Proximable,
    /// Indicator of a closed convex set; the prox is the projection.
    Indicator,
    /// Proximable and finite everywhere (eligible for either treatment).
    ProximableFullDomain,
    /// Finite everywhere, stepped through subgradient linearizations.
    Subdifferentiable,
}

/// Concrete function attached to a node. Matrices are dense row nests;
/// every quadratic form is (1/2) x^T A x + b^T x + c with A symmetric PSD.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum FunctionKind {
    Zero,
    Quadratic {
        a: Vec<Vec<f64>>,
        b: Vec<f64>,
        c: f64,
    },
    /// max of two quadratics sharing the same curvature matrix.
    MaxTwoQuadratics {
        a: Vec<Vec<f64>>,
        b1: Vec<f64>,
        c1: f64,
        b2: Vec<f64>,
        c2: f64,
    },
    /// max of two affine pieces; the piecewise-linear test workhorse.
    AffinePair {
        a1: Vec<f64>,
        b1: f64,
        a2: Vec<f64>,
        b2: f64,
    },
    IndicatorBox {
        lo: Vec<f64>,
        hi: Vec<f64>,
    },
    IndicatorHalfspace {
        normal: Vec<f64>,
        offset: f64,
    },
}

/// Function kind plus its treatment class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeFunction {
    #[serde(flatten)]
    pub kind: FunctionKind,
    pub class: NodeClass,
}

/// Result of a proximal step at center `p`: the primal point, the dual
/// z = p - x (assembled by subtraction, so x + z reproduces p), and f(x)
/// for later conjugate evaluations.
#[derive(Clone, Debug)]
pub struct ProxResult {
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub witness_value: f64,
}

/// One affine lower bound slope^T x + intercept, the bundle memory kept per
/// subdifferentiable node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineMinorant {
    pub slope: Vec<f64>,
    pub intercept: f64,
}

impl AffineMinorant {
    pub fn eval(&self, x: &[f64]) -> f64 {
        dot(&self.slope, x) + self.intercept
    }

    /// Linearization of `f` at `x`: the tangent affine minorant.
    pub fn tangent(f: &NodeFunction, x: &[f64]) -> Result<AffineMinorant> {
        let slope = f.subgradient(x)?;
        let intercept = f.eval(x) - dot(&slope, x);
        Ok(AffineMinorant { slope, intercept })
    }

    /// Conjugate value at `z`. Defined only at the slope itself (the
    /// conjugate of an affine function is a point indicator); a mismatch
    /// means the caller's dual state is corrupted.
    pub fn conjugate_at(&self, z: &[f64]) -> Result<f64> {
        if !self.slope_matches(z, MINORANT_SLOPE_TOL) {
            return Err(Error::Consistency(format!(
                "conjugate of an affine minorant requested away from its slope \
                 (|z - slope| = {:e})",
                vecmath::norm(&vecmath::sub(z, &self.slope))
            )));
        }
        Ok(-self.intercept)
    }

    pub fn slope_matches(&self, z: &[f64], tol: f64) -> bool {
        vecmath::norm(&vecmath::sub(z, &self.slope)) <= tol
    }
}

fn to_matrix(a: &[Vec<f64>]) -> DMatrix<f64> {
    let m = a.len();
    DMatrix::from_fn(m, m, |i, j| a[i][j])
}

fn quad_eval(a: &[Vec<f64>], b: &[f64], c: f64, x: &[f64]) -> f64 {
    let mut q = 0.0;
    for (i, row) in a.iter().enumerate() {
        q += x[i] * dot(row, x);
    }
    0.5 * q + dot(b, x) + c
}

fn quad_grad(a: &[Vec<f64>], b: &[f64], x: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(row, bi)| dot(row, x) + bi).collect()
}

/// Solve (I + A) x = rhs for the quadratic prox; A is PSD so the system is
/// uniformly well conditioned.
fn solve_shifted(a: &[Vec<f64>], rhs: &[f64]) -> Result<Vec<f64>> {
    let m = rhs.len();
    let mat = DMatrix::identity(m, m) + to_matrix(a);
    let sol = mat
        .lu()
        .solve(&DVector::from_column_slice(rhs))
        .ok_or_else(|| Error::Consistency("shifted quadratic system is singular".into()))?;
    Ok(sol.iter().copied().collect())
}

/// Largest eigenvalue of a symmetric matrix (gradient-Lipschitz modulus of
/// the associated quadratic).
pub fn symmetric_max_eig(a: &[Vec<f64>]) -> f64 {
    nalgebra::SymmetricEigen::new(to_matrix(a))
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max)
}

fn validate_square_psd(a: &[Vec<f64>], m: usize, what: &str) -> Result<()> {
    if a.len() != m || a.iter().any(|row| row.len() != m) {
        return Err(Error::Structural(format!("{what}: matrix is not {m}x{m}")));
    }
    let mut scale: f64 = 1.0;
    for row in a {
        for v in row {
            scale = scale.max(v.abs());
        }
    }
    for (i, row) in a.iter().enumerate() {
        for (j, entry) in row.iter().enumerate().skip(i + 1) {
            if (entry - a[j][i]).abs() > 1e-9 * scale {
                return Err(Error::Structural(format!("{what}: matrix is not symmetric")));
            }
        }
    }
    let min_eig = nalgebra::SymmetricEigen::new(to_matrix(a))
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    if min_eig < -1e-9 * scale.max(1.0) {
        return Err(Error::Structural(format!(
            "{what}: matrix has negative eigenvalue {min_eig:e}"
        )));
    }
    Ok(())
}

impl NodeFunction {
    pub fn new(kind: FunctionKind, class: NodeClass) -> Self {
        NodeFunction { kind, class }
    }

    /// Finite on all of R^m?
    pub fn is_full_domain(&self) -> bool {
        !self.is_indicator()
    }

    pub fn is_indicator(&self) -> bool {
        matches!(
            self.kind,
            FunctionKind::IndicatorBox { .. } | FunctionKind::IndicatorHalfspace { .. }
        )
    }

    /// Shape and class coherence for block dimension `m`.
    pub fn validate(&self, m: usize) -> Result<()> {
        match (&self.kind, self.class) {
            (k, NodeClass::Indicator) if !matches!(k, FunctionKind::IndicatorBox { .. } | FunctionKind::IndicatorHalfspace { .. }) => {
                return Err(Error::Structural(
                    "indicator class on a non-indicator kind".into(),
                ));
            }
            (FunctionKind::IndicatorBox { .. } | FunctionKind::IndicatorHalfspace { .. }, c)
                if c != NodeClass::Indicator =>
            {
                return Err(Error::Structural(
                    "indicator kinds must carry the indicator class".into(),
                ));
            }
            _ => {}
        }
        if self.class == NodeClass::Subdifferentiable && !self.is_full_domain() {
            return Err(Error::Structural(
                "subdifferentiable class requires a full-domain kind".into(),
            ));
        }
        match &self.kind {
            FunctionKind::Zero => Ok(()),
            FunctionKind::Quadratic { a, b, .. } => {
                if b.len() != m {
                    return Err(Error::Structural("quadratic: b has wrong length".into()));
                }
                validate_square_psd(a, m, "quadratic")
            }
            FunctionKind::MaxTwoQuadratics { a, b1, b2, .. } => {
                if b1.len() != m || b2.len() != m {
                    return Err(Error::Structural("max-two: b has wrong length".into()));
                }
                validate_square_psd(a, m, "max-two")
            }
            FunctionKind::AffinePair { a1, a2, .. } => {
                if a1.len() != m || a2.len() != m {
                    return Err(Error::Structural("affine pair: slope length".into()));
                }
                Ok(())
            }
            FunctionKind::IndicatorBox { lo, hi } => {
                if lo.len() != m || hi.len() != m {
                    return Err(Error::Structural("box: bound length".into()));
                }
                Ok(())
            }
            FunctionKind::IndicatorHalfspace { normal, .. } => {
                if normal.len() != m {
                    return Err(Error::Structural("halfspace: normal length".into()));
                }
                if vecmath::norm_sq(normal) == 0.0 {
                    return Err(Error::Structural("halfspace: zero normal".into()));
                }
                Ok(())
            }
        }
    }

    /// Function value; indicators are strict (+inf off the set, no slack).
    pub fn eval(&self, x: &[f64]) -> f64 {
        match &self.kind {
            FunctionKind::Zero => 0.0,
            FunctionKind::Quadratic { a, b, c } => quad_eval(a, b, *c, x),
            FunctionKind::MaxTwoQuadratics { a, b1, c1, b2, c2 } => {
                quad_eval(a, b1, *c1, x).max(quad_eval(a, b2, *c2, x))
            }
            FunctionKind::AffinePair { a1, b1, a2, b2 } => {
                (dot(a1, x) + b1).max(dot(a2, x) + b2)
            }
            FunctionKind::IndicatorBox { lo, hi } => {
                let inside = x
                    .iter()
                    .zip(lo.iter().zip(hi))
                    .all(|(v, (l, h))| *l <= *v && *v <= *h);
                if inside {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            FunctionKind::IndicatorHalfspace { normal, offset } => {
                if dot(normal, x) <= *offset {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
        }
    }

    /// One designated subgradient. Max-type kinds return the active branch
    /// gradient, or the average of both when the branch values tie within
    /// `TIE_REL_TOL` (relative); indicators have no subgradient oracle here.
    pub fn subgradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        fn pick(f1: f64, f2: f64, g1: Vec<f64>, g2: Vec<f64>) -> Vec<f64> {
            let scale = 1.0f64.max(f1.abs()).max(f2.abs());
            if (f1 - f2).abs() <= TIE_REL_TOL * scale {
                vecmath::lincomb(0.5, &g1, 0.5, &g2)
            } else if f1 > f2 {
                g1
            } else {
                g2
            }
        }
        match &self.kind {
            FunctionKind::Zero => Ok(vec![0.0; x.len()]),
            FunctionKind::Quadratic { a, b, .. } => Ok(quad_grad(a, b, x)),
            FunctionKind::MaxTwoQuadratics { a, b1, c1, b2, c2 } => Ok(pick(
                quad_eval(a, b1, *c1, x),
                quad_eval(a, b2, *c2, x),
                quad_grad(a, b1, x),
                quad_grad(a, b2, x),
            )),
            FunctionKind::AffinePair { a1, b1, a2, b2 } => Ok(pick(
                dot(a1, x) + b1,
                dot(a2, x) + b2,
                a1.clone(),
                a2.clone(),
            )),
            FunctionKind::IndicatorBox { .. } | FunctionKind::IndicatorHalfspace { .. } => {
                Err(Error::Capability(
                    "subgradient oracle is not defined for indicator kinds".into(),
                ))
            }
        }
    }

    /// Exact proximal map at center `p`.
    pub fn prox(&self, p: &[f64]) -> Result<ProxResult> {
        match &self.kind {
            FunctionKind::Zero => Ok(ProxResult {
                x: p.to_vec(),
                z: vec![0.0; p.len()],
                witness_value: 0.0,
            }),
            FunctionKind::Quadratic { a, b, c } => {
                let x = solve_shifted(a, &vecmath::sub(p, b))?;
                let z = vecmath::sub(p, &x);
                let witness_value = quad_eval(a, b, *c, &x);
                Ok(ProxResult { x, z, witness_value })
            }
            FunctionKind::MaxTwoQuadratics { a, b1, c1, b2, c2 } => {
                prox_max_two_quadratics(a, b1, *c1, b2, *c2, p)
            }
            FunctionKind::AffinePair { a1, b1, a2, b2 } => {
                Ok(prox_max_two_affine(a1, *b1, a2, *b2, p).0)
            }
            FunctionKind::IndicatorBox { lo, hi } => {
                if lo.iter().zip(hi).any(|(l, h)| l > h) {
                    return Err(Error::Structural("box indicator is empty (lo > hi)".into()));
                }
                let x: Vec<f64> = p
                    .iter()
                    .zip(lo.iter().zip(hi))
                    .map(|(v, (l, h))| v.max(*l).min(*h))
                    .collect();
                let z = vecmath::sub(p, &x);
                Ok(ProxResult { x, z, witness_value: 0.0 })
            }
            FunctionKind::IndicatorHalfspace { normal, offset } => {
                let slack = dot(normal, p) - offset;
                let x = if slack <= 0.0 {
                    p.to_vec()
                } else {
                    let step = slack / vecmath::norm_sq(normal);
                    p.iter().zip(normal).map(|(v, n)| v - step * n).collect()
                };
                let z = vecmath::sub(p, &x);
                Ok(ProxResult { x, z, witness_value: 0.0 })
            }
        }
    }

    /// Fenchel-Young conjugate value through a primal witness:
    /// f*(z) = <x, z> - f(x), exact whenever z is a subgradient of f at x.
    pub fn conjugate_at(&self, z: &[f64], witness_x: &[f64]) -> f64 {
        dot(witness_x, z) - self.eval(witness_x)
    }
}

/// Prox of max(f1, f2) for quadratics sharing a curvature matrix. Tries each
/// branch's own prox first and accepts it when that branch dominates there
/// (the KKT multiplier is then 0 or 1); otherwise both branches are active
/// at the solution and the multiplier is pinned by a bisection on the branch
/// gap g(t) = f1(x(t)) - f2(x(t)), which is strictly decreasing in t.
fn prox_max_two_quadratics(
    a: &[Vec<f64>],
    b1: &[f64],
    c1: f64,
    b2: &[f64],
    c2: f64,
    p: &[f64],
) -> Result<ProxResult> {
    let finish = |x: Vec<f64>, val: f64| {
        let z = vecmath::sub(p, &x);
        ProxResult { x, z, witness_value: val }
    };

    let x1 = solve_shifted(a, &vecmath::sub(p, b1))?;
    let (f1_at_x1, f2_at_x1) = (quad_eval(a, b1, c1, &x1), quad_eval(a, b2, c2, &x1));
    if f1_at_x1 >= f2_at_x1 {
        return Ok(finish(x1, f1_at_x1));
    }
    let x2 = solve_shifted(a, &vecmath::sub(p, b2))?;
    let (f1_at_x2, f2_at_x2) = (quad_eval(a, b1, c1, &x2), quad_eval(a, b2, c2, &x2));
    if f2_at_x2 >= f1_at_x2 {
        return Ok(finish(x2, f2_at_x2));
    }

    // Both single-branch proxes rejected: g(0) > 0 > g(1), bisect.
    let x_of = |theta: f64| -> Result<Vec<f64>> {
        let mix = vecmath::lincomb(theta, b1, 1.0 - theta, b2);
        solve_shifted(a, &vecmath::sub(p, &mix))
    };
    let gap = |x: &[f64]| quad_eval(a, b1, c1, x) - quad_eval(a, b2, c2, x);

    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let mut x = x_of(0.5)?;
    for _ in 0..BISECT_MAX_ITERS {
        let mid = 0.5 * (lo + hi);
        x = x_of(mid)?;
        let g = gap(&x);
        if g.abs() <= BISECT_VALUE_TOL {
            break;
        }
        if g > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let val = quad_eval(a, b1, c1, &x).max(quad_eval(a, b2, c2, &x));
    Ok(finish(x, val))
}

/// Closed-form prox of the max of two affine pieces at center `p`, plus the
/// convex weight theta on the first slope.
///
/// The dual problem is a 1-D quadratic over theta in [0, 1]:
/// minimize (1/2)||theta a1 + (1-theta) a2 - p||^2 - theta b1 - (1-theta) b2,
/// whose unconstrained minimizer is
/// theta* = [(a1-a2)^T (p - a2) + b1 - b2] / ||a1-a2||^2, clamped to [0, 1].
/// Then z = theta a1 + (1-theta) a2 and x = p - z. Identical slopes collapse
/// to a single affine piece with the larger intercept.
pub fn prox_max_two_affine(
    a1: &[f64],
    b1: f64,
    a2: &[f64],
    b2: f64,
    p: &[f64],
) -> (ProxResult, f64) {
    let d = vecmath::sub(a1, a2);
    let dn = vecmath::norm_sq(&d);
    let theta = if dn == 0.0 {
        if b1 >= b2 {
            1.0
        } else {
            0.0
        }
    } else {
        let t = (dot(&d, &vecmath::sub(p, a2)) + b1 - b2) / dn;
        t.clamp(0.0, 1.0)
    };
    let z = vecmath::lincomb(theta, a1, 1.0 - theta, a2);
    let x = vecmath::sub(p, &z);
    let witness_value = (dot(a1, &x) + b1).max(dot(a2, &x) + b2);
    (ProxResult { x, z, witness_value }, theta)
}
