//! Offline analysis: exact reference optima, exact-prox probes against the
//! working minorants, convergence-rate fits, and the single-node decrease
//! and recurrence checkers used by the verification flows.
//!
//! Everything here is a pure function of an engine snapshot or a recorded
//! history. Probes are meant to be taken at cycle ends, where every
//! subdifferentiable node's dual equals its minorant slope.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::funcs::{
    prox_max_two_affine, symmetric_max_eig, AffineMinorant, FunctionKind, NodeFunction,
};
use crate::instances::{primal_value_at, Instance};
use crate::stacked::vecmath;

/// Allowed negative fuzz on the model gap f(x) - minorant(x).
pub const DF_NEG_TOL: f64 = 1e-12;
/// Additive slack granted to the sqrt bound on the probe movement.
pub const PROBE_SLACK: f64 = 1e-8;
/// Additive slack granted to the smooth per-step ratio bound.
pub const RATIO_SLACK: f64 = 1e-8;
/// Headroom factor on empirical Lipschitz estimates.
const LIPSCHITZ_HEADROOM: f64 = 1.1;

/// The bundle decrease law needs its slope constant to dominate
/// ||fresh cut slope - model slope||. Model slopes are convex combinations
/// of visited cut slopes, so twice the largest visited norm always does.
const BUNDLE_SLOPE_FACTOR: f64 = 2.0;

/// Exact-prox probe for one subdifferentiable node.
///
/// `z_hat` is the dual of the exact prox of the node's function at the
/// current prox center. `delta_z` is `z_hat` minus the minorant slope
/// (which equals the node dual at cycle ends), and `delta_f` is the gap
/// between the function and the minorant at the model's primal point.
/// The probe movement obeys `||delta_z|| <= sqrt(delta_f)` up to slack.
#[derive(Clone, Debug, Serialize)]
pub struct NodeProbe {
    pub node: usize,
    pub z_hat: Vec<f64>,
    pub delta_z: Vec<f64>,
    pub delta_f: f64,
    /// Empirical Lipschitz bound: max subgradient norm over the points
    /// this probe evaluates, with headroom.
    pub lipschitz: f64,
}

impl NodeProbe {
    /// Slack left in the sqrt bound; negative means a violation.
    pub fn sqrt_bound_slack(&self) -> f64 {
        self.delta_f.max(0.0).sqrt() + PROBE_SLACK - vecmath::norm(&self.delta_z)
    }
}

/// Probe every subdifferentiable node of `engine` at its current state.
pub fn probe_v4(engine: &Engine) -> Result<Vec<NodeProbe>> {
    let v4 = engine.v4_nodes();
    if v4.is_empty() {
        return Err(Error::Precondition(
            "no subdifferentiable nodes to probe".into(),
        ));
    }
    let mut probes = Vec::with_capacity(v4.len());
    for i in v4 {
        let f = &engine.instance().functions[i];
        let minorant = engine
            .minorant(i)
            .expect("subdifferentiable node carries a minorant");
        let p = engine.prox_center(i);
        let exact = f.prox(&p)?;
        let x_model = vecmath::sub(&p, &minorant.slope);
        let delta_f = f.eval(&x_model) - minorant.eval(&x_model);
        if delta_f < -DF_NEG_TOL {
            return Err(Error::Consistency(format!(
                "node {i}: minorant exceeds its function by {:.3e}",
                -delta_f
            )));
        }
        let delta_z = vecmath::sub(&exact.z, &minorant.slope);
        let subgrad = f.subgradient(&x_model)?;
        let lipschitz = LIPSCHITZ_HEADROOM
            * vecmath::norm(&minorant.slope)
                .max(vecmath::norm(&exact.z))
                .max(vecmath::norm(&subgrad));
        probes.push(NodeProbe {
            node: i,
            z_hat: exact.z,
            delta_z,
            delta_f,
            lipschitz,
        });
    }
    Ok(probes)
}

/// Consensus point and primal value used as the gap reference.
///
/// Planted instances return their certificate point. Unplanted instances
/// must be all-quadratic; the optimality system
/// (|V| I + sum A_i) x = sum (anchor_i - b_i) is then solved directly.
pub fn reference_optimum(instance: &Instance) -> Result<(Vec<f64>, f64)> {
    instance.validate()?;
    if let Some(point) = &instance.planted_optimum {
        return Ok((point.clone(), primal_value_at(instance, point)));
    }
    let m = instance.block_dim;
    let n = instance.graph.num_nodes();
    let mut mat = DMatrix::from_diagonal_element(m, m, n as f64);
    let mut rhs = DVector::zeros(m);
    for (i, f) in instance.functions.iter().enumerate() {
        let anchor = instance.anchor.block(i);
        match &f.kind {
            FunctionKind::Zero => {
                for k in 0..m {
                    rhs[k] += anchor[k];
                }
            }
            FunctionKind::Quadratic { a, b, .. } => {
                for r in 0..m {
                    for c in 0..m {
                        mat[(r, c)] += a[r][c];
                    }
                    rhs[r] += anchor[r] - b[r];
                }
            }
            _ => {
                return Err(Error::Unsupported(
                    "reference optimum needs a planted point or an all-quadratic instance".into(),
                ))
            }
        }
    }
    let solved = mat
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Consistency("optimality system is singular".into()))?;
    let point: Vec<f64> = solved.iter().copied().collect();
    let value = primal_value_at(instance, &point);
    Ok((point, value))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RateModel {
    /// gap ~ C rho^n; `parameter` is rho.
    Linear,
    /// gap ~ C n^p; `parameter` is the exponent p.
    Power,
}

/// Least-squares rate estimate over a cycle window.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct RateFit {
    pub model: RateModel,
    pub parameter: f64,
    pub r_squared: f64,
    pub window: (usize, usize),
}

/// Tail window used when the caller does not pin one.
pub fn default_window(num_cycles: usize) -> (usize, usize) {
    ((num_cycles / 4).max(10), num_cycles)
}

fn least_squares(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let e = y - intercept - slope * x;
            e * e
        })
        .sum();
    let r2 = if ss_tot > 0.0 {
        (1.0 - ss_res / ss_tot).clamp(0.0, 1.0)
    } else if ss_res <= 1e-18 {
        1.0
    } else {
        0.0
    };
    (slope, r2)
}

/// Fit a decay model to per-cycle gaps (`gaps[k]` belongs to cycle k+1).
/// Non-finite and non-positive entries inside the window are dropped; at
/// least 3 usable points must remain.
pub fn fit_rate(gaps: &[f64], model: RateModel, window: Option<(usize, usize)>) -> Result<RateFit> {
    let (lo, hi) = window.unwrap_or_else(|| default_window(gaps.len()));
    if lo < 1 || hi > gaps.len() || lo > hi {
        return Err(Error::Precondition(format!(
            "window [{lo}, {hi}] does not fit a series of {} cycles",
            gaps.len()
        )));
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for n in lo..=hi {
        let g = gaps[n - 1];
        if g.is_finite() && g > 0.0 {
            xs.push(match model {
                RateModel::Linear => n as f64,
                RateModel::Power => (n as f64).ln(),
            });
            ys.push(g.ln());
        }
    }
    if xs.len() < 3 {
        return Err(Error::Precondition(format!(
            "window [{lo}, {hi}] leaves {} usable points, need 3",
            xs.len()
        )));
    }
    let (slope, r_squared) = least_squares(&xs, &ys);
    let parameter = match model {
        RateModel::Linear => slope.exp(),
        RateModel::Power => slope,
    };
    Ok(RateFit {
        model,
        parameter,
        r_squared,
        window: (lo, hi),
    })
}

/// Closed-form majorant for decreasing sequences obeying
/// a_k >= a_{k+1} + gamma a_{k+1}^4:
///
/// ```text
///   a_k <= (a_1^-3 + (k-1) 3 gamma (3 gamma a_1^3 + 1)^-1)^(-1/3)
/// ```
// Negated comparisons so NaN inputs fail the precondition.
#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub fn beck_bound(a1: f64, gamma: f64, k: usize) -> Result<f64> {
    if !(a1 > 0.0) || !(gamma > 0.0) || k < 1 {
        return Err(Error::Precondition(
            "recurrence bound needs a1 > 0, gamma > 0, k >= 1".into(),
        ));
    }
    let base = a1.powi(-3) + (k - 1) as f64 * 3.0 * gamma / (3.0 * gamma * a1.powi(3) + 1.0);
    Ok(base.powf(-1.0 / 3.0))
}

/// Outcome of the fixed-center bundle loop on a single node.
///
/// `alphas[k]` is the gap between the optimal value of
/// f(x) + (1/2)||x - center||^2 and the dual value certified by the
/// working affine model after k bundle updates (`alphas[0]` is the state
/// right after the initializing tangent cut). Two decrease laws are
/// checked post hoc:
///
/// 1. alpha_{k+1} <= alpha_k - t^2 / (2 (L+1)^2), with t the nonnegative
///    root of t^2 / (2 (L+1)^2) + t = f(x_k) - model_k(x_k) and L an
///    empirical Lipschitz bound over the visited linearization points
///    (t is the scaled dual movement, so the guaranteed decrease is the
///    quadratic term of the root equation, equal to the model gap minus
///    t);
/// 2. for smooth f with gradient modulus L', each consecutive ratio r
///    obeys r^2 / (4 (L'+1)) + r <= 1.
#[derive(Clone, Debug, Serialize)]
pub struct BundleReport {
    pub optimal_value: f64,
    pub alphas: Vec<f64>,
    pub lipschitz: f64,
    pub smooth_modulus: Option<f64>,
    pub worst_decrease_slack: f64,
    pub decrease_ok: bool,
    pub worst_ratio_slack: Option<f64>,
    pub ratio_ok: Option<bool>,
}

/// Contraction factor guaranteed by the smooth ratio law: the positive
/// root of r^2 / (4 (L'+1)) + r = 1.
pub fn smooth_contraction_factor(smooth_modulus: f64) -> f64 {
    let q = smooth_modulus + 1.0;
    2.0 * q * ((1.0 + 1.0 / q).sqrt() - 1.0)
}

/// Run `steps` bundle updates on min f(x) + (1/2)||x - center||^2 with a
/// fixed center and verify the decrease laws. `f` must be finite
/// everywhere; the exact prox provides the optimal value.
pub fn check_bundle_decrease(
    f: &NodeFunction,
    center: &[f64],
    steps: usize,
) -> Result<BundleReport> {
    if !f.is_full_domain() {
        return Err(Error::Precondition(
            "bundle harness needs a full-domain function".into(),
        ));
    }
    f.validate(center.len())?;
    let exact = f.prox(center)?;
    let optimal_value =
        0.5 * vecmath::norm_sq(&vecmath::sub(&exact.x, center)) + exact.witness_value;
    let center_sq = vecmath::norm_sq(center);
    let dual_of = |m: &AffineMinorant| {
        -0.5 * vecmath::norm_sq(&vecmath::sub(center, &m.slope)) + 0.5 * center_sq + m.intercept
    };

    let mut minorant = AffineMinorant::tangent(f, center)?;
    let mut max_subgrad = vecmath::norm(&minorant.slope);
    let mut alphas = vec![optimal_value - dual_of(&minorant)];
    let mut model_gaps = Vec::with_capacity(steps);
    for _ in 0..steps {
        let x = vecmath::sub(center, &minorant.slope);
        model_gaps.push(f.eval(&x) - minorant.eval(&x));
        let fresh = AffineMinorant::tangent(f, &x)?;
        max_subgrad = max_subgrad.max(vecmath::norm(&fresh.slope));
        let (pr, _) = prox_max_two_affine(
            &minorant.slope,
            minorant.intercept,
            &fresh.slope,
            fresh.intercept,
            center,
        );
        minorant = AffineMinorant {
            intercept: pr.witness_value - vecmath::dot(&pr.z, &pr.x),
            slope: pr.z,
        };
        alphas.push(optimal_value - dual_of(&minorant));
    }

    let lipschitz = BUNDLE_SLOPE_FACTOR * max_subgrad;
    let c = 0.5 / ((lipschitz + 1.0) * (lipschitz + 1.0));
    let fuzz = 1e-12 * (1.0 + alphas[0].abs());
    let mut worst_decrease_slack = f64::INFINITY;
    for (k, df) in model_gaps.iter().enumerate() {
        let t = if *df > 0.0 {
            2.0 * df / (1.0 + (1.0 + 4.0 * c * df).sqrt())
        } else {
            0.0
        };
        let slack = alphas[k] - c * t * t - alphas[k + 1] + fuzz;
        worst_decrease_slack = worst_decrease_slack.min(slack);
    }
    let decrease_ok = worst_decrease_slack >= 0.0;

    let smooth_modulus = match &f.kind {
        FunctionKind::Zero => Some(0.0),
        FunctionKind::Quadratic { a, .. } => Some(symmetric_max_eig(a)),
        _ => None,
    };
    let (worst_ratio_slack, ratio_ok) = match smooth_modulus {
        Some(lp) => {
            let mut worst = f64::INFINITY;
            for k in 0..steps {
                if alphas[k] > 1e-14 {
                    let r = alphas[k + 1] / alphas[k];
                    worst = worst.min(1.0 + RATIO_SLACK - (r * r / (4.0 * (lp + 1.0)) + r));
                }
            }
            (Some(worst), Some(worst >= 0.0))
        }
        None => (None, None),
    };

    Ok(BundleReport {
        optimal_value,
        alphas,
        lipschitz,
        smooth_modulus,
        worst_decrease_slack,
        decrease_ok,
        worst_ratio_slack,
        ratio_ok,
    })
}
