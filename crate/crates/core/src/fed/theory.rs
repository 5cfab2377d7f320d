//! Advisory check of the step-size conditions under which the quantized
//! protocol is known to converge, and a curvature estimate to feed it.
//! Nothing here gates a run.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::learner::{grad, ModelSpec, ParamVector};

/// One inequality: `holds` iff `margin >= 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub holds: bool,
    /// Signed slack; `-inf` when the bound is undefined.
    pub margin: f64,
    pub bound: f64,
}

impl Condition {
    fn upper(value: f64, bound: f64) -> Self {
        Self::from_margin(bound - value, bound)
    }

    fn lower(value: f64, bound: f64) -> Self {
        Self::from_margin(value - bound, bound)
    }

    fn from_margin(margin: f64, bound: f64) -> Self {
        let margin = if margin.is_nan() {
            f64::NEG_INFINITY
        } else {
            margin
        };
        Condition {
            holds: margin >= 0.0,
            margin,
            bound,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    /// `0 < a < min(1 / omega, 1)`.
    pub a_range: Condition,
    /// Upper bound on the local step size.
    pub step_size: Condition,
    /// Lower bound on the proximal weight.
    pub proximal: Condition,
    /// Set when `eta = 0`, which satisfies the step-size bound trivially.
    pub degenerate: bool,
}

impl TheoryReport {
    pub fn all_hold(&self) -> bool {
        self.a_range.holds && self.step_size.holds && self.proximal.holds
    }
}

/// Evaluates the conditions for `(gamma, eta, a)` given the largest
/// effective step count `e_bar`, the largest quantizer variance factor
/// `omega_bar`, population `n`, participants `m` and smoothness `l`.
#[allow(clippy::too_many_arguments)]
pub fn validate_theorem1_params(
    gamma: f64,
    eta: f64,
    a: f64,
    e_bar: f64,
    omega_bar: f64,
    n: usize,
    m: usize,
    l: f64,
) -> TheoryReport {
    let (nf, mf) = (n as f64, m as f64);
    let a_cap = (1.0 / omega_bar).min(1.0);
    let a_range = if a > 0.0 {
        Condition::upper(a, a_cap)
    } else {
        Condition::from_margin(a, a_cap)
    };
    // strict inequality on a
    let a_range = Condition {
        holds: a_range.margin > 0.0,
        ..a_range
    };

    let a_bar = a * (1.0 - a * omega_bar);
    let spread = 2.0 * nf - mf * a_bar;
    let (eta_max, gamma_min) = if a_bar > 0.0 && spread > 0.0 {
        let one_w = 1.0 + omega_bar;
        let e1 = 1.0 / (2.0 * gamma * e_bar * (nf * one_w).sqrt());
        let e2 = mf * a_bar * mf.sqrt() / (3.0 * (one_w * nf * spread).sqrt());
        let g1 = 8.0 * l;
        let g2 = l * (30.0 * (a * omega_bar + 3.0) / (1.0 - a * omega_bar) - 4.0).sqrt();
        let g3 = 2.0 * l * (nf * spread).sqrt() / (mf * a_bar);
        (e1.min(e2), g1.max(g2).max(g3))
    } else {
        (f64::NAN, f64::NAN)
    };

    let degenerate = eta == 0.0;
    let step_size = if degenerate {
        Condition {
            holds: true,
            margin: eta_max,
            bound: eta_max,
        }
    } else {
        Condition::upper(eta, eta_max)
    };
    TheoryReport {
        a_range,
        step_size,
        proximal: Condition::lower(gamma, gamma_min),
        degenerate,
    }
}

/// Power-iteration estimate of the Hessian spectral norm of the loss over
/// `indices` at `theta`, using central finite differences of the gradient
/// for Hessian-vector products.
pub fn estimate_smoothness<R: Rng + ?Sized>(
    spec: &ModelSpec,
    theta: &[f64],
    ds: &Dataset,
    indices: &[usize],
    iterations: usize,
    rng: &mut R,
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let d = theta.len();
    let mut v = ParamVector::from_vec((0..d).map(|_| rng.random::<f64>() - 0.5).collect());
    let norm = v.norm_sq().sqrt();
    v.scale(1.0 / norm);
    let h = 1e-4;
    let hvp = |v: &[f64]| -> Result<ParamVector> {
        let mut plus = ParamVector::from_vec(theta.to_vec());
        plus.axpy(h, v);
        let mut minus = ParamVector::from_vec(theta.to_vec());
        minus.axpy(-h, v);
        let mut out = grad(spec, &plus, ds, indices)?;
        out.axpy(-1.0, &grad(spec, &minus, ds, indices)?);
        out.scale(0.5 / h);
        Ok(out)
    };
    let mut estimate = 0.0;
    for _ in 0..iterations.max(1) {
        let hv = hvp(&v)?;
        estimate = hv.norm_sq().sqrt();
        if estimate == 0.0 {
            break;
        }
        v = hv;
        v.scale(1.0 / estimate);
    }
    Ok(estimate)
}
