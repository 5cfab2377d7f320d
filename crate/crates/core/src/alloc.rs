//! Joint bandwidth / quantization-bit allocation under alpha-fairness.
//!
//! For a device with received power `g`, delay budget `tau`, model size `d`
//! and bound overhead `mu`, the largest bit width that fits the delay budget
//! on bandwidth `W` is
//!
//! ```text
//! b(W) = (tau * rate(W) - mu) / d - 1
//! ```
//!
//! which is increasing and concave in `W`. With the integrality of the bit
//! width relaxed, maximizing `sum_i u(b_i(W_i))` subject to
//! `sum_i W_i = W_total` is a single-budget concave allocation. It is solved
//! by bisection on the budget multiplier `lambda`: for a given `lambda` each
//! device's bandwidth is the root of `u'(b_i(W)) b_i'(W) = lambda` (a
//! monotone map, inverted by an inner bisection), and `lambda` is tuned until
//! the bandwidths exhaust the budget.
//!
//! Devices that cannot reach `b = 0` even with the whole band are dropped
//! before the solve; if the remaining devices' minimum bandwidths still
//! exceed the budget, the device with the largest minimum is dropped until
//! they fit. The continuous bit widths are then floored and devices below
//! the lower bound are dropped.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::wireless::{rate_from_rx_power, tx_delay, LogBase};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocProblem {
    /// Received power `P_i |h_i|^2` per device, watts.
    pub gains: Vec<f64>,
    /// Delay budget per device, seconds.
    pub taus: Vec<f64>,
    pub w_total: f64,
    pub alpha: f64,
    /// Model dimension.
    pub d: u64,
    /// Bound overhead bits.
    pub mu: u64,
    /// Noise power spectral density, W/Hz.
    pub noise_psd: f64,
    pub b_lower: u32,
    #[serde(default)]
    pub log_base: LogBase,
}

impl AllocProblem {
    pub fn num_devices(&self) -> usize {
        self.gains.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.gains.is_empty() {
            return Err(Error::InvalidArgument(
                "allocation needs at least one device".into(),
            ));
        }
        if self.taus.len() != self.gains.len() {
            return Err(Error::DimensionMismatch {
                expected: self.gains.len(),
                actual: self.taus.len(),
            });
        }
        if !(self.w_total > 0.0) || !(self.noise_psd > 0.0) || self.d == 0 {
            return Err(Error::InvalidArgument(
                "w_total, noise_psd and d must be positive".into(),
            ));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "alpha must be >= 0, got {}",
                self.alpha
            )));
        }
        if self
            .gains
            .iter()
            .chain(&self.taus)
            .any(|v| !(*v >= 0.0) || !v.is_finite())
        {
            return Err(Error::InvalidArgument(
                "gains and taus must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn b_of_w(&self, i: usize, w: f64) -> f64 {
        b_of_w(
            w,
            self.gains[i],
            self.taus[i],
            self.d,
            self.mu,
            self.noise_psd,
            self.log_base,
        )
    }

    /// `db/dW` for device `i`.
    fn db_dw(&self, i: usize, w: f64) -> f64 {
        if w <= 0.0 {
            return f64::INFINITY;
        }
        let s = self.gains[i] / (w * self.noise_psd);
        let nats = s.ln_1p() - s / (1.0 + s);
        let rate_slope = match self.log_base {
            LogBase::Two => nats / std::f64::consts::LN_2,
            LogBase::E => nats,
        };
        self.taus[i] / self.d as f64 * rate_slope
    }

    /// Marginal utility of bandwidth, `u'(b(W)) b'(W)`.
    pub fn marginal(&self, i: usize, w: f64) -> f64 {
        let b = self.b_of_w(i, w);
        let du = if self.alpha == 0.0 {
            1.0
        } else if b <= 0.0 {
            f64::INFINITY
        } else {
            b.powf(-self.alpha)
        };
        du * self.db_dw(i, w)
    }

    /// `sum_i u(b_i(W_i))` over devices with `W_i > 0`; `-inf` if any of
    /// them has a negative bit width.
    pub fn objective(&self, bandwidths: &[f64]) -> f64 {
        bandwidths
            .iter()
            .enumerate()
            .filter(|(_, &w)| w > 0.0)
            .map(|(i, &w)| {
                let b = self.b_of_w(i, w);
                if b < 0.0 {
                    f64::NEG_INFINITY
                } else {
                    utility(b, self.alpha)
                }
            })
            .sum()
    }
}

/// `(tau * rate(W) - mu) / d - 1`.
pub fn b_of_w(w: f64, gain: f64, tau: f64, d: u64, mu: u64, noise_psd: f64, base: LogBase) -> f64 {
    (tau * rate_from_rx_power(w, gain, noise_psd, base) - mu as f64) / d as f64 - 1.0
}

/// Alpha-fair utility; `ln x` at `alpha = 1`.
pub fn utility(x: f64, alpha: f64) -> f64 {
    if alpha == 1.0 {
        x.ln()
    } else {
        x.powf(1.0 - alpha) / (1.0 - alpha)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocSolution {
    pub bandwidths: Vec<f64>,
    pub bits_continuous: Vec<f64>,
    pub bits_floored: Vec<u32>,
    pub dropped: BTreeSet<usize>,
    pub dual_lambda: f64,
    pub kkt_residual: f64,
    /// Continuous relaxation objective at `bandwidths`.
    pub objective: f64,
    /// False when every device ended up dropped.
    pub feasible: bool,
}

impl AllocSolution {
    pub fn kept(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.bandwidths.len()).filter(|i| !self.dropped.contains(i))
    }
}

const BISECT_ITERS: usize = 200;

/// Smallest `W` in `[0, w_max]` with `b(W) >= 0`, or `None` if `b(w_max) <= 0`.
fn min_bandwidth(p: &AllocProblem, i: usize) -> Option<f64> {
    if p.b_of_w(i, p.w_total) <= 0.0 {
        return None;
    }
    let (mut lo, mut hi) = (0.0, p.w_total);
    for _ in 0..BISECT_ITERS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if p.b_of_w(i, mid) >= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Some(hi)
}

/// Bandwidth of device `i` at multiplier `lambda`, within `[w_min, w_total]`.
fn demand(p: &AllocProblem, i: usize, w_min: f64, lambda: f64) -> f64 {
    let at_min = if p.alpha > 0.0 {
        f64::INFINITY
    } else {
        p.marginal(i, w_min)
    };
    if at_min <= lambda {
        return w_min;
    }
    if p.marginal(i, p.w_total) >= lambda {
        return p.w_total;
    }
    let (mut lo, mut hi) = (w_min, p.w_total);
    for _ in 0..BISECT_ITERS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if p.marginal(i, mid) > lambda {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Continuous optimum over the device set `active` (with their minimum
/// bandwidths). Returns `(bandwidths for active, lambda)`.
fn solve_continuous(p: &AllocProblem, active: &[(usize, f64)]) -> (Vec<f64>, f64) {
    if let [(i, _)] = active {
        return (vec![p.w_total], p.marginal(*i, p.w_total));
    }
    let total = |lambda: f64| -> f64 { active.iter().map(|&(i, w_min)| demand(p, i, w_min, lambda)).sum() };
    // Bracket lambda: total is non-increasing in lambda.
    let mut lo = 1.0;
    let mut hi = 1.0;
    if total(1.0) > p.w_total {
        while total(hi) > p.w_total && hi < 1e300 {
            lo = hi;
            hi *= 4.0;
        }
    } else {
        while total(lo) <= p.w_total && lo > 1e-300 {
            hi = lo;
            lo /= 4.0;
        }
    }
    for _ in 0..BISECT_ITERS {
        let mid = (lo * hi).sqrt();
        if mid <= lo || mid >= hi {
            break;
        }
        if total(mid) > p.w_total {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let lambda = (lo * hi).sqrt();
    let mut w: Vec<f64> = active
        .iter()
        .map(|&(i, w_min)| demand(p, i, w_min, lambda))
        .collect();

    // Hand the bisection leftover to interior devices in proportion to
    // their headroom above the minimum.
    let used: f64 = w.iter().sum();
    let slack = p.w_total - used;
    let headroom: f64 = active.iter().zip(&w).map(|(&(_, w_min), &wi)| wi - w_min).sum();
    if headroom > 0.0 && slack != 0.0 {
        for (wi, &(_, w_min)) in w.iter_mut().zip(active) {
            *wi += slack * (*wi - w_min) / headroom;
        }
    }
    (w, lambda)
}

/// KKT residual of a bandwidth vector: worst relative gap between a served
/// device's marginal utility and `lambda` (one-sided for devices pinned at
/// their minimum bandwidth), plus the relative budget mismatch.
pub fn kkt_residual(p: &AllocProblem, bandwidths: &[f64], lambda: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for (i, &w) in bandwidths.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        let m = p.marginal(i, w);
        let pinned = p.alpha == 0.0 && p.b_of_w(i, w) <= 1e-12 * (1.0 + p.mu as f64 / p.d as f64);
        let gap = if pinned {
            (m - lambda).max(0.0)
        } else {
            (m - lambda).abs()
        };
        worst = worst.max(gap / lambda);
    }
    let used: f64 = bandwidths.iter().sum();
    worst + (used - p.w_total).abs() / p.w_total
}

/// Floors continuous bit widths and drops devices below `b_lower`. Kept
/// devices are re-checked against their delay budget at the floored width.
pub fn floor_and_drop(
    p: &AllocProblem,
    bandwidths: &[f64],
    bits_continuous: &[f64],
) -> (Vec<u32>, BTreeSet<usize>) {
    let mut floored = Vec::with_capacity(bits_continuous.len());
    let mut dropped = BTreeSet::new();
    for (i, (&b, &w)) in bits_continuous.iter().zip(bandwidths).enumerate() {
        let mut fb = if b.is_finite() && b > 0.0 {
            b.floor().min(u32::MAX as f64) as u32
        } else {
            0
        };
        if w > 0.0 {
            let rate = rate_from_rx_power(w, p.gains[i], p.noise_psd, p.log_base);
            while fb >= p.b_lower.max(1) && tx_delay(p.d * (fb as u64 + 1) + p.mu, rate) > p.taus[i] {
                fb -= 1;
            }
        }
        if w <= 0.0 || fb < p.b_lower {
            dropped.insert(i);
        }
        floored.push(fb);
    }
    (floored, dropped)
}

/// Solves the relaxed problem, then floors and drops.
pub fn solve_alloc(p: &AllocProblem) -> Result<AllocSolution> {
    p.validate()?;
    let m = p.num_devices();
    let mut active: Vec<(usize, f64)> = (0..m)
        .filter_map(|i| min_bandwidth(p, i).map(|w| (i, w)))
        .collect();
    while active.iter().map(|(_, w)| w).sum::<f64>() > p.w_total {
        let worst = active
            .iter()
            .enumerate()
            .max_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
            .map(|(k, _)| k)
            .unwrap();
        active.remove(worst);
    }

    let mut bandwidths = vec![0.0; m];
    let mut lambda = 0.0;
    if !active.is_empty() {
        let (w, l) = solve_continuous(p, &active);
        for (&(i, _), wi) in active.iter().zip(w) {
            bandwidths[i] = wi;
        }
        lambda = l;
    }
    let bits_continuous: Vec<f64> = (0..m)
        .map(|i| {
            if bandwidths[i] > 0.0 {
                p.b_of_w(i, bandwidths[i]).max(0.0)
            } else {
                0.0
            }
        })
        .collect();
    let (bits_floored, dropped) = floor_and_drop(p, &bandwidths, &bits_continuous);
    let kkt = if active.is_empty() {
        0.0
    } else {
        kkt_residual(p, &bandwidths, lambda)
    };
    Ok(AllocSolution {
        objective: p.objective(&bandwidths),
        feasible: dropped.len() < m,
        bandwidths,
        bits_continuous,
        bits_floored,
        dropped,
        dual_lambda: lambda,
        kkt_residual: kkt,
    })
}

/// Equal split `W_total / m` with a fixed bit width; the reference scheme
/// for protocols without allocation.
pub fn equal_split(p: &AllocProblem) -> Vec<f64> {
    vec![p.w_total / p.num_devices() as f64; p.num_devices()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridOptimum {
    pub objective: f64,
    pub bandwidths: Vec<f64>,
}

/// Exhaustive search over bandwidth splits on a regular simplex grid with
/// `grid_points` values per free coordinate (`W_i = W_total k_i / (G-1)`).
/// Devices whose bit width is negative at a grid point make it infeasible;
/// a device with zero bandwidth is left out of the objective.
///
/// Only meant as an oracle for small instances (`m <= 4`).
pub fn brute_force_alloc(p: &AllocProblem, grid_points: usize) -> Result<GridOptimum> {
    p.validate()?;
    let m = p.num_devices();
    if m > 4 || grid_points < 2 {
        return Err(Error::InvalidArgument(
            "grid oracle supports m <= 4 and at least 2 grid points".into(),
        ));
    }
    let steps = grid_points - 1;
    let mut best = GridOptimum {
        objective: f64::NEG_INFINITY,
        bandwidths: vec![0.0; m],
    };
    let mut k = vec![0usize; m];
    grid_rec(p, steps, 0, steps, &mut k, &mut best);
    Ok(best)
}

fn grid_rec(
    p: &AllocProblem,
    steps: usize,
    pos: usize,
    left: usize,
    k: &mut [usize],
    best: &mut GridOptimum,
) {
    let m = k.len();
    if pos == m - 1 {
        k[pos] = left;
        let w: Vec<f64> = k.iter().map(|&ki| p.w_total * ki as f64 / steps as f64).collect();
        // every device must be served
        if w.iter().any(|&wi| wi <= 0.0) {
            return;
        }
        let obj = p.objective(&w);
        if obj > best.objective {
            best.objective = obj;
            best.bandwidths = w;
        }
        return;
    }
    for ki in 0..=left {
        k[pos] = ki;
        grid_rec(p, steps, pos + 1, left - ki, k, best);
    }
}
