//! Stochastic uniform quantizer with separate sign bits.
//!
//! Magnitudes `|z_j|` inside a group are mapped onto the `K = 2^B - 1`
//! uniform sub-intervals of `[lo, hi]` (`lo`/`hi` = min/max magnitude in the
//! group) and rounded to one of the two enclosing boundaries with
//! probabilities that make the result unbiased. Each element costs `B` level
//! bits plus one sign bit; each group's two bounds cost `bits_per_bound`
//! bits apiece, so a delta costs `d (B + 1) + mu` bits on the wire.
//!
//! Bounds are kept at full `f64` precision in simulation; `bits_per_bound`
//! only enters the accounting.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest supported bit width; keeps level indices exact in `u32`/`f64`.
pub const MAX_BITS: u32 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantizerConfig {
    /// Share bounds per parameter tensor (true) or across the whole vector.
    pub per_layer_grouping: bool,
    pub bits_per_bound: u32,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        QuantizerConfig {
            per_layer_grouping: true,
            bits_per_bound: 32,
        }
    }
}

impl QuantizerConfig {
    pub fn whole_vector() -> Self {
        QuantizerConfig {
            per_layer_grouping: false,
            ..Default::default()
        }
    }

    /// Groups actually used for a vector with the given tensor layout.
    #[allow(clippy::single_range_in_vec_init)]
    pub fn groups(&self, layout: &[Range<usize>], d: usize) -> Vec<Range<usize>> {
        if self.per_layer_grouping && !layout.is_empty() {
            layout.to_vec()
        } else {
            vec![0..d]
        }
    }

    /// `mu`: bits spent on bounds for `num_groups` groups.
    pub fn aux_bits(&self, num_groups: usize) -> u64 {
        2 * self.bits_per_bound as u64 * num_groups as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantGroup {
    pub range: Range<usize>,
    pub lower: f64,
    pub upper: f64,
}

/// Wire form of a quantized vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedDelta {
    pub levels: Vec<u32>,
    /// +1 / -1 per element (zero is stored as +1).
    pub signs: Vec<i8>,
    pub groups: Vec<QuantGroup>,
    pub bits_per_element: u32,
    pub aux_bits: u64,
}

impl QuantizedDelta {
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// Bits on the wire: one sign bit and `B` level bits per element, plus
    /// the bound bits.
    pub fn payload_bits(&self) -> u64 {
        let sign_bits = self.signs.len() as u64;
        let level_bits = self.levels.len() as u64 * self.bits_per_element as u64;
        sign_bits + level_bits + self.aux_bits
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// `d (B + 1) + mu`.
pub fn payload_bits(d: u64, bits: u32, mu: u64) -> u64 {
    d * (bits as u64 + 1) + mu
}

fn check_bits(bits: u32) -> Result<()> {
    if bits == 0 || bits > MAX_BITS {
        return Err(Error::InvalidArgument(format!(
            "bits per element must be in [1, {MAX_BITS}], got {bits}"
        )));
    }
    Ok(())
}

fn num_levels(bits: u32) -> u64 {
    (1u64 << bits) - 1
}

/// Boundary `c_k` of the grid over `[lo, hi]`; both endpoints are exact.
#[inline]
fn boundary(lo: f64, hi: f64, width: f64, k: u64, top: u64) -> f64 {
    // k = 0 gives lo + 0 = lo exactly
    let c = lo + k as f64 * width;
    if k >= top {
        hi
    } else {
        c
    }
}

fn check_finite(z: &[f64]) -> Result<()> {
    match z.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite {
            index,
            value: z[index],
        }),
        None => Ok(()),
    }
}

fn check_groups(groups: &[Range<usize>], d: usize) -> Result<()> {
    let mut at = 0;
    for g in groups {
        if g.start != at || g.end <= g.start {
            return Err(Error::InvalidArgument(format!(
                "quantization groups must tile [0, {d}) contiguously"
            )));
        }
        at = g.end;
    }
    if at != d {
        return Err(Error::InvalidArgument(format!(
            "quantization groups cover {at} of {d} elements"
        )));
    }
    Ok(())
}

/// Quantizes `z` with `bits` bits per element. `layout` is the tensor layout
/// of the vector (ignored when the config asks for whole-vector bounds).
pub fn quantize<R: Rng + ?Sized>(
    z: &[f64],
    bits: u32,
    layout: &[Range<usize>],
    cfg: &QuantizerConfig,
    rng: &mut R,
) -> Result<QuantizedDelta> {
    if z.is_empty() {
        return Err(Error::InvalidArgument("cannot quantize an empty vector".into()));
    }
    check_finite(z)?;
    let ranges = cfg.groups(layout, z.len());
    check_groups(&ranges, z.len())?;
    let bounds: Vec<(f64, f64)> = ranges
        .iter()
        .map(|r| {
            z[r.clone()].iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), v| {
                (lo.min(v.abs()), hi.max(v.abs()))
            })
        })
        .collect();
    let groups = ranges
        .into_iter()
        .zip(bounds)
        .map(|(range, (lower, upper))| QuantGroup { range, lower, upper })
        .collect();
    quantize_groups(z, bits, groups, cfg, rng)
}

/// Quantizes against caller-supplied group bounds. Magnitudes outside a
/// group's `[lower, upper]` are clamped to it.
pub fn quantize_with_bounds<R: Rng + ?Sized>(
    z: &[f64],
    bits: u32,
    groups: Vec<QuantGroup>,
    cfg: &QuantizerConfig,
    rng: &mut R,
) -> Result<QuantizedDelta> {
    check_finite(z)?;
    let ranges: Vec<Range<usize>> = groups.iter().map(|g| g.range.clone()).collect();
    check_groups(&ranges, z.len())?;
    quantize_groups(z, bits, groups, cfg, rng)
}

fn quantize_groups<R: Rng + ?Sized>(
    z: &[f64],
    bits: u32,
    groups: Vec<QuantGroup>,
    cfg: &QuantizerConfig,
    rng: &mut R,
) -> Result<QuantizedDelta> {
    check_bits(bits)?;
    let top = num_levels(bits);

    let mut levels = vec![0u32; z.len()];
    let mut signs = vec![1i8; z.len()];
    for g in &groups {
        if !(g.lower <= g.upper) || g.lower < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "invalid bounds [{}, {}] for group {:?}",
                g.lower, g.upper, g.range
            )));
        }
        let (lo, hi) = (g.lower, g.upper);
        let scale = if hi > lo { top as f64 / (hi - lo) } else { 0.0 };
        let width = (hi - lo) / top as f64;
        for j in g.range.clone() {
            // One uniform per element regardless of branch, so the stream
            // position never depends on the data.
            let u: f64 = rng.random();
            signs[j] = 1 - 2 * (z[j] < 0.0) as i8;
            if hi == lo {
                continue;
            }
            let mag = z[j].abs().clamp(lo, hi);
            // mag >= lo, so truncation is floor
            let mut k = (((mag - lo) * scale) as u64).min(top);
            // Snap k so that c_k <= mag < c_{k+1} with the exact boundary map.
            let mut c_k = boundary(lo, hi, width, k, top);
            while c_k > mag && k > 0 {
                k -= 1;
                c_k = boundary(lo, hi, width, k, top);
            }
            let mut c_next = boundary(lo, hi, width, k + 1, top);
            while c_next <= mag && k < top {
                k += 1;
                c_k = c_next;
                c_next = boundary(lo, hi, width, k + 1, top);
            }
            let level = if k == top || mag == c_k {
                k
            } else {
                k + (u * (c_next - c_k) < mag - c_k) as u64
            };
            levels[j] = level as u32;
        }
    }
    let aux_bits = cfg.aux_bits(groups.len());
    Ok(QuantizedDelta {
        levels,
        signs,
        groups,
        bits_per_element: bits,
        aux_bits,
    })
}

/// Element `j` is `sign_j * c_{level_j}`.
pub fn dequantize(q: &QuantizedDelta) -> Vec<f64> {
    let top = num_levels(q.bits_per_element);
    let mut out = vec![0.0; q.levels.len()];
    for g in &q.groups {
        let width = (g.upper - g.lower) / top as f64;
        for j in g.range.clone() {
            out[j] = q.signs[j] as f64 * boundary(g.lower, g.upper, width, q.levels[j] as u64, top);
        }
    }
    out
}

/// Contraction-factor expression
/// `sum_j (zmax - zmin) / (4 (2^B - 1) ||z||^2)`, where the numerator sums,
/// over every element, the magnitude range of the group the element lies in.
///
/// This dominates the realized relative error whenever each group's
/// sub-interval width `(zmax - zmin) / (2^B - 1)` is at most 1, since the
/// per-element variance of the rounding is at most `width^2 / 4`.
pub fn omega_bound(z: &[f64], bits: u32, layout: &[Range<usize>], cfg: &QuantizerConfig) -> Result<f64> {
    check_bits(bits)?;
    check_finite(z)?;
    let norm_sq: f64 = z.iter().map(|v| v * v).sum();
    if norm_sq == 0.0 {
        return Err(Error::ZeroVector("omega bound"));
    }
    let ranges = cfg.groups(layout, z.len());
    check_groups(&ranges, z.len())?;
    let spread: f64 = ranges
        .iter()
        .map(|r| {
            let (lo, hi) = z[r.clone()].iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), v| {
                (lo.min(v.abs()), hi.max(v.abs()))
            });
            r.len() as f64 * (hi - lo)
        })
        .sum();
    Ok(spread / (4.0 * num_levels(bits) as f64 * norm_sq))
}

/// Mean of `||Q(z) - z||^2 / ||z||^2` over `trials` independent draws.
pub fn empirical_omega<R: Rng + ?Sized>(
    z: &[f64],
    bits: u32,
    layout: &[Range<usize>],
    cfg: &QuantizerConfig,
    trials: usize,
    rng: &mut R,
) -> Result<f64> {
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be >= 1".into()));
    }
    let norm_sq: f64 = z.iter().map(|v| v * v).sum();
    if norm_sq == 0.0 {
        return Err(Error::ZeroVector("empirical omega"));
    }
    let mut total = 0.0;
    for _ in 0..trials {
        let q = dequantize(&quantize(z, bits, layout, cfg, rng)?);
        total += q.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(total / trials as f64 / norm_sq)
}
