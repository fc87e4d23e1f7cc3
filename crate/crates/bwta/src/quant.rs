//! Quantizers with learnable scales.
//!
//! Four modes share one shape: divide by a positive scale `s`, clip to the
//! mode's range, round half away from zero. Weights use the sign quantizer
//! (zero-mean redistribution, derived scale `||W||_F / n`); activations use
//! bool (`[0, 1]`), ternary (`[-1, 1]`), or the staged levelwise mode
//! (`[-L, L]`, with `Levelwise(1)` identical to ternary).
//!
//! The backward pass is a clipped straight-through estimator: activations
//! pass the upstream gradient inside the clip range and zero outside; the
//! scale gradient follows the learned-step-size rule with an optional
//! `1/sqrt(n * hi)` normalizer.

use crate::error::{Error, Result};
use crate::tensor::{DenseMatrix, IntMatrix};

/// Scales are clamped to this floor whenever they are updated.
pub const SCALE_FLOOR: f32 = 1e-6;

/// What the quantizer maps onto.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantMode {
    /// `{-1, +1}` by sign, `sign(0) = +1`. Weights only; the scale is derived.
    SignBinary,
    /// `{0, 1}` over the clip range `[0, 1]`.
    Bool,
    /// `{-1, 0, +1}` over the clip range `[-1, 1]`.
    Ternary,
    /// `{-L..L}` over the clip range `[-L, L]`; `Levelwise(1)` == `Ternary`.
    Levelwise(u32),
}

impl QuantMode {
    /// Clip range `(lo, hi)` for the rounding modes; `None` for sign.
    pub fn range(&self) -> Option<(f32, f32)> {
        match self {
            QuantMode::SignBinary => None,
            QuantMode::Bool => Some((0.0, 1.0)),
            QuantMode::Ternary => Some((-1.0, 1.0)),
            QuantMode::Levelwise(l) => Some((-(*l as f32), *l as f32)),
        }
    }

    /// Level half-range: how many positive integer bins the mode has.
    pub fn half_range(&self) -> u32 {
        match self {
            QuantMode::SignBinary | QuantMode::Bool | QuantMode::Ternary => 1,
            QuantMode::Levelwise(l) => *l,
        }
    }
}

/// A quantizer's live parameters: mode, learnable scale, and gradient
/// bookkeeping for the scale update.
#[derive(Debug, Clone)]
pub struct QuantState {
    /// Strictly positive step size.
    pub scale: f32,
    pub mode: QuantMode,
    /// Extra multiplier on the scale gradient (1.0 = plain rule).
    pub grad_scale: f32,
    /// Apply the `1/sqrt(n * hi)` learned-step-size normalizer (default on).
    pub lsq_norm: bool,
}

impl QuantState {
    pub fn new(mode: QuantMode, scale: f32) -> Result<Self> {
        if let QuantMode::Levelwise(0) = mode {
            return Err(Error::Invalid {
                op: "QuantState::new",
                detail: "levelwise half-range must be >= 1".to_string(),
            });
        }
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::NonPositiveScale {
                op: "QuantState::new",
                value: scale,
            });
        }
        Ok(QuantState {
            scale,
            mode,
            grad_scale: 1.0,
            lsq_norm: true,
        })
    }

    /// Update the scale, clamping to [`SCALE_FLOOR`] so it stays positive.
    pub fn set_scale(&mut self, s: f32) {
        self.scale = if s.is_finite() { s.max(SCALE_FLOOR) } else { SCALE_FLOOR };
    }

    /// Effective gradient multiplier for a tensor of `n` elements.
    fn grad_norm(&self, n: usize) -> f32 {
        let hi = self.mode.range().map(|(_, hi)| hi).unwrap_or(1.0);
        if self.lsq_norm {
            self.grad_scale / ((n as f32) * hi).sqrt()
        } else {
            self.grad_scale
        }
    }
}

#[inline]
fn clip(v: f32, lo: f32, hi: f32) -> f32 {
    v.max(lo).min(hi)
}

/// Sign-quantize a weight matrix after zero-mean redistribution.
///
/// Returns `(signs, s_w, mu)` where `mu` is the matrix mean, `signs` holds
/// `sign(w - mu)` with `sign(0) = +1`, and `s_w = ||W||_F / n` is the derived
/// (not learned) dequantization scale. An all-zero matrix has no usable
/// scale and is rejected.
pub fn weight_sign_quantize(w: &DenseMatrix) -> Result<(IntMatrix, f32, f32)> {
    let n = w.len();
    let s_w = w.frob_norm() / n as f32;
    if !(s_w > 0.0) {
        return Err(Error::EmptyInput {
            op: "weight_sign_quantize",
            detail: "all-zero weight matrix has no scale",
        });
    }
    let mu = w.mean();
    let signs: Vec<i32> = w
        .as_slice()
        .iter()
        .map(|&v| if v - mu >= 0.0 { 1 } else { -1 })
        .collect();
    Ok((IntMatrix::new(w.rows(), w.cols(), signs)?, s_w, mu))
}

/// Initial activation scale: `2 * mean(|A|)`, twice the mean magnitude.
pub fn activation_scale_init(a: &DenseMatrix) -> Result<f32> {
    let s = 2.0 * a.mean_abs();
    if !(s > 0.0) {
        return Err(Error::EmptyInput {
            op: "activation_scale_init",
            detail: "all-zero activation has no scale",
        });
    }
    Ok(s)
}

/// Quantize a tensor to integers under `state`'s mode and scale.
///
/// Rounding is half away from zero throughout, so the ternary boundaries are
/// inclusive: `v >= 0.5 -> +1`, `v <= -0.5 -> -1`.
pub fn quantize(a: &DenseMatrix, state: &QuantState) -> Result<IntMatrix> {
    if !(state.scale > 0.0) {
        return Err(Error::NonPositiveScale {
            op: "quantize",
            value: state.scale,
        });
    }
    let data: Vec<i32> = match state.mode.range() {
        None => a
            .as_slice()
            .iter()
            .map(|&v| if v >= 0.0 { 1 } else { -1 })
            .collect(),
        Some((lo, hi)) => {
            let inv = 1.0 / state.scale;
            a.as_slice()
                .iter()
                .map(|&v| clip(v * inv, lo, hi).round() as i32)
                .collect()
        }
    };
    IntMatrix::new(a.rows(), a.cols(), data)
}

/// Map quantized integers back to floats: `s * q`. Rejects integers outside
/// the mode's range (corrupt input, not a rounding artifact).
pub fn dequantize(q: &IntMatrix, state: &QuantState) -> Result<DenseMatrix> {
    if !(state.scale > 0.0) {
        return Err(Error::NonPositiveScale {
            op: "dequantize",
            value: state.scale,
        });
    }
    let valid = |v: i32| match state.mode {
        QuantMode::SignBinary => v == 1 || v == -1,
        QuantMode::Bool => v == 0 || v == 1,
        QuantMode::Ternary => (-1..=1).contains(&v),
        QuantMode::Levelwise(l) => v.unsigned_abs() <= l,
    };
    if let Some(i) = q.as_slice().iter().position(|&v| !valid(v)) {
        return Err(Error::BadEntry {
            op: "dequantize",
            row: i / q.cols(),
            col: i % q.cols(),
            value: q.as_slice()[i] as f64,
        });
    }
    let data: Vec<f32> = q.as_slice().iter().map(|&v| state.scale * v as f32).collect();
    DenseMatrix::new(q.rows(), q.cols(), data)
}

/// Straight-through backward for an activation quantizer.
///
/// With `v = A/s` and `r = round(clip(v, lo, hi))`:
/// * `gradA[i] = upstream[i]` where `lo <= v[i] <= hi`, else `0` (clipped STE);
/// * `gradS = g * sum(upstream[i] * d[i])` with `d = r - v` in range and
///   `d = lo` / `d = hi` where clipping was active (learned-step-size rule),
///   `g` the normalizer from [`QuantState::grad_norm`].
///
/// `SignBinary` has no learned scale: the upstream gradient passes through
/// unchanged (naive STE) and `gradS = 0`.
pub fn ste_backward(
    a: &DenseMatrix,
    state: &QuantState,
    upstream: &DenseMatrix,
) -> Result<(DenseMatrix, f32)> {
    if a.rows() != upstream.rows() || a.cols() != upstream.cols() {
        return Err(Error::ShapeMismatch {
            op: "ste_backward",
            left: (a.rows(), a.cols()),
            right: (upstream.rows(), upstream.cols()),
        });
    }
    if !(state.scale > 0.0) {
        return Err(Error::NonPositiveScale {
            op: "ste_backward",
            value: state.scale,
        });
    }
    let (lo, hi) = match state.mode.range() {
        None => return Ok((upstream.clone(), 0.0)),
        Some(r) => r,
    };
    let inv = 1.0 / state.scale;
    let mut grad_a = vec![0.0f32; a.len()];
    let mut acc = 0.0f64;
    for (i, (&av, &uv)) in a.as_slice().iter().zip(upstream.as_slice()).enumerate() {
        let v = av * inv;
        let d = if v < lo {
            lo
        } else if v > hi {
            hi
        } else {
            grad_a[i] = uv;
            clip(v, lo, hi).round() - v
        };
        acc += uv as f64 * d as f64;
    }
    let grad_s = state.grad_norm(a.len()) * acc as f32;
    Ok((DenseMatrix::new(a.rows(), a.cols(), grad_a)?, grad_s))
}
