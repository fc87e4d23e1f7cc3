//! BWTA layers and the full-precision ops that stay FP by design
//! (softmax, LayerNorm, residual adds, the model's first/last linears).
//!
//! Every quantized op has two faces:
//!
//! * an inference `forward` that packs on the fly and runs the popcount
//!   kernels whenever the activation mode is packable (ternary/bool; a
//!   levelwise stage with L > 1 multiplies quantized integers with the exact
//!   reference GEMM instead), and
//! * a `forward_train` that caches what the manual backward needs.
//!
//! Both faces multiply the same integers by the same `f32` scale product in
//! the same order, so they agree bit for bit — `block` tests pin that.

use crate::bitpack::{pack_bool, pack_sign, pack_ternary, PackedBinaryMatrix, PackedTernaryMatrix};
use crate::error::{Error, Result};
use crate::kernels::{gemm_case1, gemm_case2, gemm_case3, KernelConfig};
use crate::quant::{quantize, ste_backward, weight_sign_quantize, QuantMode, QuantState};
use crate::tensor::{gemm_f32, gemm_int_oracle, DenseMatrix, IntMatrix};

/// `out[n][o] = coeff * ints[o][n]` — shared by the packed and integer paths
/// so their float results are identical.
fn scale_transposed(ints: &IntMatrix, coeff: f32) -> DenseMatrix {
    let (rows, cols) = (ints.cols(), ints.rows());
    let mut out = DenseMatrix::zeros(rows, cols).expect("nonzero dims");
    for o in 0..ints.rows() {
        for n in 0..ints.cols() {
            out.set(n, o, coeff * ints.get(o, n) as f32);
        }
    }
    out
}

/// `out = coeff * ints`, elementwise.
fn scale_ints(ints: &IntMatrix, coeff: f32) -> DenseMatrix {
    DenseMatrix::new(
        ints.rows(),
        ints.cols(),
        ints.as_slice().iter().map(|&v| coeff * v as f32).collect(),
    )
    .expect("same dims")
}

fn is_packable(mode: QuantMode) -> bool {
    matches!(
        mode,
        QuantMode::Ternary | QuantMode::Bool | QuantMode::Levelwise(1)
    )
}

/// Elementwise sum, used for residual connections.
pub fn add_matrices(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::ShapeMismatch {
            op: "add_matrices",
            left: (a.rows(), a.cols()),
            right: (b.rows(), b.cols()),
        });
    }
    DenseMatrix::new(
        a.rows(),
        a.cols(),
        a.as_slice()
            .iter()
            .zip(b.as_slice())
            .map(|(&x, &y)| x + y)
            .collect(),
    )
}

/// Row-wise numerically-stable softmax.
pub fn softmax_rows(x: &DenseMatrix) -> DenseMatrix {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Backward through softmax given its output `probs`.
pub fn softmax_backward(probs: &DenseMatrix, upstream: &DenseMatrix) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(probs.rows(), probs.cols()).expect("nonzero dims");
    for r in 0..probs.rows() {
        let p = probs.row(r);
        let u = upstream.row(r);
        let dot: f32 = p.iter().zip(u).map(|(&pv, &uv)| pv * uv).sum();
        let o = out.row_mut(r);
        for c in 0..p.len() {
            o[c] = p[c] * (u[c] - dot);
        }
    }
    out
}

pub fn relu(x: &DenseMatrix) -> DenseMatrix {
    DenseMatrix::new(
        x.rows(),
        x.cols(),
        x.as_slice().iter().map(|&v| v.max(0.0)).collect(),
    )
    .expect("same dims")
}

pub fn relu_backward(x: &DenseMatrix, upstream: &DenseMatrix) -> DenseMatrix {
    DenseMatrix::new(
        x.rows(),
        x.cols(),
        x.as_slice()
            .iter()
            .zip(upstream.as_slice())
            .map(|(&xv, &uv)| if xv > 0.0 { uv } else { 0.0 })
            .collect(),
    )
    .expect("same dims")
}

// ---------------------------------------------------------------------------
// LayerNorm
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: Vec<f32>,
    pub bias: Vec<f32>,
    pub eps: f32,
}

#[derive(Debug, Clone)]
pub struct LnCache {
    xhat: DenseMatrix,
    inv_std: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct LnGrads {
    pub gain: Vec<f32>,
    pub bias: Vec<f32>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gain: vec![1.0; dim],
            bias: vec![0.0; dim],
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &DenseMatrix) -> Result<(DenseMatrix, LnCache)> {
        if x.cols() != self.gain.len() {
            return Err(Error::ShapeMismatch {
                op: "LayerNorm::forward",
                left: (x.rows(), x.cols()),
                right: (1, self.gain.len()),
            });
        }
        let d = x.cols();
        let mut xhat = x.clone();
        let mut inv_std = vec![0.0f32; x.rows()];
        let mut out = DenseMatrix::zeros(x.rows(), d)?;
        for r in 0..x.rows() {
            let row = x.row(r);
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let inv = 1.0 / (var + self.eps).sqrt();
            inv_std[r] = inv;
            let xh = xhat.row_mut(r);
            let o = out.row_mut(r);
            for c in 0..d {
                xh[c] = (row[c] - mean) * inv;
                o[c] = self.gain[c] * xh[c] + self.bias[c];
            }
        }
        Ok((out, LnCache { xhat, inv_std }))
    }

    /// Inference-only forward.
    pub fn apply(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        Ok(self.forward(x)?.0)
    }

    pub fn backward(
        &self,
        cache: &LnCache,
        upstream: &DenseMatrix,
        grads: &mut LnGrads,
    ) -> Result<DenseMatrix> {
        let d = self.gain.len();
        let mut dx = DenseMatrix::zeros(upstream.rows(), d)?;
        for r in 0..upstream.rows() {
            let u = upstream.row(r);
            let xh = cache.xhat.row(r);
            let inv = cache.inv_std[r];
            let mut sum_dxh = 0.0f32;
            let mut sum_dxh_xh = 0.0f32;
            for c in 0..d {
                grads.bias[c] += u[c];
                grads.gain[c] += u[c] * xh[c];
                let dxh = u[c] * self.gain[c];
                sum_dxh += dxh;
                sum_dxh_xh += dxh * xh[c];
            }
            let o = dx.row_mut(r);
            for c in 0..d {
                let dxh = u[c] * self.gain[c];
                o[c] = inv * (dxh - (sum_dxh + xh[c] * sum_dxh_xh) / d as f32);
            }
        }
        Ok(dx)
    }

    pub fn zero_grads(&self) -> LnGrads {
        LnGrads {
            gain: vec![0.0; self.gain.len()],
            bias: vec![0.0; self.bias.len()],
        }
    }
}

// ---------------------------------------------------------------------------
// Full-precision linear (the deliberately-unquantized first/last layers)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct FpLinear {
    /// `[out x in]`.
    pub w: DenseMatrix,
    pub b: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct FpCache {
    input: DenseMatrix,
}

#[derive(Debug, Clone)]
pub struct FpGrads {
    pub w: DenseMatrix,
    pub b: Vec<f32>,
}

impl FpLinear {
    pub fn new(w: DenseMatrix) -> Self {
        let b = vec![0.0; w.rows()];
        FpLinear { w, b }
    }

    pub fn out_features(&self) -> usize {
        self.w.rows()
    }

    pub fn in_features(&self) -> usize {
        self.w.cols()
    }

    pub fn forward(&self, a: &DenseMatrix) -> Result<(DenseMatrix, FpCache)> {
        let mut out = gemm_f32(a, &self.w)?;
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            for (c, v) in row.iter_mut().enumerate() {
                *v += self.b[c];
            }
        }
        Ok((out, FpCache { input: a.clone() }))
    }

    pub fn apply(&self, a: &DenseMatrix) -> Result<DenseMatrix> {
        Ok(self.forward(a)?.0)
    }

    pub fn backward(
        &self,
        cache: &FpCache,
        upstream: &DenseMatrix,
        grads: &mut FpGrads,
    ) -> Result<DenseMatrix> {
        // dW[o][i] = sum_n up[n][o] * a[n][i]; db[o] = sum_n up[n][o].
        let dw = gemm_f32(&upstream.transpose(), &cache.input.transpose())?;
        grads.w.add_in_place(&dw)?;
        for n in 0..upstream.rows() {
            for (o, &u) in upstream.row(n).iter().enumerate() {
                grads.b[o] += u;
            }
        }
        // dA[n][i] = sum_o up[n][o] * w[o][i].
        gemm_f32(upstream, &self.w.transpose())
    }

    pub fn zero_grads(&self) -> Result<FpGrads> {
        Ok(FpGrads {
            w: DenseMatrix::zeros(self.w.rows(), self.w.cols())?,
            b: vec![0.0; self.b.len()],
        })
    }
}

// ---------------------------------------------------------------------------
// BWTA linear: sign-quantized weight x quantized activation
// ---------------------------------------------------------------------------

/// A linear layer whose weight lives as a packed sign plane plus derived
/// scale, and whose input activation is quantized by a learnable scale.
///
/// `latent` holds the full-precision master weight during training; a layer
/// loaded from a checkpoint has `latent = None` and can only run inference.
#[derive(Debug, Clone)]
pub struct BwtaLinear {
    pub name: String,
    latent: Option<DenseMatrix>,
    /// Input-activation quantizer (ternary family or bool).
    pub act: QuantState,
    signs: IntMatrix,
    packed: PackedBinaryMatrix,
    s_w: f32,
    mu: f32,
}

#[derive(Debug, Clone)]
pub struct BwtaLinCache {
    input: DenseMatrix,
    q: IntMatrix,
}

#[derive(Debug, Clone)]
pub struct BwtaLinGrads {
    /// Gradient for the latent weight (naive STE through the sign).
    pub w: DenseMatrix,
    /// Gradient for the activation scale.
    pub s: f32,
}

impl BwtaLinear {
    pub fn new(name: impl Into<String>, w: DenseMatrix, act: QuantState) -> Result<Self> {
        if matches!(act.mode, QuantMode::SignBinary) {
            return Err(Error::Invalid {
                op: "BwtaLinear::new",
                detail: "sign mode quantizes weights, not input activations".to_string(),
            });
        }
        let (signs, s_w, mu) = weight_sign_quantize(&w)?;
        let packed = pack_sign(&signs)?;
        Ok(BwtaLinear {
            name: name.into(),
            latent: Some(w),
            act,
            signs,
            packed,
            s_w,
            mu,
        })
    }

    /// Inference-only layer rebuilt from a checkpoint (no latent weight).
    pub fn from_packed(
        name: impl Into<String>,
        packed: PackedBinaryMatrix,
        s_w: f32,
        act: QuantState,
    ) -> Result<Self> {
        if !(s_w > 0.0) || !s_w.is_finite() {
            return Err(Error::NonPositiveScale {
                op: "BwtaLinear::from_packed",
                value: s_w,
            });
        }
        let signs = packed.unpack();
        Ok(BwtaLinear {
            name: name.into(),
            latent: None,
            act,
            signs,
            packed,
            s_w,
            mu: 0.0,
        })
    }

    pub fn in_features(&self) -> usize {
        self.signs.cols()
    }

    pub fn out_features(&self) -> usize {
        self.signs.rows()
    }

    pub fn latent(&self) -> Option<&DenseMatrix> {
        self.latent.as_ref()
    }

    pub fn latent_mut(&mut self) -> Option<&mut DenseMatrix> {
        self.latent.as_mut()
    }

    pub fn weight_scale(&self) -> f32 {
        self.s_w
    }

    pub fn weight_mean(&self) -> f32 {
        self.mu
    }

    pub fn packed_weight(&self) -> &PackedBinaryMatrix {
        &self.packed
    }

    pub fn sign_ints(&self) -> &IntMatrix {
        &self.signs
    }

    /// Re-derive signs, weight scale and the packed plane from the latent
    /// weight. Must run after every latent update so the packed form never
    /// goes stale.
    pub fn refresh(&mut self) -> Result<()> {
        let w = self.latent.as_ref().ok_or(Error::Invalid {
            op: "BwtaLinear::refresh",
            detail: "no latent weight (checkpoint-loaded layer)".to_string(),
        })?;
        let (signs, s_w, mu) = weight_sign_quantize(w)?;
        self.packed = pack_sign(&signs)?;
        self.signs = signs;
        self.s_w = s_w;
        self.mu = mu;
        Ok(())
    }

    fn check_input(&self, a: &DenseMatrix, op: &'static str) -> Result<()> {
        if a.cols() != self.in_features() {
            return Err(Error::ShapeMismatch {
                op,
                left: (a.rows(), a.cols()),
                right: (self.out_features(), self.in_features()),
            });
        }
        Ok(())
    }

    /// Quantized product as integers, `[out x N]`. Packed kernels when the
    /// mode allows it, exact integer GEMM for levelwise stages.
    fn product_ints(&self, a: &DenseMatrix) -> Result<IntMatrix> {
        let cfg = KernelConfig::default();
        if is_packable(self.act.mode) {
            let planes = match self.act.mode {
                QuantMode::Bool => {
                    PackedTernaryMatrix::from_bool(&pack_bool(a, self.act.scale)?)?
                }
                _ => pack_ternary(a, self.act.scale)?,
            };
            gemm_case1(&self.packed, &planes, &cfg)
        } else {
            let q = quantize(a, &self.act)?;
            gemm_int_oracle(&self.signs, &q)
        }
    }

    /// Inference forward: `[N x in] -> [N x out]`,
    /// `out = s_w * s_act * (signs x q(A)^T)` transposed back to row-major N.
    pub fn forward(&self, a: &DenseMatrix) -> Result<DenseMatrix> {
        self.check_input(a, "BwtaLinear::forward")?;
        let ints = self.product_ints(a)?;
        Ok(scale_transposed(&ints, self.s_w * self.act.scale))
    }

    /// Training forward; same values as [`BwtaLinear::forward`], plus a cache.
    pub fn forward_train(&self, a: &DenseMatrix) -> Result<(DenseMatrix, BwtaLinCache)> {
        self.check_input(a, "BwtaLinear::forward_train")?;
        let q = quantize(a, &self.act)?;
        let ints = gemm_int_oracle(&self.signs, &q)?;
        let out = scale_transposed(&ints, self.s_w * self.act.scale);
        Ok((
            out,
            BwtaLinCache {
                input: a.clone(),
                q,
            },
        ))
    }

    /// Backward. `upstream` is `[N x out]`; returns the input gradient
    /// `[N x in]` and accumulates weight/scale gradients.
    ///
    /// The weight path is naive STE: the gradient of the dequantized sign
    /// weight passes to the latent unchanged (sign and derived-scale chains
    /// ignored). The activation path is the clipped STE from `quant`.
    pub fn backward(
        &self,
        cache: &BwtaLinCache,
        upstream: &DenseMatrix,
        grads: &mut BwtaLinGrads,
    ) -> Result<DenseMatrix> {
        if self.latent.is_none() {
            return Err(Error::Invalid {
                op: "BwtaLinear::backward",
                detail: "cannot train a checkpoint-loaded layer".to_string(),
            });
        }
        // Dequantized operands.
        let wq = scale_ints(&self.signs, self.s_w); // [out x in]
        let aq = scale_ints(&cache.q, self.act.scale); // [N x in]
        // dWq[o][i] = sum_n up[n][o] * aq[n][i].
        let dwq = gemm_f32(&upstream.transpose(), &aq.transpose())?;
        grads.w.add_in_place(&dwq)?;
        // dAq[n][i] = sum_o up[n][o] * wq[o][i].
        let daq = gemm_f32(upstream, &wq.transpose())?;
        let (da, ds) = ste_backward(&cache.input, &self.act, &daq)?;
        grads.s += ds;
        Ok(da)
    }

    /// Full-precision forward (latent weight, no quantization) — the FP
    /// reference path used for baselines and equivalence tests.
    pub fn forward_fp(&self, a: &DenseMatrix) -> Result<(DenseMatrix, FpCache)> {
        self.check_input(a, "BwtaLinear::forward_fp")?;
        let w = self.latent.as_ref().ok_or(Error::Invalid {
            op: "BwtaLinear::forward_fp",
            detail: "no latent weight".to_string(),
        })?;
        Ok((gemm_f32(a, w)?, FpCache { input: a.clone() }))
    }

    pub fn backward_fp(
        &self,
        cache: &FpCache,
        upstream: &DenseMatrix,
        grads: &mut BwtaLinGrads,
    ) -> Result<DenseMatrix> {
        let w = self.latent.as_ref().ok_or(Error::Invalid {
            op: "BwtaLinear::backward_fp",
            detail: "no latent weight".to_string(),
        })?;
        let dw = gemm_f32(&upstream.transpose(), &cache.input.transpose())?;
        grads.w.add_in_place(&dw)?;
        gemm_f32(upstream, &w.transpose())
    }

    pub fn zero_grads(&self) -> Result<BwtaLinGrads> {
        Ok(BwtaLinGrads {
            w: DenseMatrix::zeros(self.out_features(), self.in_features())?,
            s: 0.0,
        })
    }
}

// ---------------------------------------------------------------------------
// Attention matmuls
// ---------------------------------------------------------------------------

fn ternary_family(op: &'static str, st: &QuantState) -> Result<()> {
    match st.mode {
        QuantMode::Ternary | QuantMode::Levelwise(_) => Ok(()),
        other => Err(Error::Invalid {
            op,
            detail: format!("expected a ternary-family quantizer, got {other:?}"),
        }),
    }
}

/// Quantized attention scores: `(s_q * s_k / sqrt(D)) * (q(Q) x q(K)^T)`.
/// `q` and `k` are `[T x D]` per head, both quantized by ternary-family states.
pub fn attention_scores(
    q: &DenseMatrix,
    k: &DenseMatrix,
    s_q: &QuantState,
    s_k: &QuantState,
) -> Result<DenseMatrix> {
    ternary_family("attention_scores", s_q)?;
    ternary_family("attention_scores", s_k)?;
    if q.cols() != k.cols() {
        return Err(Error::ShapeMismatch {
            op: "attention_scores",
            left: (q.rows(), q.cols()),
            right: (k.rows(), k.cols()),
        });
    }
    let cfg = KernelConfig::default();
    let ints = if is_packable(s_q.mode) && is_packable(s_k.mode) {
        gemm_case3(
            &pack_ternary(q, s_q.scale)?,
            &pack_ternary(k, s_k.scale)?,
            &cfg,
        )?
    } else {
        gemm_int_oracle(&quantize(q, s_q)?, &quantize(k, s_k)?)?
    };
    let coeff = s_q.scale * s_k.scale / (q.cols() as f32).sqrt();
    Ok(scale_ints(&ints, coeff))
}

/// Quantized attention context: `(s_att * s_v) * (bool(Att) x tern(V))`.
/// `att` is `[T x T]` softmax output (nonnegative), `v` is `[T x D]`.
pub fn attention_context(
    att: &DenseMatrix,
    v: &DenseMatrix,
    s_att: &QuantState,
    s_v: &QuantState,
) -> Result<DenseMatrix> {
    if !matches!(s_att.mode, QuantMode::Bool) {
        return Err(Error::Invalid {
            op: "attention_context",
            detail: "attention probabilities use the bool quantizer".to_string(),
        });
    }
    ternary_family("attention_context", s_v)?;
    if att.cols() != v.rows() {
        return Err(Error::ShapeMismatch {
            op: "attention_context",
            left: (att.rows(), att.cols()),
            right: (v.rows(), v.cols()),
        });
    }
    if let Some(bad) = att.as_slice().iter().position(|&p| p < 0.0) {
        return Err(Error::BadEntry {
            op: "attention_context",
            row: bad / att.cols(),
            col: bad % att.cols(),
            value: att.as_slice()[bad] as f64,
        });
    }
    let cfg = KernelConfig::default();
    let ints = if is_packable(s_v.mode) {
        gemm_case2(
            &pack_bool(att, s_att.scale)?,
            &pack_ternary(&v.transpose(), s_v.scale)?,
            &cfg,
        )?
    } else {
        gemm_int_oracle(&quantize(att, s_att)?, &quantize(&v.transpose(), s_v)?)?
    };
    Ok(scale_ints(&ints, s_att.scale * s_v.scale))
}

/// Cache for the training-path attention matmuls.
#[derive(Debug, Clone)]
pub struct ScoresCache {
    q: DenseMatrix,
    k: DenseMatrix,
    q_ints: IntMatrix,
    k_ints: IntMatrix,
}

#[derive(Debug, Clone)]
pub struct ContextCache {
    att: DenseMatrix,
    v: DenseMatrix,
    att_ints: IntMatrix,
    v_ints: IntMatrix,
}

/// Training-path scores; identical values to [`attention_scores`].
pub fn attention_scores_train(
    q: &DenseMatrix,
    k: &DenseMatrix,
    s_q: &QuantState,
    s_k: &QuantState,
) -> Result<(DenseMatrix, ScoresCache)> {
    ternary_family("attention_scores_train", s_q)?;
    ternary_family("attention_scores_train", s_k)?;
    let q_ints = quantize(q, s_q)?;
    let k_ints = quantize(k, s_k)?;
    let ints = gemm_int_oracle(&q_ints, &k_ints)?;
    let coeff = s_q.scale * s_k.scale / (q.cols() as f32).sqrt();
    Ok((
        scale_ints(&ints, coeff),
        ScoresCache {
            q: q.clone(),
            k: k.clone(),
            q_ints,
            k_ints,
        },
    ))
}

/// Backward for the scores matmul; returns `(dQ, dK)` and accumulates the
/// two scale gradients.
pub fn attention_scores_backward(
    cache: &ScoresCache,
    s_q: &QuantState,
    s_k: &QuantState,
    upstream: &DenseMatrix,
    grad_s_q: &mut f32,
    grad_s_k: &mut f32,
) -> Result<(DenseMatrix, DenseMatrix)> {
    let inv_sqrt_d = 1.0 / (cache.q.cols() as f32).sqrt();
    let kq = scale_ints(&cache.k_ints, s_k.scale * inv_sqrt_d); // [T x D]
    let qq = scale_ints(&cache.q_ints, s_q.scale * inv_sqrt_d); // [T x D]
    // dQq[t][d] = sum_u up[t][u] * kq[u][d] / sqrt(D).
    let dqq = gemm_f32(upstream, &kq.transpose())?;
    // dKq[u][d] = sum_t up[t][u] * qq[t][d] / sqrt(D).
    let dkq = gemm_f32(&upstream.transpose(), &qq.transpose())?;
    let (dq, dsq) = ste_backward(&cache.q, s_q, &dqq)?;
    let (dk, dsk) = ste_backward(&cache.k, s_k, &dkq)?;
    *grad_s_q += dsq;
    *grad_s_k += dsk;
    Ok((dq, dk))
}

/// Training-path context; identical values to [`attention_context`].
pub fn attention_context_train(
    att: &DenseMatrix,
    v: &DenseMatrix,
    s_att: &QuantState,
    s_v: &QuantState,
) -> Result<(DenseMatrix, ContextCache)> {
    if !matches!(s_att.mode, QuantMode::Bool) {
        return Err(Error::Invalid {
            op: "attention_context_train",
            detail: "attention probabilities use the bool quantizer".to_string(),
        });
    }
    ternary_family("attention_context_train", s_v)?;
    let att_ints = quantize(att, s_att)?;
    let v_ints = quantize(v, s_v)?;
    let ints = gemm_int_oracle(&att_ints, &v_ints.transpose())?;
    Ok((
        scale_ints(&ints, s_att.scale * s_v.scale),
        ContextCache {
            att: att.clone(),
            v: v.clone(),
            att_ints,
            v_ints,
        },
    ))
}

/// Backward for the context matmul; returns `(dAtt, dV)` and accumulates the
/// two scale gradients.
pub fn attention_context_backward(
    cache: &ContextCache,
    s_att: &QuantState,
    s_v: &QuantState,
    upstream: &DenseMatrix,
    grad_s_att: &mut f32,
    grad_s_v: &mut f32,
) -> Result<(DenseMatrix, DenseMatrix)> {
    let vq = scale_ints(&cache.v_ints, s_v.scale); // [T x D]
    let attq = scale_ints(&cache.att_ints, s_att.scale); // [T x T]
    // dAttq[t][u] = sum_d up[t][d] * vq[u][d].
    let dattq = gemm_f32(upstream, &vq)?;
    // dVq[u][d] = sum_t attq[t][u] * up[t][d].
    let dvq = gemm_f32(&attq.transpose(), &upstream.transpose())?;
    let (datt, ds_att) = ste_backward(&cache.att, s_att, &dattq)?;
    let (dv, ds_v) = ste_backward(&cache.v, s_v, &dvq)?;
    *grad_s_att += ds_att;
    *grad_s_v += ds_v;
    Ok((datt, dv))
}

impl DenseMatrix {
    /// In-place elementwise add (gradient accumulation).
    pub fn add_in_place(&mut self, rhs: &DenseMatrix) -> Result<()> {
        if self.rows() != rhs.rows() || self.cols() != rhs.cols() {
            return Err(Error::ShapeMismatch {
                op: "add_in_place",
                left: (self.rows(), self.cols()),
                right: (rhs.rows(), rhs.cols()),
            });
        }
        for (a, &b) in self.as_mut_slice().iter_mut().zip(rhs.as_slice()) {
            *a += b;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{random_matrix, Scheme};

    #[test]
    fn bwta_linear_matches_hand_example() {
        // W = [[1,-1]]: mu = 0, s_w = sqrt(2)/2; A = [[1,-1]], s_a = 2.
        // ints: [1,-1] . [1,-1]... ternary(A/2) = [1,-1] -> dot = 2.
        // out = s_w * s_a * 2 = 2*sqrt(2).
        let w = DenseMatrix::from_rows(&[vec![1.0, -1.0]]).unwrap();
        let a = DenseMatrix::from_rows(&[vec![1.0, -1.0]]).unwrap();
        let act = QuantState::new(QuantMode::Ternary, 2.0).unwrap();
        let layer = BwtaLinear::new("t", w, act).unwrap();
        assert_eq!(layer.weight_scale(), 2.0f32.sqrt() / 2.0);
        let out = layer.forward(&a).unwrap();
        assert!((out.get(0, 0) - 2.0 * 2.0f32.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn packed_and_integer_paths_agree_exactly() {
        let w = random_matrix(24, 33, &Scheme::Normal { mean: 0.0, std: 0.5 }, 1).unwrap();
        let a = random_matrix(7, 33, &Scheme::Normal { mean: 0.1, std: 1.0 }, 2).unwrap();
        for mode in [QuantMode::Ternary, QuantMode::Bool, QuantMode::Levelwise(1)] {
            let layer =
                BwtaLinear::new("t", w.clone(), QuantState::new(mode, 0.9).unwrap()).unwrap();
            let packed = layer.forward(&a).unwrap();
            let (train, _) = layer.forward_train(&a).unwrap();
            assert_eq!(packed, train, "mode {mode:?}");
        }
    }

    #[test]
    fn levelwise_forward_uses_the_integer_path() {
        let w = random_matrix(5, 8, &Scheme::Normal { mean: 0.0, std: 0.5 }, 3).unwrap();
        let a = random_matrix(4, 8, &Scheme::Normal { mean: 0.0, std: 1.5 }, 4).unwrap();
        let layer = BwtaLinear::new(
            "t",
            w,
            QuantState::new(QuantMode::Levelwise(4), 0.5).unwrap(),
        )
        .unwrap();
        let out = layer.forward(&a).unwrap();
        let (train, _) = layer.forward_train(&a).unwrap();
        assert_eq!(out, train);
    }

    #[test]
    fn attention_ops_match_their_train_paths() {
        let q = random_matrix(8, 16, &Scheme::Normal { mean: 0.0, std: 1.0 }, 5).unwrap();
        let k = random_matrix(8, 16, &Scheme::Normal { mean: 0.0, std: 1.0 }, 6).unwrap();
        let sq = QuantState::new(QuantMode::Ternary, 1.1).unwrap();
        let sk = QuantState::new(QuantMode::Ternary, 0.8).unwrap();
        let s = attention_scores(&q, &k, &sq, &sk).unwrap();
        let (st, _) = attention_scores_train(&q, &k, &sq, &sk).unwrap();
        assert_eq!(s, st);

        let att = softmax_rows(&s);
        let v = random_matrix(8, 16, &Scheme::Normal { mean: 0.0, std: 1.0 }, 7).unwrap();
        let satt = QuantState::new(QuantMode::Bool, 0.25).unwrap();
        let sv = QuantState::new(QuantMode::Ternary, 1.3).unwrap();
        let c = attention_context(&att, &v, &satt, &sv).unwrap();
        let (ct, _) = attention_context_train(&att, &v, &satt, &sv).unwrap();
        assert_eq!(c, ct);
    }

    #[test]
    fn attention_context_rejects_negative_probabilities() {
        let att = DenseMatrix::from_rows(&[vec![0.5, -0.1]]).unwrap();
        let v = random_matrix(2, 4, &Scheme::Normal { mean: 0.0, std: 1.0 }, 8).unwrap();
        let satt = QuantState::new(QuantMode::Bool, 0.5).unwrap();
        let sv = QuantState::new(QuantMode::Ternary, 1.0).unwrap();
        assert!(matches!(
            attention_context(&att, &v, &satt, &sv),
            Err(Error::BadEntry { .. })
        ));
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let x = random_matrix(6, 9, &Scheme::Normal { mean: 0.0, std: 3.0 }, 9).unwrap();
        let p = softmax_rows(&x);
        for r in 0..6 {
            let sum: f32 = p.row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-5);
            assert!(p.row(r).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn layernorm_standardizes_before_affine() {
        let x = random_matrix(12, 16, &Scheme::Normal { mean: 3.0, std: 2.0 }, 10).unwrap();
        let ln = LayerNorm::new(16);
        let (_, cache) = ln.forward(&x).unwrap();
        for r in 0..12 {
            let row = cache.xhat.row(r);
            let mean: f32 = row.iter().sum::<f32>() / 16.0;
            let var: f32 = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / 16.0;
            assert!(mean.abs() < 1e-5, "row {r} mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "row {r} var {var}");
        }
    }

    /// Finite-difference check for the FP pieces (LayerNorm, softmax, FP
    /// linear): perturb one input element, compare loss slope.
    #[test]
    fn fp_backwards_match_finite_differences() {
        let x = random_matrix(3, 8, &Scheme::Normal { mean: 0.0, std: 1.0 }, 11).unwrap();
        let up = random_matrix(3, 8, &Scheme::Uniform { lo: -1.0, hi: 1.0 }, 12).unwrap();

        // LayerNorm.
        let ln = LayerNorm::new(8);
        let (_, cache) = ln.forward(&x).unwrap();
        let mut g = ln.zero_grads();
        let dx = ln.backward(&cache, &up, &mut g).unwrap();
        let loss = |m: &DenseMatrix| -> f64 {
            let (y, _) = ln.forward(m).unwrap();
            y.as_slice()
                .iter()
                .zip(up.as_slice())
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum()
        };
        for idx in [0usize, 7, 13] {
            let mut hi = x.clone();
            let mut lo = x.clone();
            hi.as_mut_slice()[idx] += 1e-3;
            lo.as_mut_slice()[idx] -= 1e-3;
            let fd = (loss(&hi) - loss(&lo)) / 2e-3;
            assert!(
                (dx.as_slice()[idx] as f64 - fd).abs() < 1e-3,
                "ln dx[{idx}] {} vs fd {fd}",
                dx.as_slice()[idx]
            );
        }

        // Softmax.
        let p = softmax_rows(&x);
        let ds = softmax_backward(&p, &up);
        let sloss = |m: &DenseMatrix| -> f64 {
            softmax_rows(m)
                .as_slice()
                .iter()
                .zip(up.as_slice())
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum()
        };
        for idx in [2usize, 9, 20] {
            let mut hi = x.clone();
            let mut lo = x.clone();
            hi.as_mut_slice()[idx] += 1e-3;
            lo.as_mut_slice()[idx] -= 1e-3;
            let fd = (sloss(&hi) - sloss(&lo)) / 2e-3;
            assert!((ds.as_slice()[idx] as f64 - fd).abs() < 1e-3);
        }
    }

    #[test]
    fn refresh_keeps_packed_weight_consistent() {
        let w = random_matrix(6, 6, &Scheme::Normal { mean: 0.0, std: 1.0 }, 13).unwrap();
        let mut layer = BwtaLinear::new(
            "t",
            w,
            QuantState::new(QuantMode::Ternary, 1.0).unwrap(),
        )
        .unwrap();
        layer.latent_mut().unwrap().set(0, 0, -10.0);
        layer.refresh().unwrap();
        assert_eq!(layer.sign_ints().get(0, 0), -1);
        assert_eq!(layer.packed_weight().unpack(), *layer.sign_ints());
        let (_, s_w, _) = weight_sign_quantize(layer.latent().unwrap()).unwrap();
        assert_eq!(layer.weight_scale(), s_w);
    }
}
