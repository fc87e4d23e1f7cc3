//! Post-norm transformer block built from BWTA layers.
//!
//! Layout per block, with every matmul quantized:
//!
//! ```text
//! x1  = LN1(x + MHA(x))          MHA: q/k/v/o projections + two attention
//! out = LN2(x1 + FFN(x1))        FFN: linear -> ReLU -> linear
//! ```
//!
//! Activation quantizers: all linear inputs and the attention q/k/v sides are
//! ternary-family (levelwise during smooth stages); the softmax output and
//! the post-ReLU FFN input are bool, since both are nonnegative by
//! construction and never leave that range.

use crate::error::{Error, Result};
use crate::layers::{
    add_matrices, attention_context, attention_context_backward, attention_context_train,
    attention_scores, attention_scores_backward, attention_scores_train, relu, relu_backward,
    softmax_backward, softmax_rows, BwtaLinCache, BwtaLinGrads, BwtaLinear, ContextCache, FpCache,
    LayerNorm, LnCache, LnGrads, ScoresCache,
};
use crate::quant::{QuantMode, QuantState};
use crate::tensor::{gemm_f32, random_matrix, DenseMatrix, Scheme};

/// Captured quantizer inputs from one training forward: `(site, tensor)`
/// pairs in forward order. Used for calibration and sparsity diagnostics.
pub type Tap = Vec<(String, DenseMatrix)>;

/// The four attention-side quantizers, shared across heads.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub s_q: QuantState,
    pub s_k: QuantState,
    pub s_att: QuantState,
    pub s_v: QuantState,
    pub heads: usize,
    pub head_dim: usize,
}

#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub name: String,
    pub q_proj: BwtaLinear,
    pub k_proj: BwtaLinear,
    pub v_proj: BwtaLinear,
    pub o_proj: BwtaLinear,
    pub attn: AttentionParams,
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
    pub ffn1: BwtaLinear,
    pub ffn2: BwtaLinear,
}

#[derive(Debug, Clone)]
struct HeadCache {
    scores: ScoresCache,
    probs: DenseMatrix,
    ctx: ContextCache,
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    q: BwtaLinCache,
    k: BwtaLinCache,
    v: BwtaLinCache,
    heads: Vec<HeadCache>,
    o: BwtaLinCache,
    ln1: LnCache,
    ffn1: BwtaLinCache,
    h1: DenseMatrix,
    ffn2: BwtaLinCache,
    ln2: LnCache,
}

#[derive(Debug, Clone)]
struct FpHeadCache {
    qh: DenseMatrix,
    kh: DenseMatrix,
    vh: DenseMatrix,
    probs: DenseMatrix,
}

#[derive(Debug, Clone)]
pub struct FpBlockCache {
    q: FpCache,
    k: FpCache,
    v: FpCache,
    heads: Vec<FpHeadCache>,
    o: FpCache,
    ln1: LnCache,
    ffn1: FpCache,
    h1: DenseMatrix,
    ffn2: FpCache,
    ln2: LnCache,
}

#[derive(Debug, Clone)]
pub struct BlockGrads {
    pub q: BwtaLinGrads,
    pub k: BwtaLinGrads,
    pub v: BwtaLinGrads,
    pub o: BwtaLinGrads,
    pub ffn1: BwtaLinGrads,
    pub ffn2: BwtaLinGrads,
    pub s_q: f32,
    pub s_k: f32,
    pub s_att: f32,
    pub s_v: f32,
    pub ln1: LnGrads,
    pub ln2: LnGrads,
}

/// Copy `src` into columns `[lo, lo + src.cols())` of `dst`.
fn write_cols(dst: &mut DenseMatrix, src: &DenseMatrix, lo: usize) {
    for r in 0..src.rows() {
        let s = src.row(r);
        let d = &mut dst.row_mut(r)[lo..lo + s.len()];
        d.copy_from_slice(s);
    }
}

impl TransformerBlock {
    /// Fresh block with seeded normal latent weights and unit scales
    /// (calibration replaces the scales before training).
    pub fn new(
        name: impl Into<String>,
        d_model: usize,
        heads: usize,
        d_ff: usize,
        mode: QuantMode,
        seed: u64,
    ) -> Result<Self> {
        let name = name.into();
        if heads == 0 || d_model == 0 || d_ff == 0 {
            return Err(Error::ZeroDim { op: "TransformerBlock::new" });
        }
        if d_model % heads != 0 {
            return Err(Error::Invalid {
                op: "TransformerBlock::new",
                detail: format!("d_model {d_model} not divisible by {heads} heads"),
            });
        }
        if matches!(mode, QuantMode::SignBinary | QuantMode::Bool) {
            return Err(Error::Invalid {
                op: "TransformerBlock::new",
                detail: "activation mode must be ternary-family".to_string(),
            });
        }
        let init = Scheme::Normal { mean: 0.0, std: 0.1 };
        let mk = |tag: &str, rows: usize, cols: usize, salt: u64, m: QuantMode| {
            BwtaLinear::new(
                format!("{name}.{tag}"),
                random_matrix(rows, cols, &init, seed.wrapping_add(salt))?,
                QuantState::new(m, 1.0)?,
            )
        };
        Ok(TransformerBlock {
            q_proj: mk("q", d_model, d_model, 1, mode)?,
            k_proj: mk("k", d_model, d_model, 2, mode)?,
            v_proj: mk("v", d_model, d_model, 3, mode)?,
            o_proj: mk("o", d_model, d_model, 4, mode)?,
            attn: AttentionParams {
                s_q: QuantState::new(mode, 1.0)?,
                s_k: QuantState::new(mode, 1.0)?,
                s_att: QuantState::new(QuantMode::Bool, 1.0)?,
                s_v: QuantState::new(mode, 1.0)?,
                heads,
                head_dim: d_model / heads,
            },
            ln1: LayerNorm::new(d_model),
            ln2: LayerNorm::new(d_model),
            ffn1: mk("ffn1", d_ff, d_model, 5, mode)?,
            ffn2: mk("ffn2", d_model, d_ff, 6, QuantMode::Bool)?,
            name,
        })
    }

    pub fn d_model(&self) -> usize {
        self.attn.heads * self.attn.head_dim
    }

    /// Quantizer sites in forward (and calibration) order.
    pub fn site_names(&self) -> Vec<String> {
        ["q_in", "k_in", "v_in", "s_q", "s_k", "s_att", "s_v", "o_in", "ffn1_in", "ffn2_in"]
            .iter()
            .map(|s| format!("{}.{s}", self.name))
            .collect()
    }

    pub fn quant_states(&self) -> Vec<(String, &QuantState)> {
        let n = &self.name;
        vec![
            (format!("{n}.q_in"), &self.q_proj.act),
            (format!("{n}.k_in"), &self.k_proj.act),
            (format!("{n}.v_in"), &self.v_proj.act),
            (format!("{n}.s_q"), &self.attn.s_q),
            (format!("{n}.s_k"), &self.attn.s_k),
            (format!("{n}.s_att"), &self.attn.s_att),
            (format!("{n}.s_v"), &self.attn.s_v),
            (format!("{n}.o_in"), &self.o_proj.act),
            (format!("{n}.ffn1_in"), &self.ffn1.act),
            (format!("{n}.ffn2_in"), &self.ffn2.act),
        ]
    }

    pub fn quant_states_mut(&mut self) -> Vec<(String, &mut QuantState)> {
        let n = self.name.clone();
        vec![
            (format!("{n}.q_in"), &mut self.q_proj.act),
            (format!("{n}.k_in"), &mut self.k_proj.act),
            (format!("{n}.v_in"), &mut self.v_proj.act),
            (format!("{n}.s_q"), &mut self.attn.s_q),
            (format!("{n}.s_k"), &mut self.attn.s_k),
            (format!("{n}.s_att"), &mut self.attn.s_att),
            (format!("{n}.s_v"), &mut self.attn.s_v),
            (format!("{n}.o_in"), &mut self.o_proj.act),
            (format!("{n}.ffn1_in"), &mut self.ffn1.act),
            (format!("{n}.ffn2_in"), &mut self.ffn2.act),
        ]
    }

    /// Move every ternary-family quantizer to `Levelwise(l)`. Bool sites
    /// (softmax output, post-ReLU) keep their mode: they are already at the
    /// cheapest representation and never stage.
    pub fn set_level(&mut self, l: u32) -> Result<()> {
        if l == 0 {
            return Err(Error::Invalid {
                op: "TransformerBlock::set_level",
                detail: "level must be at least 1".to_string(),
            });
        }
        for (_, st) in self.quant_states_mut() {
            if !matches!(st.mode, QuantMode::Bool) {
                st.mode = QuantMode::Levelwise(l);
            }
        }
        Ok(())
    }

    /// Re-derive packed weights from latents (after an optimizer step).
    pub fn refresh_weights(&mut self) -> Result<()> {
        self.q_proj.refresh()?;
        self.k_proj.refresh()?;
        self.v_proj.refresh()?;
        self.o_proj.refresh()?;
        self.ffn1.refresh()?;
        self.ffn2.refresh()
    }

    fn head_range(&self, h: usize) -> (usize, usize) {
        (h * self.attn.head_dim, (h + 1) * self.attn.head_dim)
    }

    // -- inference ----------------------------------------------------------

    /// Quantized inference forward, `[T x d] -> [T x d]`; packed kernels
    /// whenever the current modes allow it.
    pub fn forward(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        let qf = self.q_proj.forward(x)?;
        let kf = self.k_proj.forward(x)?;
        let vf = self.v_proj.forward(x)?;
        let mut ctx = DenseMatrix::zeros(x.rows(), self.d_model())?;
        for h in 0..self.attn.heads {
            let (lo, hi) = self.head_range(h);
            let qh = qf.col_slice(lo, hi);
            let kh = kf.col_slice(lo, hi);
            let vh = vf.col_slice(lo, hi);
            let scores = attention_scores(&qh, &kh, &self.attn.s_q, &self.attn.s_k)?;
            let probs = softmax_rows(&scores);
            let c = attention_context(&probs, &vh, &self.attn.s_att, &self.attn.s_v)?;
            write_cols(&mut ctx, &c, lo);
        }
        let att_out = self.o_proj.forward(&ctx)?;
        let x1 = self.ln1.apply(&add_matrices(x, &att_out)?)?;
        let h1 = self.ffn1.forward(&x1)?;
        let act = relu(&h1);
        let h2 = self.ffn2.forward(&act)?;
        self.ln2.apply(&add_matrices(&x1, &h2)?)
    }

    // -- training -----------------------------------------------------------

    /// Training forward with caches. Produces exactly the same values as
    /// [`TransformerBlock::forward`]. When `tap` is given, the input of every
    /// quantizer site is appended in forward order.
    pub fn forward_train(
        &self,
        x: &DenseMatrix,
        mut tap: Option<&mut Tap>,
    ) -> Result<(DenseMatrix, BlockCache)> {
        let mut grab = |site: &str, t: &DenseMatrix| {
            if let Some(tap) = tap.as_deref_mut() {
                tap.push((format!("{}.{site}", self.name), t.clone()));
            }
        };
        grab("q_in", x);
        grab("k_in", x);
        grab("v_in", x);
        let (qf, q_cache) = self.q_proj.forward_train(x)?;
        let (kf, k_cache) = self.k_proj.forward_train(x)?;
        let (vf, v_cache) = self.v_proj.forward_train(x)?;
        let mut ctx = DenseMatrix::zeros(x.rows(), self.d_model())?;
        let mut heads = Vec::with_capacity(self.attn.heads);
        for h in 0..self.attn.heads {
            let (lo, hi) = self.head_range(h);
            let qh = qf.col_slice(lo, hi);
            let kh = kf.col_slice(lo, hi);
            let vh = vf.col_slice(lo, hi);
            grab("s_q", &qh);
            grab("s_k", &kh);
            let (scores, scores_cache) =
                attention_scores_train(&qh, &kh, &self.attn.s_q, &self.attn.s_k)?;
            let probs = softmax_rows(&scores);
            grab("s_att", &probs);
            grab("s_v", &vh);
            let (c, ctx_cache) =
                attention_context_train(&probs, &vh, &self.attn.s_att, &self.attn.s_v)?;
            write_cols(&mut ctx, &c, lo);
            heads.push(HeadCache {
                scores: scores_cache,
                probs,
                ctx: ctx_cache,
            });
        }
        grab("o_in", &ctx);
        let (att_out, o_cache) = self.o_proj.forward_train(&ctx)?;
        let (x1, ln1_cache) = self.ln1.forward(&add_matrices(x, &att_out)?)?;
        grab("ffn1_in", &x1);
        let (h1, ffn1_cache) = self.ffn1.forward_train(&x1)?;
        let act = relu(&h1);
        grab("ffn2_in", &act);
        let (h2, ffn2_cache) = self.ffn2.forward_train(&act)?;
        let (out, ln2_cache) = self.ln2.forward(&add_matrices(&x1, &h2)?)?;
        Ok((
            out,
            BlockCache {
                q: q_cache,
                k: k_cache,
                v: v_cache,
                heads,
                o: o_cache,
                ln1: ln1_cache,
                ffn1: ffn1_cache,
                h1,
                ffn2: ffn2_cache,
                ln2: ln2_cache,
            },
        ))
    }

    /// Backward; accumulates into `grads` and returns the input gradient.
    pub fn backward(
        &self,
        cache: &BlockCache,
        upstream: &DenseMatrix,
        grads: &mut BlockGrads,
    ) -> Result<DenseMatrix> {
        // out = LN2(x1 + h2)
        let d_sum2 = self.ln2.backward(&cache.ln2, upstream, &mut grads.ln2)?;
        let d_act = self.ffn2.backward(&cache.ffn2, &d_sum2, &mut grads.ffn2)?;
        let d_h1 = relu_backward(&cache.h1, &d_act);
        let d_x1_ffn = self.ffn1.backward(&cache.ffn1, &d_h1, &mut grads.ffn1)?;
        let mut d_x1 = d_sum2;
        d_x1.add_in_place(&d_x1_ffn)?;
        // x1 = LN1(x + att_out)
        let d_sum1 = self.ln1.backward(&cache.ln1, &d_x1, &mut grads.ln1)?;
        let d_ctx = self.o_proj.backward(&cache.o, &d_sum1, &mut grads.o)?;
        let rows = d_ctx.rows();
        let mut d_qf = DenseMatrix::zeros(rows, self.d_model())?;
        let mut d_kf = DenseMatrix::zeros(rows, self.d_model())?;
        let mut d_vf = DenseMatrix::zeros(rows, self.d_model())?;
        for h in 0..self.attn.heads {
            let (lo, hi) = self.head_range(h);
            let d_ctx_h = d_ctx.col_slice(lo, hi);
            let hc = &cache.heads[h];
            let (d_probs, d_vh) = attention_context_backward(
                &hc.ctx,
                &self.attn.s_att,
                &self.attn.s_v,
                &d_ctx_h,
                &mut grads.s_att,
                &mut grads.s_v,
            )?;
            let d_scores = softmax_backward(&hc.probs, &d_probs);
            let (d_qh, d_kh) = attention_scores_backward(
                &hc.scores,
                &self.attn.s_q,
                &self.attn.s_k,
                &d_scores,
                &mut grads.s_q,
                &mut grads.s_k,
            )?;
            write_cols(&mut d_qf, &d_qh, lo);
            write_cols(&mut d_kf, &d_kh, lo);
            write_cols(&mut d_vf, &d_vh, lo);
        }
        let mut d_x = self.q_proj.backward(&cache.q, &d_qf, &mut grads.q)?;
        d_x.add_in_place(&self.k_proj.backward(&cache.k, &d_kf, &mut grads.k)?)?;
        d_x.add_in_place(&self.v_proj.backward(&cache.v, &d_vf, &mut grads.v)?)?;
        d_x.add_in_place(&d_sum1)?;
        Ok(d_x)
    }

    // -- full-precision reference path ---------------------------------------

    /// Full-precision forward (latent weights, no quantizers) with caches —
    /// the FP baseline path.
    pub fn forward_train_fp(&self, x: &DenseMatrix) -> Result<(DenseMatrix, FpBlockCache)> {
        let (qf, q_cache) = self.q_proj.forward_fp(x)?;
        let (kf, k_cache) = self.k_proj.forward_fp(x)?;
        let (vf, v_cache) = self.v_proj.forward_fp(x)?;
        let inv_sqrt_d = 1.0 / (self.attn.head_dim as f32).sqrt();
        let mut ctx = DenseMatrix::zeros(x.rows(), self.d_model())?;
        let mut heads = Vec::with_capacity(self.attn.heads);
        for h in 0..self.attn.heads {
            let (lo, hi) = self.head_range(h);
            let qh = qf.col_slice(lo, hi);
            let kh = kf.col_slice(lo, hi);
            let vh = vf.col_slice(lo, hi);
            let mut scores = gemm_f32(&qh, &kh)?;
            for v in scores.as_mut_slice() {
                *v *= inv_sqrt_d;
            }
            let probs = softmax_rows(&scores);
            let c = gemm_f32(&probs, &vh.transpose())?;
            write_cols(&mut ctx, &c, lo);
            heads.push(FpHeadCache { qh, kh, vh, probs });
        }
        let (att_out, o_cache) = self.o_proj.forward_fp(&ctx)?;
        let (x1, ln1_cache) = self.ln1.forward(&add_matrices(x, &att_out)?)?;
        let (h1, ffn1_cache) = self.ffn1.forward_fp(&x1)?;
        let act = relu(&h1);
        let (h2, ffn2_cache) = self.ffn2.forward_fp(&act)?;
        let (out, ln2_cache) = self.ln2.forward(&add_matrices(&x1, &h2)?)?;
        Ok((
            out,
            FpBlockCache {
                q: q_cache,
                k: k_cache,
                v: v_cache,
                heads,
                o: o_cache,
                ln1: ln1_cache,
                ffn1: ffn1_cache,
                h1,
                ffn2: ffn2_cache,
                ln2: ln2_cache,
            },
        ))
    }

    pub fn backward_fp(
        &self,
        cache: &FpBlockCache,
        upstream: &DenseMatrix,
        grads: &mut BlockGrads,
    ) -> Result<DenseMatrix> {
        let d_sum2 = self.ln2.backward(&cache.ln2, upstream, &mut grads.ln2)?;
        let d_act = self.ffn2.backward_fp(&cache.ffn2, &d_sum2, &mut grads.ffn2)?;
        let d_h1 = relu_backward(&cache.h1, &d_act);
        let d_x1_ffn = self.ffn1.backward_fp(&cache.ffn1, &d_h1, &mut grads.ffn1)?;
        let mut d_x1 = d_sum2;
        d_x1.add_in_place(&d_x1_ffn)?;
        let d_sum1 = self.ln1.backward(&cache.ln1, &d_x1, &mut grads.ln1)?;
        let d_ctx = self.o_proj.backward_fp(&cache.o, &d_sum1, &mut grads.o)?;
        let inv_sqrt_d = 1.0 / (self.attn.head_dim as f32).sqrt();
        let rows = d_ctx.rows();
        let mut d_qf = DenseMatrix::zeros(rows, self.d_model())?;
        let mut d_kf = DenseMatrix::zeros(rows, self.d_model())?;
        let mut d_vf = DenseMatrix::zeros(rows, self.d_model())?;
        for h in 0..self.attn.heads {
            let (lo, hi) = self.head_range(h);
            let d_ctx_h = d_ctx.col_slice(lo, hi);
            let hc = &cache.heads[h];
            // c = probs @ vh
            let d_probs = gemm_f32(&d_ctx_h, &hc.vh)?;
            let d_vh = gemm_f32(&hc.probs.transpose(), &d_ctx_h.transpose())?;
            let mut d_scores = softmax_backward(&hc.probs, &d_probs);
            for v in d_scores.as_mut_slice() {
                *v *= inv_sqrt_d;
            }
            // scores = qh @ kh^T / sqrt(D)
            let d_qh = gemm_f32(&d_scores, &hc.kh.transpose())?;
            let d_kh = gemm_f32(&d_scores.transpose(), &hc.qh.transpose())?;
            write_cols(&mut d_qf, &d_qh, lo);
            write_cols(&mut d_kf, &d_kh, lo);
            write_cols(&mut d_vf, &d_vh, lo);
        }
        let mut d_x = self.q_proj.backward_fp(&cache.q, &d_qf, &mut grads.q)?;
        d_x.add_in_place(&self.k_proj.backward_fp(&cache.k, &d_kf, &mut grads.k)?)?;
        d_x.add_in_place(&self.v_proj.backward_fp(&cache.v, &d_vf, &mut grads.v)?)?;
        d_x.add_in_place(&d_sum1)?;
        Ok(d_x)
    }

    pub fn zero_grads(&self) -> Result<BlockGrads> {
        Ok(BlockGrads {
            q: self.q_proj.zero_grads()?,
            k: self.k_proj.zero_grads()?,
            v: self.v_proj.zero_grads()?,
            o: self.o_proj.zero_grads()?,
            ffn1: self.ffn1.zero_grads()?,
            ffn2: self.ffn2.zero_grads()?,
            s_q: 0.0,
            s_k: 0.0,
            s_att: 0.0,
            s_v: 0.0,
            ln1: self.ln1.zero_grads(),
            ln2: self.ln2.zero_grads(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::QuantMode;
    use crate::tensor::{random_matrix, Scheme};

    fn toy_block(mode: QuantMode, seed: u64) -> TransformerBlock {
        let mut b = TransformerBlock::new("b0", 16, 2, 32, mode, seed).unwrap();
        // Push the activation scales off 1.0 so dual-path tests exercise
        // nontrivial coefficients.
        for (i, (_, st)) in b.quant_states_mut().into_iter().enumerate() {
            st.set_scale(0.4 + 0.13 * i as f32);
        }
        b
    }

    #[test]
    fn inference_and_training_paths_agree_exactly() {
        for mode in [QuantMode::Ternary, QuantMode::Levelwise(3)] {
            let b = toy_block(mode, 21);
            let x =
                random_matrix(8, 16, &Scheme::Normal { mean: 0.0, std: 1.0 }, 22).unwrap();
            let infer = b.forward(&x).unwrap();
            let (train, _) = b.forward_train(&x, None).unwrap();
            assert_eq!(infer, train, "mode {mode:?}");
        }
    }

    #[test]
    fn tap_reports_sites_in_forward_order() {
        let b = toy_block(QuantMode::Ternary, 23);
        let x = random_matrix(8, 16, &Scheme::Normal { mean: 0.0, std: 1.0 }, 24).unwrap();
        let mut tap = Tap::new();
        b.forward_train(&x, Some(&mut tap)).unwrap();
        let mut seen = Vec::new();
        for (site, _) in &tap {
            if !seen.contains(site) {
                seen.push(site.clone());
            }
        }
        assert_eq!(seen, b.site_names());
        // Two heads: the four attention sites appear twice each.
        assert_eq!(tap.len(), 6 + 2 * 4);
    }

    #[test]
    fn set_level_skips_bool_sites() {
        let mut b = toy_block(QuantMode::Levelwise(4), 25);
        b.set_level(2).unwrap();
        for (name, st) in b.quant_states() {
            if name.ends_with("s_att") || name.ends_with("ffn2_in") {
                assert_eq!(st.mode, QuantMode::Bool, "{name}");
            } else {
                assert_eq!(st.mode, QuantMode::Levelwise(2), "{name}");
            }
        }
    }

    /// Straight-line reference implementation of the FP block, written with
    /// plain loops, to pin the structured path.
    fn reference_fp_forward(b: &TransformerBlock, x: &DenseMatrix) -> DenseMatrix {
        let t = x.rows();
        let d = b.d_model();
        let hd = b.attn.head_dim;
        let lin = |w: &DenseMatrix, a: &DenseMatrix| -> DenseMatrix {
            let mut out = DenseMatrix::zeros(a.rows(), w.rows()).unwrap();
            for n in 0..a.rows() {
                for o in 0..w.rows() {
                    let mut acc = 0.0f32;
                    for i in 0..w.cols() {
                        acc += a.get(n, i) * w.get(o, i);
                    }
                    out.set(n, o, acc);
                }
            }
            out
        };
        let ln = |l: &LayerNorm, a: &DenseMatrix| -> DenseMatrix {
            let mut out = a.clone();
            for r in 0..a.rows() {
                let row = a.row(r);
                let mean = row.iter().sum::<f32>() / row.len() as f32;
                let var =
                    row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / row.len() as f32;
                let inv = 1.0 / (var + l.eps).sqrt();
                for c in 0..row.len() {
                    out.set(r, c, l.gain[c] * (row[c] - mean) * inv + l.bias[c]);
                }
            }
            out
        };
        let qf = lin(b.q_proj.latent().unwrap(), x);
        let kf = lin(b.k_proj.latent().unwrap(), x);
        let vf = lin(b.v_proj.latent().unwrap(), x);
        let mut ctx = DenseMatrix::zeros(t, d).unwrap();
        for h in 0..b.attn.heads {
            let lo = h * hd;
            for ti in 0..t {
                // scores row + softmax
                let mut row = vec![0.0f32; t];
                for u in 0..t {
                    let mut acc = 0.0f32;
                    for c in 0..hd {
                        acc += qf.get(ti, lo + c) * kf.get(u, lo + c);
                    }
                    row[u] = acc / (hd as f32).sqrt();
                }
                let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let mut sum = 0.0f32;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                for v in row.iter_mut() {
                    *v /= sum;
                }
                for c in 0..hd {
                    let mut acc = 0.0f32;
                    for (u, &p) in row.iter().enumerate() {
                        acc += p * vf.get(u, lo + c);
                    }
                    ctx.set(ti, lo + c, acc);
                }
            }
        }
        let att_out = lin(b.o_proj.latent().unwrap(), &ctx);
        let x1 = ln(&b.ln1, &add_matrices(x, &att_out).unwrap());
        let h1 = lin(b.ffn1.latent().unwrap(), &x1);
        let act = relu(&h1);
        let h2 = lin(b.ffn2.latent().unwrap(), &act);
        ln(&b.ln2, &add_matrices(&x1, &h2).unwrap())
    }

    #[test]
    fn fp_path_matches_reference_implementation() {
        let b = toy_block(QuantMode::Ternary, 26);
        let x = random_matrix(8, 16, &Scheme::Normal { mean: 0.0, std: 1.0 }, 27).unwrap();
        let (got, _) = b.forward_train_fp(&x).unwrap();
        let want = reference_fp_forward(&b, &x);
        for (g, w) in got.as_slice().iter().zip(want.as_slice()) {
            assert!((g - w).abs() < 1e-5, "{g} vs {w}");
        }
    }

    #[test]
    fn fp_backward_matches_finite_differences_on_input() {
        let b = toy_block(QuantMode::Ternary, 28);
        let x = random_matrix(4, 16, &Scheme::Normal { mean: 0.0, std: 1.0 }, 29).unwrap();
        let up = random_matrix(4, 16, &Scheme::Uniform { lo: -1.0, hi: 1.0 }, 30).unwrap();
        let (_, cache) = b.forward_train_fp(&x).unwrap();
        let mut grads = b.zero_grads().unwrap();
        let dx = b.backward_fp(&cache, &up, &mut grads).unwrap();
        let loss = |m: &DenseMatrix| -> f64 {
            let (y, _) = b.forward_train_fp(m).unwrap();
            y.as_slice()
                .iter()
                .zip(up.as_slice())
                .map(|(&a, &u)| a as f64 * u as f64)
                .sum()
        };
        for idx in [0usize, 17, 33, 63] {
            let mut hi = x.clone();
            let mut lo = x.clone();
            hi.as_mut_slice()[idx] += 5e-3;
            lo.as_mut_slice()[idx] -= 5e-3;
            let fd = (loss(&hi) - loss(&lo)) / 1e-2;
            let got = dx.as_slice()[idx] as f64;
            assert!(
                (got - fd).abs() < 2e-3 * fd.abs().max(1.0),
                "dx[{idx}] = {got} vs fd {fd}"
            );
        }
    }

    #[test]
    fn fp_weight_gradients_match_finite_differences() {
        let b = toy_block(QuantMode::Ternary, 31);
        let x = random_matrix(4, 16, &Scheme::Normal { mean: 0.0, std: 1.0 }, 32).unwrap();
        let up = random_matrix(4, 16, &Scheme::Uniform { lo: -1.0, hi: 1.0 }, 33).unwrap();
        let (_, cache) = b.forward_train_fp(&x).unwrap();
        let mut grads = b.zero_grads().unwrap();
        b.backward_fp(&cache, &up, &mut grads).unwrap();
        let loss = |blk: &TransformerBlock| -> f64 {
            let (y, _) = blk.forward_train_fp(&x).unwrap();
            y.as_slice()
                .iter()
                .zip(up.as_slice())
                .map(|(&a, &u)| a as f64 * u as f64)
                .sum()
        };
        // Check a couple of entries in the v-projection latent.
        for idx in [0usize, 40] {
            let mut hi = b.clone();
            let mut lo = b.clone();
            hi.v_proj.latent_mut().unwrap().as_mut_slice()[idx] += 5e-3;
            lo.v_proj.latent_mut().unwrap().as_mut_slice()[idx] -= 5e-3;
            let fd = (loss(&hi) - loss(&lo)) / 1e-2;
            let got = grads.v.w.as_slice()[idx] as f64;
            assert!(
                (got - fd).abs() < 2e-3 * fd.abs().max(1.0),
                "dWv[{idx}] = {got} vs fd {fd}"
            );
        }
    }
}
