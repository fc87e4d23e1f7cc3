//! Verification harness: randomized equivalence fuzzing of the popcount
//! kernels against the exact integer oracle, pack/unpack roundtrips, and
//! per-layer scale-gradient checks against central finite differences.
//!
//! Everything here reports counterexamples with enough coordinates to
//! reproduce and localize a failure (kernel case, shape, output cell,
//! expected/got), which also makes the helpers usable for mutation-style
//! tests: corrupt one integer, re-pack, and the mismatch report points at
//! the damaged row.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bitpack::{pack_bool_ints, pack_sign, pack_ternary_ints};
use crate::block::Tap;
use crate::error::{Error, Result};
use crate::kernels::{gemm_case1, gemm_case1_naive_and, gemm_case2, gemm_case3, KernelConfig};
use crate::layers::{
    attention_context_backward, attention_context_train, attention_scores_backward,
    attention_scores_train, BwtaLinear,
};
use crate::model::{ModelConfig, ToyModel};
use crate::quant::{quantize, QuantMode, QuantState};
use crate::tensor::{gemm_int_oracle, random_int_matrix, random_matrix, DenseMatrix, Scheme};
use crate::train::make_dataset;

// ---------------------------------------------------------------------------
// Kernel fuzzing
// ---------------------------------------------------------------------------

/// One localized disagreement between a kernel and the oracle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Counterexample {
    pub case: &'static str,
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub row: usize,
    pub col: usize,
    pub expected: i32,
    pub got: i32,
}

impl std::fmt::Display for Counterexample {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: shape {}x{}x{}, out[{}][{}] expected {} got {}",
            self.case, self.m, self.n, self.k, self.row, self.col, self.expected, self.got
        )
    }
}

#[derive(Debug, Clone)]
pub struct VerifyReport {
    pub trials: usize,
    pub failures: Vec<Counterexample>,
    /// True when zero trials ran — a pass that verified nothing.
    pub vacuous: bool,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn summary(&self, what: &str) -> String {
        if self.vacuous {
            format!("{what}: PASS (vacuous - zero trials ran, nothing was verified)")
        } else if self.passed() {
            format!("{what}: PASS ({} trials)", self.trials)
        } else {
            format!(
                "{what}: FAIL ({} of {} trials; first: {})",
                self.failures.len(),
                self.trials,
                self.failures[0]
            )
        }
    }
}

/// First cell where two integer matrices disagree.
pub fn first_mismatch(expected: &crate::tensor::IntMatrix, got: &crate::tensor::IntMatrix) -> Option<(usize, usize, i32, i32)> {
    if expected.rows() != got.rows() || expected.cols() != got.cols() {
        return Some((0, 0, 0, 0));
    }
    for r in 0..expected.rows() {
        for c in 0..expected.cols() {
            if expected.get(r, c) != got.get(r, c) {
                return Some((r, c, expected.get(r, c), got.get(r, c)));
            }
        }
    }
    None
}

/// Fuzz all four kernel forms against the exact integer oracle on random
/// shapes `m, n <= max_dim`, `k <= max_k`. Collects up to eight
/// counterexamples before stopping.
pub fn fuzz_oracle_equivalence(
    trials: usize,
    seed: u64,
    max_dim: usize,
    max_k: usize,
) -> Result<VerifyReport> {
    if max_dim == 0 || max_k == 0 {
        return Err(Error::ZeroDim { op: "fuzz_oracle_equivalence" });
    }
    let mut report = VerifyReport {
        trials,
        failures: Vec::new(),
        vacuous: trials == 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = KernelConfig::default();
    for trial in 0..trials {
        let m = rng.gen_range(1..=max_dim);
        let n = rng.gen_range(1..=max_dim);
        let k = rng.gen_range(1..=max_k);
        let s1: u64 = rng.gen();
        let s2: u64 = rng.gen();
        let (case, expected, got) = match trial % 4 {
            0 | 1 => {
                let w = random_int_matrix(m, k, &[-1, 1], s1)?;
                let a = random_int_matrix(n, k, &[-1, 0, 0, 1], s2)?;
                let oracle = gemm_int_oracle(&w, &a)?;
                let wp = pack_sign(&w)?;
                let ap = pack_ternary_ints(&a)?;
                if trial % 4 == 0 {
                    ("case1", oracle, gemm_case1(&wp, &ap, &cfg)?)
                } else {
                    ("case1_naive_and", oracle, gemm_case1_naive_and(&wp, &ap, &cfg)?)
                }
            }
            2 => {
                let b = random_int_matrix(m, k, &[0, 1], s1)?;
                let v = random_int_matrix(n, k, &[-1, 0, 1], s2)?;
                let oracle = gemm_int_oracle(&b, &v)?;
                ("case2", oracle, gemm_case2(&pack_bool_ints(&b)?, &pack_ternary_ints(&v)?, &cfg)?)
            }
            _ => {
                let q = random_int_matrix(m, k, &[-1, 0, 1], s1)?;
                let kk = random_int_matrix(n, k, &[-1, 0, 1], s2)?;
                let oracle = gemm_int_oracle(&q, &kk)?;
                ("case3", oracle, gemm_case3(&pack_ternary_ints(&q)?, &pack_ternary_ints(&kk)?, &cfg)?)
            }
        };
        if let Some((row, col, want, have)) = first_mismatch(&expected, &got) {
            report.failures.push(Counterexample {
                case,
                m,
                n,
                k,
                row,
                col,
                expected: want,
                got: have,
            });
            if report.failures.len() >= 8 {
                break;
            }
        }
    }
    Ok(report)
}

/// Fuzz pack -> unpack roundtrips for sign, bool and ternary packings over
/// random shapes with `cols <= max_cols` (crossing several word boundaries).
pub fn fuzz_pack_roundtrip(trials: usize, seed: u64, max_cols: usize) -> Result<VerifyReport> {
    if max_cols == 0 {
        return Err(Error::ZeroDim { op: "fuzz_pack_roundtrip" });
    }
    let mut report = VerifyReport {
        trials,
        failures: Vec::new(),
        vacuous: trials == 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for trial in 0..trials {
        let rows = rng.gen_range(1..=6);
        let cols = rng.gen_range(1..=max_cols);
        let s: u64 = rng.gen();
        let (case, original, restored) = match trial % 3 {
            0 => {
                let q = random_int_matrix(rows, cols, &[-1, 1], s)?;
                let r = pack_sign(&q)?.unpack();
                ("roundtrip_sign", q, r)
            }
            1 => {
                let q = random_int_matrix(rows, cols, &[0, 1], s)?;
                let r = pack_bool_ints(&q)?.unpack();
                ("roundtrip_bool", q, r)
            }
            _ => {
                let q = random_int_matrix(rows, cols, &[-1, 0, 1], s)?;
                let r = pack_ternary_ints(&q)?.unpack()?;
                ("roundtrip_ternary", q, r)
            }
        };
        if let Some((row, col, want, have)) = first_mismatch(&original, &restored) {
            report.failures.push(Counterexample {
                case,
                m: rows,
                n: cols,
                k: 0,
                row,
                col,
                expected: want,
                got: have,
            });
            if report.failures.len() >= 8 {
                break;
            }
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Gradient checks
// ---------------------------------------------------------------------------

/// Result of one scale-gradient check.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub site: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// The LSQ gradient multiplier, mirrored from the quantizer so the finite
/// difference of the unnormalized surrogate can be compared against the
/// implementation's normalized gradient.
fn grad_norm(state: &QuantState, n: usize) -> f64 {
    let hi = state.mode.range().map(|(_, hi)| hi).unwrap_or(1.0) as f64;
    if state.lsq_norm {
        state.grad_scale as f64 / ((n as f64) * hi).sqrt()
    } else {
        state.grad_scale as f64
    }
}

/// Push every element away from quantizer decision boundaries (half-integer
/// rounding lines and the clip edges) so the finite-difference window never
/// crosses one. The shift is far smaller than a quantizer step.
fn nudge_from_boundaries(a: &DenseMatrix, state: &QuantState, margin: f32) -> DenseMatrix {
    let (lo, hi) = state.mode.range().expect("rounding mode");
    let s = state.scale;
    let mut out = a.clone();
    for v in out.as_mut_slice() {
        let x = *v / s;
        let frac = x - x.floor();
        let near_half = (frac - 0.5).abs() < margin;
        let near_edge = (x - lo).abs() < margin || (x - hi).abs() < margin;
        if near_half || near_edge {
            *v += 2.0 * margin * s;
        }
    }
    out
}

/// Rounding residuals `round(clip(v)) - clip(v)` at the base scale, frozen
/// so the surrogate is differentiable in the scale.
fn residuals(a: &DenseMatrix, state: &QuantState) -> Vec<f64> {
    let (lo, hi) = state.mode.range().expect("rounding mode");
    let (lo, hi) = (lo as f64, hi as f64);
    let s = state.scale as f64;
    a.as_slice()
        .iter()
        .map(|&v| {
            let clipped = (v as f64 / s).max(lo).min(hi);
            clipped.round() - clipped
        })
        .collect()
}

/// Frozen-residual surrogate `F(s') = sum_i g_i * s' * (clip(a_i / s') + c_i)`:
/// the dequantized tensor contracted with the loss sensitivity `g`.
fn surrogate(a: &DenseMatrix, g: &[f64], c: &[f64], state: &QuantState, s: f64) -> f64 {
    let (lo, hi) = state.mode.range().expect("rounding mode");
    let (lo, hi) = (lo as f64, hi as f64);
    let mut f = 0.0;
    for (i, &av) in a.as_slice().iter().enumerate() {
        let clipped = (av as f64 / s).max(lo).min(hi);
        f += g[i] * s * (clipped + c[i]);
    }
    f
}

/// Central finite difference of the surrogate in the scale.
fn fd_scale(a: &DenseMatrix, g: &[f64], c: &[f64], state: &QuantState) -> f64 {
    let s = state.scale as f64;
    let delta = 1e-4 * s;
    (surrogate(a, g, c, state, s + delta) - surrogate(a, g, c, state, s - delta)) / (2.0 * delta)
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(analytic.abs()).max(1e-9)
}

/// Dequantized tensor as f64 (`s * q`), flattened row-major.
fn dequant_f64(a: &DenseMatrix, state: &QuantState) -> Result<Vec<f64>> {
    let q = quantize(a, state)?;
    let s = state.scale as f64;
    Ok(q.as_slice().iter().map(|&v| v as f64 * s).collect())
}

const NUDGE_MARGIN: f32 = 5e-3;

/// Check one BWTA linear: analytic scale gradient from the layer backward
/// vs the normalized finite difference of the frozen-residual surrogate.
fn check_linear(lin: &BwtaLinear, input: &DenseMatrix, site: &str, seed: u64) -> Result<GradCheck> {
    let a = nudge_from_boundaries(input, &lin.act, NUDGE_MARGIN);
    let up = random_matrix(
        a.rows(),
        lin.out_features(),
        &Scheme::Uniform { lo: -1.0, hi: 1.0 },
        seed,
    )?;
    let (_, cache) = lin.forward_train(&a)?;
    let mut grads = lin.zero_grads()?;
    lin.backward(&cache, &up, &mut grads)?;
    let analytic = grads.s as f64;

    // Loss sensitivity to the dequantized activation:
    // G[n][i] = sum_o up[n][o] * s_w * sign[o][i].
    let s_w = lin.weight_scale() as f64;
    let signs = lin.sign_ints();
    let mut g = vec![0.0f64; a.len()];
    for nrow in 0..a.rows() {
        for o in 0..lin.out_features() {
            let u = up.get(nrow, o) as f64 * s_w;
            for i in 0..a.cols() {
                g[nrow * a.cols() + i] += u * signs.get(o, i) as f64;
            }
        }
    }
    let c = residuals(&a, &lin.act);
    let numeric = fd_scale(&a, &g, &c, &lin.act) * grad_norm(&lin.act, a.len());
    Ok(GradCheck {
        site: site.to_string(),
        analytic,
        numeric,
        rel_err: rel_err(analytic, numeric),
    })
}

/// Check the two scale gradients of the attention-scores matmul.
fn check_scores(
    q_in: &DenseMatrix,
    k_in: &DenseMatrix,
    s_q: &QuantState,
    s_k: &QuantState,
    prefix: &str,
    seed: u64,
) -> Result<Vec<GradCheck>> {
    let q = nudge_from_boundaries(q_in, s_q, NUDGE_MARGIN);
    let k = nudge_from_boundaries(k_in, s_k, NUDGE_MARGIN);
    let t = q.rows();
    let d = q.cols();
    let up = random_matrix(t, k.rows(), &Scheme::Uniform { lo: -1.0, hi: 1.0 }, seed)?;
    let (_, cache) = attention_scores_train(&q, &k, s_q, s_k)?;
    let mut a_q = 0.0f32;
    let mut a_k = 0.0f32;
    attention_scores_backward(&cache, s_q, s_k, &up, &mut a_q, &mut a_k)?;
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();

    // G_q[t][d] = sum_u up[t][u] * K~[u][d] / sqrt(D), K~ frozen at base.
    let k_deq = dequant_f64(&k, s_k)?;
    let mut g_q = vec![0.0f64; q.len()];
    for ti in 0..t {
        for u in 0..k.rows() {
            let w = up.get(ti, u) as f64 * inv_sqrt_d;
            for di in 0..d {
                g_q[ti * d + di] += w * k_deq[u * d + di];
            }
        }
    }
    let c_q = residuals(&q, s_q);
    let n_q = fd_scale(&q, &g_q, &c_q, s_q) * grad_norm(s_q, q.len());

    // G_k[u][d] = sum_t up[t][u] * Q~[t][d] / sqrt(D), Q~ frozen at base.
    let q_deq = dequant_f64(&q, s_q)?;
    let mut g_k = vec![0.0f64; k.len()];
    for u in 0..k.rows() {
        for ti in 0..t {
            let w = up.get(ti, u) as f64 * inv_sqrt_d;
            for di in 0..d {
                g_k[u * d + di] += w * q_deq[ti * d + di];
            }
        }
    }
    let c_k = residuals(&k, s_k);
    let n_k = fd_scale(&k, &g_k, &c_k, s_k) * grad_norm(s_k, k.len());

    Ok(vec![
        GradCheck {
            site: format!("{prefix}.s_q"),
            analytic: a_q as f64,
            numeric: n_q,
            rel_err: rel_err(a_q as f64, n_q),
        },
        GradCheck {
            site: format!("{prefix}.s_k"),
            analytic: a_k as f64,
            numeric: n_k,
            rel_err: rel_err(a_k as f64, n_k),
        },
    ])
}

/// Check the two scale gradients of the attention-context matmul.
fn check_context(
    att_in: &DenseMatrix,
    v_in: &DenseMatrix,
    s_att: &QuantState,
    s_v: &QuantState,
    prefix: &str,
    seed: u64,
) -> Result<Vec<GradCheck>> {
    let att = nudge_from_boundaries(att_in, s_att, NUDGE_MARGIN);
    let v = nudge_from_boundaries(v_in, s_v, NUDGE_MARGIN);
    let t = att.rows();
    let d = v.cols();
    let up = random_matrix(t, d, &Scheme::Uniform { lo: -1.0, hi: 1.0 }, seed)?;
    let (_, cache) = attention_context_train(&att, &v, s_att, s_v)?;
    let mut a_att = 0.0f32;
    let mut a_v = 0.0f32;
    attention_context_backward(&cache, s_att, s_v, &up, &mut a_att, &mut a_v)?;

    // G_att[t][u] = sum_d up[t][d] * V~[u][d].
    let v_deq = dequant_f64(&v, s_v)?;
    let mut g_att = vec![0.0f64; att.len()];
    for ti in 0..t {
        for u in 0..v.rows() {
            let mut acc = 0.0f64;
            for di in 0..d {
                acc += up.get(ti, di) as f64 * v_deq[u * d + di];
            }
            g_att[ti * att.cols() + u] += acc;
        }
    }
    let c_att = residuals(&att, s_att);
    let n_att = fd_scale(&att, &g_att, &c_att, s_att) * grad_norm(s_att, att.len());

    // G_v[u][d] = sum_t Att~[t][u] * up[t][d].
    let att_deq = dequant_f64(&att, s_att)?;
    let mut g_v = vec![0.0f64; v.len()];
    for u in 0..v.rows() {
        for ti in 0..t {
            let w = att_deq[ti * att.cols() + u];
            for di in 0..d {
                g_v[u * d + di] += w * up.get(ti, di) as f64;
            }
        }
    }
    let c_v = residuals(&v, s_v);
    let n_v = fd_scale(&v, &g_v, &c_v, s_v) * grad_norm(s_v, v.len());

    Ok(vec![
        GradCheck {
            site: format!("{prefix}.s_att"),
            analytic: a_att as f64,
            numeric: n_att,
            rel_err: rel_err(a_att as f64, n_att),
        },
        GradCheck {
            site: format!("{prefix}.s_v"),
            analytic: a_v as f64,
            numeric: n_v,
            rel_err: rel_err(a_v as f64, n_v),
        },
    ])
}

/// Scale-gradient checks for every quantized layer of a freshly calibrated
/// toy block, at the given activation mode. Inputs are captured from a live
/// forward pass, then nudged off decision boundaries.
pub fn gradient_checks_at(seed: u64, mode: QuantMode, label: &str) -> Result<Vec<GradCheck>> {
    let mut model = ToyModel::new(ModelConfig::default(), mode, seed)?;
    let data = make_dataset(8, 16, 8, 1.0, seed, seed.wrapping_add(1))?;
    model.calibrate(&data.seqs)?;
    let mut tap = Tap::new();
    model.forward_train(&data.seqs[0], Some(&mut tap))?;
    let mut first: HashMap<String, DenseMatrix> = HashMap::new();
    for (name, tensor) in tap {
        first.entry(name).or_insert(tensor);
    }
    let block = &model.blocks[0];
    let at = |site: &str| -> Result<&DenseMatrix> {
        first.get(&format!("b0.{site}")).ok_or(Error::Invalid {
            op: "gradient_checks_at",
            detail: format!("site b0.{site} not captured"),
        })
    };
    let mut rows = Vec::new();
    let linears = [
        ("q_in", &block.q_proj),
        ("k_in", &block.k_proj),
        ("v_in", &block.v_proj),
        ("o_in", &block.o_proj),
        ("ffn1_in", &block.ffn1),
        ("ffn2_in", &block.ffn2),
    ];
    for (i, (site, lin)) in linears.into_iter().enumerate() {
        let mut check = check_linear(lin, at(site)?, site, seed.wrapping_add(300 + i as u64))?;
        check.site = format!("{label}:b0.{site}");
        rows.push(check);
    }
    for mut check in check_scores(
        at("s_q")?,
        at("s_k")?,
        &block.attn.s_q,
        &block.attn.s_k,
        "b0",
        seed.wrapping_add(310),
    )? {
        check.site = format!("{label}:{}", check.site);
        rows.push(check);
    }
    for mut check in check_context(
        at("s_att")?,
        at("s_v")?,
        &block.attn.s_att,
        &block.attn.s_v,
        "b0",
        seed.wrapping_add(311),
    )? {
        check.site = format!("{label}:{}", check.site);
        rows.push(check);
    }
    Ok(rows)
}

/// Run the gradient checks at both ends of the staging ladder: pure ternary
/// and a levelwise grid.
pub fn gradient_checks(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rows = gradient_checks_at(seed, QuantMode::Ternary, "ternary")?;
    rows.extend(gradient_checks_at(seed, QuantMode::Levelwise(2), "levelwise2")?);
    Ok(rows)
}
