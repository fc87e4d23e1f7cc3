//! Quantized attention, step by step: ternary Q/K score matrix through the
//! case-3 kernel, softmax, then bool(Att) x ternary(V) context through the
//! case-2 kernel. Compared against the full-precision attention on the
//! same inputs.
//!
//!     cargo run --release --example attention_forward

use bwta::layers::{attention_context, attention_scores, softmax_rows};
use bwta::quant::{activation_scale_init, QuantMode, QuantState};
use bwta::tensor::{gemm_f32, random_matrix, DenseMatrix, Scheme};

fn main() -> bwta::Result<()> {
    let (t, d) = (6, 16);
    let norm = Scheme::Normal { mean: 0.0, std: 1.0 };
    let q = random_matrix(t, d, &norm, 21)?;
    let k = random_matrix(t, d, &norm, 22)?;
    let v = random_matrix(t, d, &norm, 23)?;

    // Per-tensor scales from the calibration statistic. Attention
    // probabilities live in [0,1] and use the bool quantizer, whose scale
    // acts as the firing threshold (~0.5 * scale).
    let s_q = QuantState::new(QuantMode::Ternary, activation_scale_init(&q)?)?;
    let s_k = QuantState::new(QuantMode::Ternary, activation_scale_init(&k)?)?;
    let s_att = QuantState::new(QuantMode::Bool, 0.5)?;
    let s_v = QuantState::new(QuantMode::Ternary, activation_scale_init(&v)?)?;
    println!(
        "scales: q {:.3}, k {:.3}, att {:.3} (bool), v {:.3}",
        s_q.scale, s_k.scale, s_att.scale, s_v.scale
    );

    // Quantized path. Scores come out as (s_q s_k / sqrt(D)) * popcounts.
    let scores = attention_scores(&q, &k, &s_q, &s_k)?;
    let att = softmax_rows(&scores);
    let ctx = attention_context(&att, &v, &s_att, &s_v)?;

    // Full-precision reference on identical inputs.
    let mut fp_scores = gemm_f32(&q, &k)?; // k interpreted as [T x D], shared K axis
    let coeff = 1.0 / (d as f32).sqrt();
    for val in fp_scores.as_mut_slice() {
        *val *= coeff;
    }
    let fp_att = softmax_rows(&fp_scores);
    // Context multiplies [T x T] by [T x D]; gemm_f32 takes the right side
    // pre-transposed, so hand it V as [D x T].
    let fp_ctx = gemm_f32(&fp_att, &v.transpose())?;

    let row = |m: &DenseMatrix, r: usize| -> Vec<String> {
        (0..m.cols().min(6)).map(|c| format!("{:>7.3}", m.get(r, c))).collect()
    };
    println!("\nquantized scores row 0: [{}]", row(&scores, 0).join(" "));
    println!("fp        scores row 0: [{}]", row(&fp_scores, 0).join(" "));
    println!("quantized context row 0: [{}]", row(&ctx, 0).join(" "));
    println!("fp        context row 0: [{}]", row(&fp_ctx, 0).join(" "));

    let max_diff = ctx
        .as_slice()
        .iter()
        .zip(fp_ctx.as_slice())
        .map(|(&a, &b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    println!("\nmax |quantized - fp| over the context: {max_diff:.4}");
    println!("(expected to be visible but bounded — three tensors were squeezed to <= 2 bits)");
    Ok(())
}
