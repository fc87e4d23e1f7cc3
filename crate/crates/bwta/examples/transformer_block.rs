//! One post-norm BWTA transformer block: the packed inference path versus
//! the training path, the quantization sites it exposes, and a manual
//! backward pass.
//!
//!     cargo run --release --example transformer_block

use bwta::block::{Tap, TransformerBlock};
use bwta::quant::QuantMode;
use bwta::tensor::{random_matrix, DenseMatrix, Scheme};

fn main() -> bwta::Result<()> {
    let (t, d_model, heads, d_ff) = (8, 16, 2, 32);
    let mut block = TransformerBlock::new("b0", d_model, heads, d_ff, QuantMode::Ternary, 42)?;
    let x = random_matrix(t, d_model, &Scheme::Normal { mean: 0.0, std: 1.0 }, 9)?;

    // A fresh block has unit scales; calibrate each site in forward order
    // from the 2*mean|A| statistic so downstream sites see upstream scales
    // already set (this is what the model-level calibration does too).
    for site in block.site_names() {
        let mut tap = Tap::new();
        block.forward_train(&x, Some(&mut tap))?;
        let (mut sum, mut count) = (0.0f64, 0usize);
        for (name, tensor) in &tap {
            if name == &site {
                sum += tensor.as_slice().iter().map(|&v| v.abs() as f64).sum::<f64>();
                count += tensor.len();
            }
        }
        let base = 2.0 * (sum / count as f64) as f32;
        for (name, st) in block.quant_states_mut() {
            if name == site {
                st.set_scale(base / st.mode.half_range() as f32);
            }
        }
    }

    // Every learnable activation scale in the block, by site name.
    println!("quantization sites (after calibration):");
    for (name, st) in block.quant_states() {
        println!("  {name:<12} {:?} scale {:.4}", st.mode, st.scale);
    }

    // The inference path runs entirely on packed planes; the training path
    // quantizes on the fly and records caches for backward. They must agree
    // bit-for-bit because both dequantize the same integers.
    let fast = block.forward(&x)?;
    let mut tap = Tap::new();
    let (trained, cache) = block.forward_train(&x, Some(&mut tap))?;
    let same = fast
        .as_slice()
        .iter()
        .zip(trained.as_slice())
        .all(|(a, b)| a == b);
    println!("\npacked forward == training forward: {same}");
    println!("tap recorded {} quantizer inputs", tap.len());

    // Manual backprop: push a varying upstream gradient through the block
    // and look at what lands on the weights and the scales. (A constant
    // upstream would vanish — the final layer norm projects out the mean.)
    let upstream = random_matrix(
        t,
        d_model,
        &Scheme::Normal { mean: 0.0, std: 1.0 / d_model as f32 },
        13,
    )?;
    let mut grads = block.zero_grads()?;
    block.backward(&cache, &upstream, &mut grads)?;

    let norm = |m: &DenseMatrix| -> f32 {
        m.as_slice().iter().map(|v| v * v).sum::<f32>().sqrt()
    };
    println!("\nlatent weight gradient norms:");
    println!(
        "  w_q {:.5}  w_k {:.5}  w_v {:.5}  w_o {:.5}  ffn1 {:.5}  ffn2 {:.5}",
        norm(&grads.q.w),
        norm(&grads.k.w),
        norm(&grads.v.w),
        norm(&grads.o.w),
        norm(&grads.ffn1.w),
        norm(&grads.ffn2.w)
    );
    println!("scale gradients:");
    println!("  linears     q {:+.6}  k {:+.6}  v {:+.6}  o {:+.6}", grads.q.s, grads.k.s, grads.v.s, grads.o.s);
    println!("  attention   s_q {:+.6}  s_k {:+.6}  s_att {:+.6}  s_v {:+.6}", grads.s_q, grads.s_k, grads.s_att, grads.s_v);

    // Dropping the grid from ternary to a 4-level grid is one call; the
    // packed weights refresh automatically.
    block.set_level(4)?;
    let (name, st) = &block.quant_states()[0];
    println!("\nafter set_level(4): {name} -> {:?}", st.mode);
    Ok(())
}
