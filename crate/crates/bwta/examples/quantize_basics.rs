//! Walkthrough of the quantizers: sign weights with mean removal, scaled
//! ternary/levelwise activations, and the straight-through gradient.
//!
//!     cargo run --release --example quantize_basics

use bwta::quant::{
    activation_scale_init, dequantize, quantize, ste_backward, weight_sign_quantize, QuantMode,
    QuantState,
};
use bwta::tensor::{random_matrix, DenseMatrix, Scheme};

fn main() -> bwta::Result<()> {
    // --- Weights: mean-removed sign quantization -------------------------
    // Weights become {-1,+1} after subtracting the matrix mean; the scale
    // s_W = ||W||_F / n makes s_W * sign(W - mu) the norm-matched surrogate.
    let w = random_matrix(4, 6, &Scheme::Normal { mean: 0.3, std: 0.8 }, 7)?;
    let (signs, s_w, mu) = weight_sign_quantize(&w)?;
    println!("weight matrix 4x6, mean {mu:.4}, scale s_W {s_w:.4}");
    for r in 0..signs.rows() {
        let row: Vec<String> = (0..signs.cols())
            .map(|c| format!("{:>2}", signs.get(r, c)))
            .collect();
        println!("  signs row {r}: [{}]", row.join(" "));
    }

    // --- Activations: scaled integer grids --------------------------------
    // The calibration statistic 2*mean|A| sizes the dequantized range; the
    // clip bounds come from the mode (ternary = one step each side, a
    // levelwise grid gets L steps).
    let a = random_matrix(64, 64, &Scheme::Normal { mean: 0.0, std: 1.0 }, 11)?;
    let s0 = activation_scale_init(&a)?;
    println!("\nactivation scale init 2*mean|A| = {s0:.4}");

    for mode in [QuantMode::Ternary, QuantMode::Levelwise(4), QuantMode::Bool] {
        let half = mode.half_range();
        let state = QuantState::new(mode, s0 / half as f32)?;
        let q = quantize(&a, &state)?;
        let back = dequantize(&q, &state)?;
        let n = a.len() as f64;
        let mse: f64 = a
            .as_slice()
            .iter()
            .zip(back.as_slice())
            .map(|(&x, &y)| ((x - y) as f64).powi(2))
            .sum::<f64>()
            / n;
        let zeros = q.as_slice().iter().filter(|&&v| v == 0).count() as f64 / n;
        let lo = q.as_slice().iter().copied().min().unwrap();
        let hi = q.as_slice().iter().copied().max().unwrap();
        println!(
            "  {:?}: ints in [{lo},{hi}], zero fraction {zeros:.3}, dequant MSE {mse:.5}",
            state.mode
        );
    }

    // --- Straight-through gradients ---------------------------------------
    // Inside the clip range the gradient passes through untouched; clipped
    // entries are zeroed and routed into the scale gradient instead.
    let state = QuantState::new(QuantMode::Ternary, 1.0)?;
    let x = DenseMatrix::new(1, 5, vec![-3.0, -0.4, 0.1, 0.8, 2.5])?;
    let upstream = DenseMatrix::new(1, 5, vec![1.0; 5])?;
    let (gx, gs) = ste_backward(&x, &state, &upstream)?;
    println!("\nSTE on x = {:?} (ternary, scale 1):", x.as_slice());
    println!("  grad wrt x     = {:?}  (clipped lanes blocked)", gx.as_slice());
    println!("  grad wrt scale = {gs:.4}");
    Ok(())
}
