//! The three popcount GEMM kernels checked against the exact integer
//! oracle, plus the word-operation budget behind each one.
//!
//!     cargo run --release --example popcount_gemm

use bwta::bitpack::{pack_bool_ints, pack_sign, pack_ternary_ints};
use bwta::kernels::{
    gemm_case1, gemm_case1_naive_and, gemm_case2, gemm_case3, KernelCase, KernelConfig,
};
use bwta::tensor::{gemm_int_oracle, random_int_matrix};

fn main() -> bwta::Result<()> {
    let cfg = KernelConfig::default();
    let (m, n, k) = (8, 5, 100);

    // Case 1: sign weights x ternary activations. Both operands share the
    // K axis; the right-hand matrix is stored pre-transposed as [N x K].
    let w = random_int_matrix(m, k, &[-1, 1], 1)?;
    let a = random_int_matrix(n, k, &[-1, 0, 0, 1], 2)?;
    let oracle = gemm_int_oracle(&w, &a)?;
    let fast = gemm_case1(&pack_sign(&w)?, &pack_ternary_ints(&a)?, &cfg)?;
    let naive = gemm_case1_naive_and(&pack_sign(&w)?, &pack_ternary_ints(&a)?, &cfg)?;
    println!("case1  sign x ternary  [{m}x{k}]x[{n}x{k}]ᵀ: xor form == oracle: {}", fast == oracle);
    println!("       five-op AND form == oracle: {}", naive == oracle);
    println!("       sample row 0: {:?}", (0..n).map(|c| fast.get(0, c)).collect::<Vec<_>>());

    // Case 2: bool weights x ternary activations (two popcounts per word).
    let b = random_int_matrix(m, k, &[0, 1], 3)?;
    let fast2 = gemm_case2(&pack_bool_ints(&b)?, &pack_ternary_ints(&a)?, &cfg)?;
    println!("case2  bool x ternary: == oracle: {}", fast2 == gemm_int_oracle(&b, &a)?);

    // Case 3: ternary x ternary (four plane intersections).
    let q = random_int_matrix(m, k, &[-1, 0, 1], 4)?;
    let fast3 = gemm_case3(&pack_ternary_ints(&q)?, &pack_ternary_ints(&a)?, &cfg)?;
    println!("case3  ternary x ternary: == oracle: {}", fast3 == gemm_int_oracle(&q, &a)?);

    // Per-word budget of each kernel form.
    println!("\nword ops / popcounts per 64-lane word:");
    for case in [
        KernelCase::Case1,
        KernelCase::Case1NaiveAnd,
        KernelCase::Case2,
        KernelCase::Case3,
    ] {
        println!(
            "  {:<14} {} ops, {} popcounts",
            format!("{case:?}"),
            case.word_ops(),
            case.popcounts()
        );
    }

    // The xor form of case 1 wins because padding and zero-activation lanes
    // cancel between the two popcounts — no tail masking, no zero plane.
    Ok(())
}
