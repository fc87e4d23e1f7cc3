//! Timing the packed kernels against the naive f32 GEMM. Runs the quick
//! preset by default; pass `--full` for the larger standard preset.
//!
//!     cargo run --release --example kernel_bench
//!     cargo run --release --example kernel_bench -- --full

use bwta::bench::{preset, results_markdown, run_bench};

fn main() -> bwta::Result<()> {
    let full = std::env::args().any(|a| a == "--full");
    let specs = preset(if full { "standard" } else { "quick" })?;
    println!(
        "running {} benchmark cases ({} preset); outputs are checked against the integer oracle first\n",
        specs.len(),
        if full { "standard" } else { "quick" }
    );
    let mut rows = Vec::new();
    for spec in &specs {
        let r = run_bench(spec)?;
        println!(
            "{:<16} {:>5}x{:<5}x{:<5} median {:.4}s  ({:.2} Gop/s)",
            format!("{:?}", spec.case),
            spec.m,
            spec.n,
            spec.k,
            r.median_s,
            r.gops
        );
        rows.push(r);
    }
    println!("\n{}", results_markdown(&rows));
    Ok(())
}
