//! Binary-weight, ternary-activation (BWTA) transformer building blocks.
//!
//! The crate covers the full path from full-precision tensors down to
//! bit-packed integer kernels and back up to a trainable toy transformer:
//!
//! * [`tensor`] — dense float/int matrices plus the naive reference GEMMs
//!   every fast path is checked against.
//! * [`quant`] — sign / bool / ternary / levelwise quantizers with learnable
//!   scales and straight-through gradients.
//! * [`bitpack`] — 64-bit word planes for binary and ternary matrices.
//! * [`io`] — the `.bwta` on-disk format for packed tensors.
//! * [`kernels`] — popcount GEMM kernels for the three bit-width pairings
//!   (binary x ternary, bool x ternary, ternary x ternary).
//! * [`layers`], [`block`], [`model`] — BWTA linear/attention ops, a
//!   post-norm transformer block with manual backprop, and a toy classifier.
//! * [`schedule`], [`train`] — the smooth multi-stage quantization schedule,
//!   scale re-projection at stage transitions, and a deterministic trainer.
//! * [`bench`], [`verify`], [`cli`] — the `bwta` command line: kernel
//!   benchmarks, oracle fuzzing, pack/inspect, and the training demo.
//!
//! Runnable walkthroughs live in `examples/` (one per capability):
//!
//! ```text
//! cargo run --release --example quantize_basics
//! cargo run --release --example bitpack_roundtrip
//! cargo run --release --example popcount_gemm
//! cargo run --release --example attention_forward
//! cargo run --release --example transformer_block
//! cargo run --release --example smooth_training
//! cargo run --release --example kernel_bench
//! ```

pub mod bench;
pub mod bitpack;
pub mod block;
pub mod cli;
pub mod error;
pub mod io;
pub mod kernels;
pub mod layers;
pub mod model;
pub mod quant;
pub mod schedule;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{DenseMatrix, IntMatrix};
