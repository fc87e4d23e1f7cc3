//! Command-line front end: `verify`, `bench`, `pack`, `inspect`, and
//! `train-demo`.
//!
//! All real work lives in the library modules; this file only parses
//! arguments, reads/writes files, and formats output.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::bench::{preset, results_csv, results_markdown, run_bench, BenchCase, BenchResult, BenchSpec};
use crate::bitpack::{pack_bool_ints, pack_sign, pack_ternary_ints};
use crate::error::{Error, Result};
use crate::io::{parse_matrix_text, read_bwta, write_bwta, PackedPayload};
use crate::model::save_checkpoint;
use crate::quant::{activation_scale_init, quantize, weight_sign_quantize, QuantMode, QuantState};
use crate::train::{convergence_report, train, TrainConfig};
use crate::verify::{fuzz_oracle_equivalence, fuzz_pack_roundtrip, gradient_checks};

#[derive(Parser, Debug)]
#[command(
    name = "bwta",
    version,
    about = "Binary-weight ternary-activation transformer toolkit: packed popcount kernels, staged quantization training, and verification against exact integer oracles."
)]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fuzz the packed kernels and pack/unpack roundtrips against exact
    /// integer oracles, then gradient-check every quantized layer.
    Verify(VerifyArgs),
    /// Time kernels and packing routines; optionally check against the
    /// oracle first.
    Bench(BenchArgs),
    /// Quantize a float matrix from a text file and write a packed `.bwta`.
    Pack(PackArgs),
    /// Print the header and decoded integer grid of a `.bwta` file.
    Inspect(InspectArgs),
    /// Train the staged-quantization demo classifier from a config file.
    TrainDemo(TrainDemoArgs),
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    /// Randomized trials per fuzz family.
    #[arg(long, default_value_t = 200)]
    pub trials: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Largest row count per operand in the kernel fuzz.
    #[arg(long, default_value_t = 16)]
    pub max_dim: usize,
    /// Largest reduction depth in the kernel fuzz.
    #[arg(long, default_value_t = 257)]
    pub max_k: usize,
    /// Skip the (slower) per-layer gradient checks.
    #[arg(long)]
    pub skip_grads: bool,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// One of: fp32, case1, case1-naive-and, case2, case3, pack-binary,
    /// pack-ternary. Ignored when --preset is given.
    #[arg(long, conflicts_with = "preset")]
    pub case: Option<String>,
    /// Named shape suite: standard or quick.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long, default_value_t = 512)]
    pub m: usize,
    #[arg(long, default_value_t = 512)]
    pub n: usize,
    #[arg(long, default_value_t = 512)]
    pub k: usize,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long, default_value_t = 1)]
    pub warmup: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Output format: md or csv.
    #[arg(long, default_value = "md")]
    pub format: String,
    /// Skip the pre-timing oracle check (results are then marked unchecked).
    #[arg(long)]
    pub allow_unchecked: bool,
    /// Split kernel rows across threads.
    #[arg(long)]
    pub parallel: bool,
    /// Write the table to a file instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PackArgs {
    /// Text file with one matrix row per line (whitespace- or
    /// comma-separated floats; `#` comments allowed).
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Quantizer: sign, ternary, or bool.
    #[arg(long, default_value = "sign")]
    pub mode: String,
    /// Quantization scale for ternary/bool (default: 2 * mean(|A|)).
    #[arg(long)]
    pub scale: Option<f32>,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    pub file: PathBuf,
    /// Print at most this many rows of the integer grid.
    #[arg(long, default_value_t = 8)]
    pub max_rows: usize,
    /// Print at most this many columns of the integer grid.
    #[arg(long, default_value_t = 16)]
    pub max_cols: usize,
}

#[derive(Args, Debug)]
pub struct TrainDemoArgs {
    /// Line-oriented `key=value` config file.
    #[arg(long)]
    pub config: PathBuf,
    /// Write the per-epoch metrics table (CSV) here.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Save the final packed checkpoint into this directory.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Only print the final summary line.
    #[arg(long)]
    pub quiet: bool,
}

/// Parse argv, run, map errors to a nonzero exit code.
pub fn main_entry() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Command::Verify(args) => cmd_verify(args),
        Command::Bench(args) => cmd_bench(args),
        Command::Pack(args) => cmd_pack(args),
        Command::Inspect(args) => cmd_inspect(args),
        Command::TrainDemo(args) => cmd_train_demo(args),
    }
}

fn cmd_verify(args: VerifyArgs) -> Result<()> {
    let kernels = fuzz_oracle_equivalence(args.trials, args.seed, args.max_dim, args.max_k)?;
    println!("{}", kernels.summary("kernel-vs-oracle"));
    let packs = fuzz_pack_roundtrip(args.trials, args.seed.wrapping_add(1), 257)?;
    println!("{}", packs.summary("pack-roundtrip"));
    let mut all_ok = kernels.passed() && packs.passed();
    for cx in kernels.failures.iter().chain(packs.failures.iter()) {
        println!("  counterexample: {cx}");
    }
    if !args.skip_grads {
        let rows = gradient_checks(args.seed)?;
        let worst = rows
            .iter()
            .map(|r| r.rel_err)
            .fold(0.0f64, f64::max);
        let grads_ok = rows.iter().all(|r| r.rel_err < 1e-2);
        println!(
            "gradient-checks: {} ({} sites, worst rel err {:.2e})",
            if grads_ok { "PASS" } else { "FAIL" },
            rows.len(),
            worst
        );
        for r in &rows {
            if r.rel_err >= 1e-2 {
                println!(
                    "  {}: analytic {:.6e} vs numeric {:.6e} (rel {:.3e})",
                    r.site, r.analytic, r.numeric, r.rel_err
                );
            }
        }
        all_ok = all_ok && grads_ok;
    }
    if all_ok {
        println!("verify: all checks passed");
        Ok(())
    } else {
        Err(Error::Invalid {
            op: "verify",
            detail: "one or more checks failed".to_string(),
        })
    }
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    let mut specs: Vec<BenchSpec> = if let Some(name) = &args.preset {
        preset(name)?
    } else {
        let case = args.case.as_deref().ok_or(Error::Invalid {
            op: "bench",
            detail: "pass --case or --preset".to_string(),
        })?;
        vec![BenchSpec::new(BenchCase::parse(case)?, args.m, args.n, args.k)]
    };
    let mut results: Vec<BenchResult> = Vec::new();
    for spec in &mut specs {
        spec.repeats = args.repeats;
        spec.warmup = args.warmup;
        spec.seed = args.seed;
        spec.check = !args.allow_unchecked;
        spec.parallel = args.parallel;
        eprintln!(
            "bench {} {}x{}x{} ({} repeats{}) ...",
            spec.case.name(),
            spec.m,
            spec.n,
            spec.k,
            spec.repeats,
            if spec.check { ", checked" } else { ", UNCHECKED" }
        );
        results.push(run_bench(spec)?);
    }
    let table = match args.format.as_str() {
        "csv" => results_csv(&results),
        "md" => results_markdown(&results),
        other => {
            return Err(Error::Invalid {
                op: "bench",
                detail: format!("unknown format `{other}` (expected md or csv)"),
            })
        }
    };
    match &args.out {
        Some(path) => {
            std::fs::write(path, table).map_err(|e| Error::io(path.display().to_string(), e))?;
            println!("wrote {}", path.display());
        }
        None => print!("{table}"),
    }
    Ok(())
}

fn cmd_pack(args: PackArgs) -> Result<()> {
    let src = std::fs::read_to_string(&args.input)
        .map_err(|e| Error::io(args.input.display().to_string(), e))?;
    let m = parse_matrix_text(&src)?;
    let (payload, scale, summary) = match args.mode.as_str() {
        "sign" => {
            let (signs, s_w, mu) = weight_sign_quantize(&m)?;
            let packed = pack_sign(&signs)?;
            (
                PackedPayload::Binary(packed),
                s_w,
                format!("sign quantized (mean {mu:.6} removed before thresholding)"),
            )
        }
        "ternary" | "bool" => {
            let mode = if args.mode == "ternary" {
                QuantMode::Ternary
            } else {
                QuantMode::Bool
            };
            let scale = match args.scale {
                Some(s) => s,
                None => activation_scale_init(&m)?,
            };
            let state = QuantState::new(mode, scale)?;
            let q = quantize(&m, &state)?;
            let payload = if args.mode == "ternary" {
                PackedPayload::Ternary(pack_ternary_ints(&q)?)
            } else {
                PackedPayload::Binary(pack_bool_ints(&q)?)
            };
            (payload, state.scale, format!("{} quantized", args.mode))
        }
        other => {
            return Err(Error::Invalid {
                op: "pack",
                detail: format!("unknown mode `{other}` (expected sign, ternary, or bool)"),
            })
        }
    };
    write_bwta(&args.output, &payload, scale)?;
    println!(
        "{}: {}x{} {}, scale {}, -> {}",
        summary,
        payload.rows(),
        payload.cols(),
        payload.kind_name(),
        scale,
        args.output.display()
    );
    Ok(())
}

fn cmd_inspect(args: InspectArgs) -> Result<()> {
    let file = read_bwta(&args.file)?;
    let ints = match &file.payload {
        PackedPayload::Binary(m) => m.unpack(),
        PackedPayload::Ternary(m) => m.unpack()?,
    };
    println!(
        "{}: kind={} rows={} cols={} scale={}",
        args.file.display(),
        file.payload.kind_name(),
        ints.rows(),
        ints.cols(),
        file.scale
    );
    let show_rows = ints.rows().min(args.max_rows.max(1));
    let show_cols = ints.cols().min(args.max_cols.max(1));
    for r in 0..show_rows {
        let mut line = String::new();
        for c in 0..show_cols {
            line.push_str(&format!("{:>3}", ints.get(r, c)));
        }
        if show_cols < ints.cols() {
            line.push_str("  ...");
        }
        println!("{line}");
    }
    if show_rows < ints.rows() {
        println!("... ({} more rows)", ints.rows() - show_rows);
    }
    Ok(())
}

fn cmd_train_demo(args: TrainDemoArgs) -> Result<()> {
    let src = std::fs::read_to_string(&args.config)
        .map_err(|e| Error::io(args.config.display().to_string(), e))?;
    let cfg = TrainConfig::from_kv(&src)?;
    let result = train(&cfg)?;
    let state = &result.state;

    if !args.quiet {
        println!("schedule: {:?}", result.schedule.levels());
        for rec in &state.epochs {
            println!(
                "epoch {:>3}  L={}  train_loss {:.4}  eval_acc {:.4}  zero_frac {:.3}",
                rec.epoch, rec.stage_l, rec.train_loss, rec.eval_acc, rec.zero_frac
            );
        }
        let spikes = state.transition_spikes();
        if !spikes.is_empty() {
            println!("transition loss spikes: {spikes:?} (mean {:.4})", state.mean_spike());
        }
        if state.epochs.len() >= 2 {
            let report = convergence_report(state, 0.25, 0.05)?;
            println!(
                "scale convergence over trailing {} epochs: {:.1}% non-converged",
                report.window,
                100.0 * report.non_converged_fraction
            );
            for row in &report.rows {
                if row.tag != crate::train::ScaleTag::Converged {
                    println!(
                        "  {}: {} (max step {:.5} vs threshold {:.5})",
                        row.name,
                        row.tag.name(),
                        row.max_delta,
                        row.threshold
                    );
                }
            }
        }
    }
    println!(
        "final: loss {:.4}, eval accuracy {:.4} ({} epochs, strategy {})",
        result.final_loss,
        result.final_acc,
        state.epochs.len(),
        cfg.strategy.name()
    );
    if let Some(path) = &args.metrics {
        std::fs::write(path, state.to_csv())
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        println!("metrics -> {}", path.display());
    }
    if let Some(dir) = &args.checkpoint {
        let final_l = result.schedule.stages.last().map(|s| s.l).unwrap_or(1);
        save_checkpoint(&result.model, dir, final_l)?;
        println!("checkpoint -> {}", dir.display());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_parses_all_subcommands() {
        let cli = Cli::try_parse_from(["bwta", "verify", "--trials", "10"]).unwrap();
        assert!(matches!(cli.cmd, Command::Verify(ref a) if a.trials == 10));
        let cli = Cli::try_parse_from([
            "bwta", "bench", "--case", "case1", "--m", "64", "--repeats", "3",
        ])
        .unwrap();
        match cli.cmd {
            Command::Bench(a) => {
                assert_eq!(a.case.as_deref(), Some("case1"));
                assert_eq!(a.m, 64);
                assert_eq!(a.repeats, 3);
            }
            _ => panic!("wrong subcommand"),
        }
        let cli = Cli::try_parse_from([
            "bwta", "pack", "--input", "w.txt", "--output", "w.bwta", "--mode", "ternary",
        ])
        .unwrap();
        assert!(matches!(cli.cmd, Command::Pack(_)));
        let cli = Cli::try_parse_from(["bwta", "inspect", "w.bwta"]).unwrap();
        assert!(matches!(cli.cmd, Command::Inspect(_)));
        let cli = Cli::try_parse_from(["bwta", "train-demo", "--config", "demo.cfg"]).unwrap();
        assert!(matches!(cli.cmd, Command::TrainDemo(_)));
    }

    #[test]
    fn bench_case_conflicts_with_preset() {
        assert!(Cli::try_parse_from([
            "bwta", "bench", "--case", "case1", "--preset", "quick"
        ])
        .is_err());
    }

    #[test]
    fn missing_required_args_fail_to_parse() {
        assert!(Cli::try_parse_from(["bwta", "train-demo"]).is_err());
        assert!(Cli::try_parse_from(["bwta", "pack", "--input", "w.txt"]).is_err());
        assert!(Cli::try_parse_from(["bwta", "inspect"]).is_err());
    }
}
