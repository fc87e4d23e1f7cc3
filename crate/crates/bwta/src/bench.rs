//! Micro-benchmarks for the packed kernels, the fp32 baseline, and the
//! bit-packing routines.
//!
//! Timing protocol: deterministic operands from a seed, a few warmup runs,
//! then `repeats` timed runs; the reported figure is the median. A checksum
//! over the output is computed on every run — it keeps the work alive and
//! doubles as a determinism assertion (all repeats must produce the same
//! bytes). With `check` set, the kernel output is compared against the
//! exact integer oracle once before any timing starts.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bitpack::{pack_bool_ints, pack_sign, pack_ternary_ints};
use crate::error::{Error, Result};
use crate::kernels::{gemm_case1, gemm_case1_naive_and, gemm_case2, gemm_case3, KernelConfig};
use crate::tensor::{gemm_f32, gemm_int_oracle, random_int_matrix, random_matrix, IntMatrix, Scheme};
use crate::verify::first_mismatch;

/// What to measure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchCase {
    /// Naive single-threaded f32 matmul — the reference cost.
    Fp32,
    /// Sign x ternary kernel (XOR + mask form).
    Case1,
    /// Sign x ternary kernel in the literal five-op AND form.
    Case1NaiveAnd,
    /// Bool x ternary kernel.
    Case2,
    /// Ternary x ternary kernel.
    Case3,
    /// Packing a sign matrix into word planes.
    PackBinary,
    /// Packing a ternary matrix into word planes.
    PackTernary,
}

impl BenchCase {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fp32" => Ok(BenchCase::Fp32),
            "case1" => Ok(BenchCase::Case1),
            "case1-naive-and" => Ok(BenchCase::Case1NaiveAnd),
            "case2" => Ok(BenchCase::Case2),
            "case3" => Ok(BenchCase::Case3),
            "pack-binary" => Ok(BenchCase::PackBinary),
            "pack-ternary" => Ok(BenchCase::PackTernary),
            other => Err(Error::Invalid {
                op: "BenchCase::parse",
                detail: format!(
                    "unknown case `{other}` (expected fp32, case1, case1-naive-and, case2, case3, pack-binary, pack-ternary)"
                ),
            }),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            BenchCase::Fp32 => "fp32",
            BenchCase::Case1 => "case1",
            BenchCase::Case1NaiveAnd => "case1-naive-and",
            BenchCase::Case2 => "case2",
            BenchCase::Case3 => "case3",
            BenchCase::PackBinary => "pack-binary",
            BenchCase::PackTernary => "pack-ternary",
        }
    }

    fn is_pack(&self) -> bool {
        matches!(self, BenchCase::PackBinary | BenchCase::PackTernary)
    }
}

/// One benchmark request.
#[derive(Debug, Clone)]
pub struct BenchSpec {
    pub case: BenchCase,
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub repeats: usize,
    pub warmup: usize,
    pub seed: u64,
    /// Compare against the integer oracle before timing.
    pub check: bool,
    pub parallel: bool,
}

impl BenchSpec {
    pub fn new(case: BenchCase, m: usize, n: usize, k: usize) -> Self {
        BenchSpec {
            case,
            m,
            n,
            k,
            repeats: 5,
            warmup: 1,
            seed: 42,
            check: true,
            parallel: false,
        }
    }
}

/// One benchmark measurement.
#[derive(Debug, Clone)]
pub struct BenchResult {
    pub case: &'static str,
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub repeats: usize,
    pub median_s: f64,
    pub min_s: f64,
    /// Billions of multiply-accumulates per second for matmul cases
    /// (2*M*N*K ops), billions of elements per second for packing cases.
    pub gops: f64,
    pub checksum: i64,
    pub checked: bool,
}

/// Refuse shapes whose operands would not plausibly fit in memory, with an
/// estimate in the error so the caller can see how far off they are.
fn guard_size(spec: &BenchSpec) -> Result<()> {
    let elems = spec.m * spec.k + spec.n * spec.k + spec.m * spec.n;
    let bytes = elems.saturating_mul(4);
    const LIMIT: usize = 4 << 30;
    if bytes > LIMIT {
        return Err(Error::Invalid {
            op: "run_bench",
            detail: format!(
                "shape {}x{}x{} needs about {} MiB of operands; the limit is {} MiB",
                spec.m,
                spec.n,
                spec.k,
                bytes >> 20,
                LIMIT >> 20
            ),
        });
    }
    Ok(())
}

fn int_checksum(m: &IntMatrix) -> i64 {
    m.as_slice().iter().map(|&v| v as i64).fold(0i64, |a, b| a.wrapping_add(b))
}

fn median(samples: &mut [f64]) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    samples[samples.len() / 2]
}

/// Run one benchmark to completion.
pub fn run_bench(spec: &BenchSpec) -> Result<BenchResult> {
    if spec.repeats == 0 {
        return Err(Error::Invalid {
            op: "run_bench",
            detail: "repeats must be at least 1".to_string(),
        });
    }
    guard_size(spec)?;
    let cfg = KernelConfig {
        parallel: spec.parallel,
        ..KernelConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let s1: u64 = rng.gen();
    let s2: u64 = rng.gen();

    // Operand setup and a closure that runs one repetition, returning a
    // checksum of the output.
    let mut timings = Vec::with_capacity(spec.repeats);
    let mut checksums: Vec<i64> = Vec::with_capacity(spec.repeats);
    let mut checked = false;

    macro_rules! time_loop {
        ($body:expr) => {{
            for _ in 0..spec.warmup {
                let _ = $body?;
            }
            for _ in 0..spec.repeats {
                let start = Instant::now();
                let out = $body?;
                timings.push(start.elapsed().as_secs_f64());
                checksums.push(out);
            }
        }};
    }

    match spec.case {
        BenchCase::Fp32 => {
            let a = random_matrix(spec.m, spec.k, &Scheme::Uniform { lo: -1.0, hi: 1.0 }, s1)?;
            let b = random_matrix(spec.n, spec.k, &Scheme::Uniform { lo: -1.0, hi: 1.0 }, s2)?;
            time_loop!({
                gemm_f32(&a, &b).map(|out| {
                    let sum: f64 = out.as_slice().iter().map(|&v| v as f64).sum();
                    sum.to_bits() as i64
                })
            });
        }
        BenchCase::Case1 | BenchCase::Case1NaiveAnd => {
            let w = random_int_matrix(spec.m, spec.k, &[-1, 1], s1)?;
            let a = random_int_matrix(spec.n, spec.k, &[-1, 0, 0, 1], s2)?;
            let wp = pack_sign(&w)?;
            let ap = pack_ternary_ints(&a)?;
            let naive = spec.case == BenchCase::Case1NaiveAnd;
            if spec.check {
                let oracle = gemm_int_oracle(&w, &a)?;
                let got = if naive {
                    gemm_case1_naive_and(&wp, &ap, &cfg)?
                } else {
                    gemm_case1(&wp, &ap, &cfg)?
                };
                if let Some((r, c, want, have)) = first_mismatch(&oracle, &got) {
                    return Err(Error::Invalid {
                        op: "run_bench",
                        detail: format!(
                            "oracle check failed at out[{r}][{c}]: expected {want}, got {have}"
                        ),
                    });
                }
                checked = true;
            }
            if naive {
                time_loop!(gemm_case1_naive_and(&wp, &ap, &cfg).map(|o| int_checksum(&o)));
            } else {
                time_loop!(gemm_case1(&wp, &ap, &cfg).map(|o| int_checksum(&o)));
            }
        }
        BenchCase::Case2 => {
            let b = random_int_matrix(spec.m, spec.k, &[0, 1], s1)?;
            let v = random_int_matrix(spec.n, spec.k, &[-1, 0, 1], s2)?;
            let bp = pack_bool_ints(&b)?;
            let vp = pack_ternary_ints(&v)?;
            if spec.check {
                let oracle = gemm_int_oracle(&b, &v)?;
                let got = gemm_case2(&bp, &vp, &cfg)?;
                if let Some((r, c, want, have)) = first_mismatch(&oracle, &got) {
                    return Err(Error::Invalid {
                        op: "run_bench",
                        detail: format!(
                            "oracle check failed at out[{r}][{c}]: expected {want}, got {have}"
                        ),
                    });
                }
                checked = true;
            }
            time_loop!(gemm_case2(&bp, &vp, &cfg).map(|o| int_checksum(&o)));
        }
        BenchCase::Case3 => {
            let q = random_int_matrix(spec.m, spec.k, &[-1, 0, 1], s1)?;
            let kk = random_int_matrix(spec.n, spec.k, &[-1, 0, 1], s2)?;
            let qp = pack_ternary_ints(&q)?;
            let kp = pack_ternary_ints(&kk)?;
            if spec.check {
                let oracle = gemm_int_oracle(&q, &kk)?;
                let got = gemm_case3(&qp, &kp, &cfg)?;
                if let Some((r, c, want, have)) = first_mismatch(&oracle, &got) {
                    return Err(Error::Invalid {
                        op: "run_bench",
                        detail: format!(
                            "oracle check failed at out[{r}][{c}]: expected {want}, got {have}"
                        ),
                    });
                }
                checked = true;
            }
            time_loop!(gemm_case3(&qp, &kp, &cfg).map(|o| int_checksum(&o)));
        }
        BenchCase::PackBinary => {
            let w = random_int_matrix(spec.m, spec.k, &[-1, 1], s1)?;
            if spec.check {
                if first_mismatch(&w, &pack_sign(&w)?.unpack()).is_some() {
                    return Err(Error::Invalid {
                        op: "run_bench",
                        detail: "pack-binary roundtrip failed".to_string(),
                    });
                }
                checked = true;
            }
            time_loop!(pack_sign(&w).map(|p| {
                p.words().iter().map(|&w| w as i64).fold(0i64, |a, b| a.wrapping_add(b))
            }));
        }
        BenchCase::PackTernary => {
            let a = random_int_matrix(spec.m, spec.k, &[-1, 0, 1], s1)?;
            if spec.check {
                if first_mismatch(&a, &pack_ternary_ints(&a)?.unpack()?).is_some() {
                    return Err(Error::Invalid {
                        op: "run_bench",
                        detail: "pack-ternary roundtrip failed".to_string(),
                    });
                }
                checked = true;
            }
            time_loop!(pack_ternary_ints(&a).map(|p| {
                let pos: i64 = p.plane_pos().iter().map(|&w| w as i64).fold(0, |x, y| x.wrapping_add(y));
                let neg: i64 = p.plane_neg().iter().map(|&w| w as i64).fold(0, |x, y| x.wrapping_add(y));
                pos.wrapping_add(neg)
            }));
        }
    }

    // Deterministic inputs must give identical outputs on every repeat.
    if checksums.windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::Invalid {
            op: "run_bench",
            detail: format!("checksum varied across repeats: {checksums:?}"),
        });
    }

    let med = median(&mut timings);
    let min = timings[0];
    let ops = if spec.case.is_pack() {
        (spec.m * spec.k) as f64
    } else {
        2.0 * spec.m as f64 * spec.n as f64 * spec.k as f64
    };
    Ok(BenchResult {
        case: spec.case.name(),
        m: spec.m,
        n: spec.n,
        k: spec.k,
        repeats: spec.repeats,
        median_s: med,
        min_s: min,
        gops: ops / med / 1e9,
        checksum: checksums[0],
        checked,
    })
}

/// Named shape suites. `standard` covers transformer-style rectangular
/// shapes for the weight kernel plus square attention shapes; `quick` is a
/// small smoke suite.
pub fn preset(name: &str) -> Result<Vec<BenchSpec>> {
    let shapes: Vec<(BenchCase, usize, usize, usize)> = match name {
        "standard" => vec![
            (BenchCase::Fp32, 768, 128, 768),
            (BenchCase::Case1, 768, 128, 768),
            (BenchCase::Case1NaiveAnd, 768, 128, 768),
            (BenchCase::Case1, 3072, 128, 768),
            (BenchCase::Case1, 768, 128, 3072),
            (BenchCase::Case1, 13824, 32, 5120),
            (BenchCase::Case2, 512, 512, 512),
            (BenchCase::Case3, 512, 512, 512),
            (BenchCase::PackBinary, 4096, 1, 4096),
            (BenchCase::PackTernary, 4096, 1, 4096),
        ],
        "quick" => vec![
            (BenchCase::Fp32, 128, 128, 128),
            (BenchCase::Case1, 128, 128, 128),
            (BenchCase::Case1NaiveAnd, 128, 128, 128),
            (BenchCase::Case2, 128, 128, 128),
            (BenchCase::Case3, 128, 128, 128),
        ],
        other => {
            return Err(Error::Invalid {
                op: "preset",
                detail: format!("unknown preset `{other}` (expected standard or quick)"),
            })
        }
    };
    Ok(shapes
        .into_iter()
        .map(|(case, m, n, k)| BenchSpec::new(case, m, n, k))
        .collect())
}

/// Best-effort CPU description for benchmark reports.
pub fn machine_specs() -> String {
    let threads = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    let mut model = String::from("unknown cpu");
    if let Ok(info) = std::fs::read_to_string("/proc/cpuinfo") {
        for line in info.lines() {
            if let Some(rest) = line.strip_prefix("model name") {
                if let Some((_, v)) = rest.split_once(':') {
                    model = v.trim().to_string();
                    break;
                }
            }
        }
    }
    format!("{model}; {threads} hardware threads")
}

pub fn results_csv(rows: &[BenchResult]) -> String {
    let mut out = String::from("case,m,n,k,repeats,median_s,min_s,gops,checked\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{:.6},{:.6},{:.3},{}\n",
            r.case, r.m, r.n, r.k, r.repeats, r.median_s, r.min_s, r.gops, r.checked
        ));
    }
    out
}

pub fn results_markdown(rows: &[BenchResult]) -> String {
    let mut out = String::new();
    out.push_str(&format!("machine: {}\n\n", machine_specs()));
    out.push_str("| case | m | n | k | median (s) | Gop/s | checked |\n");
    out.push_str("|---|---|---|---|---|---|---|\n");
    for r in rows {
        out.push_str(&format!(
            "| {} | {} | {} | {} | {:.6} | {:.3} | {} |\n",
            r.case, r.m, r.n, r.k, r.median_s, r.gops, r.checked
        ));
    }
    out
}
