//! Dense row-major matrices and the naive reference GEMMs.
//!
//! Everything downstream (packed kernels, layers, training) is validated
//! against [`gemm_f32`] / [`gemm_int_oracle`], so these stay deliberately
//! simple: triple loops, no blocking, no SIMD. Both GEMMs take the right-hand
//! operand pre-transposed — `A` is `[M x K]`, `B` is `[N x K]` — so the inner
//! loop walks two contiguous rows.

use crate::error::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution as RandDistribution;

/// Row-major `f32` matrix. All entries are finite; constructors enforce it.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::ZeroDim { op: "DenseMatrix::new" });
        }
        if data.len() != rows * cols {
            return Err(Error::Invalid {
                op: "DenseMatrix::new",
                detail: format!("{} values for {rows}x{cols}", data.len()),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::BadEntry {
                op: "DenseMatrix::new",
                row: i / cols,
                col: i % cols,
                value: data[i] as f64,
            });
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::ZeroDim { op: "DenseMatrix::zeros" });
        }
        Ok(DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        })
    }

    /// Build from nested rows; handy in tests and the CLI text parser.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        if rows.is_empty() || rows[0].is_empty() {
            return Err(Error::ZeroDim { op: "DenseMatrix::from_rows" });
        }
        let cols = rows[0].len();
        if let Some(r) = rows.iter().position(|r| r.len() != cols) {
            return Err(Error::Invalid {
                op: "DenseMatrix::from_rows",
                detail: format!("row {r} has {} entries, expected {cols}", rows[r].len()),
            });
        }
        let data: Vec<f32> = rows.iter().flatten().copied().collect();
        DenseMatrix::new(rows.len(), cols, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut out = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        DenseMatrix {
            rows: self.cols,
            cols: self.rows,
            data: out,
        }
    }

    /// Column slice `[.., lo..hi)` as a new matrix (used for head splits).
    pub fn col_slice(&self, lo: usize, hi: usize) -> DenseMatrix {
        assert!(lo < hi && hi <= self.cols, "column slice out of range");
        let mut data = Vec::with_capacity(self.rows * (hi - lo));
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[lo..hi]);
        }
        DenseMatrix {
            rows: self.rows,
            cols: hi - lo,
            data,
        }
    }

    /// Mean of all entries (f64 accumulation).
    pub fn mean(&self) -> f32 {
        let sum: f64 = self.data.iter().map(|&v| v as f64).sum();
        (sum / self.data.len() as f64) as f32
    }

    /// Mean of absolute values (f64 accumulation).
    pub fn mean_abs(&self) -> f32 {
        let sum: f64 = self.data.iter().map(|&v| (v as f64).abs()).sum();
        (sum / self.data.len() as f64) as f32
    }

    /// Frobenius norm (f64 accumulation).
    pub fn frob_norm(&self) -> f32 {
        let sum: f64 = self.data.iter().map(|&v| (v as f64) * (v as f64)).sum();
        sum.sqrt() as f32
    }
}

/// Row-major `i32` matrix holding quantized values. Entries stay small
/// (bounded by the level half-range or by the reduction length K for GEMM
/// outputs); no wraparound below K < 2^24 for |entries| <= 127.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntMatrix {
    rows: usize,
    cols: usize,
    data: Vec<i32>,
}

impl IntMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<i32>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::ZeroDim { op: "IntMatrix::new" });
        }
        if data.len() != rows * cols {
            return Err(Error::Invalid {
                op: "IntMatrix::new",
                detail: format!("{} values for {rows}x{cols}", data.len()),
            });
        }
        Ok(IntMatrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::ZeroDim { op: "IntMatrix::zeros" });
        }
        Ok(IntMatrix {
            rows,
            cols,
            data: vec![0; rows * cols],
        })
    }

    pub fn from_rows(rows: &[Vec<i32>]) -> Result<Self> {
        if rows.is_empty() || rows[0].is_empty() {
            return Err(Error::ZeroDim { op: "IntMatrix::from_rows" });
        }
        let cols = rows[0].len();
        if let Some(r) = rows.iter().position(|r| r.len() != cols) {
            return Err(Error::Invalid {
                op: "IntMatrix::from_rows",
                detail: format!("row {r} has {} entries, expected {cols}", rows[r].len()),
            });
        }
        let data: Vec<i32> = rows.iter().flatten().copied().collect();
        IntMatrix::new(rows.len(), cols, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> i32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: i32) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[i32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn as_slice(&self) -> &[i32] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [i32] {
        &mut self.data
    }

    pub fn transpose(&self) -> IntMatrix {
        let mut out = vec![0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        IntMatrix {
            rows: self.cols,
            cols: self.rows,
            data: out,
        }
    }

    pub fn col_slice(&self, lo: usize, hi: usize) -> IntMatrix {
        assert!(lo < hi && hi <= self.cols, "column slice out of range");
        let mut data = Vec::with_capacity(self.rows * (hi - lo));
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[lo..hi]);
        }
        IntMatrix {
            rows: self.rows,
            cols: hi - lo,
            data,
        }
    }

    /// Map to floats (used when a quantized matrix feeds a float op).
    pub fn to_dense(&self) -> DenseMatrix {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }
}

/// Naive fp32 GEMM: `out[m][n] = sum_k a[m][k] * b[n][k]`.
///
/// `b` is supplied pre-transposed (`[N x K]`). This is the honest scalar
/// baseline the packed kernels are benchmarked against — keep it a plain
/// triple loop.
pub fn gemm_f32(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.cols {
        return Err(Error::ShapeMismatch {
            op: "gemm_f32",
            left: (a.rows, a.cols),
            right: (b.rows, b.cols),
        });
    }
    let mut out = vec![0.0f32; a.rows * b.rows];
    for m in 0..a.rows {
        let ar = a.row(m);
        for n in 0..b.rows {
            let br = b.row(n);
            let mut acc = 0.0f32;
            for k in 0..a.cols {
                acc += ar[k] * br[k];
            }
            out[m * b.rows + n] = acc;
        }
    }
    Ok(DenseMatrix {
        rows: a.rows,
        cols: b.rows,
        data: out,
    })
}

/// Exact integer GEMM, the oracle every popcount kernel is checked against.
///
/// Same operand convention as [`gemm_f32`]: `b` pre-transposed. Callers keep
/// entries small (quantized values, |v| <= 127), so i32 accumulation is exact
/// for any K below 2^24.
pub fn gemm_int_oracle(a: &IntMatrix, b: &IntMatrix) -> Result<IntMatrix> {
    if a.cols != b.cols {
        return Err(Error::ShapeMismatch {
            op: "gemm_int_oracle",
            left: (a.rows, a.cols),
            right: (b.rows, b.cols),
        });
    }
    debug_assert!(
        a.data.iter().chain(b.data.iter()).all(|v| v.abs() <= 127),
        "gemm_int_oracle operands must hold small quantized values"
    );
    let mut out = vec![0i32; a.rows * b.rows];
    for m in 0..a.rows {
        let ar = a.row(m);
        for n in 0..b.rows {
            let br = b.row(n);
            let mut acc = 0i32;
            for k in 0..a.cols {
                acc += ar[k] * br[k];
            }
            out[m * b.rows + n] = acc;
        }
    }
    Ok(IntMatrix {
        rows: a.rows,
        cols: b.rows,
        data: out,
    })
}

/// Sampling distributions for fixture generation.
#[derive(Debug, Clone)]
pub enum Scheme {
    /// Gaussian with the given mean and standard deviation.
    Normal { mean: f32, std: f32 },
    /// Uniform over `[lo, hi)`.
    Uniform { lo: f32, hi: f32 },
    /// Uniform over a fixed value grid, e.g. `{-1, 0, 1}`.
    Grid(Vec<f32>),
}

/// Deterministic random matrix from a seed. The generator (ChaCha8) is part
/// of the fixture contract: the same `(dims, scheme, seed)` always yields the
/// same matrix, on every platform.
pub fn random_matrix(rows: usize, cols: usize, scheme: &Scheme, seed: u64) -> Result<DenseMatrix> {
    if rows == 0 || cols == 0 {
        return Err(Error::ZeroDim { op: "random_matrix" });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rows * cols;
    let data: Vec<f32> = match scheme {
        Scheme::Normal { mean, std } => {
            if *std <= 0.0 || !std.is_finite() || !mean.is_finite() {
                return Err(Error::Invalid {
                    op: "random_matrix",
                    detail: format!("bad normal parameters mean={mean} std={std}"),
                });
            }
            let dist = rand_distr::Normal::new(*mean, *std).expect("validated above");
            (0..n).map(|_| dist.sample(&mut rng)).collect()
        }
        Scheme::Uniform { lo, hi } => {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::Invalid {
                    op: "random_matrix",
                    detail: format!("bad uniform range [{lo}, {hi})"),
                });
            }
            let dist = rand_distr::Uniform::new(*lo, *hi);
            (0..n).map(|_| dist.sample(&mut rng)).collect()
        }
        Scheme::Grid(values) => {
            if values.is_empty() {
                return Err(Error::EmptyInput {
                    op: "random_matrix",
                    detail: "grid scheme needs at least one value",
                });
            }
            let idx = rand_distr::Uniform::new(0usize, values.len());
            (0..n).map(|_| values[idx.sample(&mut rng)]).collect()
        }
    };
    DenseMatrix::new(rows, cols, data)
}

/// Deterministic integer matrix drawn uniformly from `values` (test/bench helper).
pub fn random_int_matrix(rows: usize, cols: usize, values: &[i32], seed: u64) -> Result<IntMatrix> {
    if rows == 0 || cols == 0 {
        return Err(Error::ZeroDim { op: "random_int_matrix" });
    }
    if values.is_empty() {
        return Err(Error::EmptyInput {
            op: "random_int_matrix",
            detail: "value set must be non-empty",
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx = rand_distr::Uniform::new(0usize, values.len());
    let data: Vec<i32> = (0..rows * cols).map(|_| values[idx.sample(&mut rng)]).collect();
    IntMatrix::new(rows, cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_f32_reduces_along_k() {
        // [[1,2]] x [[3,4]]^T = [[1*3 + 2*4]] = [[11]]
        let a = DenseMatrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let b = DenseMatrix::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let out = gemm_f32(&a, &b).unwrap();
        assert_eq!(out.rows(), 1);
        assert_eq!(out.cols(), 1);
        assert_eq!(out.get(0, 0), 11.0);
    }

    #[test]
    fn gemm_int_oracle_matches_hand_dot() {
        // 1*-1 + -1*-1 + 0*1 + 1*1 = 1
        let a = IntMatrix::from_rows(&[vec![1, -1, 0, 1]]).unwrap();
        let b = IntMatrix::from_rows(&[vec![-1, -1, 1, 1]]).unwrap();
        let out = gemm_int_oracle(&a, &b).unwrap();
        assert_eq!(out.get(0, 0), 1);
    }

    #[test]
    fn gemm_rejects_mismatched_k() {
        let a = DenseMatrix::zeros(2, 3).unwrap();
        let b = DenseMatrix::zeros(2, 4).unwrap();
        assert!(matches!(
            gemm_f32(&a, &b),
            Err(Error::ShapeMismatch { op: "gemm_f32", .. })
        ));
        let ai = IntMatrix::zeros(2, 3).unwrap();
        let bi = IntMatrix::zeros(2, 4).unwrap();
        assert!(gemm_int_oracle(&ai, &bi).is_err());
    }

    #[test]
    fn gemm_matches_f64_reference_on_random_input() {
        let a = random_matrix(7, 13, &Scheme::Normal { mean: 0.0, std: 1.0 }, 11).unwrap();
        let b = random_matrix(5, 13, &Scheme::Normal { mean: 0.0, std: 1.0 }, 12).unwrap();
        let out = gemm_f32(&a, &b).unwrap();
        for m in 0..7 {
            for n in 0..5 {
                let mut acc = 0.0f64;
                for k in 0..13 {
                    acc += a.get(m, k) as f64 * b.get(n, k) as f64;
                }
                assert!((out.get(m, n) as f64 - acc).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn constructors_reject_zero_dims_and_bad_lengths() {
        assert!(DenseMatrix::zeros(0, 4).is_err());
        assert!(DenseMatrix::new(2, 2, vec![0.0; 3]).is_err());
        assert!(IntMatrix::zeros(3, 0).is_err());
    }

    #[test]
    fn constructors_reject_non_finite_entries() {
        let err = DenseMatrix::new(1, 2, vec![1.0, f32::NAN]);
        assert!(matches!(err, Err(Error::BadEntry { row: 0, col: 1, .. })));
    }

    #[test]
    fn random_matrix_is_seed_deterministic() {
        let scheme = Scheme::Normal { mean: 0.0, std: 1.0 };
        let a = random_matrix(4, 9, &scheme, 42).unwrap();
        let b = random_matrix(4, 9, &scheme, 42).unwrap();
        let c = random_matrix(4, 9, &scheme, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn grid_scheme_only_emits_grid_values() {
        let m = random_matrix(16, 16, &Scheme::Grid(vec![-1.0, 0.0, 1.0]), 7).unwrap();
        assert!(m.as_slice().iter().all(|v| [-1.0, 0.0, 1.0].contains(v)));
        let i = random_int_matrix(16, 16, &[-1, 0, 1], 7).unwrap();
        assert!(i.as_slice().iter().all(|v| [-1, 0, 1].contains(v)));
    }

    #[test]
    fn transpose_roundtrips() {
        let a = random_matrix(3, 5, &Scheme::Uniform { lo: -1.0, hi: 1.0 }, 3).unwrap();
        assert_eq!(a.transpose().transpose(), a);
        assert_eq!(a.transpose().get(4, 2), a.get(2, 4));
    }

    #[test]
    fn col_slice_takes_the_right_columns() {
        let a = DenseMatrix::from_rows(&[vec![1.0, 2.0, 3.0, 4.0], vec![5.0, 6.0, 7.0, 8.0]]).unwrap();
        let s = a.col_slice(1, 3);
        assert_eq!(s.rows(), 2);
        assert_eq!(s.cols(), 2);
        assert_eq!(s.row(0), &[2.0, 3.0]);
        assert_eq!(s.row(1), &[6.0, 7.0]);
    }

    #[test]
    fn mean_and_norm_use_wide_accumulation() {
        let w = DenseMatrix::from_rows(&[vec![1.0, -1.0], vec![1.0, -1.0]]).unwrap();
        assert_eq!(w.mean(), 0.0);
        assert_eq!(w.mean_abs(), 1.0);
        assert_eq!(w.frob_norm(), 2.0);
    }
}
