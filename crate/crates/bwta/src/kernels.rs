//! Popcount GEMM kernels over packed word planes.
//!
//! All kernels share the reduction-major convention of the reference GEMMs:
//! the left operand is `[M x K]`, the right operand `[N x K]` (pre-transposed),
//! K being the packed dimension. Outputs are exact `i32` dot products — each
//! kernel is bit-for-bit equal to `gemm_int_oracle` on the unpacked integers,
//! which is what `verify` fuzzes.
//!
//! Per 64-bit word, with weight bit `w` (1 = -1), activation planes `p`/`n`:
//!
//! * case 1 (sign weights x ternary): `pc(w^p) - pc(w^n)` — zero activations
//!   set neither plane, so both popcounts see the same `w` bit and cancel;
//!   zero padding cancels the same way, which is why no tail masking is
//!   needed anywhere.
//! * case 1, naive-AND form: `-pc(w&p) + pc(w&n) + pc(!w&p) - pc(!w&n)` —
//!   the sign-expansion a straightforward port writes down first; kept as the
//!   measured baseline the XOR form is compared against.
//! * case 2 (bool x ternary): `pc(b&p) - pc(b&n)`.
//! * case 3 (ternary x ternary): `pc(qp&kp) + pc(qn&kn) - pc(qp&kn) - pc(qn&kp)`.

use crate::bitpack::{BinaryKind, PackedBinaryMatrix, PackedTernaryMatrix};
use crate::error::{Error, Result};
use crate::tensor::IntMatrix;
use rayon::prelude::*;

/// K above this would overflow the i32 accumulators in the worst case.
pub const MAX_K: usize = 1 << 24;

/// Loop shape for the kernels. The micro-tile keeps a `row_tile x col_tile`
/// block of outputs hot while their operand rows sit in L1.
#[derive(Debug, Clone)]
pub struct KernelConfig {
    pub row_tile: usize,
    pub col_tile: usize,
    /// Split output rows across threads (rayon); results are identical to the
    /// serial path because integer accumulation is order-independent.
    pub parallel: bool,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig { row_tile: 4, col_tile: 4, parallel: false }
    }
}

impl KernelConfig {
    pub fn parallel() -> Self {
        KernelConfig { parallel: true, ..KernelConfig::default() }
    }

    fn validate(&self, op: &'static str) -> Result<()> {
        if self.row_tile == 0 || self.col_tile == 0 {
            return Err(Error::Invalid {
                op,
                detail: format!("tile sizes must be >= 1, got {}x{}", self.row_tile, self.col_tile),
            });
        }
        Ok(())
    }
}

/// Kernel identities, with their static per-word instruction budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelCase {
    Case1,
    Case1NaiveAnd,
    Case2,
    Case3,
}

impl KernelCase {
    /// Bitwise word operations (xor/and/not) per packed word per output.
    pub fn word_ops(&self) -> usize {
        match self {
            KernelCase::Case1 => 2,         // 2 xor
            KernelCase::Case1NaiveAnd => 5, // 4 and + 1 not
            KernelCase::Case2 => 2,         // 2 and
            KernelCase::Case3 => 4,         // 4 and
        }
    }

    /// Popcounts per packed word per output.
    pub fn popcounts(&self) -> usize {
        match self {
            KernelCase::Case1 | KernelCase::Case2 => 2,
            KernelCase::Case1NaiveAnd | KernelCase::Case3 => 4,
        }
    }
}

fn check_k(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Result<()> {
    if left.1 != right.1 {
        return Err(Error::ShapeMismatch { op, left, right });
    }
    if left.1 > MAX_K {
        return Err(Error::Invalid {
            op,
            detail: format!("K = {} exceeds the i32-safe cap {MAX_K}", left.1),
        });
    }
    Ok(())
}

/// Shared driver for the binary-left kernels (cases 1, 1-naive, 2): walk the
/// output in `row_tile x col_tile` blocks and reduce whole word rows with `f`.
fn drive_binary_ternary<F>(
    left: &PackedBinaryMatrix,
    right: &PackedTernaryMatrix,
    cfg: &KernelConfig,
    op: &'static str,
    f: F,
) -> Result<IntMatrix>
where
    F: Fn(u64, u64, u64) -> i32 + Sync,
{
    cfg.validate(op)?;
    check_k(op, (left.rows(), left.cols()), (right.rows(), right.cols()))?;
    let (m_total, n_total) = (left.rows(), right.rows());
    let mut out = vec![0i32; m_total * n_total];

    let block = |m0: usize, rows_out: &mut [i32]| {
        let m_hi = (m0 + cfg.row_tile).min(m_total);
        for n0 in (0..n_total).step_by(cfg.col_tile) {
            let n_hi = (n0 + cfg.col_tile).min(n_total);
            for m in m0..m_hi {
                let lw = left.row_words(m);
                let row_out = &mut rows_out[(m - m0) * n_total..(m - m0 + 1) * n_total];
                for n in n0..n_hi {
                    let pw = right.pos_row(n);
                    let nw = right.neg_row(n);
                    let mut acc = 0i32;
                    for k in 0..lw.len() {
                        acc += f(lw[k], pw[k], nw[k]);
                    }
                    row_out[n] = acc;
                }
            }
        }
    };

    if cfg.parallel {
        out.par_chunks_mut(cfg.row_tile * n_total)
            .enumerate()
            .for_each(|(i, chunk)| block(i * cfg.row_tile, chunk));
    } else {
        for (i, chunk) in out.chunks_mut(cfg.row_tile * n_total).enumerate() {
            block(i * cfg.row_tile, chunk);
        }
    }
    IntMatrix::new(m_total, n_total, out)
}

/// Case 1 — sign-packed weights times ternary activations, XOR form.
pub fn gemm_case1(
    w: &PackedBinaryMatrix,
    a: &PackedTernaryMatrix,
    cfg: &KernelConfig,
) -> Result<IntMatrix> {
    if w.kind() != BinaryKind::SignNegIsOne {
        return Err(Error::Invalid {
            op: "gemm_case1",
            detail: "left operand must be a sign plane (bit 1 = -1)".to_string(),
        });
    }
    drive_binary_ternary(w, a, cfg, "gemm_case1", |w, p, n| {
        (w ^ p).count_ones() as i32 - (w ^ n).count_ones() as i32
    })
}

/// Case 1 in the unsimplified AND/NOT form. Same contract and exact output
/// as [`gemm_case1`]; more than twice the word operations per output.
pub fn gemm_case1_naive_and(
    w: &PackedBinaryMatrix,
    a: &PackedTernaryMatrix,
    cfg: &KernelConfig,
) -> Result<IntMatrix> {
    if w.kind() != BinaryKind::SignNegIsOne {
        return Err(Error::Invalid {
            op: "gemm_case1_naive_and",
            detail: "left operand must be a sign plane (bit 1 = -1)".to_string(),
        });
    }
    drive_binary_ternary(w, a, cfg, "gemm_case1_naive_and", |w, p, n| {
        let not_w = !w; // padding bits of !w are 1, but p/n padding is 0
        (not_w & p).count_ones() as i32 + (w & n).count_ones() as i32
            - (w & p).count_ones() as i32
            - (not_w & n).count_ones() as i32
    })
}

/// Case 2 — bool-packed attention probabilities times ternary values.
pub fn gemm_case2(
    att: &PackedBinaryMatrix,
    v: &PackedTernaryMatrix,
    cfg: &KernelConfig,
) -> Result<IntMatrix> {
    if att.kind() != BinaryKind::BoolOneIsOne {
        return Err(Error::Invalid {
            op: "gemm_case2",
            detail: "left operand must be a bool plane (bit 1 = 1)".to_string(),
        });
    }
    drive_binary_ternary(att, v, cfg, "gemm_case2", |b, p, n| {
        (b & p).count_ones() as i32 - (b & n).count_ones() as i32
    })
}

/// Case 3 — ternary queries times ternary keys.
pub fn gemm_case3(
    q: &PackedTernaryMatrix,
    k: &PackedTernaryMatrix,
    cfg: &KernelConfig,
) -> Result<IntMatrix> {
    cfg.validate("gemm_case3")?;
    check_k(
        "gemm_case3",
        (q.rows(), q.cols()),
        (k.rows(), k.cols()),
    )?;
    let (m_total, n_total) = (q.rows(), k.rows());
    let mut out = vec![0i32; m_total * n_total];

    let block = |m0: usize, rows_out: &mut [i32]| {
        let m_hi = (m0 + cfg.row_tile).min(m_total);
        for n0 in (0..n_total).step_by(cfg.col_tile) {
            let n_hi = (n0 + cfg.col_tile).min(n_total);
            for m in m0..m_hi {
                let qp = q.pos_row(m);
                let qn = q.neg_row(m);
                let row_out = &mut rows_out[(m - m0) * n_total..(m - m0 + 1) * n_total];
                for n in n0..n_hi {
                    let kp = k.pos_row(n);
                    let kn = k.neg_row(n);
                    let mut acc = 0i32;
                    for i in 0..qp.len() {
                        acc += (qp[i] & kp[i]).count_ones() as i32
                            + (qn[i] & kn[i]).count_ones() as i32
                            - (qp[i] & kn[i]).count_ones() as i32
                            - (qn[i] & kp[i]).count_ones() as i32;
                    }
                    row_out[n] = acc;
                }
            }
        }
    };

    if cfg.parallel {
        out.par_chunks_mut(cfg.row_tile * n_total)
            .enumerate()
            .for_each(|(i, chunk)| block(i * cfg.row_tile, chunk));
    } else {
        for (i, chunk) in out.chunks_mut(cfg.row_tile * n_total).enumerate() {
            block(i * cfg.row_tile, chunk);
        }
    }
    IntMatrix::new(m_total, n_total, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bitpack::{pack_bool_ints, pack_sign, pack_ternary_ints};
    use crate::tensor::{gemm_int_oracle, random_int_matrix, IntMatrix};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> KernelConfig {
        KernelConfig::default()
    }

    #[test]
    fn case1_matches_hand_example() {
        // W = [+1,-1,+1,+1] -> 0b0010; A = [1,-1,0,1] -> pos 0b1001, neg 0b0010.
        // pc(0b0010^0b1001) - pc(0b0010^0b0010) = 3 - 0 = 3.
        let w = pack_sign(&IntMatrix::from_rows(&[vec![1, -1, 1, 1]]).unwrap()).unwrap();
        let a = pack_ternary_ints(&IntMatrix::from_rows(&[vec![1, -1, 0, 1]]).unwrap()).unwrap();
        assert_eq!(gemm_case1(&w, &a, &cfg()).unwrap().get(0, 0), 3);
        assert_eq!(gemm_case1_naive_and(&w, &a, &cfg()).unwrap().get(0, 0), 3);
    }

    #[test]
    fn case2_matches_hand_example() {
        // Att = [1,0,1,1] -> 0b1101; V = [-1,1,0,1] -> pos 0b1010, neg 0b0001.
        // pc(13&10) - pc(13&1) = 1 - 1 = 0.
        let att = pack_bool_ints(&IntMatrix::from_rows(&[vec![1, 0, 1, 1]]).unwrap()).unwrap();
        let v = pack_ternary_ints(&IntMatrix::from_rows(&[vec![-1, 1, 0, 1]]).unwrap()).unwrap();
        assert_eq!(gemm_case2(&att, &v, &cfg()).unwrap().get(0, 0), 0);
    }

    #[test]
    fn case3_matches_hand_example() {
        // Q = [1,-1,0,1] (pos 9, neg 2); K = [-1,-1,1,1] (pos 12, neg 3).
        // pc(9&12) + pc(2&3) - pc(9&3) - pc(2&12) = 1 + 1 - 1 - 0 = 1.
        let q = pack_ternary_ints(&IntMatrix::from_rows(&[vec![1, -1, 0, 1]]).unwrap()).unwrap();
        let k = pack_ternary_ints(&IntMatrix::from_rows(&[vec![-1, -1, 1, 1]]).unwrap()).unwrap();
        assert_eq!(gemm_case3(&q, &k, &cfg()).unwrap().get(0, 0), 1);
    }

    #[test]
    fn kernels_match_the_integer_oracle_on_awkward_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for k in [1usize, 2, 63, 64, 65, 127, 129, 200, 256, 257] {
            let m = rng.gen_range(1..=9);
            let n = rng.gen_range(1..=9);
            let seed = rng.gen::<u64>();
            let wi = random_int_matrix(m, k, &[-1, 1], seed).unwrap();
            let ai = random_int_matrix(n, k, &[-1, 0, 1], seed + 1).unwrap();
            let bi = random_int_matrix(n, k, &[0, 1], seed + 2).unwrap();
            let qi = random_int_matrix(m, k, &[-1, 0, 1], seed + 3).unwrap();

            let w = pack_sign(&wi).unwrap();
            let a = pack_ternary_ints(&ai).unwrap();
            let b = pack_bool_ints(&bi).unwrap();
            let q = pack_ternary_ints(&qi).unwrap();

            assert_eq!(gemm_case1(&w, &a, &cfg()).unwrap(), gemm_int_oracle(&wi, &ai).unwrap());
            assert_eq!(
                gemm_case1_naive_and(&w, &a, &cfg()).unwrap(),
                gemm_int_oracle(&wi, &ai).unwrap()
            );
            assert_eq!(gemm_case2(&b, &a, &cfg()).unwrap(), gemm_int_oracle(&bi, &ai).unwrap());
            assert_eq!(gemm_case3(&q, &a, &cfg()).unwrap(), gemm_int_oracle(&qi, &ai).unwrap());

            // Exactness bound: every dot of +-1 entries is within +-K.
            for &v in gemm_case1(&w, &a, &cfg()).unwrap().as_slice() {
                assert!(v.unsigned_abs() as usize <= k);
            }
        }
    }

    #[test]
    fn zero_activations_vanish_per_word() {
        // Whole-zero activation planes: XOR terms cancel word by word.
        let wi = random_int_matrix(5, 130, &[-1, 1], 4).unwrap();
        let w = pack_sign(&wi).unwrap();
        let zero = pack_ternary_ints(&IntMatrix::zeros(3, 130).unwrap()).unwrap();
        let out = gemm_case1(&w, &zero, &cfg()).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 0));
    }

    #[test]
    fn tile_shape_never_changes_results() {
        let wi = random_int_matrix(13, 200, &[-1, 1], 8).unwrap();
        let ai = random_int_matrix(11, 200, &[-1, 0, 1], 9).unwrap();
        let w = pack_sign(&wi).unwrap();
        let a = pack_ternary_ints(&ai).unwrap();
        let base = gemm_case1(&w, &a, &cfg()).unwrap();
        for (rt, ct) in [(1, 1), (3, 5), (16, 2), (64, 64)] {
            let c = KernelConfig { row_tile: rt, col_tile: ct, parallel: false };
            assert_eq!(gemm_case1(&w, &a, &c).unwrap(), base, "tile {rt}x{ct}");
        }
    }

    #[test]
    fn parallel_equals_serial() {
        let wi = random_int_matrix(33, 257, &[-1, 1], 14).unwrap();
        let ai = random_int_matrix(29, 257, &[-1, 0, 1], 15).unwrap();
        let w = pack_sign(&wi).unwrap();
        let a = pack_ternary_ints(&ai).unwrap();
        let serial = gemm_case1(&w, &a, &cfg()).unwrap();
        assert_eq!(gemm_case1(&w, &a, &KernelConfig::parallel()).unwrap(), serial);

        let q = pack_ternary_ints(&random_int_matrix(19, 190, &[-1, 0, 1], 16).unwrap()).unwrap();
        let k = pack_ternary_ints(&random_int_matrix(23, 190, &[-1, 0, 1], 17).unwrap()).unwrap();
        assert_eq!(
            gemm_case3(&q, &k, &KernelConfig::parallel()).unwrap(),
            gemm_case3(&q, &k, &cfg()).unwrap()
        );
    }

    #[test]
    fn xor_and_naive_and_forms_agree_bitwise() {
        for seed in 0..20u64 {
            let wi = random_int_matrix(7, 97, &[-1, 1], seed).unwrap();
            let ai = random_int_matrix(6, 97, &[-1, 0, 1], seed + 1000).unwrap();
            let w = pack_sign(&wi).unwrap();
            let a = pack_ternary_ints(&ai).unwrap();
            assert_eq!(
                gemm_case1(&w, &a, &cfg()).unwrap(),
                gemm_case1_naive_and(&w, &a, &cfg()).unwrap()
            );
        }
    }

    #[test]
    fn per_word_identity_holds_on_random_words() {
        // pc(w^p) - pc(w^n) == pc(p) - pc(n) - 2pc(w&p) + 2pc(w&n)
        // for disjoint planes p, n. Quick sample here; the acceptance suite
        // runs the full 1e5-triple sweep.
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        for _ in 0..10_000 {
            let w: u64 = rng.gen();
            let p: u64 = rng.gen();
            let n: u64 = rng.gen::<u64>() & !p;
            let lhs = (w ^ p).count_ones() as i64 - (w ^ n).count_ones() as i64;
            let rhs = p.count_ones() as i64 - n.count_ones() as i64
                - 2 * (w & p).count_ones() as i64
                + 2 * (w & n).count_ones() as i64;
            assert_eq!(lhs, rhs);
        }
    }

    #[test]
    fn contracts_are_enforced() {
        let w = pack_sign(&random_int_matrix(2, 64, &[-1, 1], 1).unwrap()).unwrap();
        let a = pack_ternary_ints(&random_int_matrix(2, 65, &[-1, 0, 1], 2).unwrap()).unwrap();
        assert!(matches!(
            gemm_case1(&w, &a, &cfg()),
            Err(Error::ShapeMismatch { op: "gemm_case1", .. })
        ));

        let a64 = pack_ternary_ints(&random_int_matrix(2, 64, &[-1, 0, 1], 3).unwrap()).unwrap();
        let bad_cfg = KernelConfig { row_tile: 0, col_tile: 4, parallel: false };
        assert!(gemm_case1(&w, &a64, &bad_cfg).is_err());

        // A bool plane is not a valid case-1 weight, nor a sign plane a valid
        // case-2 probability mask.
        let b = pack_bool_ints(&random_int_matrix(2, 64, &[0, 1], 4).unwrap()).unwrap();
        assert!(gemm_case1(&b, &a64, &cfg()).is_err());
        assert!(gemm_case2(&w, &a64, &cfg()).is_err());

        // K beyond the i32-safe cap is rejected up front.
        let big_cols = MAX_K + 64;
        let wpr = big_cols / 64;
        let big_w = PackedBinaryMatrix::from_raw(
            1,
            big_cols,
            BinaryKind::SignNegIsOne,
            vec![0u64; wpr],
        )
        .unwrap();
        let big_a =
            PackedTernaryMatrix::from_raw(1, big_cols, vec![0u64; wpr], vec![0u64; wpr]).unwrap();
        assert!(matches!(
            gemm_case1(&big_w, &big_a, &cfg()),
            Err(Error::Invalid { op: "gemm_case1", .. })
        ));
    }

    #[test]
    fn naive_and_costs_at_least_twice_the_word_ops() {
        assert!(KernelCase::Case1NaiveAnd.word_ops() >= 2 * KernelCase::Case1.word_ops());
        assert_eq!(KernelCase::Case1.popcounts(), 2);
        assert_eq!(KernelCase::Case1NaiveAnd.popcounts(), 4);
    }
}
