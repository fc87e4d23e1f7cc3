//! Bit-packed matrices: one plane for binary values, two disjoint planes
//! (positive / negative) for ternary values.
//!
//! Rows are packed independently into 64-bit words, element `c` landing in
//! word `c / 64` at bit `c % 64` (LSB first). The tail word of every row is
//! zero-padded; all kernels rely on that, so the raw constructors reject
//! stray padding bits.

use crate::error::{Error, Result};
use crate::tensor::{DenseMatrix, IntMatrix};

pub const WORD_BITS: usize = 64;

#[inline]
pub fn words_per_row(cols: usize) -> usize {
    cols.div_ceil(WORD_BITS)
}

/// Mask of the valid bits in a row's final word.
#[inline]
fn tail_mask(cols: usize) -> u64 {
    match cols % WORD_BITS {
        0 => u64::MAX,
        r => (1u64 << r) - 1,
    }
}

/// What a set bit means in a single-plane matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    /// Sign-quantized weights: bit 1 means `-1`, bit 0 means `+1`.
    SignNegIsOne,
    /// Bool-quantized activations: bit 1 means `1`, bit 0 means `0`.
    BoolOneIsOne,
}

/// One bit plane holding a `{-1,+1}` or `{0,1}` matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedBinaryMatrix {
    rows: usize,
    cols: usize,
    wpr: usize,
    kind: BinaryKind,
    words: Vec<u64>,
}

/// Two disjoint bit planes holding a `{-1,0,+1}` matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedTernaryMatrix {
    rows: usize,
    cols: usize,
    wpr: usize,
    plane_pos: Vec<u64>,
    plane_neg: Vec<u64>,
}

/// Pack sign-quantized weights (`{-1,+1}`); a set bit marks `-1`.
pub fn pack_sign(signs: &IntMatrix) -> Result<PackedBinaryMatrix> {
    let mut words = vec![0u64; signs.rows() * words_per_row(signs.cols())];
    pack_plane(signs, &mut words, |v, r, c| match v {
        -1 => Ok(true),
        1 => Ok(false),
        other => Err(Error::BadEntry {
            op: "pack_sign",
            row: r,
            col: c,
            value: other as f64,
        }),
    })?;
    Ok(PackedBinaryMatrix {
        rows: signs.rows(),
        cols: signs.cols(),
        wpr: words_per_row(signs.cols()),
        kind: BinaryKind::SignNegIsOne,
        words,
    })
}

/// Pack bool-quantized integers (`{0,1}`); a set bit marks `1`.
pub fn pack_bool_ints(q: &IntMatrix) -> Result<PackedBinaryMatrix> {
    let mut words = vec![0u64; q.rows() * words_per_row(q.cols())];
    pack_plane(q, &mut words, |v, r, c| match v {
        1 => Ok(true),
        0 => Ok(false),
        other => Err(Error::BadEntry {
            op: "pack_bool_ints",
            row: r,
            col: c,
            value: other as f64,
        }),
    })?;
    Ok(PackedBinaryMatrix {
        rows: q.rows(),
        cols: q.cols(),
        wpr: words_per_row(q.cols()),
        kind: BinaryKind::BoolOneIsOne,
        words,
    })
}

fn pack_plane(
    q: &IntMatrix,
    words: &mut [u64],
    mut bit_of: impl FnMut(i32, usize, usize) -> Result<bool>,
) -> Result<()> {
    let wpr = words_per_row(q.cols());
    for r in 0..q.rows() {
        let row = q.row(r);
        for (c, &v) in row.iter().enumerate() {
            if bit_of(v, r, c)? {
                words[r * wpr + c / WORD_BITS] |= 1u64 << (c % WORD_BITS);
            }
        }
    }
    Ok(())
}

/// Pack ternary integers (`{-1,0,+1}`) into positive/negative planes.
pub fn pack_ternary_ints(q: &IntMatrix) -> Result<PackedTernaryMatrix> {
    let wpr = words_per_row(q.cols());
    let mut pos = vec![0u64; q.rows() * wpr];
    let mut neg = vec![0u64; q.rows() * wpr];
    for r in 0..q.rows() {
        for (c, &v) in q.row(r).iter().enumerate() {
            let bit = 1u64 << (c % WORD_BITS);
            match v {
                1 => pos[r * wpr + c / WORD_BITS] |= bit,
                -1 => neg[r * wpr + c / WORD_BITS] |= bit,
                0 => {}
                other => {
                    return Err(Error::BadEntry {
                        op: "pack_ternary_ints",
                        row: r,
                        col: c,
                        value: other as f64,
                    })
                }
            }
        }
    }
    Ok(PackedTernaryMatrix {
        rows: q.rows(),
        cols: q.cols(),
        wpr,
        plane_pos: pos,
        plane_neg: neg,
    })
}

/// Quantize-and-pack floats to ternary in one pass: `a/s >= 0.5` sets the
/// positive plane, `a/s <= -0.5` the negative plane (both boundaries
/// inclusive, matching `quant::quantize` with round half away from zero).
pub fn pack_ternary(a: &DenseMatrix, scale: f32) -> Result<PackedTernaryMatrix> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::NonPositiveScale {
            op: "pack_ternary",
            value: scale,
        });
    }
    let wpr = words_per_row(a.cols());
    let mut pos = vec![0u64; a.rows() * wpr];
    let mut neg = vec![0u64; a.rows() * wpr];
    let inv = 1.0 / scale;
    for r in 0..a.rows() {
        for (c, &v) in a.row(r).iter().enumerate() {
            let ratio = v * inv;
            let bit = 1u64 << (c % WORD_BITS);
            if ratio >= 0.5 {
                pos[r * wpr + c / WORD_BITS] |= bit;
            } else if ratio <= -0.5 {
                neg[r * wpr + c / WORD_BITS] |= bit;
            }
        }
    }
    Ok(PackedTernaryMatrix {
        rows: a.rows(),
        cols: a.cols(),
        wpr,
        plane_pos: pos,
        plane_neg: neg,
    })
}

/// Quantize-and-pack floats to bool: a set bit where `a/s >= 0.5`.
pub fn pack_bool(a: &DenseMatrix, scale: f32) -> Result<PackedBinaryMatrix> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::NonPositiveScale {
            op: "pack_bool",
            value: scale,
        });
    }
    let wpr = words_per_row(a.cols());
    let mut words = vec![0u64; a.rows() * wpr];
    let inv = 1.0 / scale;
    for r in 0..a.rows() {
        for (c, &v) in a.row(r).iter().enumerate() {
            if v * inv >= 0.5 {
                words[r * wpr + c / WORD_BITS] |= 1u64 << (c % WORD_BITS);
            }
        }
    }
    Ok(PackedBinaryMatrix {
        rows: a.rows(),
        cols: a.cols(),
        wpr,
        kind: BinaryKind::BoolOneIsOne,
        words,
    })
}

impl PackedBinaryMatrix {
    /// Rebuild from raw words (deserialization); padding bits must be clear.
    pub fn from_raw(rows: usize, cols: usize, kind: BinaryKind, words: Vec<u64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::ZeroDim { op: "PackedBinaryMatrix::from_raw" });
        }
        let wpr = words_per_row(cols);
        if words.len() != rows * wpr {
            return Err(Error::FileFormat {
                detail: format!(
                    "binary plane has {} words, expected {} for {rows}x{cols}",
                    words.len(),
                    rows * wpr
                ),
            });
        }
        let m = PackedBinaryMatrix { rows, cols, wpr, kind, words };
        m.check_padding("binary plane")?;
        Ok(m)
    }

    fn check_padding(&self, what: &str) -> Result<()> {
        let mask = tail_mask(self.cols);
        for r in 0..self.rows {
            let tail = self.words[r * self.wpr + self.wpr - 1];
            if tail & !mask != 0 {
                return Err(Error::FileFormat {
                    detail: format!("{what}: nonzero padding bits in row {r}"),
                });
            }
        }
        Ok(())
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
    pub fn words_per_row(&self) -> usize {
        self.wpr
    }

    #[inline]
    pub fn kind(&self) -> BinaryKind {
        self.kind
    }

    #[inline]
    pub fn row_words(&self, r: usize) -> &[u64] {
        &self.words[r * self.wpr..(r + 1) * self.wpr]
    }

    #[inline]
    pub fn words(&self) -> &[u64] {
        &self.words
    }

    /// Decode back to integers: `{-1,+1}` for sign planes, `{0,1}` for bool.
    pub fn unpack(&self) -> IntMatrix {
        let mut data = Vec::with_capacity(self.rows * self.cols);
        for r in 0..self.rows {
            let row = self.row_words(r);
            for c in 0..self.cols {
                let bit = row[c / WORD_BITS] >> (c % WORD_BITS) & 1;
                data.push(match self.kind {
                    BinaryKind::SignNegIsOne => 1 - 2 * bit as i32,
                    BinaryKind::BoolOneIsOne => bit as i32,
                });
            }
        }
        IntMatrix::new(self.rows, self.cols, data).expect("dims validated at pack time")
    }
}

impl PackedTernaryMatrix {
    /// Rebuild from raw planes (deserialization); planes must be disjoint
    /// and padding bits clear.
    pub fn from_raw(rows: usize, cols: usize, pos: Vec<u64>, neg: Vec<u64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::ZeroDim { op: "PackedTernaryMatrix::from_raw" });
        }
        let wpr = words_per_row(cols);
        if pos.len() != rows * wpr || neg.len() != pos.len() {
            return Err(Error::FileFormat {
                detail: format!(
                    "ternary planes have {}/{} words, expected {} for {rows}x{cols}",
                    pos.len(),
                    neg.len(),
                    rows * wpr
                ),
            });
        }
        let m = PackedTernaryMatrix {
            rows,
            cols,
            wpr,
            plane_pos: pos,
            plane_neg: neg,
        };
        m.check_disjoint()?;
        let mask = tail_mask(cols);
        for r in 0..rows {
            let i = r * wpr + wpr - 1;
            if (m.plane_pos[i] | m.plane_neg[i]) & !mask != 0 {
                return Err(Error::FileFormat {
                    detail: format!("ternary planes: nonzero padding bits in row {r}"),
                });
            }
        }
        Ok(m)
    }

    /// View a packed bool matrix as ternary planes (positive plane only),
    /// so bool activations can feed kernels that take ternary operands.
    pub fn from_bool(b: &PackedBinaryMatrix) -> Result<Self> {
        if b.kind() != BinaryKind::BoolOneIsOne {
            return Err(Error::Invalid {
                op: "PackedTernaryMatrix::from_bool",
                detail: "expected a bool-packed matrix".to_string(),
            });
        }
        let neg = vec![0u64; b.words().len()];
        PackedTernaryMatrix::from_raw(b.rows(), b.cols(), b.words().to_vec(), neg)
    }

    /// Planes must never claim the same element.
    pub fn check_disjoint(&self) -> Result<()> {
        for (i, (&p, &n)) in self.plane_pos.iter().zip(&self.plane_neg).enumerate() {
            if p & n != 0 {
                return Err(Error::PlaneOverlap {
                    row: i / self.wpr,
                    word: i % self.wpr,
                    mask: p & n,
                });
            }
        }
        Ok(())
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
    pub fn words_per_row(&self) -> usize {
        self.wpr
    }

    #[inline]
    pub fn pos_row(&self, r: usize) -> &[u64] {
        &self.plane_pos[r * self.wpr..(r + 1) * self.wpr]
    }

    #[inline]
    pub fn neg_row(&self, r: usize) -> &[u64] {
        &self.plane_neg[r * self.wpr..(r + 1) * self.wpr]
    }

    #[inline]
    pub fn plane_pos(&self) -> &[u64] {
        &self.plane_pos
    }

    #[inline]
    pub fn plane_neg(&self) -> &[u64] {
        &self.plane_neg
    }

    /// Decode back to `{-1,0,+1}`; fails on overlapping planes (corrupt data).
    pub fn unpack(&self) -> Result<IntMatrix> {
        self.check_disjoint()?;
        let mut data = Vec::with_capacity(self.rows * self.cols);
        for r in 0..self.rows {
            let pos = self.pos_row(r);
            let neg = self.neg_row(r);
            for c in 0..self.cols {
                let w = c / WORD_BITS;
                let b = c % WORD_BITS;
                let p = (pos[w] >> b & 1) as i32;
                let n = (neg[w] >> b & 1) as i32;
                data.push(p - n);
            }
        }
        IntMatrix::new(self.rows, self.cols, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{quantize, QuantMode, QuantState};
    use crate::tensor::{random_int_matrix, random_matrix, Scheme};

    #[test]
    fn sign_row_packs_lsb_first() {
        // [-1, +1, +1, -1] -> bits 0 and 3 set -> 0b1001 = 9.
        let signs = IntMatrix::from_rows(&[vec![-1, 1, 1, -1]]).unwrap();
        let p = pack_sign(&signs).unwrap();
        assert_eq!(p.words(), &[9]);
        assert_eq!(p.unpack(), signs);
    }

    #[test]
    fn ternary_planes_match_hand_example() {
        // A = [-0.3, 0.7, 1.2, -0.9], s = 1: pos bits 1,2 -> 6; neg bit 3 -> 8.
        let a = DenseMatrix::from_rows(&[vec![-0.3, 0.7, 1.2, -0.9]]).unwrap();
        let p = pack_ternary(&a, 1.0).unwrap();
        assert_eq!(p.plane_pos(), &[6]);
        assert_eq!(p.plane_neg(), &[8]);
        assert_eq!(p.unpack().unwrap().as_slice(), &[0, 1, 1, -1]);
    }

    #[test]
    fn bool_plane_matches_hand_example() {
        // A = [0.9, 0.2, 0.5, 0.0], s = 1: bits 0,2 -> 0b0101 = 5.
        let a = DenseMatrix::from_rows(&[vec![0.9, 0.2, 0.5, 0.0]]).unwrap();
        let p = pack_bool(&a, 1.0).unwrap();
        assert_eq!(p.words(), &[5]);
        assert_eq!(p.unpack().as_slice(), &[1, 0, 1, 0]);
    }

    #[test]
    fn pack_sign_rejects_values_other_than_plus_minus_one() {
        let bad = IntMatrix::from_rows(&[vec![1, 0]]).unwrap();
        assert!(matches!(
            pack_sign(&bad),
            Err(Error::BadEntry { op: "pack_sign", row: 0, col: 1, .. })
        ));
    }

    #[test]
    fn fused_pack_agrees_with_quantize_everywhere() {
        // Includes exact +-0.5*s boundary values: both sides must treat the
        // half step as rounding away from zero.
        let s = 0.8f32;
        let mut a = random_matrix(13, 130, &Scheme::Normal { mean: 0.0, std: 1.0 }, 17).unwrap();
        a.set(0, 0, 0.5 * s);
        a.set(0, 1, -0.5 * s);
        a.set(0, 2, 0.0);
        let q = quantize(&a, &QuantState::new(QuantMode::Ternary, s).unwrap()).unwrap();
        assert_eq!(pack_ternary(&a, s).unwrap().unpack().unwrap(), q);

        let qb = quantize(&a, &QuantState::new(QuantMode::Bool, s).unwrap()).unwrap();
        assert_eq!(pack_bool(&a, s).unwrap().unpack(), qb);
    }

    #[test]
    fn roundtrip_survives_awkward_column_counts() {
        for cols in [1usize, 2, 63, 64, 65, 127, 128, 129, 191, 192, 193, 255, 256, 257] {
            let q = random_int_matrix(3, cols, &[-1, 0, 1], cols as u64).unwrap();
            let p = pack_ternary_ints(&q).unwrap();
            assert_eq!(p.words_per_row(), cols.div_ceil(64));
            assert_eq!(p.unpack().unwrap(), q, "cols = {cols}");

            let b = random_int_matrix(3, cols, &[0, 1], cols as u64 + 1).unwrap();
            assert_eq!(pack_bool_ints(&b).unwrap().unpack(), b, "cols = {cols}");

            let s = random_int_matrix(3, cols, &[-1, 1], cols as u64 + 2).unwrap();
            assert_eq!(pack_sign(&s).unwrap().unpack(), s, "cols = {cols}");
        }
    }

    #[test]
    fn appending_zero_columns_preserves_overlapping_words() {
        let q = random_int_matrix(3, 70, &[-1, 0, 1], 70).unwrap();
        let p = pack_ternary_ints(&q).unwrap();
        assert_eq!(p.unpack().unwrap().get(2, 69), q.get(2, 69));

        let mut wide_rows = Vec::new();
        for r in 0..3 {
            let mut row = q.row(r).to_vec();
            row.extend(std::iter::repeat(0).take(58));
            wide_rows.push(row);
        }
        let wide = pack_ternary_ints(&IntMatrix::from_rows(&wide_rows).unwrap()).unwrap();
        assert_eq!(wide.words_per_row(), 2);
        for r in 0..3 {
            assert_eq!(wide.pos_row(r), p.pos_row(r));
            assert_eq!(wide.neg_row(r), p.neg_row(r));
        }
    }

    #[test]
    fn padding_bits_are_always_zero() {
        let q = random_int_matrix(5, 70, &[-1, 0, 1], 3).unwrap();
        let p = pack_ternary_ints(&q).unwrap();
        let mask = !((1u64 << (70 % 64)) - 1);
        for r in 0..5 {
            assert_eq!(p.pos_row(r)[1] & mask, 0);
            assert_eq!(p.neg_row(r)[1] & mask, 0);
        }
    }

    #[test]
    fn raw_constructors_reject_corrupt_planes() {
        // Overlapping bit.
        assert!(matches!(
            PackedTernaryMatrix::from_raw(1, 4, vec![0b0110], vec![0b0010]),
            Err(Error::PlaneOverlap { row: 0, word: 0, mask: 0b0010 })
        ));
        // Padding bit set beyond col 3 (cols = 4).
        assert!(PackedTernaryMatrix::from_raw(1, 4, vec![1 << 10], vec![0]).is_err());
        assert!(PackedBinaryMatrix::from_raw(1, 4, BinaryKind::BoolOneIsOne, vec![1 << 4]).is_err());
        // Wrong word count.
        assert!(PackedBinaryMatrix::from_raw(2, 65, BinaryKind::SignNegIsOne, vec![0; 3]).is_err());
    }

    #[test]
    fn unpack_detects_overlap_injected_after_construction() {
        let q = random_int_matrix(2, 64, &[-1, 0, 1], 9).unwrap();
        let mut p = pack_ternary_ints(&q).unwrap();
        // Force an overlap through the raw escape hatch.
        let pos = p.plane_pos().to_vec();
        let mut neg = p.plane_neg().to_vec();
        neg[0] |= pos[0] & 1 | 1;
        p = PackedTernaryMatrix {
            rows: 2,
            cols: 64,
            wpr: 1,
            plane_pos: {
                let mut v = pos;
                v[0] |= 1;
                v
            },
            plane_neg: neg,
        };
        assert!(matches!(p.unpack(), Err(Error::PlaneOverlap { .. })));
    }
}
