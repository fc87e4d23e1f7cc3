//! On-disk formats: the `.bwta` container for packed tensors, raw-f32
//! sidecars for the few full-precision tensors a checkpoint needs, and the
//! small line-oriented parsers shared by configs and manifests.
//!
//! `.bwta` layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "BWTA"
//! version u8       1
//! kind    u8       0 = sign plane, 1 = bool plane, 2 = ternary planes
//! rows    u32
//! cols    u32
//! scale   f32
//! words   u64 * rows * ceil(cols/64)     (binary: one plane;
//!          ternary: positive plane, then negative plane)
//! ```
//!
//! Decoding validates everything it can: magic, version, kind byte, exact
//! payload length, zero padding bits, and plane disjointness for ternary.

use crate::bitpack::{
    words_per_row, BinaryKind, PackedBinaryMatrix, PackedTernaryMatrix,
};
use crate::error::{Error, Result};
use crate::tensor::DenseMatrix;
use std::fs;
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"BWTA";
pub const VERSION: u8 = 1;

const KIND_SIGN: u8 = 0;
const KIND_BOOL: u8 = 1;
const KIND_TERNARY: u8 = 2;

/// The tensor stored in a `.bwta` file.
#[derive(Debug, Clone, PartialEq)]
pub enum PackedPayload {
    Binary(PackedBinaryMatrix),
    Ternary(PackedTernaryMatrix),
}

impl PackedPayload {
    pub fn rows(&self) -> usize {
        match self {
            PackedPayload::Binary(m) => m.rows(),
            PackedPayload::Ternary(m) => m.rows(),
        }
    }

    pub fn cols(&self) -> usize {
        match self {
            PackedPayload::Binary(m) => m.cols(),
            PackedPayload::Ternary(m) => m.cols(),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            PackedPayload::Binary(m) => match m.kind() {
                BinaryKind::SignNegIsOne => "sign",
                BinaryKind::BoolOneIsOne => "bool",
            },
            PackedPayload::Ternary(_) => "ternary",
        }
    }
}

/// A decoded `.bwta` file: payload plus its dequantization scale.
#[derive(Debug, Clone, PartialEq)]
pub struct BwtaFile {
    pub payload: PackedPayload,
    pub scale: f32,
}

/// Serialize a packed tensor to `.bwta` bytes.
pub fn encode(payload: &PackedPayload, scale: f32) -> Result<Vec<u8>> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::NonPositiveScale { op: "bwta::encode", value: scale });
    }
    let (rows, cols) = (payload.rows(), payload.cols());
    if rows > u32::MAX as usize || cols > u32::MAX as usize {
        return Err(Error::Invalid {
            op: "bwta::encode",
            detail: format!("{rows}x{cols} exceeds the u32 header range"),
        });
    }
    let kind = match payload {
        PackedPayload::Binary(m) => match m.kind() {
            BinaryKind::SignNegIsOne => KIND_SIGN,
            BinaryKind::BoolOneIsOne => KIND_BOOL,
        },
        PackedPayload::Ternary(_) => KIND_TERNARY,
    };
    let planes: Vec<&[u64]> = match payload {
        PackedPayload::Binary(m) => vec![m.words()],
        PackedPayload::Ternary(m) => vec![m.plane_pos(), m.plane_neg()],
    };
    let words = planes.iter().map(|p| p.len()).sum::<usize>();
    let mut out = Vec::with_capacity(14 + 8 * words);
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(kind);
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    out.extend_from_slice(&scale.to_le_bytes());
    for plane in planes {
        for &w in plane {
            out.extend_from_slice(&w.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parse `.bwta` bytes, validating the header and plane invariants.
pub fn decode(bytes: &[u8]) -> Result<BwtaFile> {
    let fail = |detail: String| Error::FileFormat { detail };
    if bytes.len() < 18 {
        return Err(fail(format!("file too short ({} bytes)", bytes.len())));
    }
    if bytes[0..4] != MAGIC {
        return Err(fail("bad magic, not a .bwta file".to_string()));
    }
    if bytes[4] != VERSION {
        return Err(fail(format!("unsupported version {}", bytes[4])));
    }
    let kind = bytes[5];
    let rows = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let scale = f32::from_le_bytes(bytes[14..18].try_into().unwrap());
    if rows == 0 || cols == 0 {
        return Err(fail(format!("zero dimension {rows}x{cols}")));
    }
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(fail(format!("scale must be positive and finite, got {scale}")));
    }
    let plane_words = rows * words_per_row(cols);
    let plane_count = match kind {
        KIND_SIGN | KIND_BOOL => 1,
        KIND_TERNARY => 2,
        other => return Err(fail(format!("unknown kind byte {other}"))),
    };
    let want = 18 + 8 * plane_words * plane_count;
    if bytes.len() != want {
        return Err(fail(format!(
            "payload length {} does not match header ({} expected for {rows}x{cols})",
            bytes.len(),
            want
        )));
    }
    let read_plane = |offset: usize| -> Vec<u64> {
        bytes[offset..offset + 8 * plane_words]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect()
    };
    let payload = match kind {
        KIND_SIGN => PackedPayload::Binary(PackedBinaryMatrix::from_raw(
            rows,
            cols,
            BinaryKind::SignNegIsOne,
            read_plane(18),
        )?),
        KIND_BOOL => PackedPayload::Binary(PackedBinaryMatrix::from_raw(
            rows,
            cols,
            BinaryKind::BoolOneIsOne,
            read_plane(18),
        )?),
        _ => PackedPayload::Ternary(PackedTernaryMatrix::from_raw(
            rows,
            cols,
            read_plane(18),
            read_plane(18 + 8 * plane_words),
        )?),
    };
    Ok(BwtaFile { payload, scale })
}

pub fn write_bwta(path: impl AsRef<Path>, payload: &PackedPayload, scale: f32) -> Result<()> {
    let bytes = encode(payload, scale)?;
    fs::write(&path, bytes).map_err(|e| Error::io(path.as_ref().display().to_string(), e))
}

pub fn read_bwta(path: impl AsRef<Path>) -> Result<BwtaFile> {
    let bytes =
        fs::read(&path).map_err(|e| Error::io(path.as_ref().display().to_string(), e))?;
    decode(&bytes)
}

/// Raw-f32 sidecar for full-precision checkpoint tensors:
/// `rows u32 LE, cols u32 LE, rows*cols f32 LE`.
pub fn write_f32_matrix(path: impl AsRef<Path>, m: &DenseMatrix) -> Result<()> {
    let mut out = Vec::with_capacity(8 + 4 * m.len());
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for &v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&path, out).map_err(|e| Error::io(path.as_ref().display().to_string(), e))
}

pub fn read_f32_matrix(path: impl AsRef<Path>) -> Result<DenseMatrix> {
    let name = path.as_ref().display().to_string();
    let bytes = fs::read(&path).map_err(|e| Error::io(name.clone(), e))?;
    if bytes.len() < 8 {
        return Err(Error::FileFormat { detail: format!("{name}: truncated f32 matrix") });
    }
    let rows = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() != 8 + 4 * rows * cols {
        return Err(Error::FileFormat {
            detail: format!("{name}: {} bytes for {rows}x{cols}", bytes.len()),
        });
    }
    let data: Vec<f32> = bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    DenseMatrix::new(rows, cols, data)
}

/// Parse a whitespace- or comma-separated float grid (the `pack` command's
/// input). Blank lines and `#` comments are skipped; every data row must have
/// the same number of entries.
pub fn parse_matrix_text(src: &str) -> Result<DenseMatrix> {
    let mut rows: Vec<Vec<f32>> = Vec::new();
    for (i, line) in src.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for tok in line.split(|c: char| c == ',' || c.is_whitespace()) {
            if tok.is_empty() {
                continue;
            }
            let v: f32 = tok.parse().map_err(|_| Error::FileFormat {
                detail: format!("line {}: cannot parse '{tok}' as a float", i + 1),
            })?;
            if !v.is_finite() {
                return Err(Error::FileFormat {
                    detail: format!("line {}: non-finite value {tok}", i + 1),
                });
            }
            row.push(v);
        }
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(Error::FileFormat {
                    detail: format!(
                        "line {}: {} entries, expected {}",
                        i + 1,
                        row.len(),
                        first.len()
                    ),
                });
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::EmptyInput { op: "parse_matrix_text", detail: "no data rows" });
    }
    DenseMatrix::from_rows(&rows)
}

/// Parse line-oriented `key=value` text (configs, checkpoint manifests).
/// Returns `(line_number, key, value)` triples; blank lines and `#` comments
/// are skipped; a data line without `=` is an error at its line number.
pub fn parse_kv_lines(src: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in src.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        match line.split_once('=') {
            Some((k, v)) if !k.trim().is_empty() => {
                out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
            }
            _ => {
                return Err(Error::Config {
                    line: i + 1,
                    detail: format!("expected key=value, got '{line}'"),
                });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bitpack::{pack_sign, pack_ternary_ints};
    use crate::tensor::{random_int_matrix, IntMatrix};

    fn ternary_payload() -> PackedPayload {
        let q = IntMatrix::from_rows(&[vec![0, 1, 1, -1]]).unwrap();
        PackedPayload::Ternary(pack_ternary_ints(&q).unwrap())
    }

    #[test]
    fn encode_layout_is_byte_exact() {
        let bytes = encode(&ternary_payload(), 1.0).unwrap();
        let mut want = Vec::new();
        want.extend_from_slice(b"BWTA");
        want.push(1); // version
        want.push(2); // ternary
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&4u32.to_le_bytes());
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&6u64.to_le_bytes()); // pos plane 0b0110
        want.extend_from_slice(&8u64.to_le_bytes()); // neg plane 0b1000
        assert_eq!(bytes, want);
    }

    #[test]
    fn decode_roundtrips_every_kind() {
        let tern = ternary_payload();
        let sign = PackedPayload::Binary(
            pack_sign(&random_int_matrix(5, 70, &[-1, 1], 2).unwrap()).unwrap(),
        );
        for (payload, scale) in [(tern, 0.75f32), (sign, 0.03125)] {
            let bytes = encode(&payload, scale).unwrap();
            let file = decode(&bytes).unwrap();
            assert_eq!(file.payload, payload);
            assert_eq!(file.scale, scale);
            // Re-encoding is byte-identical.
            assert_eq!(encode(&file.payload, file.scale).unwrap(), bytes);
        }
    }

    #[test]
    fn decode_rejects_corrupt_headers() {
        let good = encode(&ternary_payload(), 1.0).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(decode(&bad_magic).is_err());

        let mut bad_version = good.clone();
        bad_version[4] = 9;
        assert!(decode(&bad_version).is_err());

        let mut bad_kind = good.clone();
        bad_kind[5] = 7;
        assert!(decode(&bad_kind).is_err());

        let mut bad_scale = good.clone();
        bad_scale[14..18].copy_from_slice(&(-1.0f32).to_le_bytes());
        assert!(decode(&bad_scale).is_err());

        // Truncated payload and trailing garbage both fail the length check.
        assert!(decode(&good[..good.len() - 1]).is_err());
        let mut long = good.clone();
        long.push(0);
        assert!(decode(&long).is_err());
    }

    #[test]
    fn decode_rejects_overlapping_planes_and_padding_bits() {
        let mut overlap = encode(&ternary_payload(), 1.0).unwrap();
        // Set bit 1 in the negative plane too (already set in positive).
        overlap[26] |= 0b0010;
        assert!(matches!(decode(&overlap), Err(Error::PlaneOverlap { .. })));

        let mut padded = encode(&ternary_payload(), 1.0).unwrap();
        padded[19] = 0xff; // bits 8..16 of the pos plane are padding for cols=4
        assert!(matches!(decode(&padded), Err(Error::FileFormat { .. })));
    }

    #[test]
    fn file_roundtrip_through_disk() {
        let dir = std::env::temp_dir().join(format!("bwta-io-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.bwta");
        let payload = ternary_payload();
        write_bwta(&path, &payload, 2.5).unwrap();
        let file = read_bwta(&path).unwrap();
        assert_eq!(file.payload, payload);
        assert_eq!(file.scale, 2.5);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn f32_sidecar_roundtrips() {
        let dir = std::env::temp_dir().join(format!("bwta-f32-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.f32");
        let m = DenseMatrix::from_rows(&[vec![1.5, -2.25], vec![0.0, 3.0]]).unwrap();
        write_f32_matrix(&path, &m).unwrap();
        assert_eq!(read_f32_matrix(&path).unwrap(), m);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn matrix_text_accepts_csv_and_whitespace() {
        let m = parse_matrix_text("1, 2, 3\n# comment\n4 5 6\n").unwrap();
        assert_eq!(m.rows(), 2);
        assert_eq!(m.row(1), &[4.0, 5.0, 6.0]);
        assert!(matches!(
            parse_matrix_text("1 2\n3\n"),
            Err(Error::FileFormat { .. })
        ));
        assert!(parse_matrix_text("1 x\n").is_err());
        assert!(parse_matrix_text("\n# nothing\n").is_err());
    }

    #[test]
    fn kv_lines_carry_line_numbers() {
        let kv = parse_kv_lines("a=1\n\n# c\nb = two\n").unwrap();
        assert_eq!(kv, vec![(1, "a".into(), "1".into()), (4, "b".into(), "two".into())]);
        match parse_kv_lines("a=1\nbroken\n") {
            Err(Error::Config { line: 2, .. }) => {}
            other => panic!("expected config error on line 2, got {other:?}"),
        }
    }
}
