//! Bit-packing binary and ternary matrices into 64-bit word planes, and
//! the `.bwta` container that stores them on disk.
//!
//!     cargo run --release --example bitpack_roundtrip

use bwta::bitpack::{pack_sign, pack_ternary_ints, words_per_row};
use bwta::io::{decode, encode, PackedPayload};
use bwta::tensor::random_int_matrix;

fn main() -> bwta::Result<()> {
    // A 3x70 sign matrix needs two words per row: 64 lanes in the first,
    // 6 in the second, the rest padding. Padding stays zero so kernels can
    // skip tail masking where the identity allows it.
    let signs = random_int_matrix(3, 70, &[-1, 1], 3)?;
    let packed = pack_sign(&signs)?;
    println!(
        "sign 3x70: {} words/row, {} words total ({} bytes vs {} bytes as f32)",
        words_per_row(70),
        packed.words().len(),
        packed.words().len() * 8,
        3 * 70 * 4
    );
    for (i, w) in packed.words().iter().enumerate() {
        println!("  word {i}: {w:016x}");
    }
    assert_eq!(packed.unpack(), signs);
    println!("  unpack == original: true");

    // Ternary values need two planes (positive lanes, negative lanes);
    // zeros are the lanes set in neither.
    let tern = random_int_matrix(2, 10, &[-1, 0, 1], 5)?;
    let tp = pack_ternary_ints(&tern)?;
    println!("\nternary 2x10 planes:");
    for r in 0..2 {
        let row: Vec<String> = (0..10).map(|c| format!("{:>2}", tern.get(r, c))).collect();
        println!(
            "  row {r} [{}]  pos {:010b}  neg {:010b}",
            row.join(" "),
            tp.pos_row(r)[0] & 0x3ff,
            tp.neg_row(r)[0] & 0x3ff
        );
    }
    assert_eq!(tp.unpack()?, tern);
    println!("  unpack == original: true");

    // Round the ternary plane through the on-disk format.
    let bytes = encode(&PackedPayload::Ternary(tp), 0.125)?;
    println!("\nencoded .bwta blob: {} bytes (magic {:?})", bytes.len(), &bytes[..4]);
    let file = decode(&bytes)?;
    match &file.payload {
        PackedPayload::Ternary(t) => assert_eq!(t.unpack()?, tern),
        _ => unreachable!(),
    }
    println!("decoded: kind={} scale={}", file.payload.kind_name(), file.scale);

    // Exhaustive widths: every column count from 1 to 130 survives the trip.
    let mut checked = 0;
    for cols in 1..=130 {
        let m = random_int_matrix(4, cols, &[-1, 0, 1], cols as u64)?;
        assert_eq!(pack_ternary_ints(&m)?.unpack()?, m);
        checked += 1;
    }
    println!("\nroundtrip verified at {checked} widths (1..=130 columns)");
    Ok(())
}
