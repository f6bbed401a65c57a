//! The regrammed scan as a dense block lower-triangular matrix: agreement
//! with the scan, rotation trails, block ranks and the equivariance pair.
//!
//! ```text
//! cargo run --release --example transfer_matrix
//! ```

use dualpath_ssm::matrixview::{
    build_transfer_matrix, commutator_norm, equivariance_pair, random_instance, random_orthogonal, trail_factors,
    verify_scan_vs_matrix,
};
use dualpath_ssm::verify::scan_instance;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> dualpath_ssm::Result<()> {
    let (t, chunk, n) = (32, 8, 4);
    let (x, sel, a, rots) = random_instance(0, t, chunk, n)?;
    println!("scan vs M x: max gap {:.2e}", verify_scan_vs_matrix(&x, &sel, a, &rots, chunk)?);

    let m = build_transfer_matrix(&sel, a, &rots, chunk)?;
    println!("block lower-triangular: {}", m.is_block_lower_triangular());
    println!("rotation factor of each block (c, c'):");
    for c in 0..m.chunks() {
        let row: Vec<String> = (0..=c)
            .map(|c2| {
                let f = trail_factors(c2, c).unwrap();
                if f.is_empty() {
                    "I".to_string()
                } else {
                    f.iter().map(|i| format!("Z{i}")).collect::<Vec<_>>().join("")
                }
            })
            .collect();
        println!("  c={c}: {}", row.join("  "));
    }
    for ((c, c2), r) in m.off_diagonal_ranks() {
        println!("  rank of block ({c},{c2}) = {r}");
    }
    println!("||Z0 Z1 - Z1 Z0||_F = {:.3}", commutator_norm(&rots[0], &rots[1], n));

    let (x, sel, a, h0) = scan_instance(5, 64, 2, 4, 8)?;
    let q = random_orthogonal(8, &mut ChaCha8Rng::seed_from_u64(9));
    let (joint, state_only) = equivariance_pair(&x, &sel, &a, &h0, &q, 16)?;
    println!("rotate (h0, B, C) together: output change {joint:.2e}");
    println!("rotate h0 only:             output change {state_only:.2e}");
    Ok(())
}
