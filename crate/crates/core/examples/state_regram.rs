//! Cayley state regramming: a rank-r skew generator, its rotation, and what
//! the rotation does to a hidden state.
//!
//! ```text
//! cargo run --release --example state_regram
//! ```

use dualpath_ssm::linalg::{determinant, orthogonality_defect};
use dualpath_ssm::matrixview::random_cayley;
use dualpath_ssm::regram::{angle_stats, apply_regram, cayley_rotation, normalize_columns, rotation_analytics, RotationOp};
use dualpath_ssm::ssm::SsmState;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn op(rng: &mut ChaCha8Rng, heads: usize, n: usize, r: usize) -> dualpath_ssm::Result<RotationOp<f64>> {
    let mut g = |len| (0..len).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    let (u, v) = (normalize_columns(&g(heads * n * r), heads, n, r), normalize_columns(&g(heads * n * r), heads, n, r));
    let theta: Vec<f64> = g(heads * r).iter().map(|t| 1.5 * t.abs()).collect();
    let z = cayley_rotation(&u, &v, &theta, heads, n, r)?;
    Ok(RotationOp { heads, state_dim: n, rank: r, u, v, theta, z })
}

fn main() -> dualpath_ssm::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (heads, p, n, r) = (2, 4, 16, 4);
    let a = op(&mut rng, heads, n, r)?;
    for h in 0..heads {
        let z = a.head_z(h);
        println!("head {h}: ||ZᵀZ - I||_F = {:.2e}, det Z = {:.12}", orthogonality_defect(z, n), determinant(z, n));
    }
    for (h, s) in angle_stats(&a).iter().enumerate() {
        println!("head {h}: plane angles min {:.1}° mean {:.1}° max {:.1}°", s.min, s.mean, s.max);
    }

    let state = SsmState::from_vec(heads, p, n, (0..heads * p * n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let rotated = apply_regram(&state, &a)?;
    println!(
        "||h|| = {:.12}, ||h Z|| = {:.12}",
        state.frobenius_norm(),
        rotated.frobenius_norm()
    );

    let b = op(&mut rng, heads, n, r)?;
    println!("plane cosine: self {:.6}, other {:.4}", rotation_analytics(&a, &a)?.plane_cosine, rotation_analytics(&a, &b)?.plane_cosine);

    let z = random_cayley(8, 8, &mut rng)?;
    println!("full-rank generator in N=8: defect {:.2e}", orthogonality_defect(&z, 8));
    Ok(())
}
