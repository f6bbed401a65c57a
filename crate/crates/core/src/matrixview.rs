//! The scan as one lower-triangular transfer matrix.
//!
//! For a single channel (`P = 1`, one head) the chunked scan with a fixed
//! rotation `Z^(c)` after every chunk `c` computes `y = M x` with
//!
//! ```text
//! M[t, s] = a(t:s) · B_sᵀ · 𝒵(c', c) · C_t      s in chunk c', t in chunk c, c' <= c
//! 𝒵(c', c) = Z^(c') Z^(c'+1) … Z^(c-1),        𝒵(c, c) = I
//! ```
//!
//! and zero above the diagonal. This module materializes `M`, compares it
//! with the scan, and checks the rank bound and the equivariance pair.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{ensure, Result};
use crate::linalg::{identity, matmul, orthogonality_defect, transpose};
use crate::regram::{cayley_rotation, normalize_columns};
use crate::ssm::{chunked_scan, chunked_scan_with, cumulative_decay, SelectiveParams, SsmState};

/// Largest sequence the verifier will materialize.
pub const MAX_DENSE_LEN: usize = 1024;
/// Relative singular-value threshold for numerical rank.
pub const RANK_TOL: f64 = 1e-10;

/// Indices of the boundary rotations composed by `𝒵(c_from, c_to)`, in order.
pub fn trail_factors(c_from: usize, c_to: usize) -> Result<Vec<usize>> {
    ensure!(c_from <= c_to, "rotation trail needs c_from <= c_to, got {c_from} > {c_to}");
    Ok((c_from..c_to).collect())
}

/// `𝒵(c_from, c_to)` for `n x n` boundary rotations.
pub fn z_trail(rotations: &[Vec<f64>], n: usize, c_from: usize, c_to: usize) -> Result<Vec<f64>> {
    let factors = trail_factors(c_from, c_to)?;
    ensure!(
        c_to <= rotations.len(),
        "trail to chunk {c_to} needs {c_to} rotations, have {}",
        rotations.len()
    );
    let mut z = identity(n);
    for i in factors {
        ensure!(rotations[i].len() == n * n, "rotation {i} is not {n}x{n}");
        z = matmul(&z, &rotations[i], n, n, n);
    }
    Ok(z)
}

/// Dense `T x T` transfer matrix with its chunk grid.
#[derive(Clone, Debug)]
pub struct TransferMatrix {
    pub len: usize,
    pub chunk: usize,
    pub state_dim: usize,
    /// Row-major `T x T`.
    pub m: Vec<f64>,
}

impl TransferMatrix {
    pub fn chunks(&self) -> usize {
        self.len.div_ceil(self.chunk)
    }

    fn span(&self, c: usize) -> std::ops::Range<usize> {
        c * self.chunk..((c + 1) * self.chunk).min(self.len)
    }

    /// Block `(c, c')` as a row-major matrix.
    pub fn block(&self, c: usize, c2: usize) -> DMatrix<f64> {
        let (rows, cols) = (self.span(c), self.span(c2));
        DMatrix::from_fn(rows.len(), cols.len(), |i, j| self.m[(rows.start + i) * self.len + cols.start + j])
    }

    /// `M x`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.len)
            .map(|t| (0..self.len).map(|s| self.m[t * self.len + s] * x[s]).sum())
            .collect()
    }

    /// True when every entry above the block diagonal is exactly zero.
    pub fn is_block_lower_triangular(&self) -> bool {
        (0..self.chunks()).all(|c| (c + 1..self.chunks()).all(|c2| self.block(c, c2).iter().all(|&v| v == 0.0)))
    }

    /// Numerical rank of every strictly-lower block, as `((c, c'), rank)`.
    pub fn off_diagonal_ranks(&self) -> Vec<((usize, usize), usize)> {
        let mut out = Vec::new();
        for c in 0..self.chunks() {
            for c2 in 0..c {
                out.push(((c, c2), numerical_rank(&self.block(c, c2), RANK_TOL)));
            }
        }
        out
    }
}

/// Number of singular values above `rel_tol · σ_max`.
pub fn numerical_rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.singular_values();
    let smax = sv.iter().copied().fold(0.0, f64::max);
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * smax).count()
}

fn check_single_channel(sel: &SelectiveParams<f64>, a: f64) -> Result<()> {
    ensure!(sel.heads == 1, "transfer matrix is defined per head; got {} heads", sel.heads);
    ensure!(sel.len <= MAX_DENSE_LEN, "T = {} exceeds the dense limit {MAX_DENSE_LEN}", sel.len);
    ensure!(a < 0.0, "decay rate must be negative");
    Ok(())
}

/// Per-frame decays `exp(Δ_t A)`.
pub fn decays(sel: &SelectiveParams<f64>, a: f64) -> Vec<f64> {
    sel.delta.iter().map(|d| (d * a).exp()).collect()
}

/// Materializes `M` for one head with scalar decay rate `a` and
/// `ceil(T / chunk) - 1` boundary rotations.
pub fn build_transfer_matrix(sel: &SelectiveParams<f64>, a: f64, rotations: &[Vec<f64>], chunk: usize) -> Result<TransferMatrix> {
    check_single_channel(sel, a)?;
    ensure!(chunk >= 1, "chunk size must be positive");
    let (t_len, n) = (sel.len, sel.state_dim);
    let n_c = t_len.div_ceil(chunk);
    ensure!(
        rotations.len() + 1 >= n_c,
        "{n_c} chunks need {} boundary rotations, got {}",
        n_c.saturating_sub(1),
        rotations.len()
    );
    let a_bars = decays(sel, a);
    let mut m = vec![0.0; t_len * t_len];
    for c in 0..n_c {
        for c2 in 0..=c {
            let z = z_trail(rotations, n, c2, c)?;
            for t in c * chunk..((c + 1) * chunk).min(t_len) {
                // z · C_t
                let zc = matmul(&z, sel.c_row(t), n, n, 1);
                for s in c2 * chunk..((c2 + 1) * chunk).min(t_len).min(t + 1) {
                    let bz: f64 = sel.b_row(s).iter().zip(&zc).map(|(b, v)| b * v).sum();
                    m[t * t_len + s] = cumulative_decay(&a_bars, t, s)? * sel.delta[s] * bz;
                }
            }
        }
    }
    Ok(TransferMatrix {
        len: t_len,
        chunk,
        state_dim: n,
        m,
    })
}

/// Chunked scan from a zero state with `h ← h Z^(c)` after chunk `c`.
pub fn scan_with_rotations(x: &[f64], sel: &SelectiveParams<f64>, a: f64, rotations: &[Vec<f64>], chunk: usize) -> Result<Vec<f64>> {
    let n = sel.state_dim;
    let h0 = SsmState::zeros(1, 1, n);
    let out = chunked_scan_with(x, sel, &[a], &h0, chunk, |c, _, _, h| {
        if let Some(z) = rotations.get(c) {
            let rotated = matmul(h.data(), z, 1, n, n);
            h.data_mut().copy_from_slice(&rotated);
        }
        Ok(())
    })?;
    Ok(out.y)
}

/// `max_t |y_scan(t) − (M x)(t)|`.
pub fn verify_scan_vs_matrix(x: &[f64], sel: &SelectiveParams<f64>, a: f64, rotations: &[Vec<f64>], chunk: usize) -> Result<f64> {
    let m = build_transfer_matrix(sel, a, rotations, chunk)?;
    let y = scan_with_rotations(x, sel, a, rotations, chunk)?;
    Ok(y.iter().zip(m.apply(x)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
}

/// Output change under the two rotations of the equivariance pair:
/// `(joint, state_only)` where *joint* maps `h0 → h0 Q`, `B → Qᵀ B`,
/// `C → Qᵀ C` and *state_only* maps `h0 → h0 Q` alone.
pub fn equivariance_pair(x: &[f64], sel: &SelectiveParams<f64>, a: &[f64], h0: &SsmState<f64>, q: &[f64], chunk: usize) -> Result<(f64, f64)> {
    let n = sel.state_dim;
    ensure!(q.len() == n * n, "Q must be {n}x{n}");
    let rotate_rows = |rows: &[f64], m: &[f64]| -> Vec<f64> {
        rows.chunks(n).flat_map(|r| matmul(r, m, 1, n, n)).collect()
    };
    let base = chunked_scan(x, sel, a, h0, chunk)?.y;
    let h_rot = SsmState::from_vec(h0.heads(), h0.head_dim(), n, rotate_rows(h0.data(), q))?;
    // Qᵀ v as a row vector is vᵀ Q
    let sel_rot = SelectiveParams::new(sel.len, sel.heads, n, sel.delta.clone(), rotate_rows(&sel.b, q), rotate_rows(&sel.c, q))?;
    let joint = chunked_scan(x, &sel_rot, a, &h_rot, chunk)?.y;
    let state_only = chunked_scan(x, sel, a, &h_rot, chunk)?.y;
    let diff = |y: &[f64]| y.iter().zip(&base).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    Ok((diff(&joint), diff(&state_only)))
}

/// Random orthogonal `n x n` matrix (QR of a Gaussian matrix, sign-fixed).
pub fn random_orthogonal(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = q[(i, j)];
        }
    }
    out
}

/// Random Cayley rotation with `r` planes and angles `θ ∈ [0.2, 2)`.
pub fn random_cayley(n: usize, r: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let u: Vec<f64> = (0..n * r).map(|_| rng.sample(StandardNormal)).collect();
    let v: Vec<f64> = (0..n * r).map(|_| rng.sample(StandardNormal)).collect();
    let theta: Vec<f64> = (0..r).map(|_| rng.random_range(0.2..2.0)).collect();
    cayley_rotation(&normalize_columns(&u, 1, n, r), &normalize_columns(&v, 1, n, r), &theta, 1, n, r)
}

/// A random single-head instance: `(x, sel, a, rotations)`.
pub type Instance = (Vec<f64>, SelectiveParams<f64>, f64, Vec<Vec<f64>>);

pub fn random_instance(seed: u64, len: usize, chunk: usize, n: usize) -> Result<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
    let delta: Vec<f64> = (0..len).map(|_| rng.random_range(0.05..0.6)).collect();
    let b: Vec<f64> = (0..len * n).map(|_| rng.sample(StandardNormal)).collect();
    let c: Vec<f64> = (0..len * n).map(|_| rng.sample(StandardNormal)).collect();
    let a = -rng.random_range(0.1..1.0);
    let sel = SelectiveParams::new(len, 1, n, delta, b, c)?;
    let rots = (0..len.div_ceil(chunk).saturating_sub(1))
        .map(|_| random_cayley(n, (n / 2).max(1), &mut rng))
        .collect::<Result<_>>()?;
    Ok((x, sel, a, rots))
}

/// `‖AB − BA‖_F`.
pub fn commutator_norm(a: &[f64], b: &[f64], n: usize) -> f64 {
    let ab = matmul(a, b, n, n, n);
    let ba = matmul(b, a, n, n, n);
    ab.iter().zip(&ba).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Largest orthogonality defect over all trails `𝒵(c', c)`.
pub fn max_trail_defect(rotations: &[Vec<f64>], n: usize) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for c in 0..=rotations.len() {
        for c2 in 0..=c {
            worst = worst.max(orthogonality_defect(&z_trail(rotations, n, c2, c)?, n));
        }
    }
    Ok(worst)
}

/// `Qᵀ` helper re-exported for callers building rotated instances.
pub fn transpose_square(q: &[f64], n: usize) -> Vec<f64> {
    transpose(q, n, n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssm::recurrent_scan;

    #[test]
    fn trail_identity_and_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rots: Vec<Vec<f64>> = (0..3).map(|_| random_cayley(4, 2, &mut rng).unwrap()).collect();
        assert_eq!(z_trail(&rots, 4, 2, 2).unwrap(), identity::<f64>(4));
        assert_eq!(z_trail(&rots, 4, 0, 2).unwrap(), matmul(&rots[0], &rots[1], 4, 4, 4));
        assert!(z_trail(&rots, 4, 2, 1).is_err());
        assert_eq!(trail_factors(0, 3).unwrap(), vec![0, 1, 2]);
        assert!(max_trail_defect(&rots, 4).unwrap() < 1e-12);
        assert!(commutator_norm(&rots[0], &rots[1], 4) > 1e-3);
    }

    #[test]
    fn rotation_free_matrix_is_plain_ssd() {
        let (x, sel, a, rots) = random_instance(2, 24, 8, 4).unwrap();
        let eye: Vec<Vec<f64>> = rots.iter().map(|_| identity(4)).collect();
        let m = build_transfer_matrix(&sel, a, &eye, 8).unwrap();
        let a_bars = decays(&sel, a);
        for t in 0..24 {
            for s in 0..=t {
                let cb: f64 = sel.b_row(s).iter().zip(sel.c_row(t)).map(|(p, q)| p * q).sum();
                let expect = cumulative_decay(&a_bars, t, s).unwrap() * sel.delta[s] * cb;
                assert!((m.m[t * 24 + s] - expect).abs() < 1e-14);
            }
        }
        let (y, _) = recurrent_scan(&x, &sel, &[a], &SsmState::zeros(1, 1, 4)).unwrap();
        let my = m.apply(&x);
        assert!(y.iter().zip(&my).all(|(p, q)| (p - q).abs() < 1e-10));
        assert!(m.is_block_lower_triangular());
    }

    #[test]
    fn scan_with_regram_matches_matrix() {
        for seed in 0..10 {
            let (x, sel, a, rots) = random_instance(seed, 32, 8, 4).unwrap();
            assert!(verify_scan_vs_matrix(&x, &sel, a, &rots, 8).unwrap() < 1e-8);
        }
    }

    #[test]
    fn chunk_zero_input_read_at_chunk_three() {
        let (mut x, sel, a, rots) = random_instance(7, 32, 8, 4).unwrap();
        x[8..].iter_mut().for_each(|v| *v = 0.0);
        let y = scan_with_rotations(&x, &sel, a, &rots, 8).unwrap();
        let z = matmul(&matmul(&rots[0], &rots[1], 4, 4, 4), &rots[2], 4, 4, 4);
        let a_bars = decays(&sel, a);
        for t in 24..32 {
            let zc = matmul(&z, sel.c_row(t), 4, 4, 1);
            let expect: f64 = (0..8)
                .map(|s| {
                    let bz: f64 = sel.b_row(s).iter().zip(&zc).map(|(p, q)| p * q).sum();
                    cumulative_decay(&a_bars, t, s).unwrap() * sel.delta[s] * x[s] * bz
                })
                .sum();
            assert!((y[t] - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn off_diagonal_rank_bound() {
        let (_, sel, a, rots) = random_instance(3, 48, 16, 4).unwrap();
        let m = build_transfer_matrix(&sel, a, &rots, 16).unwrap();
        for (_, r) in m.off_diagonal_ranks() {
            assert!(r <= 4);
        }
        assert_eq!(numerical_rank(&m.block(0, 0), RANK_TOL), 16);
    }

    #[test]
    fn equivariance_pair_on_multi_head_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (h, p, n, t) = (2, 3, 4, 20);
        let x: Vec<f64> = (0..t * h * p).map(|_| rng.sample(StandardNormal)).collect();
        let sel = SelectiveParams::new(
            t,
            h,
            n,
            (0..t * h).map(|_| rng.random_range(0.05..0.5)).collect(),
            (0..t * n).map(|_| rng.sample(StandardNormal)).collect(),
            (0..t * n).map(|_| rng.sample(StandardNormal)).collect(),
        )
        .unwrap();
        let h0 = SsmState::from_vec(h, p, n, (0..h * p * n).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
        let q = random_orthogonal(n, &mut rng);
        assert!(orthogonality_defect(&q, n) < 1e-12);
        let (joint, state_only) = equivariance_pair(&x, &sel, &[-0.3, -0.7], &h0, &q, 8).unwrap();
        assert!(joint < 1e-10, "{joint}");
        assert!(state_only > 1e-3);
    }

    #[test]
    fn dense_limit_is_enforced() {
        let sel = SelectiveParams::new(1025, 1, 1, vec![0.1; 1025], vec![1.0; 1025], vec![1.0; 1025]).unwrap();
        assert!(build_transfer_matrix(&sel, -0.5, &[], 2000).is_err());
    }
}
