//! Per-chunk state regramming.
//!
//! At the end of every chunk the per-head outputs are mean-pooled and
//! layer-normalized into a summary `φ`. Two per-head MLPs map `φ` to `r`
//! rotation planes `(U, V)` and angles `θ ≥ 0`; the low-rank generator
//! `S = U diag(θ) Vᵀ − V diag(θ) Uᵀ` is skew-symmetric by construction and its
//! Cayley image `Z = (I − S/2)⁻¹ (I + S/2)` is orthogonal. The carried state is
//! rotated head-wise, `h ← h Z`, which preserves its Frobenius norm.

use crate::error::{ensure, Error, Result};
use crate::linalg::{self, Lu};
use crate::real::{silu, softplus, Real};
use crate::ssm::SsmState;

/// Variance epsilon of the chunk-summary layer norm.
pub const LN_EPS: f64 = 1e-5;
/// Offset added to every plane-vector entry before column normalization.
pub const COLUMN_EPS: f64 = 1e-8;

/// Per-head chunk descriptor `φ`, `heads x head_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkSummary<F> {
    pub heads: usize,
    pub head_dim: usize,
    pub phi: Vec<F>,
}

/// Layer norm over consecutive groups of `group` values with a shared affine.
/// Returns `(output, normalized, inverse std per group)`.
pub fn layer_norm_groups<F: Real>(x: &[F], group: usize, gamma: &[F], beta: &[F]) -> (Vec<F>, Vec<F>, Vec<F>) {
    assert_eq!(x.len() % group, 0);
    assert_eq!(gamma.len(), group);
    assert_eq!(beta.len(), group);
    let groups = x.len() / group;
    let gf = F::from_usize(group).unwrap();
    let mut out = vec![F::zero(); x.len()];
    let mut xhat = vec![F::zero(); x.len()];
    let mut inv_std = vec![F::zero(); groups];
    for g in 0..groups {
        let seg = &x[g * group..(g + 1) * group];
        let mean = seg.iter().copied().sum::<F>() / gf;
        let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / gf;
        let inv = F::one() / (var + F::lit(LN_EPS)).sqrt();
        inv_std[g] = inv;
        for i in 0..group {
            let xh = (seg[i] - mean) * inv;
            xhat[g * group + i] = xh;
            out[g * group + i] = xh * gamma[i] + beta[i];
        }
    }
    (out, xhat, inv_std)
}

/// `φ = LN_P(mean over frames)` for a chunk given as `rows x (heads·head_dim)`.
pub fn chunk_summary<F: Real>(
    y_chunk: &[F],
    rows: usize,
    heads: usize,
    head_dim: usize,
    gamma: &[F],
    beta: &[F],
) -> Result<ChunkSummary<F>> {
    ensure!(rows >= 1, "chunk summary needs at least one frame");
    let width = heads * head_dim;
    ensure!(
        y_chunk.len() == rows * width,
        "chunk has {} values, expected {rows}x{width}",
        y_chunk.len()
    );
    ensure!(
        gamma.len() == head_dim && beta.len() == head_dim,
        "layer-norm affine must have {head_dim} entries"
    );
    let mut mean = vec![F::zero(); width];
    for t in 0..rows {
        for (m, &v) in mean.iter_mut().zip(&y_chunk[t * width..(t + 1) * width]) {
            *m = *m + v;
        }
    }
    let rf = F::from_usize(rows).unwrap();
    mean.iter_mut().for_each(|m| *m = *m / rf);
    let (phi, _, _) = layer_norm_groups(&mean, head_dim, gamma, beta);
    Ok(ChunkSummary { heads, head_dim, phi })
}

/// `out[h] = x[h] · w[h] + b[h]` for per-head weights `w: heads x in x out`.
pub fn head_linear<F: Real>(x: &[F], w: &[F], b: &[F], heads: usize, input: usize, output: usize) -> Vec<F> {
    assert_eq!(x.len(), heads * input);
    assert_eq!(w.len(), heads * input * output);
    assert_eq!(b.len(), heads * output);
    let mut out = b.to_vec();
    for h in 0..heads {
        let dst = &mut out[h * output..(h + 1) * output];
        for i in 0..input {
            let xv = x[h * input + i];
            if xv == F::zero() {
                continue;
            }
            let row = &w[(h * input + i) * output..(h * input + i + 1) * output];
            for (d, &wv) in dst.iter_mut().zip(row) {
                *d = *d + xv * wv;
            }
        }
    }
    out
}

/// Per-head plane and angle MLPs of one path.
///
/// Each MLP is `Linear(P → hidden) → SiLU → Linear(hidden → out)` with
/// independent weights per head; the plane MLP emits `2·N·r` values (`U` then
/// `V`, each `N x r` row-major), the angle MLP emits `r` pre-softplus angles.
#[derive(Clone, Debug, PartialEq)]
pub struct RegramMlp<F> {
    pub heads: usize,
    pub input_dim: usize,
    pub hidden: usize,
    pub state_dim: usize,
    pub rank: usize,
    pub ln_gamma: Vec<F>,
    pub ln_beta: Vec<F>,
    pub uv_w1: Vec<F>,
    pub uv_b1: Vec<F>,
    pub uv_w2: Vec<F>,
    pub uv_b2: Vec<F>,
    pub th_w1: Vec<F>,
    pub th_b1: Vec<F>,
    pub th_w2: Vec<F>,
    pub th_b2: Vec<F>,
}

impl<F: Real> RegramMlp<F> {
    pub fn zeros(heads: usize, input_dim: usize, hidden: usize, state_dim: usize, rank: usize) -> Self {
        let nr2 = 2 * state_dim * rank;
        RegramMlp {
            heads,
            input_dim,
            hidden,
            state_dim,
            rank,
            ln_gamma: vec![F::one(); input_dim],
            ln_beta: vec![F::zero(); input_dim],
            uv_w1: vec![F::zero(); heads * input_dim * hidden],
            uv_b1: vec![F::zero(); heads * hidden],
            uv_w2: vec![F::zero(); heads * hidden * nr2],
            uv_b2: vec![F::zero(); heads * nr2],
            th_w1: vec![F::zero(); heads * input_dim * hidden],
            th_b1: vec![F::zero(); heads * hidden],
            th_w2: vec![F::zero(); heads * hidden * rank],
            th_b2: vec![F::zero(); heads * rank],
        }
    }
}

/// Plane vectors and angles before the Cayley map.
#[derive(Clone, Debug, PartialEq)]
pub struct RotationGenerators<F> {
    pub heads: usize,
    pub state_dim: usize,
    pub rank: usize,
    /// `heads x N x r`, unit columns
    pub u: Vec<F>,
    pub v: Vec<F>,
    /// `heads x r`, non-negative
    pub theta: Vec<F>,
}

/// Adds [`COLUMN_EPS`] to every entry, then scales each column of every
/// `N x r` head block to unit length.
pub fn normalize_columns<F: Real>(raw: &[F], heads: usize, n: usize, r: usize) -> Vec<F> {
    assert_eq!(raw.len(), heads * n * r);
    let eps = F::lit(COLUMN_EPS);
    let mut out: Vec<F> = raw.iter().map(|&v| v + eps).collect();
    for h in 0..heads {
        let blk = &mut out[h * n * r..(h + 1) * n * r];
        for j in 0..r {
            let norm = (0..n).map(|i| blk[i * r + j] * blk[i * r + j]).sum::<F>().sqrt();
            for i in 0..n {
                blk[i * r + j] = blk[i * r + j] / norm;
            }
        }
    }
    out
}

/// Adjoint of [`normalize_columns`].
pub fn normalize_columns_backward<F: Real>(raw: &[F], grad_out: &[F], heads: usize, n: usize, r: usize) -> Vec<F> {
    let eps = F::lit(COLUMN_EPS);
    let mut grad = vec![F::zero(); raw.len()];
    for h in 0..heads {
        let off = h * n * r;
        for j in 0..r {
            let norm = (0..n)
                .map(|i| {
                    let v = raw[off + i * r + j] + eps;
                    v * v
                })
                .sum::<F>()
                .sqrt();
            let dot = (0..n)
                .map(|i| (raw[off + i * r + j] + eps) / norm * grad_out[off + i * r + j])
                .sum::<F>();
            for i in 0..n {
                let w = (raw[off + i * r + j] + eps) / norm;
                grad[off + i * r + j] = (grad_out[off + i * r + j] - w * dot) / norm;
            }
        }
    }
    grad
}

fn mlp2<F: Real>(x: &[F], w1: &[F], b1: &[F], w2: &[F], b2: &[F], heads: usize, input: usize, hidden: usize, out: usize) -> Vec<F> {
    let mut a = head_linear(x, w1, b1, heads, input, hidden);
    a.iter_mut().for_each(|v| *v = silu(*v));
    head_linear(&a, w2, b2, heads, hidden, out)
}

/// Maps a chunk summary to unit-column planes and non-negative angles.
pub fn predict_planes<F: Real>(phi: &ChunkSummary<F>, mlp: &RegramMlp<F>) -> Result<RotationGenerators<F>> {
    ensure!(
        phi.heads == mlp.heads && phi.head_dim == mlp.input_dim,
        "summary {}x{} does not match MLP {}x{}",
        phi.heads,
        phi.head_dim,
        mlp.heads,
        mlp.input_dim
    );
    if phi.phi.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("chunk summary must be finite"));
    }
    let (h, p, hid, n, r) = (mlp.heads, mlp.input_dim, mlp.hidden, mlp.state_dim, mlp.rank);
    let uv = mlp2(&phi.phi, &mlp.uv_w1, &mlp.uv_b1, &mlp.uv_w2, &mlp.uv_b2, h, p, hid, 2 * n * r);
    let mut u_raw = Vec::with_capacity(h * n * r);
    let mut v_raw = Vec::with_capacity(h * n * r);
    for head in 0..h {
        let blk = &uv[head * 2 * n * r..(head + 1) * 2 * n * r];
        u_raw.extend_from_slice(&blk[..n * r]);
        v_raw.extend_from_slice(&blk[n * r..]);
    }
    let th = mlp2(&phi.phi, &mlp.th_w1, &mlp.th_b1, &mlp.th_w2, &mlp.th_b2, h, p, hid, r);
    Ok(RotationGenerators {
        heads: h,
        state_dim: n,
        rank: r,
        u: normalize_columns(&u_raw, h, n, r),
        v: normalize_columns(&v_raw, h, n, r),
        theta: th.into_iter().map(softplus).collect(),
    })
}

/// `S = U diag(θ) Vᵀ − V diag(θ) Uᵀ` per head (`heads x N x N`).
pub fn skew_generator<F: Real>(u: &[F], v: &[F], theta: &[F], heads: usize, n: usize, r: usize) -> Vec<F> {
    let mut s = vec![F::zero(); heads * n * n];
    for h in 0..heads {
        let (ub, vb) = (&u[h * n * r..(h + 1) * n * r], &v[h * n * r..(h + 1) * n * r]);
        let th = &theta[h * r..(h + 1) * r];
        let blk = &mut s[h * n * n..(h + 1) * n * n];
        for i in 0..n {
            for k in i + 1..n {
                let mut acc = F::zero();
                for j in 0..r {
                    acc = acc + th[j] * (ub[i * r + j] * vb[k * r + j] - vb[i * r + j] * ub[k * r + j]);
                }
                // exact antisymmetry: S[k,i] is the negation of the same sum
                blk[i * n + k] = acc;
                blk[k * n + i] = -acc;
            }
        }
    }
    s
}

/// Cayley map of the low-rank skew generator, one `N x N` matrix per head,
/// computed by solving `(I − S/2) Z = (I + S/2)`.
pub fn cayley_rotation<F: Real>(u: &[F], v: &[F], theta: &[F], heads: usize, n: usize, r: usize) -> Result<Vec<F>> {
    ensure!(
        u.len() == heads * n * r && v.len() == heads * n * r && theta.len() == heads * r,
        "plane/angle shapes do not match {heads}x{n}x{r}"
    );
    if u.iter().chain(v).chain(theta).any(|x| !x.is_finite()) {
        return Err(Error::contract("rotation generators must be finite"));
    }
    let s = skew_generator(u, v, theta, heads, n, r);
    let half = F::lit(0.5);
    let mut z = Vec::with_capacity(heads * n * n);
    for h in 0..heads {
        let sb = &s[h * n * n..(h + 1) * n * n];
        let mut lhs = linalg::identity::<F>(n);
        let mut rhs = linalg::identity::<F>(n);
        for i in 0..n * n {
            lhs[i] = lhs[i] - half * sb[i];
            rhs[i] = rhs[i] + half * sb[i];
        }
        let lu = Lu::factor(n, lhs)?;
        z.extend(lu.solve(&rhs, n));
    }
    Ok(z)
}

/// Gradients of the Cayley map inputs.
#[derive(Clone, Debug)]
pub struct CayleyGrads<F> {
    pub u: Vec<F>,
    pub v: Vec<F>,
    pub theta: Vec<F>,
}

/// Adjoint of [`cayley_rotation`] through the linear solve.
#[allow(clippy::too_many_arguments)]
pub fn cayley_backward<F: Real>(
    u: &[F],
    v: &[F],
    theta: &[F],
    z: &[F],
    dz: &[F],
    heads: usize,
    n: usize,
    r: usize,
) -> Result<CayleyGrads<F>> {
    let s = skew_generator(u, v, theta, heads, n, r);
    let half = F::lit(0.5);
    let mut grads = CayleyGrads {
        u: vec![F::zero(); u.len()],
        v: vec![F::zero(); v.len()],
        theta: vec![F::zero(); theta.len()],
    };
    for h in 0..heads {
        let sb = &s[h * n * n..(h + 1) * n * n];
        let zb = &z[h * n * n..(h + 1) * n * n];
        let dzb = &dz[h * n * n..(h + 1) * n * n];
        let mut lhs = linalg::identity::<F>(n);
        for i in 0..n * n {
            lhs[i] = lhs[i] - half * sb[i];
        }
        let lu = Lu::factor(n, lhs)?;
        // dQ = M⁻ᵀ dZ ;  dM = −dQ Zᵀ ;  dS = (dQ − dM)/2
        let dq = lu.solve_transposed(dzb, n);
        let zt = linalg::transpose(zb, n, n);
        let dq_zt = linalg::matmul(&dq, &zt, n, n, n);
        let ds: Vec<F> = dq.iter().zip(&dq_zt).map(|(&a, &b)| half * (a + b)).collect();
        // A = dS − dSᵀ
        let mut anti = vec![F::zero(); n * n];
        for i in 0..n {
            for k in 0..n {
                anti[i * n + k] = ds[i * n + k] - ds[k * n + i];
            }
        }
        let (ub, vb) = (&u[h * n * r..(h + 1) * n * r], &v[h * n * r..(h + 1) * n * r]);
        let th = &theta[h * r..(h + 1) * r];
        let av = linalg::matmul(&anti, vb, n, n, r);
        let au = linalg::matmul(&anti, ub, n, n, r);
        for i in 0..n {
            for j in 0..r {
                grads.u[h * n * r + i * r + j] = av[i * r + j] * th[j];
                grads.v[h * n * r + i * r + j] = -au[i * r + j] * th[j];
            }
        }
        for j in 0..r {
            grads.theta[h * r + j] = (0..n).map(|i| ub[i * r + j] * av[i * r + j]).sum();
        }
    }
    Ok(grads)
}

/// Generators and Cayley image for one chunk boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct RotationOp<F> {
    pub heads: usize,
    pub state_dim: usize,
    pub rank: usize,
    pub u: Vec<F>,
    pub v: Vec<F>,
    pub theta: Vec<F>,
    /// `heads x N x N`
    pub z: Vec<F>,
}

impl<F: Real> RotationOp<F> {
    pub fn from_generators(g: RotationGenerators<F>) -> Result<Self> {
        let z = cayley_rotation(&g.u, &g.v, &g.theta, g.heads, g.state_dim, g.rank)?;
        Ok(RotationOp {
            heads: g.heads,
            state_dim: g.state_dim,
            rank: g.rank,
            u: g.u,
            v: g.v,
            theta: g.theta,
            z,
        })
    }

    pub fn head_z(&self, h: usize) -> &[F] {
        let nn = self.state_dim * self.state_dim;
        &self.z[h * nn..(h + 1) * nn]
    }
}

/// `h' = h Z` per head.
pub fn rotate_state_in_place<F: Real>(state: &mut [F], z: &[F], heads: usize, p: usize, n: usize) {
    let mut row = vec![F::zero(); n];
    for h in 0..heads {
        let zb = &z[h * n * n..(h + 1) * n * n];
        for pp in 0..p {
            let off = h * p * n + pp * n;
            row.iter_mut().for_each(|v| *v = F::zero());
            for k in 0..n {
                let hv = state[off + k];
                if hv == F::zero() {
                    continue;
                }
                let zr = &zb[k * n..(k + 1) * n];
                for (o, &zv) in row.iter_mut().zip(zr) {
                    *o = *o + hv * zv;
                }
            }
            state[off..off + n].copy_from_slice(&row);
        }
    }
}

pub fn apply_regram<F: Real>(h: &SsmState<F>, op: &RotationOp<F>) -> Result<SsmState<F>> {
    ensure!(
        h.heads() == op.heads && h.state_dim() == op.state_dim,
        "state {}x{}x{} does not match rotation {}x{}x{}",
        h.heads(),
        h.head_dim(),
        h.state_dim(),
        op.heads,
        op.state_dim,
        op.state_dim
    );
    let mut out = h.clone();
    rotate_state_in_place(out.data_mut(), &op.z, op.heads, h.head_dim(), op.state_dim);
    Ok(out)
}

/// Rotation magnitude `2·arctan(θ/2)` of one plane, in degrees.
pub fn plane_angle_degrees<F: Real>(theta: F) -> f64 {
    (2.0 * (theta.to_f64_lossy() / 2.0).atan()).to_degrees()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AngleStats {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RotationAnalytics {
    pub plane_cosine: f64,
    /// Per-head statistics of the plane angles of the first operator.
    pub angles_a: Vec<AngleStats>,
}

pub fn angle_stats<F: Real>(op: &RotationOp<F>) -> Vec<AngleStats> {
    (0..op.heads)
        .map(|h| {
            let angles: Vec<f64> = op.theta[h * op.rank..(h + 1) * op.rank]
                .iter()
                .map(|&t| plane_angle_degrees(t))
                .collect();
            AngleStats {
                min: angles.iter().copied().fold(f64::INFINITY, f64::min),
                mean: angles.iter().sum::<f64>() / angles.len() as f64,
                max: angles.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect()
}

fn plane_bases<F: Real>(op: &RotationOp<F>) -> Vec<Vec<Vec<f64>>> {
    let (n, r) = (op.state_dim, op.rank);
    (0..op.heads)
        .map(|h| {
            let mut cols = Vec::with_capacity(2 * r);
            for src in [&op.u, &op.v] {
                for j in 0..r {
                    cols.push((0..n).map(|i| src[h * n * r + i * r + j].to_f64_lossy()).collect());
                }
            }
            linalg::orthonormal_basis(&cols, n, 1e-10)
        })
        .collect()
}

/// Cosine similarity of the orthogonal projectors onto the plane spans of two
/// operators (block-diagonal over heads), together with per-head angle stats
/// of the first operator.
pub fn rotation_analytics<F: Real>(a: &RotationOp<F>, b: &RotationOp<F>) -> Result<RotationAnalytics> {
    ensure!(
        a.heads == b.heads && a.state_dim == b.state_dim && a.rank == b.rank,
        "rotation operators have different shapes"
    );
    let (qa, qb) = (plane_bases(a), plane_bases(b));
    let mut inner = 0.0;
    let (mut na, mut nb) = (0.0, 0.0);
    for (ba, bb) in qa.iter().zip(&qb) {
        na += ba.len() as f64;
        nb += bb.len() as f64;
        for x in ba {
            for y in bb {
                let d: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
                inner += d * d;
            }
        }
    }
    let plane_cosine = if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (inner / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
    };
    Ok(RotationAnalytics {
        plane_cosine,
        angles_a: angle_stats(a),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{determinant, orthogonality_defect};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_generators(rng: &mut ChaCha8Rng, heads: usize, n: usize, r: usize) -> RotationGenerators<f64> {
        let raw_u: Vec<f64> = (0..heads * n * r).map(|_| rng.random_range(-1.0..1.0)).collect();
        let raw_v: Vec<f64> = (0..heads * n * r).map(|_| rng.random_range(-1.0..1.0)).collect();
        RotationGenerators {
            heads,
            state_dim: n,
            rank: r,
            u: normalize_columns(&raw_u, heads, n, r),
            v: normalize_columns(&raw_v, heads, n, r),
            theta: (0..heads * r).map(|_| rng.random_range(0.0..3.0)).collect(),
        }
    }

    #[test]
    fn single_frame_summary_is_layer_norm_of_frame() {
        let y = [1.0f64, 2.0, 3.0, 4.0, -1.0, 0.0];
        let s = chunk_summary(&y, 1, 2, 3, &[1.0; 3], &[0.0; 3]).unwrap();
        let (want, _, _) = layer_norm_groups(&y, 3, &[1.0; 3], &[0.0; 3]);
        assert_eq!(s.phi, want);
        let m: f64 = s.phi[..3].iter().sum::<f64>() / 3.0;
        assert!(m.abs() < 1e-12);
    }

    #[test]
    fn constant_chunk_summarizes_to_zero() {
        let y: Vec<f64> = (0..5).flat_map(|_| [2.5, 2.5, 2.5, -1.0, -1.0, -1.0]).collect();
        let s = chunk_summary(&y, 5, 2, 3, &[1.0; 3], &[0.0; 3]).unwrap();
        assert!(s.phi.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn summary_pools_with_arithmetic_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (rows, heads, p) = (7, 3, 4);
        let y: Vec<f64> = (0..rows * heads * p).map(|_| rng.random_range(-2.0..2.0)).collect();
        let gamma: Vec<f64> = (0..p).map(|_| rng.random_range(0.5..1.5)).collect();
        let beta: Vec<f64> = (0..p).map(|_| rng.random_range(-0.5..0.5)).collect();
        let s = chunk_summary(&y, rows, heads, p, &gamma, &beta).unwrap();
        for h in 0..heads {
            let mean: Vec<f64> = (0..p)
                .map(|i| (0..rows).map(|t| y[t * heads * p + h * p + i]).sum::<f64>() / rows as f64)
                .collect();
            let mu = mean.iter().sum::<f64>() / p as f64;
            let var = mean.iter().map(|m| (m - mu).powi(2)).sum::<f64>() / p as f64;
            for i in 0..p {
                let want = (mean[i] - mu) / (var + LN_EPS).sqrt() * gamma[i] + beta[i];
                assert!((s.phi[h * p + i] - want).abs() < 1e-12);
            }
        }
        assert!(matches!(
            chunk_summary::<f64>(&[], 0, heads, p, &gamma, &beta),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn predicted_planes_are_unit_columns_with_nonnegative_angles() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let (h, p, n, r) = (2, 6, 5, 3);
        let mut mlp = RegramMlp::<f64>::zeros(h, p, p, n, r);
        for w in [&mut mlp.uv_w1, &mut mlp.uv_w2, &mut mlp.th_w1, &mut mlp.th_w2, &mut mlp.uv_b2] {
            w.iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
        }
        mlp.th_b2.iter_mut().for_each(|b| *b = -4.0);
        let phi = ChunkSummary {
            heads: h,
            head_dim: p,
            phi: (0..h * p).map(|_| rng.random_range(-2.0..2.0)).collect(),
        };
        let g = predict_planes(&phi, &mlp).unwrap();
        for src in [&g.u, &g.v] {
            for head in 0..h {
                for j in 0..r {
                    let norm: f64 = (0..n).map(|i| src[head * n * r + i * r + j].powi(2)).sum::<f64>().sqrt();
                    assert!((norm - 1.0).abs() < 1e-6);
                }
            }
        }
        assert!(g.theta.iter().all(|&t| t >= 0.0));
    }

    #[test]
    fn zero_column_is_regularized() {
        let out = normalize_columns(&[0.0f64; 4], 1, 4, 1);
        for v in out {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn angle_bias_gives_near_identity_angle() {
        let phi = ChunkSummary {
            heads: 1,
            head_dim: 2,
            phi: vec![0.3, -0.3],
        };
        let mut mlp = RegramMlp::<f64>::zeros(1, 2, 2, 4, 16);
        mlp.th_b2.iter_mut().for_each(|b| *b = -4.0);
        let g = predict_planes(&phi, &mlp).unwrap();
        assert_eq!(g.theta.len(), 16);
        for t in g.theta {
            assert!((t - 0.018149927917809).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_angle_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut g = random_generators(&mut rng, 2, 4, 2);
        g.theta.iter_mut().for_each(|t| *t = 0.0);
        let z = cayley_rotation(&g.u, &g.v, &g.theta, 2, 4, 2).unwrap();
        for h in 0..2 {
            assert_eq!(&z[h * 16..(h + 1) * 16], linalg::identity::<f64>(4).as_slice());
        }
    }

    #[test]
    fn planar_cayley_closed_form() {
        let z = cayley_rotation(&[1.0f64, 0.0], &[0.0, 1.0], &[2.0], 1, 2, 1).unwrap();
        let s = skew_generator(&[1.0f64, 0.0], &[0.0, 1.0], &[2.0], 1, 2, 1);
        assert_eq!(s, vec![0.0, 2.0, -2.0, 0.0]);
        let want = [0.0, 1.0, -1.0, 0.0];
        for (a, b) in z.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((plane_angle_degrees(2.0f64) - 90.0).abs() < 1e-12);
    }

    #[test]
    fn random_cayley_images_are_special_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        for _ in 0..50 {
            let g = random_generators(&mut rng, 2, 8, 3);
            let s = skew_generator(&g.u, &g.v, &g.theta, 2, 8, 3);
            for h in 0..2 {
                for i in 0..8 {
                    for k in 0..8 {
                        assert_eq!(s[h * 64 + i * 8 + k], -s[h * 64 + k * 8 + i]);
                    }
                }
            }
            let op = RotationOp::from_generators(g).unwrap();
            for h in 0..2 {
                assert!(orthogonality_defect(op.head_z(h), 8) < 1e-12);
                assert!((determinant(op.head_z(h), 8) - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn regram_preserves_norm_and_commutes_with_scalar_decay() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let op = RotationOp::from_generators(random_generators(&mut rng, 3, 6, 2)).unwrap();
        let h = SsmState::from_vec(3, 4, 6, (0..72).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let hz = apply_regram(&h, &op).unwrap();
        let rel = (hz.frobenius_norm() - h.frobenius_norm()).abs() / h.frobenius_norm();
        assert!(rel < 1e-12);
        let abar = 0.73;
        let mut decayed = h.clone();
        decayed.data_mut().iter_mut().for_each(|v| *v *= abar);
        let lhs = apply_regram(&decayed, &op).unwrap();
        for (l, r) in lhs.data().iter().zip(hz.data()) {
            assert!((l - abar * r).abs() < 1e-15);
        }
        let identity = RotationOp {
            z: (0..3).flat_map(|_| linalg::identity::<f64>(6)).collect(),
            ..op.clone()
        };
        assert_eq!(apply_regram(&h, &identity).unwrap(), h);
        let wrong = SsmState::<f64>::zeros(2, 4, 6);
        assert!(matches!(apply_regram(&wrong, &op), Err(Error::Contract(_))));
    }

    #[test]
    fn cayley_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let (h, n, r) = (2, 5, 2);
        let g = random_generators(&mut rng, h, n, r);
        let w: Vec<f64> = (0..h * n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |u: &[f64], v: &[f64], t: &[f64]| -> f64 {
            let z = cayley_rotation(u, v, t, h, n, r).unwrap();
            z.iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let z = cayley_rotation(&g.u, &g.v, &g.theta, h, n, r).unwrap();
        let grads = cayley_backward(&g.u, &g.v, &g.theta, &z, &w, h, n, r).unwrap();
        let mut inputs = [g.u.clone(), g.v.clone(), g.theta.clone()];
        let analytic = [&grads.u, &grads.v, &grads.theta];
        let eps = 1e-6;
        for k in 0..3 {
            for i in 0..inputs[k].len() {
                let orig = inputs[k][i];
                inputs[k][i] = orig + eps;
                let lp = loss(&inputs[0], &inputs[1], &inputs[2]);
                inputs[k][i] = orig - eps;
                let lm = loss(&inputs[0], &inputs[1], &inputs[2]);
                inputs[k][i] = orig;
                let fd = (lp - lm) / (2.0 * eps);
                let an = analytic[k][i];
                assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "{k}/{i}: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn normalize_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let (h, n, r) = (2, 4, 3);
        let raw: Vec<f64> = (0..h * n * r).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..h * n * r).map(|_| rng.random_range(-1.0..1.0)).collect();
        let grad = normalize_columns_backward(&raw, &w, h, n, r);
        let mut x = raw.clone();
        for i in 0..x.len() {
            let orig = x[i];
            x[i] = orig + 1e-6;
            let lp: f64 = normalize_columns(&x, h, n, r).iter().zip(&w).map(|(a, b)| a * b).sum();
            x[i] = orig - 1e-6;
            let lm: f64 = normalize_columns(&x, h, n, r).iter().zip(&w).map(|(a, b)| a * b).sum();
            x[i] = orig;
            assert!(((lp - lm) / 2e-6 - grad[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn plane_cosine_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let op = RotationOp::from_generators(random_generators(&mut rng, 2, 6, 2)).unwrap();
        let same = rotation_analytics(&op, &op).unwrap();
        assert!((same.plane_cosine - 1.0).abs() < 1e-12);

        // planes in span(e0, e1) versus span(e2, e3)
        let basis = |i: usize| -> Vec<f64> { (0..4).map(|k| if k == i { 1.0 } else { 0.0 }).collect() };
        let make = |a: usize, b: usize| RotationGenerators {
            heads: 1,
            state_dim: 4,
            rank: 1,
            u: basis(a),
            v: basis(b),
            theta: vec![2.0],
        };
        let pa = RotationOp::from_generators(make(0, 1)).unwrap();
        let pb = RotationOp::from_generators(make(2, 3)).unwrap();
        let res = rotation_analytics(&pa, &pb).unwrap();
        assert!(res.plane_cosine.abs() < 1e-15);
        assert!((res.angles_a[0].mean - 90.0).abs() < 1e-12);
        assert_eq!(res.angles_a[0].min, res.angles_a[0].max);
    }
}
