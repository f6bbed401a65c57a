//! Scalar-decay selective state-space recurrence.
//!
//! Per head `h` with scalar rate `A_h < 0` and per-frame step `Δ_{t,h} > 0`,
//! the zero-order-hold recurrence on a `P x N` state is
//!
//! ```text
//!   ā_{t,h} = exp(Δ_{t,h} · A_h)
//!   h_t     = ā_{t,h} · h_{t-1} + Δ_{t,h} · x_{t,h} ⊗ B_t
//!   y_{t,h} = h_t · C_t
//! ```
//!
//! `B_t` and `C_t` are `N`-vectors shared by every head. Two evaluation
//! orders are provided and agree to rounding: [`recurrent_scan`] steps one
//! frame at a time, [`chunked_scan`] evaluates each chunk with the
//! semiseparable block form and transfers only the `H x P x N` state
//! between chunks. [`chunked_scan_with`] exposes the chunk boundary so that
//! callers can rotate the state there.
//!
//! Layouts are row-major: `x`/`y` are `T x (H·P)`, `delta` is `T x H`,
//! `b`/`c` are `T x N`, states are `H x P x N`.

use std::ops::Range;

use crate::error::{ensure, Error, Result};
use crate::real::{silu, Real};

/// Zero-order-hold discretization of one scalar-decay head at one frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiscretizationParams<F> {
    pub a: F,
    pub delta: F,
    /// `exp(delta · a)`, in `(0, 1)`.
    pub a_bar: F,
    /// First-order input scale `delta` (the small-`|ΔA|` form of the ZOH input matrix).
    pub b_scale: F,
}

pub fn discretize<F: Real>(a: F, delta: F) -> Result<DiscretizationParams<F>> {
    if !(a < F::zero()) {
        return Err(Error::domain(format!("decay rate must be negative, got {a}")));
    }
    if !(delta > F::zero()) || !delta.is_finite() {
        return Err(Error::domain(format!("step must be positive, got {delta}")));
    }
    Ok(DiscretizationParams {
        a,
        delta,
        a_bar: (delta * a).exp(),
        b_scale: delta,
    })
}

/// Hidden state of one path: `heads x head_dim x state_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmState<F> {
    heads: usize,
    head_dim: usize,
    state_dim: usize,
    data: Vec<F>,
}

impl<F: Real> SsmState<F> {
    pub fn zeros(heads: usize, head_dim: usize, state_dim: usize) -> Self {
        SsmState {
            heads,
            head_dim,
            state_dim,
            data: vec![F::zero(); heads * head_dim * state_dim],
        }
    }

    pub fn from_vec(heads: usize, head_dim: usize, state_dim: usize, data: Vec<F>) -> Result<Self> {
        ensure!(
            data.len() == heads * head_dim * state_dim,
            "state data has {} entries, expected {heads}x{head_dim}x{state_dim}",
            data.len()
        );
        Ok(SsmState {
            heads,
            head_dim,
            state_dim,
            data,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<F> {
        self.data
    }

    /// The `P x N` block of one head.
    pub fn head(&self, h: usize) -> &[F] {
        let sz = self.head_dim * self.state_dim;
        &self.data[h * sz..(h + 1) * sz]
    }

    pub fn head_mut(&mut self, h: usize) -> &mut [F] {
        let sz = self.head_dim * self.state_dim;
        &mut self.data[h * sz..(h + 1) * sz]
    }

    pub fn frobenius_norm(&self) -> F {
        self.data.iter().map(|&v| v * v).sum::<F>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|v| *v = F::zero());
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.heads == other.heads && self.head_dim == other.head_dim && self.state_dim == other.state_dim
    }
}

/// Input-dependent step, write and read vectors for a sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectiveParams<F> {
    pub len: usize,
    pub heads: usize,
    pub state_dim: usize,
    /// `T x H`, strictly positive.
    pub delta: Vec<F>,
    /// `T x N` write vectors.
    pub b: Vec<F>,
    /// `T x N` read vectors.
    pub c: Vec<F>,
}

impl<F: Real> SelectiveParams<F> {
    pub fn new(len: usize, heads: usize, state_dim: usize, delta: Vec<F>, b: Vec<F>, c: Vec<F>) -> Result<Self> {
        let p = SelectiveParams {
            len,
            heads,
            state_dim,
            delta,
            b,
            c,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.delta.len() == self.len * self.heads,
            "delta has {} entries, expected {}x{}",
            self.delta.len(),
            self.len,
            self.heads
        );
        ensure!(
            self.b.len() == self.len * self.state_dim && self.c.len() == self.len * self.state_dim,
            "B/C must be {}x{}",
            self.len,
            self.state_dim
        );
        if let Some(bad) = self.delta.iter().find(|d| !(**d > F::zero()) || !d.is_finite()) {
            return Err(Error::domain(format!("delta must be positive and finite, found {bad}")));
        }
        ensure!(
            self.b.iter().chain(&self.c).all(|v| v.is_finite()),
            "B/C must be finite"
        );
        Ok(())
    }

    pub fn delta_row(&self, t: usize) -> &[F] {
        &self.delta[t * self.heads..(t + 1) * self.heads]
    }

    pub fn b_row(&self, t: usize) -> &[F] {
        &self.b[t * self.state_dim..(t + 1) * self.state_dim]
    }

    pub fn c_row(&self, t: usize) -> &[F] {
        &self.c[t * self.state_dim..(t + 1) * self.state_dim]
    }
}

fn check_scan_inputs<F: Real>(x: &[F], sel: &SelectiveParams<F>, a: &[F], h0: &SsmState<F>) -> Result<()> {
    sel.validate()?;
    ensure!(
        sel.heads == h0.heads && sel.state_dim == h0.state_dim,
        "selective params ({} heads, N={}) do not match state ({} heads, N={})",
        sel.heads,
        sel.state_dim,
        h0.heads,
        h0.state_dim
    );
    ensure!(a.len() == h0.heads, "expected {} decay rates, got {}", h0.heads, a.len());
    ensure!(
        x.len() == sel.len * h0.heads * h0.head_dim,
        "x has {} entries, expected {}x{}",
        x.len(),
        sel.len,
        h0.heads * h0.head_dim
    );
    ensure!(h0.is_finite(), "initial state must be finite");
    if let Some(bad) = a.iter().find(|v| !(**v < F::zero())) {
        return Err(Error::domain(format!("decay rates must be negative, found {bad}")));
    }
    Ok(())
}

/// One frame of the recurrence; writes `y_t` (`H·P`) and advances `state`.
pub fn recurrent_step<F: Real>(
    x_t: &[F],
    delta_t: &[F],
    a: &[F],
    b_t: &[F],
    c_t: &[F],
    state: &mut SsmState<F>,
    y_t: &mut [F],
) {
    let (p_dim, n_dim) = (state.head_dim, state.state_dim);
    for h in 0..state.heads {
        let a_bar = (delta_t[h] * a[h]).exp();
        let dt = delta_t[h];
        let hs = state.head_mut(h);
        for p in 0..p_dim {
            let xp = dt * x_t[h * p_dim + p];
            let row = &mut hs[p * n_dim..(p + 1) * n_dim];
            let mut acc = F::zero();
            for n in 0..n_dim {
                let v = a_bar * row[n] + xp * b_t[n];
                row[n] = v;
                acc = acc + v * c_t[n];
            }
            y_t[h * p_dim + p] = acc;
        }
    }
}

/// Frame-by-frame evaluation. Returns `(y, h_final)`.
pub fn recurrent_scan<F: Real>(
    x: &[F],
    sel: &SelectiveParams<F>,
    a: &[F],
    h0: &SsmState<F>,
) -> Result<(Vec<F>, SsmState<F>)> {
    check_scan_inputs(x, sel, a, h0)?;
    let width = h0.heads * h0.head_dim;
    let mut state = h0.clone();
    let mut y = vec![F::zero(); sel.len * width];
    for t in 0..sel.len {
        recurrent_step(
            &x[t * width..(t + 1) * width],
            sel.delta_row(t),
            a,
            sel.b_row(t),
            sel.c_row(t),
            &mut state,
            &mut y[t * width..(t + 1) * width],
        );
    }
    Ok((y, state))
}

/// Result of a chunked scan.
#[derive(Clone, Debug)]
pub struct ChunkedScan<F> {
    pub y: Vec<F>,
    /// State at each chunk's final frame, before any boundary hook ran.
    pub chunk_states: Vec<SsmState<F>>,
    /// State after the last chunk and its boundary hook.
    pub final_state: SsmState<F>,
}

/// Chunked evaluation; `chunk_size` need not divide `T` (the last chunk is
/// processed at its natural length).
pub fn chunked_scan<F: Real>(
    x: &[F],
    sel: &SelectiveParams<F>,
    a: &[F],
    h0: &SsmState<F>,
    chunk_size: usize,
) -> Result<ChunkedScan<F>> {
    chunked_scan_with(x, sel, a, h0, chunk_size, |_, _, _, _| Ok(()))
}

/// Chunked evaluation with a hook invoked at the end of every chunk with
/// `(chunk index, frame range, chunk outputs, state)`; the hook may modify the
/// state that enters the next chunk.
pub fn chunked_scan_with<F, H>(
    x: &[F],
    sel: &SelectiveParams<F>,
    a: &[F],
    h0: &SsmState<F>,
    chunk_size: usize,
    mut boundary: H,
) -> Result<ChunkedScan<F>>
where
    F: Real,
    H: FnMut(usize, Range<usize>, &[F], &mut SsmState<F>) -> Result<()>,
{
    ensure!(chunk_size >= 1, "chunk_size must be at least 1");
    check_scan_inputs(x, sel, a, h0)?;
    let (heads, p_dim, n_dim) = (h0.heads, h0.head_dim, h0.state_dim);
    let width = heads * p_dim;
    let mut y = vec![F::zero(); sel.len * width];
    let mut state = h0.clone();
    let mut next = h0.clone();
    let mut chunk_states = Vec::with_capacity(sel.len.div_ceil(chunk_size));
    let mut start = 0;
    let mut idx = 0;
    while start < sel.len {
        let end = (start + chunk_size).min(sel.len);
        let dims = ChunkDims {
            len: end - start,
            heads,
            head_dim: p_dim,
            state_dim: n_dim,
        };
        ssd_chunk_forward(
            dims,
            &x[start * width..end * width],
            &sel.delta[start * heads..end * heads],
            a,
            &sel.b[start * n_dim..end * n_dim],
            &sel.c[start * n_dim..end * n_dim],
            state.data(),
            &mut y[start * width..end * width],
            next.data_mut(),
        );
        std::mem::swap(&mut state, &mut next);
        chunk_states.push(state.clone());
        boundary(idx, start..end, &y[start * width..end * width], &mut state)?;
        start = end;
        idx += 1;
    }
    Ok(ChunkedScan {
        y,
        chunk_states,
        final_state: state,
    })
}

/// `a(t:s) = Π_{n=s+1..=t} ā_n`, with `a(t:t) = 1`.
pub fn cumulative_decay<F: Real>(a_bars: &[F], t: usize, s: usize) -> Result<F> {
    ensure!(s <= t, "cumulative decay needs s <= t (got s={s}, t={t})");
    ensure!(t < a_bars.len(), "index t={t} out of range for length {}", a_bars.len());
    Ok(a_bars[s + 1..=t].iter().fold(F::one(), |acc, &v| acc * v))
}

/// Sizes of one chunk of the block scan.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChunkDims {
    pub len: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub state_dim: usize,
}

fn log_decay_prefix<F: Real>(dims: ChunkDims, delta: &[F], a: F, h: usize, out: &mut [F]) {
    let mut acc = F::zero();
    for t in 0..dims.len {
        acc = acc + delta[t * dims.heads + h] * a;
        out[t] = acc;
    }
}

fn gram_cb<F: Real>(dims: ChunkDims, b: &[F], c: &[F]) -> Vec<F> {
    let (l, n) = (dims.len, dims.state_dim);
    let mut g = vec![F::zero(); l * l];
    for t in 0..l {
        let ct = &c[t * n..(t + 1) * n];
        for s in 0..=t {
            let bs = &b[s * n..(s + 1) * n];
            g[t * l + s] = ct.iter().zip(bs).map(|(&u, &v)| u * v).sum();
        }
    }
    g
}

/// Block form of one chunk: writes `y` (`L x H·P`) and the outgoing state.
///
/// `y_t = e^{l_t} h_in C_t + Σ_{s≤t} e^{l_t - l_s} Δ_s (C_t·B_s) x_s` with
/// `l_t` the within-chunk cumulative log-decay.
#[allow(clippy::too_many_arguments)]
pub fn ssd_chunk_forward<F: Real>(
    dims: ChunkDims,
    x: &[F],
    delta: &[F],
    a: &[F],
    b: &[F],
    c: &[F],
    h_in: &[F],
    y: &mut [F],
    h_out: &mut [F],
) {
    let ChunkDims {
        len: l,
        heads,
        head_dim: p_dim,
        state_dim: n_dim,
    } = dims;
    let width = heads * p_dim;
    debug_assert_eq!(x.len(), l * width);
    debug_assert_eq!(y.len(), l * width);
    debug_assert_eq!(h_out.len(), heads * p_dim * n_dim);
    let g = gram_cb(dims, b, c);
    let mut lc = vec![F::zero(); l];
    let mut w = vec![F::zero(); l];
    let hsz = p_dim * n_dim;
    for h in 0..heads {
        log_decay_prefix(dims, delta, a[h], h, &mut lc);
        let hin = &h_in[h * hsz..(h + 1) * hsz];
        for t in 0..l {
            let et = lc[t].exp();
            let ct = &c[t * n_dim..(t + 1) * n_dim];
            let yt = &mut y[t * width + h * p_dim..t * width + (h + 1) * p_dim];
            for p in 0..p_dim {
                let row = &hin[p * n_dim..(p + 1) * n_dim];
                let r: F = row.iter().zip(ct).map(|(&u, &v)| u * v).sum();
                yt[p] = et * r;
            }
            for s in 0..=t {
                w[s] = (lc[t] - lc[s]).exp() * delta[s * heads + h] * g[t * l + s];
            }
            for s in 0..=t {
                let ws = w[s];
                if ws == F::zero() {
                    continue;
                }
                let xs = &x[s * width + h * p_dim..s * width + (h + 1) * p_dim];
                for p in 0..p_dim {
                    yt[p] = yt[p] + ws * xs[p];
                }
            }
        }
        let last = lc[l - 1];
        let e_last = last.exp();
        let hout = &mut h_out[h * hsz..(h + 1) * hsz];
        for (o, &i) in hout.iter_mut().zip(hin) {
            *o = e_last * i;
        }
        for s in 0..l {
            let q = (last - lc[s]).exp() * delta[s * heads + h];
            let xs = &x[s * width + h * p_dim..s * width + (h + 1) * p_dim];
            let bs = &b[s * n_dim..(s + 1) * n_dim];
            for p in 0..p_dim {
                let coef = q * xs[p];
                if coef == F::zero() {
                    continue;
                }
                let row = &mut hout[p * n_dim..(p + 1) * n_dim];
                for n in 0..n_dim {
                    row[n] = row[n] + coef * bs[n];
                }
            }
        }
    }
}

/// Gradients of one chunk's inputs.
#[derive(Clone, Debug)]
pub struct ChunkGrads<F> {
    pub x: Vec<F>,
    pub delta: Vec<F>,
    pub a: Vec<F>,
    pub b: Vec<F>,
    pub c: Vec<F>,
    pub h_in: Vec<F>,
}

/// Reverse-mode adjoint of [`ssd_chunk_forward`] given output gradients.
#[allow(clippy::too_many_arguments)]
pub fn ssd_chunk_backward<F: Real>(
    dims: ChunkDims,
    x: &[F],
    delta: &[F],
    a: &[F],
    b: &[F],
    c: &[F],
    h_in: &[F],
    dy: &[F],
    dh_out: &[F],
) -> ChunkGrads<F> {
    let ChunkDims {
        len: l,
        heads,
        head_dim: p_dim,
        state_dim: n_dim,
    } = dims;
    let width = heads * p_dim;
    let hsz = p_dim * n_dim;
    let g = gram_cb(dims, b, c);
    let mut grads = ChunkGrads {
        x: vec![F::zero(); x.len()],
        delta: vec![F::zero(); delta.len()],
        a: vec![F::zero(); heads],
        b: vec![F::zero(); b.len()],
        c: vec![F::zero(); c.len()],
        h_in: vec![F::zero(); h_in.len()],
    };
    // dG summed over heads (G is shared)
    let mut dg = vec![F::zero(); l * l];
    let mut lc = vec![F::zero(); l];
    let mut dl = vec![F::zero(); l];
    let mut v = vec![F::zero(); p_dim];
    for h in 0..heads {
        log_decay_prefix(dims, delta, a[h], h, &mut lc);
        dl.iter_mut().for_each(|d| *d = F::zero());
        let hin = &h_in[h * hsz..(h + 1) * hsz];
        let dho = &dh_out[h * hsz..(h + 1) * hsz];
        let xh = |s: usize| &x[s * width + h * p_dim..s * width + (h + 1) * p_dim];
        let dyh = |t: usize| &dy[t * width + h * p_dim..t * width + (h + 1) * p_dim];

        // state-read term: y_t += e^{l_t} h_in C_t
        for t in 0..l {
            let et = lc[t].exp();
            let ct = &c[t * n_dim..(t + 1) * n_dim];
            let dyt = dyh(t);
            let mut dl_t = F::zero();
            for p in 0..p_dim {
                let row = &hin[p * n_dim..(p + 1) * n_dim];
                let r: F = row.iter().zip(ct).map(|(&u, &w)| u * w).sum();
                dl_t = dl_t + dyt[p] * r;
                let coef = et * dyt[p];
                if coef != F::zero() {
                    let dst = &mut grads.h_in[h * hsz + p * n_dim..h * hsz + (p + 1) * n_dim];
                    for n in 0..n_dim {
                        dst[n] = dst[n] + coef * ct[n];
                    }
                }
                let dct = &mut grads.c[t * n_dim..(t + 1) * n_dim];
                for n in 0..n_dim {
                    dct[n] = dct[n] + coef * row[n];
                }
            }
            dl[t] = dl[t] + et * dl_t;
        }

        // intra-chunk term: y_t += Σ_s K[t,s] x_s, K = W Δ_s G
        for t in 0..l {
            let dyt = dyh(t);
            for s in 0..=t {
                let xs = xh(s);
                let dk: F = dyt.iter().zip(xs).map(|(&u, &w)| u * w).sum();
                let wts = (lc[t] - lc[s]).exp();
                let ds = delta[s * heads + h];
                let gts = g[t * l + s];
                let k = wts * ds * gts;
                if k != F::zero() {
                    let dxs = &mut grads.x[s * width + h * p_dim..s * width + (h + 1) * p_dim];
                    for p in 0..p_dim {
                        dxs[p] = dxs[p] + k * dyt[p];
                    }
                }
                dg[t * l + s] = dg[t * l + s] + dk * wts * ds;
                grads.delta[s * heads + h] = grads.delta[s * heads + h] + dk * wts * gts;
                let dkk = dk * k;
                dl[t] = dl[t] + dkk;
                dl[s] = dl[s] - dkk;
            }
        }

        // outgoing state: h_out = e^{l_last} h_in + Σ_s q_s Δ_s x_s ⊗ B_s
        let last = lc[l - 1];
        let e_last = last.exp();
        let mut dl_last = F::zero();
        for (i, (&g_o, &hv)) in dho.iter().zip(hin).enumerate() {
            grads.h_in[h * hsz + i] = grads.h_in[h * hsz + i] + e_last * g_o;
            dl_last = dl_last + g_o * hv;
        }
        dl_last = dl_last * e_last;
        for s in 0..l {
            let q = (last - lc[s]).exp();
            let ds = delta[s * heads + h];
            let bs = &b[s * n_dim..(s + 1) * n_dim];
            let xs = xh(s);
            for p in 0..p_dim {
                let row = &dho[p * n_dim..(p + 1) * n_dim];
                v[p] = row.iter().zip(bs).map(|(&u, &w)| u * w).sum();
            }
            let m: F = xs.iter().zip(&v).map(|(&u, &w)| u * w).sum();
            {
                let dxs = &mut grads.x[s * width + h * p_dim..s * width + (h + 1) * p_dim];
                for p in 0..p_dim {
                    dxs[p] = dxs[p] + q * ds * v[p];
                }
            }
            {
                let dbs = &mut grads.b[s * n_dim..(s + 1) * n_dim];
                for p in 0..p_dim {
                    let coef = q * ds * xs[p];
                    if coef == F::zero() {
                        continue;
                    }
                    let row = &dho[p * n_dim..(p + 1) * n_dim];
                    for n in 0..n_dim {
                        dbs[n] = dbs[n] + coef * row[n];
                    }
                }
            }
            grads.delta[s * heads + h] = grads.delta[s * heads + h] + q * m;
            let contrib = q * ds * m;
            dl_last = dl_last + contrib;
            dl[s] = dl[s] - contrib;
        }
        dl[l - 1] = dl[l - 1] + dl_last;

        // l_t = Σ_{n≤t} Δ_n A
        let mut suffix = F::zero();
        let mut da = F::zero();
        for n in (0..l).rev() {
            suffix = suffix + dl[n];
            let idx = n * heads + h;
            grads.delta[idx] = grads.delta[idx] + a[h] * suffix;
            da = da + delta[idx] * suffix;
        }
        grads.a[h] = da;
    }
    // G[t,s] = C_t · B_s
    for t in 0..l {
        for s in 0..=t {
            let d = dg[t * l + s];
            if d == F::zero() {
                continue;
            }
            for n in 0..n_dim {
                let bv = b[s * n_dim + n];
                let cv = c[t * n_dim + n];
                grads.c[t * n_dim + n] = grads.c[t * n_dim + n] + d * bv;
                grads.b[s * n_dim + n] = grads.b[s * n_dim + n] + d * cv;
            }
        }
    }
    grads
}

/// The `d_conv - 1` most recent frames entering a causal convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvCarry<F> {
    d_conv: usize,
    channels: usize,
    tail: Vec<F>,
}

impl<F: Real> ConvCarry<F> {
    pub fn zeros(d_conv: usize, channels: usize) -> Self {
        assert!(d_conv >= 1, "d_conv must be at least 1");
        ConvCarry {
            d_conv,
            channels,
            tail: vec![F::zero(); (d_conv - 1) * channels],
        }
    }

    pub fn from_rows(d_conv: usize, channels: usize, tail: Vec<F>) -> Result<Self> {
        ensure!(d_conv >= 1, "d_conv must be at least 1");
        ensure!(
            tail.len() == (d_conv - 1) * channels,
            "conv carry must hold exactly d_conv-1={} rows of {channels} channels, got {} values",
            d_conv - 1,
            tail.len()
        );
        Ok(ConvCarry {
            d_conv,
            channels,
            tail,
        })
    }

    pub fn rows(&self) -> usize {
        self.d_conv - 1
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn d_conv(&self) -> usize {
        self.d_conv
    }

    pub fn tail(&self) -> &[F] {
        &self.tail
    }

    pub fn tail_mut(&mut self) -> &mut [F] {
        &mut self.tail
    }

    /// Appends one frame, dropping the oldest row.
    pub fn push(&mut self, frame: &[F]) {
        debug_assert_eq!(frame.len(), self.channels);
        if self.d_conv == 1 {
            return;
        }
        let ch = self.channels;
        self.tail.copy_within(ch.., 0);
        let n = self.tail.len();
        self.tail[n - ch..].copy_from_slice(frame);
    }
}

/// Valid depthwise convolution over padded rows:
/// `out[t, ch] = Σ_j kernel[j, ch] · xp[t + j, ch]` for `t < rows - d + 1`.
pub fn depthwise_conv_valid<F: Real>(xp: &[F], rows: usize, kernel: &[F], d_conv: usize, channels: usize) -> Vec<F> {
    assert_eq!(xp.len(), rows * channels);
    assert_eq!(kernel.len(), d_conv * channels);
    assert!(rows + 1 >= d_conv);
    let out_rows = rows + 1 - d_conv;
    let mut out = vec![F::zero(); out_rows * channels];
    for t in 0..out_rows {
        let dst = &mut out[t * channels..(t + 1) * channels];
        for j in 0..d_conv {
            let src = &xp[(t + j) * channels..(t + j + 1) * channels];
            let k = &kernel[j * channels..(j + 1) * channels];
            for ch in 0..channels {
                dst[ch] = dst[ch] + k[ch] * src[ch];
            }
        }
    }
    out
}

/// Causal depthwise convolution with carried history, followed by SiLU.
///
/// `x` is `T x channels`, `kernel` is `d_conv x channels` with row `d_conv - 1`
/// applied to the current frame. Returns the activated output and the carry
/// holding the last `d_conv - 1` input rows.
pub fn causal_conv<F: Real>(x: &[F], kernel: &[F], carry: &ConvCarry<F>) -> Result<(Vec<F>, ConvCarry<F>)> {
    let ch = carry.channels;
    let d = carry.d_conv;
    ensure!(
        kernel.len() == d * ch,
        "kernel has {} values, expected {d}x{ch}",
        kernel.len()
    );
    ensure!(x.len() % ch == 0, "input width does not match {ch} channels");
    let t = x.len() / ch;
    let mut xp = Vec::with_capacity(carry.tail.len() + x.len());
    xp.extend_from_slice(&carry.tail);
    xp.extend_from_slice(x);
    let rows = t + d - 1;
    let mut y = depthwise_conv_valid(&xp, rows, kernel, d, ch);
    for v in &mut y {
        *v = silu(*v);
    }
    let tail = xp[(rows - (d - 1)) * ch..].to_vec();
    Ok((y, ConvCarry { d_conv: d, channels: ch, tail }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_instance(
        rng: &mut ChaCha8Rng,
        t: usize,
        heads: usize,
        p: usize,
        n: usize,
    ) -> (Vec<f64>, SelectiveParams<f64>, Vec<f64>, SsmState<f64>) {
        let x: Vec<f64> = (0..t * heads * p).map(|_| rng.random_range(-1.0..1.0)).collect();
        let delta: Vec<f64> = (0..t * heads).map(|_| rng.random_range(0.01..0.5)).collect();
        let scale = 1.0 / (n as f64).sqrt();
        let b: Vec<f64> = (0..t * n).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
        let c: Vec<f64> = (0..t * n).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
        let a: Vec<f64> = (0..heads).map(|_| -rng.random_range(0.05..1.0)).collect();
        let h0 = SsmState::from_vec(
            heads,
            p,
            n,
            (0..heads * p * n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        (x, SelectiveParams::new(t, heads, n, delta, b, c).unwrap(), a, h0)
    }

    #[test]
    fn discretize_examples() {
        let d = discretize(-1.0f64, 1e-12).unwrap();
        assert!((d.a_bar - 1.0).abs() < 1e-11);
        let d = discretize(-1.0f64, 2f64.ln()).unwrap();
        assert!((d.a_bar - 0.5).abs() < 1e-15);
        assert_eq!(d.b_scale, 2f64.ln());
        assert!(matches!(discretize(0.0f64, 1.0), Err(Error::Domain(_))));
        assert!(matches!(discretize(-1.0f64, 0.0), Err(Error::Domain(_))));
        assert!(matches!(discretize(1.0f64, 0.1), Err(Error::Domain(_))));
    }

    #[test]
    fn first_order_input_scale_tracks_exact_zoh() {
        // exact ZOH input factor (exp(ΔA) - 1) / (ΔA) · Δ
        let (a, delta) = (-0.01f64, 0.1f64);
        let exact = ((delta * a).exp() - 1.0) / (delta * a) * delta;
        let d = discretize(a, delta).unwrap();
        assert!(((d.b_scale - exact) / exact).abs() < 1e-3);
    }

    #[test]
    fn single_decay_step() {
        // ā = 0.5 via Δ = ln 2, A = -1
        let sel = SelectiveParams::new(1, 1, 1, vec![2f64.ln()], vec![1.0], vec![1.0]).unwrap();
        let h0 = SsmState::from_vec(1, 1, 1, vec![1.0]).unwrap();
        let (y, h) = recurrent_scan(&[0.0], &sel, &[-1.0], &h0).unwrap();
        assert!((y[0] - 0.5).abs() < 1e-15);
        assert!((h.data()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_writes_from_zero_state_give_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (x, mut sel, a, h0) = random_instance(&mut rng, 12, 2, 3, 4);
        sel.b.iter_mut().for_each(|v| *v = 0.0);
        let h0 = SsmState::zeros(h0.heads(), h0.head_dim(), h0.state_dim());
        let (y, _) = recurrent_scan(&x, &sel, &a, &h0).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn recurrent_matches_brute_force_unroll() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (t_len, heads, p, n) = (8, 2, 3, 4);
        let (x, sel, a, h0) = random_instance(&mut rng, t_len, heads, p, n);
        let (y, _) = recurrent_scan(&x, &sel, &a, &h0).unwrap();
        for h in 0..heads {
            let a_bars: Vec<f64> = (0..t_len).map(|t| (sel.delta_row(t)[h] * a[h]).exp()).collect();
            for t in 0..t_len {
                for pp in 0..p {
                    // initial state decayed through frames 0..=t
                    let decay0: f64 = a_bars[..=t].iter().product();
                    let mut want: f64 = (0..n)
                        .map(|k| h0.head(h)[pp * n + k] * sel.c_row(t)[k])
                        .sum::<f64>()
                        * decay0;
                    for u in 0..=t {
                        let bc: f64 = (0..n).map(|k| sel.b_row(u)[k] * sel.c_row(t)[k]).sum();
                        want += cumulative_decay(&a_bars, t, u).unwrap()
                            * sel.delta_row(u)[h]
                            * x[u * heads * p + h * p + pp]
                            * bc;
                    }
                    let got = y[t * heads * p + h * p + pp];
                    assert!((got - want).abs() < 1e-12, "t={t} h={h} p={pp}: {got} vs {want}");
                }
            }
        }
    }

    #[test]
    fn chunked_degenerate_chunkings_match_recurrent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (x, sel, a, h0) = random_instance(&mut rng, 20, 2, 3, 5);
        let (y_ref, h_ref) = recurrent_scan(&x, &sel, &a, &h0).unwrap();
        for cs in [1, 7, 20, 64] {
            let out = chunked_scan(&x, &sel, &a, &h0, cs).unwrap();
            let err = y_ref.iter().zip(&out.y).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
            assert!(err < 1e-12, "chunk {cs}: {err}");
            let herr = h_ref
                .data()
                .iter()
                .zip(out.final_state.data())
                .map(|(u, v)| (u - v).abs())
                .fold(0.0, f64::max);
            assert!(herr < 1e-12);
            assert_eq!(out.chunk_states.len(), 20usize.div_ceil(cs));
        }
    }

    #[test]
    fn chunk_states_equal_recurrent_state_at_chunk_ends() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (x, sel, a, h0) = random_instance(&mut rng, 19, 2, 2, 3);
        let out = chunked_scan(&x, &sel, &a, &h0, 6).unwrap();
        let width = 4;
        for (c, st) in out.chunk_states.iter().enumerate() {
            let end = ((c + 1) * 6).min(19);
            let sub = SelectiveParams::new(
                end,
                2,
                3,
                sel.delta[..end * 2].to_vec(),
                sel.b[..end * 3].to_vec(),
                sel.c[..end * 3].to_vec(),
            )
            .unwrap();
            let (_, h) = recurrent_scan(&x[..end * width], &sub, &a, &h0).unwrap();
            let err = h.data().iter().zip(st.data()).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
            assert!(err < 1e-12);
        }
    }

    #[test]
    fn chunk_size_zero_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (x, sel, a, h0) = random_instance(&mut rng, 4, 1, 1, 2);
        assert!(matches!(chunked_scan(&x, &sel, &a, &h0, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn shape_mismatch_is_a_contract_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (x, sel, a, h0) = random_instance(&mut rng, 4, 2, 2, 2);
        assert!(matches!(recurrent_scan(&x[1..], &sel, &a, &h0), Err(Error::Contract(_))));
        assert!(matches!(recurrent_scan(&x, &sel, &a[..1], &h0), Err(Error::Contract(_))));
    }

    #[test]
    fn cumulative_decay_examples() {
        let ab = [0.5f64, 0.5, 0.5];
        assert_eq!(cumulative_decay(&ab, 2, 2).unwrap(), 1.0);
        assert_eq!(cumulative_decay(&ab, 2, 0).unwrap(), 0.25);
        assert!(matches!(cumulative_decay(&ab, 0, 1), Err(Error::Contract(_))));
    }

    #[test]
    fn cumulative_decay_composes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ab: Vec<f64> = (0..30).map(|_| rng.random_range(0.1..1.0)).collect();
        for _ in 0..50 {
            let mut idx = [rng.random_range(0..30), rng.random_range(0..30), rng.random_range(0..30)];
            idx.sort();
            let [s, m, t] = idx;
            let lhs = cumulative_decay(&ab, t, m).unwrap() * cumulative_decay(&ab, m, s).unwrap();
            let direct: f64 = ab[s + 1..=t].iter().product();
            assert!((lhs - direct).abs() < 1e-14);
            assert!((cumulative_decay(&ab, t, s).unwrap() - direct).abs() < 1e-15);
        }
    }

    #[test]
    fn conv_identity_kernel_is_silu() {
        let (d, ch) = (4, 3);
        let mut kernel = vec![0.0f64; d * ch];
        kernel[(d - 1) * ch..].iter_mut().for_each(|k| *k = 1.0);
        let x: Vec<f64> = (0..5 * ch).map(|i| i as f64 * 0.3 - 2.0).collect();
        let (y, carry) = causal_conv(&x, &kernel, &ConvCarry::zeros(d, ch)).unwrap();
        for (u, v) in y.iter().zip(&x) {
            assert!((u - silu(*v)).abs() < 1e-15);
        }
        assert_eq!(carry.rows(), d - 1);
        assert_eq!(carry.tail(), &x[2 * ch..]);
    }

    #[test]
    fn conv_split_equals_concatenated() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (d, ch, t) = (4, 5, 17);
        let kernel: Vec<f64> = (0..d * ch).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..t * ch).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (full, _) = causal_conv(&x, &kernel, &ConvCarry::zeros(d, ch)).unwrap();
        for split in [1, 2, 3, 9, 16] {
            let (y1, c1) = causal_conv(&x[..split * ch], &kernel, &ConvCarry::zeros(d, ch)).unwrap();
            let (y2, _) = causal_conv(&x[split * ch..], &kernel, &c1).unwrap();
            let joined: Vec<f64> = y1.into_iter().chain(y2).collect();
            assert_eq!(joined, full, "split at {split}");
        }
    }

    #[test]
    fn conv_carry_row_count_enforced() {
        assert!(matches!(ConvCarry::<f64>::from_rows(4, 2, vec![0.0; 4]), Err(Error::Contract(_))));
        assert!(ConvCarry::<f64>::from_rows(4, 2, vec![0.0; 6]).is_ok());
        let wrong = ConvCarry::<f64>::zeros(4, 3);
        assert!(matches!(causal_conv(&[0.0; 8], &[0.0; 8], &wrong), Err(Error::Contract(_))));
    }

    #[test]
    fn chunk_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dims = ChunkDims {
            len: 5,
            heads: 2,
            head_dim: 3,
            state_dim: 4,
        };
        let (x, sel, a, h0) = random_instance(&mut rng, dims.len, dims.heads, dims.head_dim, dims.state_dim);
        let wy: Vec<f64> = (0..x.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let wh: Vec<f64> = (0..h0.data().len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |x: &[f64], d: &[f64], a: &[f64], b: &[f64], c: &[f64], h: &[f64]| {
            let mut y = vec![0.0; x.len()];
            let mut ho = vec![0.0; h.len()];
            ssd_chunk_forward(dims, x, d, a, b, c, h, &mut y, &mut ho);
            y.iter().zip(&wy).map(|(u, v)| u * v).sum::<f64>() + ho.iter().zip(&wh).map(|(u, v)| u * v).sum::<f64>()
        };
        let g = ssd_chunk_backward(dims, &x, &sel.delta, &a, &sel.b, &sel.c, h0.data(), &wy, &wh);
        let mut inputs = [x.clone(), sel.delta.clone(), a.clone(), sel.b.clone(), sel.c.clone(), h0.data().to_vec()];
        let analytic = [&g.x, &g.delta, &g.a, &g.b, &g.c, &g.h_in];
        let eps = 1e-6;
        for k in 0..inputs.len() {
            for i in 0..inputs[k].len() {
                let orig = inputs[k][i];
                inputs[k][i] = orig + eps;
                let lp = loss(&inputs[0], &inputs[1], &inputs[2], &inputs[3], &inputs[4], &inputs[5]);
                inputs[k][i] = orig - eps;
                let lm = loss(&inputs[0], &inputs[1], &inputs[2], &inputs[3], &inputs[4], &inputs[5]);
                inputs[k][i] = orig;
                let fd = (lp - lm) / (2.0 * eps);
                let an = analytic[k][i];
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "input {k} index {i}: fd {fd} vs analytic {an}"
                );
            }
        }
    }
}
