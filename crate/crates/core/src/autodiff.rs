//! Minimal reverse-mode gradient tape over [`Tensor`] values.
//!
//! Nodes are appended in evaluation order; [`Tape::backward`] walks them in
//! reverse and hands every node's output gradient to its recorded adjoint.
//! Only nodes that (transitively) depend on a parameter or a grad-requiring
//! leaf record an adjoint, so detached carries are plain constants.

use std::collections::HashMap;
use std::ops::Range;

use crate::nn;
use crate::params::{ParamId, ParamStore};
use crate::real::{sigmoid, silu, softplus};
use crate::regram;
use crate::ssm::{self, ChunkDims};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type BackwardFn = Box<dyn Fn(&[Tensor], &Tensor, &mut GradSink)>;

/// Receives input gradients from an adjoint, dropping those nobody needs.
pub struct GradSink<'a> {
    grads: &'a mut [Option<Vec<f64>>],
    needs: &'a [bool],
}

impl GradSink<'_> {
    pub fn needs(&self, v: Var) -> bool {
        self.needs[v.0]
    }

    pub fn add(&mut self, v: Var, g: &[f64]) {
        if !self.needs[v.0] {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => {
                debug_assert_eq!(acc.len(), g.len());
                acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            slot @ None => *slot = Some(g.to_vec()),
        }
    }

    pub fn add_owned(&mut self, v: Var, g: Vec<f64>) {
        if !self.needs[v.0] {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    /// Adds `g` into `v[offset..offset + g.len()]`.
    fn add_at(&mut self, v: Var, len: usize, offset: usize, g: &[f64]) {
        if !self.needs[v.0] {
            return;
        }
        let acc = self.grads[v.0].get_or_insert_with(|| vec![0.0; len]);
        acc[offset..offset + g.len()].iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
}

#[derive(Default)]
pub struct Tape {
    values: Vec<Tensor>,
    needs: Vec<bool>,
    backward: Vec<Option<BackwardFn>>,
    param_of: Vec<Option<ParamId>>,
    param_cache: HashMap<ParamId, Var>,
    no_grad: bool,
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0].as_ref().map(|g| Tensor::new(&self.shapes[v.0], g.clone()))
    }

    /// Gradients of every parameter that was touched, in tape order.
    pub fn params(&self) -> Vec<(ParamId, Tensor)> {
        self.params
            .iter()
            .filter_map(|&(pid, node)| {
                self.grads[node]
                    .as_ref()
                    .map(|g| (pid, Tensor::new(&self.shapes[node], g.clone())))
            })
            .collect()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that records no adjoints; used for pure inference.
    pub fn inference() -> Self {
        Tape {
            no_grad: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs[v.0]
    }

    fn push_leaf(&mut self, value: Tensor, needs: bool, param: Option<ParamId>) -> Var {
        self.values.push(value);
        self.needs.push(needs && !self.no_grad);
        self.backward.push(None);
        self.param_of.push(param);
        Var(self.values.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false, None)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true, None)
    }

    /// Leaf holding a parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_cache.get(&id) {
            return v;
        }
        let v = self.push_leaf(store.get(id).clone(), true, Some(id));
        self.param_cache.insert(id, v);
        v
    }

    fn push_op(&mut self, value: Tensor, inputs: &[Var], bw: impl Fn(&[Tensor], &Tensor, &mut GradSink) + 'static) -> Var {
        let needs = !self.no_grad && inputs.iter().any(|v| self.needs[v.0]);
        self.values.push(value);
        self.needs.push(needs);
        self.backward.push(if needs { Some(Box::new(bw)) } else { None });
        self.param_of.push(None);
        Var(self.values.len() - 1)
    }

    /// Reverse pass seeded with `∂L/∂v` for each `(v, seed)`.
    pub fn backward(&self, seeds: &[(Var, Tensor)]) -> Gradients {
        let n = self.values.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        {
            let mut sink = GradSink {
                grads: &mut grads,
                needs: &self.needs,
            };
            for (v, s) in seeds {
                assert_eq!(s.shape(), self.values[v.0].shape(), "seed shape mismatch");
                sink.add(*v, s.data());
            }
        }
        for i in (0..n).rev() {
            let Some(bw) = &self.backward[i] else { continue };
            let Some(g) = grads[i].take() else { continue };
            let gt = Tensor::new(self.values[i].shape(), g);
            let mut sink = GradSink {
                grads: &mut grads,
                needs: &self.needs,
            };
            bw(&self.values, &gt, &mut sink);
        }
        let params = self
            .param_of
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.map(|pid| (pid, i)))
            .collect();
        Gradients {
            grads,
            shapes: self.values.iter().map(|t| t.shape().to_vec()).collect(),
            params,
        }
    }

    // ---- linear algebra -------------------------------------------------

    /// `a (m x k) · b (k x n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.values[a.0].dims2();
        let (k2, n) = self.values[b.0].dims2();
        assert_eq!(k, k2, "matmul {m}x{k} by {k2}x{n}");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, self.values[a.0].data(), false, self.values[b.0].data(), false, 0.0, &mut out);
        self.push_op(Tensor::new(&[m, n], out), &[a, b], move |v, g, s| {
            if s.needs(a) {
                let mut da = vec![0.0; m * k];
                gemm(m, n, k, 1.0, g.data(), false, v[b.0].data(), true, 0.0, &mut da);
                s.add_owned(a, da);
            }
            if s.needs(b) {
                let mut db = vec![0.0; k * n];
                gemm(k, m, n, 1.0, v[a.0].data(), true, g.data(), false, 0.0, &mut db);
                s.add_owned(b, db);
            }
        })
    }

    /// `x · w + b` with `w: in x out` and an optional bias of `out` entries.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul(x, w);
        match b {
            Some(b) => self.add_row(y, b),
            None => y,
        }
    }

    // ---- elementwise ----------------------------------------------------

    fn zip_same(&mut self, a: Var, b: Var, f: fn(f64, f64) -> f64, da: fn(f64, f64, f64) -> f64, db: fn(f64, f64, f64) -> f64) -> Var {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let out: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = ta.shape().to_vec();
        self.push_op(Tensor::new(&shape, out), &[a, b], move |v, g, s| {
            let (xa, xb) = (v[a.0].data(), v[b.0].data());
            if s.needs(a) {
                let d: Vec<f64> = (0..g.numel()).map(|i| da(xa[i], xb[i], g.data()[i])).collect();
                s.add_owned(a, d);
            }
            if s.needs(b) {
                let d: Vec<f64> = (0..g.numel()).map(|i| db(xa[i], xb[i], g.data()[i])).collect();
                s.add_owned(b, d);
            }
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x + y, |_, _, g| g, |_, _, g| g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x - y, |_, _, g| g, |_, _, g| -g)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x * y, |_, y, g| g * y, |x, _, g| g * x)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = &self.values[a.0];
        let out = Tensor::new(t.shape(), t.data().iter().map(|x| c * x).collect());
        self.push_op(out, &[a], move |_, g, s| {
            s.add_owned(a, g.data().iter().map(|x| c * x).collect());
        })
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = &self.values[a.0];
        let out = Tensor::new(t.shape(), t.data().iter().map(|x| x + c).collect());
        self.push_op(out, &[a], move |_, g, s| s.add(a, g.data()))
    }

    fn map(&mut self, a: Var, f: fn(f64) -> f64, df: fn(f64) -> f64) -> Var {
        let t = &self.values[a.0];
        let out = Tensor::new(t.shape(), t.data().iter().map(|&x| f(x)).collect());
        self.push_op(out, &[a], move |v, g, s| {
            let d = v[a.0].data().iter().zip(g.data()).map(|(&x, &gy)| gy * df(x)).collect();
            s.add_owned(a, d);
        })
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.map(a, silu, nn::silu_grad)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, |x| {
            let s = sigmoid(x);
            s * (1.0 - s)
        })
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.map(a, softplus, sigmoid)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, nn::gelu, nn::gelu_grad)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// `a (m x n) + b` with `b` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (m, n) = self.values[a.0].dims2();
        assert_eq!(self.values[b.0].numel(), n, "row broadcast width");
        let mut out = self.values[a.0].data().to_vec();
        let bv = self.values[b.0].data();
        for r in 0..m {
            out[r * n..(r + 1) * n].iter_mut().zip(bv).for_each(|(o, &x)| *o += x);
        }
        self.push_op(Tensor::new(&[m, n], out), &[a, b], move |_, g, s| {
            s.add(a, g.data());
            if s.needs(b) {
                let mut db = vec![0.0; n];
                for r in 0..m {
                    db.iter_mut().zip(&g.data()[r * n..(r + 1) * n]).for_each(|(d, &x)| *d += x);
                }
                s.add_owned(b, db);
            }
        })
    }

    /// `a (m x n) ⊙ b` with `b` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        let (m, n) = self.values[a.0].dims2();
        assert_eq!(self.values[b.0].numel(), n, "row broadcast width");
        let bv = self.values[b.0].data();
        let out: Vec<f64> = self.values[a.0].data().iter().enumerate().map(|(i, &x)| x * bv[i % n]).collect();
        self.push_op(Tensor::new(&[m, n], out), &[a, b], move |v, g, s| {
            let (av, bv) = (v[a.0].data(), v[b.0].data());
            if s.needs(a) {
                s.add_owned(a, g.data().iter().enumerate().map(|(i, &x)| x * bv[i % n]).collect());
            }
            if s.needs(b) {
                let mut db = vec![0.0; n];
                for (i, &x) in g.data().iter().enumerate() {
                    db[i % n] += x * av[i];
                }
                s.add_owned(b, db);
            }
        })
    }

    /// `a (m x n) ⊙ c` with a column `c (m x 1)` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Var {
        let (m, n) = self.values[a.0].dims2();
        assert_eq!(self.values[c.0].numel(), m, "column broadcast height");
        let cv = self.values[c.0].data();
        let out: Vec<f64> = self.values[a.0].data().iter().enumerate().map(|(i, &x)| x * cv[i / n]).collect();
        self.push_op(Tensor::new(&[m, n], out), &[a, c], move |v, g, s| {
            let (av, cv) = (v[a.0].data(), v[c.0].data());
            if s.needs(a) {
                s.add_owned(a, g.data().iter().enumerate().map(|(i, &x)| x * cv[i / n]).collect());
            }
            if s.needs(c) {
                let dc = (0..m).map(|r| (0..n).map(|j| g.data()[r * n + j] * av[r * n + j]).sum()).collect();
                s.add_owned(c, dc);
            }
        })
    }

    // ---- normalization --------------------------------------------------

    /// Layer norm over consecutive groups of `group` values (affine shared
    /// across groups).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, group: usize) -> Var {
        let shape = self.values[x.0].shape().to_vec();
        let (out, xhat, inv) = regram::layer_norm_groups(
            self.values[x.0].data(),
            group,
            self.values[gamma.0].data(),
            self.values[beta.0].data(),
        );
        self.push_op(Tensor::new(&shape, out), &[x, gamma, beta], move |v, g, s| {
            let (dx, dg, db) = nn::layer_norm_backward(g.data(), &xhat, &inv, v[gamma.0].data(), group);
            s.add_owned(x, dx);
            s.add_owned(gamma, dg);
            s.add_owned(beta, db);
        })
    }

    pub fn rms_norm(&mut self, x: Var, gamma: Var) -> Var {
        let (_, cols) = self.values[x.0].dims2();
        let shape = self.values[x.0].shape().to_vec();
        let (out, inv) = nn::rms_norm(self.values[x.0].data(), cols, self.values[gamma.0].data());
        self.push_op(Tensor::new(&shape, out), &[x, gamma], move |v, g, s| {
            let (dx, dg) = nn::rms_norm_backward(g.data(), v[x.0].data(), &inv, v[gamma.0].data(), cols);
            s.add_owned(x, dx);
            s.add_owned(gamma, dg);
        })
    }

    // ---- shape ------------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self.values[a.0].clone().reshaped(shape);
        self.push_op(out, &[a], move |_, g, s| s.add(a, g.data()))
    }

    /// Contiguous flat sub-range of `a`, viewed with `shape`.
    pub fn slice_flat(&mut self, a: Var, range: Range<usize>, shape: &[usize]) -> Var {
        let total = self.values[a.0].numel();
        let out = Tensor::new(shape, self.values[a.0].data()[range.clone()].to_vec());
        self.push_op(out, &[a], move |_, g, s| s.add_at(a, total, range.start, g.data()))
    }

    pub fn slice_rows(&mut self, a: Var, rows: Range<usize>) -> Var {
        let (_, n) = self.values[a.0].dims2();
        let len = rows.end - rows.start;
        self.slice_flat(a, rows.start * n..rows.end * n, &[len, n])
    }

    pub fn slice_cols(&mut self, a: Var, cols: Range<usize>) -> Var {
        let (m, n) = self.values[a.0].dims2();
        let w = cols.end - cols.start;
        let src = self.values[a.0].data();
        let mut out = Vec::with_capacity(m * w);
        for r in 0..m {
            out.extend_from_slice(&src[r * n + cols.start..r * n + cols.end]);
        }
        self.push_op(Tensor::new(&[m, w], out), &[a], move |_, g, s| {
            let mut d = vec![0.0; m * n];
            for r in 0..m {
                d[r * n + cols.start..r * n + cols.end].copy_from_slice(&g.data()[r * w..(r + 1) * w]);
            }
            s.add_owned(a, d);
        })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.values[parts[0].0].dims2().1;
        let mut data = Vec::new();
        let mut offsets = Vec::with_capacity(parts.len());
        for p in parts {
            let t = &self.values[p.0];
            assert_eq!(t.dims2().1, n, "concat_rows width mismatch");
            offsets.push((data.len(), t.numel()));
            data.extend_from_slice(t.data());
        }
        let rows = data.len() / n;
        let parts = parts.to_vec();
        self.push_op(Tensor::new(&[rows, n], data), &parts.clone(), move |_, g, s| {
            for (p, &(off, len)) in parts.iter().zip(&offsets) {
                s.add(*p, &g.data()[off..off + len]);
            }
        })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let m = self.values[parts[0].0].dims2().0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                let (r, c) = self.values[p.0].dims2();
                assert_eq!(r, m, "concat_cols height mismatch");
                c
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.values[p.0].data()[r * w..(r + 1) * w]);
            }
        }
        let parts = parts.to_vec();
        self.push_op(Tensor::new(&[m, total], data), &parts.clone(), move |_, g, s| {
            let mut off = 0;
            for (p, &w) in parts.iter().zip(&widths) {
                if s.needs(*p) {
                    let mut d = Vec::with_capacity(m * w);
                    for r in 0..m {
                        d.extend_from_slice(&g.data()[r * total + off..r * total + off + w]);
                    }
                    s.add_owned(*p, d);
                }
                off += w;
            }
        })
    }

    /// Column means of an `m x n` matrix, as `1 x n`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.values[a.0].dims2();
        let mut out = vec![0.0; n];
        for r in 0..m {
            out.iter_mut().zip(self.values[a.0].row(r)).for_each(|(o, &x)| *o += x);
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        self.push_op(Tensor::new(&[1, n], out), &[a], move |_, g, s| {
            let mut d = Vec::with_capacity(m * n);
            for _ in 0..m {
                d.extend(g.data().iter().map(|x| x / m as f64));
            }
            s.add_owned(a, d);
        })
    }

    /// `out[i] = a.flat[index[i]]`.
    pub fn gather(&mut self, a: Var, index: Vec<usize>, shape: &[usize]) -> Var {
        let src = self.values[a.0].data();
        let total = src.len();
        let out = Tensor::new(shape, index.iter().map(|&i| src[i]).collect());
        self.push_op(out, &[a], move |_, g, s| {
            let mut d = vec![0.0; total];
            for (&i, &x) in index.iter().zip(g.data()) {
                d[i] += x;
            }
            s.add_owned(a, d);
        })
    }

    /// Weighted sum `Σ a ⊙ w` as a scalar.
    pub fn dot_const(&mut self, a: Var, w: Tensor) -> Var {
        assert_eq!(self.values[a.0].shape(), w.shape());
        let v: f64 = self.values[a.0].data().iter().zip(w.data()).map(|(x, y)| x * y).sum();
        self.push_op(Tensor::scalar(v), &[a], move |_, g, s| {
            let gv = g.data()[0];
            s.add_owned(a, w.data().iter().map(|x| x * gv).collect());
        })
    }

    // ---- model-specific kernels --------------------------------------------

    /// Valid depthwise convolution of padded rows `xp` with `kernel (d x ch)`.
    pub fn depthwise_conv(&mut self, xp: Var, kernel: Var) -> Var {
        let (rows, ch) = self.values[xp.0].dims2();
        let d = self.values[kernel.0].numel() / ch;
        assert_eq!(d * ch, self.values[kernel.0].numel());
        let out = ssm::depthwise_conv_valid(self.values[xp.0].data(), rows, self.values[kernel.0].data(), d, ch);
        let out_rows = rows + 1 - d;
        self.push_op(Tensor::new(&[out_rows, ch], out), &[xp, kernel], move |v, g, s| {
            let (dx, dk) = nn::depthwise_conv_backward(g.data(), v[xp.0].data(), out_rows, v[kernel.0].data(), d, ch);
            s.add_owned(xp, dx);
            s.add_owned(kernel, dk);
        })
    }

    /// One chunk of the block scan. `x: L x H·P`, `delta: L x H`, `a: H`,
    /// `b, c: L x N`, `h: H x P·N`. Returns `(y, h_out)`.
    #[allow(clippy::too_many_arguments)]
    pub fn ssd_chunk(&mut self, x: Var, delta: Var, a: Var, b: Var, c: Var, h: Var, dims: ChunkDims) -> (Var, Var) {
        let ny = dims.len * dims.heads * dims.head_dim;
        let nh = dims.heads * dims.head_dim * dims.state_dim;
        let mut packed = vec![0.0; ny + nh];
        {
            let (y, ho) = packed.split_at_mut(ny);
            ssm::ssd_chunk_forward(
                dims,
                self.values[x.0].data(),
                self.values[delta.0].data(),
                self.values[a.0].data(),
                self.values[b.0].data(),
                self.values[c.0].data(),
                self.values[h.0].data(),
                y,
                ho,
            );
        }
        let node = self.push_op(Tensor::new(&[ny + nh], packed), &[x, delta, a, b, c, h], move |v, g, s| {
            let (dy, dh) = g.data().split_at(ny);
            let gr = ssm::ssd_chunk_backward(
                dims,
                v[x.0].data(),
                v[delta.0].data(),
                v[a.0].data(),
                v[b.0].data(),
                v[c.0].data(),
                v[h.0].data(),
                dy,
                dh,
            );
            s.add_owned(x, gr.x);
            s.add_owned(delta, gr.delta);
            s.add_owned(a, gr.a);
            s.add_owned(b, gr.b);
            s.add_owned(c, gr.c);
            s.add_owned(h, gr.h_in);
        });
        let y = self.slice_flat(node, 0..ny, &[dims.len, dims.heads * dims.head_dim]);
        let ho = self.slice_flat(node, ny..ny + nh, &[dims.heads, dims.head_dim * dims.state_dim]);
        (y, ho)
    }

    /// Per-head affine map: `x: 1 x H·in`, `w: H·in·out`, `b: H·out`.
    pub fn head_linear(&mut self, x: Var, w: Var, b: Var, heads: usize, input: usize, output: usize) -> Var {
        let out = regram::head_linear(
            self.values[x.0].data(),
            self.values[w.0].data(),
            self.values[b.0].data(),
            heads,
            input,
            output,
        );
        self.push_op(Tensor::new(&[1, heads * output], out), &[x, w, b], move |v, g, s| {
            let (xv, wv) = (v[x.0].data(), v[w.0].data());
            let gd = g.data();
            if s.needs(x) {
                let mut dx = vec![0.0; heads * input];
                for h in 0..heads {
                    for i in 0..input {
                        let row = &wv[(h * input + i) * output..(h * input + i + 1) * output];
                        dx[h * input + i] = row.iter().zip(&gd[h * output..(h + 1) * output]).map(|(a, b)| a * b).sum();
                    }
                }
                s.add_owned(x, dx);
            }
            if s.needs(w) {
                let mut dw = vec![0.0; heads * input * output];
                for h in 0..heads {
                    for i in 0..input {
                        let xi = xv[h * input + i];
                        let dst = &mut dw[(h * input + i) * output..(h * input + i + 1) * output];
                        dst.iter_mut().zip(&gd[h * output..(h + 1) * output]).for_each(|(d, &gg)| *d = xi * gg);
                    }
                }
                s.add_owned(w, dw);
            }
            s.add(b, gd);
        })
    }

    /// Unit-column normalization of `heads` blocks of `n x r`.
    pub fn normalize_columns(&mut self, a: Var, heads: usize, n: usize, r: usize) -> Var {
        let out = regram::normalize_columns(self.values[a.0].data(), heads, n, r);
        let shape = [heads, n * r];
        self.push_op(Tensor::new(&shape, out), &[a], move |v, g, s| {
            s.add_owned(a, regram::normalize_columns_backward(v[a.0].data(), g.data(), heads, n, r));
        })
    }

    /// Cayley images `heads x N·N` of the low-rank skew generators.
    pub fn cayley(&mut self, u: Var, v: Var, theta: Var, heads: usize, n: usize, r: usize) -> crate::Result<Var> {
        let z = regram::cayley_rotation(
            self.values[u.0].data(),
            self.values[v.0].data(),
            self.values[theta.0].data(),
            heads,
            n,
            r,
        )?;
        let zc = z.clone();
        Ok(self.push_op(Tensor::new(&[heads, n * n], z), &[u, v, theta], move |vals, g, s| {
            let gr = regram::cayley_backward(
                vals[u.0].data(),
                vals[v.0].data(),
                vals[theta.0].data(),
                &zc,
                g.data(),
                heads,
                n,
                r,
            )
            .expect("Cayley solve succeeded in the forward pass");
            s.add_owned(u, gr.u);
            s.add_owned(v, gr.v);
            s.add_owned(theta, gr.theta);
        }))
    }

    /// `h ← h Z` per head for `h: H x P·N`, `z: H x N·N`.
    pub fn rotate_state(&mut self, h: Var, z: Var, heads: usize, p: usize, n: usize) -> Var {
        let mut out = self.values[h.0].data().to_vec();
        regram::rotate_state_in_place(&mut out, self.values[z.0].data(), heads, p, n);
        let shape = self.values[h.0].shape().to_vec();
        self.push_op(Tensor::new(&shape, out), &[h, z], move |v, g, s| {
            let (hv, zv) = (v[h.0].data(), v[z.0].data());
            let gd = g.data();
            if s.needs(h) {
                // dh = dh' Zᵀ
                let mut dh = vec![0.0; hv.len()];
                for hd in 0..heads {
                    let zb = &zv[hd * n * n..(hd + 1) * n * n];
                    let off = hd * p * n;
                    gemm(p, n, n, 1.0, &gd[off..off + p * n], false, zb, true, 0.0, &mut dh[off..off + p * n]);
                }
                s.add_owned(h, dh);
            }
            if s.needs(z) {
                // dZ = hᵀ dh'
                let mut dz = vec![0.0; zv.len()];
                for hd in 0..heads {
                    let off = hd * p * n;
                    gemm(
                        n,
                        p,
                        n,
                        1.0,
                        &hv[off..off + p * n],
                        true,
                        &gd[off..off + p * n],
                        false,
                        0.0,
                        &mut dz[hd * n * n..(hd + 1) * n * n],
                    );
                }
                s.add_owned(z, dz);
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Checks every leaf gradient of `build` against central differences of
    /// the scalar `Σ out ⊙ w`.
    fn check(leaves: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Var, tol: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let eval = |vals: &[Tensor]| -> (Tape, Vec<Var>, Var) {
            let mut tape = Tape::new();
            let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone())).collect();
            let out = build(&mut tape, &vars);
            (tape, vars, out)
        };
        let (tape, vars, out) = eval(&leaves);
        let w = rand_tensor(&mut rng, tape.value(out).shape());
        let loss = |vals: &[Tensor]| -> f64 {
            let (t, _, o) = eval(vals);
            t.value(o).data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
        };
        let grads = tape.backward(&[(out, w.clone())]);
        let mut vals = leaves.clone();
        for (k, var) in vars.iter().enumerate() {
            let g = grads.get(*var).unwrap_or_else(|| Tensor::zeros(leaves[k].shape()));
            for i in 0..leaves[k].numel() {
                let o = vals[k].data()[i];
                vals[k].data_mut()[i] = o + 1e-6;
                let lp = loss(&vals);
                vals[k].data_mut()[i] = o - 1e-6;
                let lm = loss(&vals);
                vals[k].data_mut()[i] = o;
                let fd = (lp - lm) / 2e-6;
                let an = g.data()[i];
                assert!((fd - an).abs() <= tol * (1.0 + fd.abs()), "leaf {k}[{i}]: fd {fd} vs {an}");
            }
        }
    }

    #[test]
    fn dense_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let leaves = vec![
            rand_tensor(&mut rng, &[3, 4]),
            rand_tensor(&mut rng, &[4, 5]),
            rand_tensor(&mut rng, &[5]),
            rand_tensor(&mut rng, &[3, 1]),
        ];
        check(
            leaves,
            |t, v| {
                let y = t.linear(v[0], v[1], Some(v[2]));
                let y = t.silu(y);
                let y = t.mul_col(y, v[3]);
                let y2 = t.gelu(y);
                let y = t.mul(y, y2);
                let y = t.mul_row(y, v[2]);
                let s = t.softplus(y);
                let y = t.sub(s, y);
                let y = t.sigmoid(y);
                let y = t.scale(y, 1.5);
                t.add_scalar(y, 0.25)
            },
            1e-7,
        );
    }

    #[test]
    fn shape_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let leaves = vec![rand_tensor(&mut rng, &[4, 6]), rand_tensor(&mut rng, &[2, 6])];
        check(
            leaves,
            |t, v| {
                let a = t.slice_cols(v[0], 1..4);
                let b = t.slice_cols(v[1], 0..3);
                let c = t.concat_rows(&[a, b]);
                let d = t.concat_cols(&[c, c]);
                let e = t.slice_rows(d, 2..5);
                let m = t.mean_rows(e);
                let r = t.reshape(m, &[3, 2]);
                let g = t.gather(r, vec![5, 0, 0, 3], &[2, 2]);
                let g = t.reshape(g, &[1, 4]);
                let top = t.slice_rows(v[0], 0..1);
                let top = t.slice_cols(top, 0..4);
                t.add(g, top)
            },
            1e-7,
        );
    }

    #[test]
    fn norm_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let leaves = vec![
            rand_tensor(&mut rng, &[3, 6]),
            rand_tensor(&mut rng, &[3]),
            rand_tensor(&mut rng, &[3]),
            rand_tensor(&mut rng, &[6]),
        ];
        check(
            leaves,
            |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 3);
                t.rms_norm(y, v[3])
            },
            1e-6,
        );
    }

    #[test]
    fn conv_and_head_linear_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let leaves = vec![
            rand_tensor(&mut rng, &[7, 3]),
            rand_tensor(&mut rng, &[4, 3]),
            rand_tensor(&mut rng, &[1, 6]),
            rand_tensor(&mut rng, &[2, 3 * 4]),
            rand_tensor(&mut rng, &[8]),
        ];
        check(
            leaves,
            |t, v| {
                let y = t.depthwise_conv(v[0], v[1]);
                let hl = t.head_linear(v[2], v[3], v[4], 2, 3, 4);
                let m = t.mean_rows(y);
                let hl = t.slice_cols(hl, 0..3);
                t.add(m, hl)
            },
            1e-7,
        );
    }

    #[test]
    fn regram_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (heads, p, n, r) = (2, 3, 4, 2);
        let leaves = vec![
            rand_tensor(&mut rng, &[heads, n * r]),
            rand_tensor(&mut rng, &[heads, n * r]),
            rand_tensor(&mut rng, &[heads, r]),
            rand_tensor(&mut rng, &[heads, p * n]),
        ];
        check(
            leaves,
            move |t, v| {
                let u = t.normalize_columns(v[0], heads, n, r);
                let w = t.normalize_columns(v[1], heads, n, r);
                let th = t.softplus(v[2]);
                let z = t.cayley(u, w, th, heads, n, r).unwrap();
                t.rotate_state(v[3], z, heads, p, n)
            },
            1e-6,
        );
    }

    #[test]
    fn ssd_chunk_gradients_through_both_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let dims = ChunkDims {
            len: 5,
            heads: 2,
            head_dim: 2,
            state_dim: 3,
        };
        let delta = Tensor::new(&[5, 2], (0..10).map(|_| rng.random_range(0.1..0.6)).collect());
        let leaves = vec![
            rand_tensor(&mut rng, &[5, 4]),
            delta,
            Tensor::new(&[2], vec![-0.4, -0.9]),
            rand_tensor(&mut rng, &[5, 3]),
            rand_tensor(&mut rng, &[5, 3]),
            rand_tensor(&mut rng, &[2, 6]),
        ];
        check(
            leaves,
            move |t, v| {
                let (y, h) = t.ssd_chunk(v[0], v[1], v[2], v[3], v[4], v[5], dims);
                let hy = t.reshape(h, &[3, 4]);
                let y3 = t.slice_rows(y, 0..3);
                t.add(y3, hy)
            },
            1e-6,
        );
    }

    #[test]
    fn constants_and_inference_record_no_adjoints() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::full(&[2, 2], 1.0));
        let y = tape.silu(c);
        assert!(!tape.requires_grad(y));
        let mut inf = Tape::inference();
        let l = inf.leaf(Tensor::full(&[2, 2], 1.0));
        let y = inf.silu(l);
        assert!(!inf.requires_grad(y));

        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::full(&[2, 2], 2.0));
        let mut tape = Tape::new();
        let p1 = tape.param(&store, id);
        let p2 = tape.param(&store, id);
        assert_eq!(p1, p2);
        let ones = tape.constant(Tensor::full(&[2, 2], 1.0));
        let y = tape.mul(p1, ones);
        let g = tape.backward(&[(y, Tensor::full(&[2, 2], 1.0))]);
        let pg = g.params();
        assert_eq!(pg.len(), 1);
        assert_eq!(pg[0].1.data(), &[1.0; 4]);
    }
}
