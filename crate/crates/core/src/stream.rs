//! Per-frame streaming engine, latency benchmark and trace export.
//!
//! The engine advances every recurrence one frame at a time with buffers
//! whose size depends only on the model dimensions. Regram happens every
//! `chunk_size` frames since clip start; at a clip boundary (every
//! `clip_len` frames) the slow path regrams any pending partial chunk, and the
//! fast path and output head drop their state, exactly as clip-mode
//! evaluation does.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{ensure, Error, Result};
use crate::model::{Carry, DualPathModel, PathIds};
use crate::nn::{self, linear, rms_norm, softmax_rows};
use crate::real::{silu, softplus};
use crate::regram::{
    angle_stats, chunk_summary, layer_norm_groups, predict_planes, rotate_state_in_place, rotation_analytics, RegramMlp,
    RotationOp,
};
use crate::ssm::{recurrent_step, SsmState};
use crate::tensor::Tensor;
use crate::timewarp::IntensityNet;
use crate::train::argmax;

#[derive(Clone, Debug)]
struct PathState {
    ssm: SsmState<f64>,
    /// `(d_conv-1) x HP`, oldest row first.
    conv: Vec<f64>,
    /// Pending outputs of the current chunk, `chunk_size x HP`.
    acc: Vec<f64>,
    acc_rows: usize,
}

impl PathState {
    fn new(h: usize, p: usize, n: usize, d_conv: usize, chunk: usize) -> Self {
        PathState {
            ssm: SsmState::zeros(h, p, n),
            conv: vec![0.0; (d_conv - 1) * h * p],
            acc: vec![0.0; chunk * h * p],
            acc_rows: 0,
        }
    }

    fn reset(&mut self) {
        self.ssm.fill_zero();
        self.conv.iter_mut().for_each(|v| *v = 0.0);
        self.acc_rows = 0;
    }

    fn bytes(&self) -> usize {
        8 * (self.ssm.data().len() + self.conv.len() + self.acc.len()) + std::mem::size_of::<usize>()
    }
}

/// Result of one engine step.
#[derive(Clone, Debug)]
pub struct StepOutput {
    /// Frame index since stream start.
    pub frame: usize,
    pub probs: Vec<f64>,
    /// Per-layer intensity (`0` when the intensity net is disabled).
    pub lambda: Vec<f64>,
    /// Per layer, per head log-decay `αΔA` of the slow path.
    pub log_decay: Vec<Vec<f64>>,
    /// `‖h_t − h_{t−1}‖ / ‖h_{t−1}‖` of the first layer's slow state
    /// (`0` while the previous state is zero).
    pub dh_rel: f64,
    /// Slow-path rotations applied after this frame, as `(layer, op)`.
    pub rotations: Vec<(usize, RotationOp<f64>)>,
}

pub struct StreamEngine<'m> {
    model: &'m DualPathModel,
    clip_len: usize,
    slow: Vec<PathState>,
    fast: Vec<PathState>,
    head: PathState,
    slow_mlp: Vec<RegramMlp<f64>>,
    fast_mlp: Vec<RegramMlp<f64>>,
    head_mlp: RegramMlp<f64>,
    intensity: Vec<Option<IntensityNet<f64>>>,
    frame: usize,
    clip_frame: usize,
}

/// `‖b − a‖ / ‖a‖`, or `0` when `a` is zero.
pub fn relative_change(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| (y - x) * (y - x)).sum::<f64>().sqrt() / na
}

impl<'m> StreamEngine<'m> {
    /// Engine at video start. Fast path and head reset every `clip_len` frames.
    pub fn new(model: &'m DualPathModel, clip_len: usize) -> Result<Self> {
        ensure!(clip_len > 0, "clip length must be positive");
        let c = model.config();
        let mk = || PathState::new(c.heads, c.head_dim, c.state_dim, c.d_conv, c.chunk_size);
        let ids = model.ids();
        Ok(StreamEngine {
            model,
            clip_len,
            slow: (0..c.layers).map(|_| mk()).collect(),
            fast: (0..c.layers).map(|_| mk()).collect(),
            head: mk(),
            slow_mlp: ids.blocks.iter().map(|b| model.regram_mlp(&b.slow.regram)).collect(),
            fast_mlp: ids.blocks.iter().map(|b| model.regram_mlp(&b.fast.regram)).collect(),
            head_mlp: model.regram_mlp(&ids.head.path.regram),
            intensity: (0..c.layers).map(|k| c.use_intensity.then(|| model.intensity_net(k))).collect(),
            frame: 0,
            clip_frame: 0,
        })
    }

    pub fn frames_processed(&self) -> usize {
        self.frame
    }

    /// Bytes held by recurrent state and chunk accumulators.
    pub fn state_bytes(&self) -> usize {
        self.slow.iter().chain(&self.fast).map(PathState::bytes).sum::<usize>()
            + self.head.bytes()
            + 2 * std::mem::size_of::<usize>()
    }

    /// Slow-path SSM state of layer `k`.
    pub fn slow_state(&self, k: usize) -> &SsmState<f64> {
        &self.slow[k].ssm
    }

    /// Continues a video from clip-mode carries: the slow paths take the
    /// carried states and the engine restarts at a clip boundary.
    pub fn resume(&mut self, carries: &[Carry]) -> Result<()> {
        ensure!(carries.len() == self.slow.len(), "expected {} layer carries, got {}", self.slow.len(), carries.len());
        for (st, c) in self.slow.iter_mut().zip(carries) {
            ensure!(
                c.ssm.same_shape(&st.ssm) && c.conv.tail().len() == st.conv.len(),
                "carry does not match the model dimensions"
            );
        }
        for (st, c) in self.slow.iter_mut().zip(carries) {
            st.reset();
            st.ssm = c.ssm.clone();
            st.conv.copy_from_slice(c.conv.tail());
        }
        for st in self.fast.iter_mut().chain(std::iter::once(&mut self.head)) {
            st.reset();
        }
        self.clip_frame = 0;
        Ok(())
    }

    fn p(&self, id: crate::params::ParamId) -> &'m [f64] {
        self.model.params().get(id).data()
    }

    /// Carried conv, selective projection, scan and D skip for one frame.
    /// Returns `(y, log-decay per head)`; `y` is also queued for regram.
    fn path_step(
        model: &DualPathModel,
        ids: &PathIds,
        st: &mut PathState,
        x_pre: &[f64],
        sel_extra: Option<&[f64]>,
        intensity: Option<&IntensityNet<f64>>,
    ) -> Result<(Vec<f64>, Vec<f64>, f64)> {
        let c = model.config();
        let (h, hp, n, dc) = (c.heads, c.d_inner(), c.state_dim, c.d_conv);
        let g = |id| model.params().get(id).data();
        // causal conv over [tail; x]
        let kern = g(ids.conv);
        let mut xc = vec![0.0; hp];
        for j in 0..dc {
            let row = if j + 1 < dc { &st.conv[j * hp..(j + 1) * hp] } else { x_pre };
            for ch in 0..hp {
                xc[ch] += kern[j * hp + ch] * row[ch];
            }
        }
        xc.iter_mut().for_each(|v| *v = silu(*v));
        if dc > 1 {
            st.conv.copy_within(hp.., 0);
            let last = st.conv.len() - hp;
            st.conv[last..].copy_from_slice(x_pre);
        }
        let lambda = match intensity {
            Some(net) => net.intensity(&xc)?,
            None => 0.0,
        };
        let sel_in: Vec<f64> = match sel_extra {
            Some(extra) => xc.iter().chain(extra).copied().collect(),
            None => xc.clone(),
        };
        let sel_w = c.dt_rank + 2 * n;
        let sel = linear(&sel_in, 1, g(ids.x_proj), sel_in.len(), sel_w, None);
        let (draw, rest) = sel.split_at(c.dt_rank);
        let (b, cc) = rest.split_at(n);
        let dt_pre = linear(draw, 1, g(ids.dt_w), c.dt_rank, h, Some(g(ids.dt_b)));
        let alpha = 1.0 + lambda;
        let dt: Vec<f64> = dt_pre
            .iter()
            .map(|&v| if intensity.is_some() { softplus(v) * alpha } else { softplus(v) })
            .collect();
        let a: Vec<f64> = g(ids.a_log).iter().map(|&v| -softplus(v)).collect();
        let log_decay: Vec<f64> = dt.iter().zip(&a).map(|(d, a)| d * a).collect();
        let mut y = vec![0.0; hp];
        recurrent_step(&xc, &dt, &a, b, cc, &mut st.ssm, &mut y);
        if c.use_d_skip {
            for (yv, (d, x)) in y.iter_mut().zip(g(ids.d_skip).iter().zip(&xc)) {
                *yv += d * x;
            }
        }
        let r = st.acc_rows;
        st.acc[r * hp..(r + 1) * hp].copy_from_slice(&y);
        st.acc_rows += 1;
        Ok((y, log_decay, lambda))
    }

    /// Chunk summary → planes → Cayley → `h ← hZ`, then clears the queue.
    fn regram(model: &DualPathModel, ids: &PathIds, st: &mut PathState, mlp: &RegramMlp<f64>) -> Result<Option<RotationOp<f64>>> {
        let c = model.config();
        let rows = st.acc_rows;
        st.acc_rows = 0;
        if !c.use_regram || rows == 0 {
            return Ok(None);
        }
        let g = |id| model.params().get(id).data();
        let hp = c.d_inner();
        let phi = chunk_summary(
            &st.acc[..rows * hp],
            rows,
            c.heads,
            c.head_dim,
            g(ids.regram.ln_gamma),
            g(ids.regram.ln_beta),
        )?;
        let op = RotationOp::from_generators(predict_planes(&phi, mlp)?)?;
        rotate_state_in_place(st.ssm.data_mut(), &op.z, c.heads, c.head_dim, c.state_dim);
        Ok(Some(op))
    }

    /// Advances the whole model by one frame.
    pub fn step(&mut self, frame: &[f64]) -> Result<StepOutput> {
        let model = self.model;
        let c = model.config();
        ensure!(frame.len() == c.feature_dim, "frame has {} values, expected {}", frame.len(), c.feature_dim);
        if frame.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("frame must be finite"));
        }
        let ids = model.ids();
        let (d, hp) = (c.d_model, c.d_inner());
        let x = linear(frame, 1, self.p(ids.embed_w), c.feature_dim, d, Some(self.p(ids.embed_b)));
        let (mut x, _, _) = layer_norm_groups(&x, d, self.p(ids.embed_ln.0), self.p(ids.embed_ln.1));

        let chunk_end = self.clip_frame + 1 == self.clip_len || (self.clip_frame + 1) % c.chunk_size == 0;
        let clip_end = self.clip_frame + 1 == self.clip_len;
        let h_prev = self.slow[0].ssm.data().to_vec();
        let mut lambdas = Vec::with_capacity(c.layers);
        let mut log_decays = Vec::with_capacity(c.layers);
        let mut rotations = Vec::new();
        for (k, b) in ids.blocks.iter().enumerate() {
            let (u, _, _) = layer_norm_groups(&x, d, self.p(b.norm1.0), self.p(b.norm1.1));
            let xs = linear(&u, 1, self.p(b.slow_in), d, hp, None);
            let (y_s, ld, lam) = Self::path_step(model, &b.slow, &mut self.slow[k], &xs, None, self.intensity[k].as_ref())?;
            lambdas.push(lam);
            log_decays.push(ld);
            let xz = linear(&u, 1, self.p(b.fast_in), d, 2 * hp, None);
            let (xf, z) = xz.split_at(hp);
            let (y_f, _, _) = Self::path_step(model, &b.fast, &mut self.fast[k], xf, Some(&y_s), None)?;
            if (self.clip_frame + 1) % c.chunk_size == 0 && !clip_end {
                Self::regram(model, &b.fast, &mut self.fast[k], &self.fast_mlp[k])?;
            }
            if chunk_end {
                if let Some(op) = Self::regram(model, &b.slow, &mut self.slow[k], &self.slow_mlp[k])? {
                    rotations.push((k, op));
                }
            }
            let gated: Vec<f64> = y_s.iter().zip(&y_f).zip(z).map(|((a, b), z)| (a + b) * silu(*z)).collect();
            let (normed, _) = rms_norm(&gated, hp, self.p(b.out_norm));
            let out = linear(&normed, 1, self.p(b.out_proj), hp, d, None);
            let x1: Vec<f64> = x.iter().zip(&out).map(|(a, b)| a + b).collect();
            let (v, _, _) = layer_norm_groups(&x1, d, self.p(b.norm2.0), self.p(b.norm2.1));
            let f = c.ffn_mult * d;
            let hid = linear(&v, 1, self.p(b.ffn[0]), d, f, Some(self.p(b.ffn[1])));
            let hid: Vec<f64> = hid.into_iter().map(nn::gelu).collect();
            let o = linear(&hid, 1, self.p(b.ffn[2]), f, d, Some(self.p(b.ffn[3])));
            x = x1.iter().zip(&o).map(|(a, b)| a + b).collect();
        }

        let hd = &ids.head;
        let (u, _, _) = layer_norm_groups(&x, d, self.p(hd.norm.0), self.p(hd.norm.1));
        let sz = linear(&u, 1, self.p(hd.in_proj), d, 2 * hp, None);
        let (s, z) = sz.split_at(hp);
        let (y, _, _) = Self::path_step(model, &hd.path, &mut self.head, s, None, None)?;
        if (self.clip_frame + 1) % c.chunk_size == 0 && !clip_end {
            Self::regram(model, &hd.path, &mut self.head, &self.head_mlp)?;
        }
        let gated: Vec<f64> = y.iter().zip(z).map(|(a, z)| a * silu(*z)).collect();
        let logits = linear(&gated, 1, self.p(hd.out_w), hp, c.classes, Some(self.p(hd.out_b)));
        let probs = softmax_rows(&logits, c.classes);

        let dh_rel = relative_change(&h_prev, self.slow[0].ssm.data());
        let out = StepOutput {
            frame: self.frame,
            probs,
            lambda: lambdas,
            log_decay: log_decays,
            dh_rel,
            rotations,
        };
        self.frame += 1;
        self.clip_frame += 1;
        if clip_end {
            self.clip_frame = 0;
            for st in self.fast.iter_mut().chain(std::iter::once(&mut self.head)) {
                st.reset();
            }
        }
        Ok(out)
    }
}

// ---- benchmark -------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct LatencyPoint {
    pub frame: usize,
    /// Median per-frame latency in a window centred on `frame`, seconds.
    pub median_s: f64,
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub frames: usize,
    pub points: Vec<LatencyPoint>,
    /// Least-squares slope of block-median latency against frame index,
    /// seconds per frame, with its 95% confidence interval.
    pub slope: f64,
    pub slope_ci: (f64, f64),
    pub state_bytes_start: usize,
    pub state_bytes_end: usize,
    pub mean_s: f64,
}

impl BenchReport {
    pub fn ratio(&self, a: usize, b: usize) -> Option<f64> {
        let get = |f| self.points.iter().find(|p| p.frame == f).map(|p| p.median_s);
        Some(get(a)? / get(b)?)
    }

    pub fn slope_ci_contains_zero(&self) -> bool {
        self.slope_ci.0 <= 0.0 && 0.0 <= self.slope_ci.1
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "frames": self.frames,
            "points": self.points.iter().map(|p| serde_json::json!({"frame": p.frame, "median_s": p.median_s})).collect::<Vec<_>>(),
            "slope_s_per_frame": self.slope,
            "slope_ci95": [self.slope_ci.0, self.slope_ci.1],
            "state_bytes": [self.state_bytes_start, self.state_bytes_end],
            "mean_s": self.mean_s,
        })
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Ordinary least squares `y = a + b x`; returns `(b, 95% CI of b)`.
pub fn ols_slope(xs: &[f64], ys: &[f64]) -> Result<(f64, (f64, f64))> {
    let n = xs.len();
    ensure!(n >= 3 && ys.len() == n, "regression needs at least three paired points");
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    ensure!(sxx > 0.0, "regression needs distinct x values");
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let b = sxy / sxx;
    let a = my - b * mx;
    let sse: f64 = xs.iter().zip(ys).map(|(x, y)| (y - a - b * x).powi(2)).sum();
    let se = (sse / (n - 2) as f64 / sxx).sqrt();
    let t = StudentsT::new(0.0, 1.0, (n - 2) as f64)
        .map_err(|e| Error::domain(e.to_string()))?
        .inverse_cdf(0.975);
    Ok((b, (b - t * se, b + t * se)))
}

/// Streams `total` frames produced by `source` and samples per-frame latency.
///
/// Each report point is the median latency over `window` frames centred on
/// it. The slope is fitted to the medians of `blocks` equal spans covering
/// the run, which keeps the fit robust against scheduler outliers.
pub fn bench(
    engine: &mut StreamEngine<'_>,
    total: usize,
    report_points: &[usize],
    window: usize,
    blocks: usize,
    mut source: impl FnMut(usize) -> Vec<f64>,
) -> Result<BenchReport> {
    let max_point = report_points.iter().copied().max().unwrap_or(0);
    ensure!(total >= 2 * max_point, "total frames must be at least twice the largest report point");
    ensure!(window >= 1 && blocks >= 3 && total >= blocks, "need window >= 1 and 3 <= blocks <= total");
    let start_bytes = engine.state_bytes();
    let mut lat = Vec::with_capacity(total);
    for t in 0..total {
        let frame = source(t);
        let t0 = Instant::now();
        let out = engine.step(&frame)?;
        lat.push(t0.elapsed().as_secs_f64());
        std::hint::black_box(out);
    }
    let points = report_points
        .iter()
        .map(|&p| {
            let lo = p.saturating_sub(window / 2);
            let hi = (lo + window).min(total);
            LatencyPoint {
                frame: p,
                median_s: median(&mut lat[lo..hi].to_vec()),
            }
        })
        .collect();
    let span = total / blocks;
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for b in 0..blocks {
        let seg = &lat[b * span..(b + 1) * span];
        xs.push((b * span) as f64 + span as f64 / 2.0);
        ys.push(median(&mut seg.to_vec()));
    }
    let (slope, slope_ci) = ols_slope(&xs, &ys)?;
    Ok(BenchReport {
        frames: total,
        points,
        slope,
        slope_ci,
        state_bytes_start: start_bytes,
        state_bytes_end: engine.state_bytes(),
        mean_s: lat.iter().sum::<f64>() / total as f64,
    })
}

// ---- traces ----------------------------------------------------------------

/// Everything recorded while streaming one feature file.
#[derive(Clone, Debug, Default)]
pub struct TraceRun {
    pub steps: Vec<StepSummary>,
    /// `(layer, chunk index, end frame, op)`
    pub rotations: Vec<(usize, usize, usize, RotationOp<f64>)>,
    /// Frame-subsampled first-layer slow states.
    pub states: Vec<(usize, Vec<f64>)>,
}

#[derive(Clone, Debug)]
pub struct StepSummary {
    pub frame: usize,
    pub predicted: usize,
    pub probs: Vec<f64>,
    pub lambda: Vec<f64>,
    pub log_decay: Vec<Vec<f64>>,
    pub dh_rel: f64,
}

/// Streams every row of `features` and records traces. Every
/// `state_every`-th frame the first-layer slow state is kept (`0` keeps none).
pub fn run_trace(engine: &mut StreamEngine<'_>, features: &Tensor, state_every: usize) -> Result<TraceRun> {
    let (t_len, _) = features.dims2();
    let mut run = TraceRun::default();
    let mut chunk_counts = vec![0usize; engine.slow.len()];
    for t in 0..t_len {
        let out = engine.step(features.row(t))?;
        for (k, op) in out.rotations {
            run.rotations.push((k, chunk_counts[k], out.frame, op));
            chunk_counts[k] += 1;
        }
        if state_every > 0 && t % state_every == 0 {
            run.states.push((t, engine.slow_state(0).data().to_vec()));
        }
        run.steps.push(StepSummary {
            frame: out.frame,
            predicted: argmax(&out.probs),
            probs: out.probs,
            lambda: out.lambda,
            log_decay: out.log_decay,
            dh_rel: out.dh_rel,
        });
    }
    Ok(run)
}

/// Linear-interpolated percentile of an unsorted sample.
pub fn percentile(v: &[f64], q: f64) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    if s.len() == 1 {
        return s[0];
    }
    let pos = q.clamp(0.0, 1.0) * (s.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    s[lo] + (pos - lo as f64) * (s[hi] - s[lo])
}

impl TraceRun {
    /// Per-frame CSV: index, prediction, per-layer λ, per-layer mean decay
    /// `exp(αΔA)` with its 10th / 90th percentile across heads, λ mean and
    /// `dh_rel`.
    pub fn frames_csv(&self) -> String {
        let k = self.steps.first().map_or(0, |s| s.lambda.len());
        let mut s = String::from("frame,predicted");
        for l in 0..k {
            write!(s, ",lambda_{l}").unwrap();
        }
        s.push_str(",lambda_mean");
        for l in 0..k {
            write!(s, ",dA_mean_{l},dA_p10_{l},dA_p90_{l}").unwrap();
        }
        s.push_str(",dh_rel\n");
        for st in &self.steps {
            write!(s, "{},{}", st.frame, st.predicted).unwrap();
            for l in &st.lambda {
                write!(s, ",{l:.9}").unwrap();
            }
            write!(s, ",{:.9}", st.lambda.iter().sum::<f64>() / k.max(1) as f64).unwrap();
            for ld in &st.log_decay {
                let da: Vec<f64> = ld.iter().map(|v| v.exp()).collect();
                let mean = da.iter().sum::<f64>() / da.len() as f64;
                write!(s, ",{mean:.9},{:.9},{:.9}", percentile(&da, 0.1), percentile(&da, 0.9)).unwrap();
            }
            writeln!(s, ",{:.9}", st.dh_rel).unwrap();
        }
        s
    }

    /// Per-chunk angle statistics: one row per layer, chunk and head.
    pub fn angles_csv(&self) -> String {
        let mut s = String::from("layer,chunk,end_frame,head,angle_min_deg,angle_mean_deg,angle_max_deg\n");
        for (k, c, f, op) in &self.rotations {
            for (h, a) in angle_stats(op).iter().enumerate() {
                writeln!(s, "{k},{c},{f},{h},{:.9},{:.9},{:.9}", a.min, a.mean, a.max).unwrap();
            }
        }
        s
    }

    /// Plane cosine of each chunk against itself and every earlier chunk of
    /// the same layer.
    pub fn plane_cosine_csv(&self) -> Result<String> {
        let mut s = String::from("layer,chunk,prior_chunk,plane_cosine\n");
        for (i, (k, c, _, op)) in self.rotations.iter().enumerate() {
            for (k2, c2, _, op2) in &self.rotations[..=i] {
                if k2 == k {
                    let a = rotation_analytics(op, op2)?;
                    writeln!(s, "{k},{c},{c2},{:.9}", a.plane_cosine).unwrap();
                }
            }
        }
        Ok(s)
    }

    /// Raw dump: `u32 count, u32 width`, then per record `u32 frame` and
    /// `width` little-endian f32 values.
    pub fn states_bin(&self) -> Vec<u8> {
        let width = self.states.first().map_or(0, |(_, v)| v.len());
        let mut out = Vec::new();
        out.extend_from_slice(&(self.states.len() as u32).to_le_bytes());
        out.extend_from_slice(&(width as u32).to_le_bytes());
        for (f, v) in &self.states {
            out.extend_from_slice(&(*f as u32).to_le_bytes());
            for &x in v {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        out
    }

    /// Writes `frames.csv`, `angles.csv`, `plane_cosine.csv` and, when states
    /// were kept, `slow_states.bin` into `dir`.
    pub fn export(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, bytes: &[u8]| {
            let p = dir.join(name);
            fs::write(&p, bytes).map_err(|e| Error::io(p, e))
        };
        write("frames.csv", self.frames_csv().as_bytes())?;
        write("angles.csv", self.angles_csv().as_bytes())?;
        write("plane_cosine.csv", self.plane_cosine_csv()?.as_bytes())?;
        if !self.states.is_empty() {
            write("slow_states.bin", &self.states_bin())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ForwardOptions, ModelConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            feature_dim: 5,
            d_model: 8,
            heads: 2,
            head_dim: 4,
            state_dim: 4,
            d_conv: 3,
            chunk_size: 4,
            layers: 2,
            classes: 3,
            rank: 2,
            dt_rank: 2,
            ffn_mult: 2,
            ..Default::default()
        }
    }

    fn feats(t: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(&[t, 5], (0..t * 5).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn streaming_matches_clip_mode_across_clips() {
        let mut model = DualPathModel::new(cfg(), 1).unwrap();
        crate::train::perturb_for_check(&mut model, 2);
        // clip length not a multiple of the chunk: exercises the clip-end regram
        let clip = 10;
        let x = feats(3 * clip + 4, 3);
        let mut engine = StreamEngine::new(&model, clip).unwrap();
        let mut carries = model.zero_carries();
        let mut worst: f64 = 0.0;
        let mut start = 0;
        while start < x.shape()[0] {
            let end = (start + clip).min(x.shape()[0]);
            let sub = Tensor::new(&[end - start, 5], x.data()[start * 5..end * 5].to_vec());
            let out = model.infer_clip(&sub, &carries, ForwardOptions { diagnostics: true }).unwrap();
            for t in 0..end - start {
                let s = engine.step(x.row(start + t)).unwrap();
                for (a, b) in s.probs.iter().zip(out.probs.row(t)) {
                    worst = worst.max((a - b).abs());
                }
                for (k, l) in s.lambda.iter().enumerate() {
                    worst = worst.max((l - out.lambda_traces[k][t]).abs());
                }
            }
            carries = out.carries;
            for k in 0..2 {
                let diff = carries[k].ssm.data().iter().zip(engine.slow_state(k).data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                worst = worst.max(diff);
            }
            start = end;
        }
        assert!(worst < 1e-10, "{worst}");
    }

    #[test]
    fn first_frame_and_footprint() {
        let model = DualPathModel::new(cfg(), 4).unwrap();
        let x = feats(1, 5);
        let clip = model.infer_clip(&x, &model.zero_carries(), ForwardOptions::default()).unwrap();
        let mut e = StreamEngine::new(&model, 16).unwrap();
        let b0 = e.state_bytes();
        let s = e.step(x.row(0)).unwrap();
        assert!(s.probs.iter().zip(clip.probs.row(0)).all(|(a, b)| (a - b).abs() < 1e-12));
        for t in 0..50 {
            e.step(feats(1, t).row(0)).unwrap();
        }
        assert_eq!(e.state_bytes(), b0);
        assert!(e.step(&[0.0; 4]).is_err());
    }

    #[test]
    fn dh_rel_is_pure_decay_without_input() {
        let c = ModelConfig {
            layers: 1,
            ..cfg()
        };
        let mut model = DualPathModel::new(c.clone(), 6).unwrap();
        model.force_nested_baseline();
        let params = model.params_mut();
        let w = params.by_name("layers.0.slow.in_proj.weight").unwrap().shape().to_vec();
        params.set("layers.0.slow.in_proj.weight", Tensor::zeros(&w)).unwrap();
        params.set("layers.0.slow.a_log", Tensor::full(&[c.heads], 0.3)).unwrap();
        params.set("layers.0.slow.dt_proj.bias", Tensor::full(&[c.heads], -0.7)).unwrap();
        let mut carries = model.zero_carries();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        carries[0].ssm.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        let mut e = StreamEngine::new(&model, 64).unwrap();
        e.resume(&carries).unwrap();
        let a_bar = (-softplus(0.3f64) * softplus(-0.7f64)).exp();
        for t in 0..12 {
            let s = e.step(feats(1, 100 + t as u64).row(0)).unwrap();
            assert!((s.dh_rel - (1.0 - a_bar)).abs() < 1e-12, "{} vs {}", s.dh_rel, 1.0 - a_bar);
        }
    }

    #[test]
    fn resume_continues_clip_mode() {
        let model = DualPathModel::new(cfg(), 9).unwrap();
        let x = feats(16, 10);
        let first = Tensor::new(&[8, 5], x.data()[..40].to_vec());
        let second = Tensor::new(&[8, 5], x.data()[40..].to_vec());
        let a = model.infer_clip(&first, &model.zero_carries(), ForwardOptions::default()).unwrap();
        let b = model.infer_clip(&second, &a.carries, ForwardOptions::default()).unwrap();
        let mut e = StreamEngine::new(&model, 8).unwrap();
        e.resume(&a.carries).unwrap();
        for t in 0..8 {
            let s = e.step(second.row(t)).unwrap();
            assert!(s.probs.iter().zip(b.probs.row(t)).all(|(p, q)| (p - q).abs() < 1e-10));
        }
        assert!(e.resume(&[]).is_err());
    }

    #[test]
    fn ols_recovers_a_line() {
        let xs: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 + 0.5 * x).collect();
        let (b, (lo, hi)) = ols_slope(&xs, &ys).unwrap();
        assert!((b - 0.5).abs() < 1e-12 && lo <= 0.5 && hi >= 0.5 && hi - lo < 1e-9);
    }

    #[test]
    fn percentiles_bracket_the_mean() {
        let v = [0.3, 0.9, 0.5, 0.1];
        assert!((percentile(&v, 0.0) - 0.1).abs() < 1e-15);
        assert!((percentile(&v, 1.0) - 0.9).abs() < 1e-15);
        assert!((percentile(&v, 0.5) - 0.4).abs() < 1e-15);
    }
}
