//! TBPTT training with cross-clip carry, gradient checking and the phase
//! recognition metrics.

use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::data::Video;
use crate::error::{ensure, Error, Result};
use crate::losses::{total_loss, LossBreakdown, LossWeights, PhaseTargets};
use crate::model::{Carry, DualPathModel, ForwardOptions, ModelConfig};
use crate::nn::{softmax_backward, softmax_rows};
use crate::params::ParamStore;
use crate::real::Precision;
use crate::ssm::{ConvCarry, SsmState};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    /// Clip length `L` in frames.
    pub clip_len: usize,
    /// Clips per truncation window.
    pub tbptt_k: usize,
    pub w_sm: f64,
    pub w_trans: f64,
    pub label_smoothing: f64,
    pub sigma_l: f64,
    pub sigma_r: f64,
    /// Global gradient-norm clip.
    pub grad_clip: f64,
    pub precision: Precision,
    pub seed: u64,
    /// Stop once mean test accuracy reaches this fraction; `0` disables.
    pub target_accuracy: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            weight_decay: 0.01,
            warmup_epochs: 10,
            epochs: 50,
            clip_len: 256,
            tbptt_k: 6,
            w_sm: 1.0,
            w_trans: 1.0,
            label_smoothing: 0.1,
            sigma_l: 2.0,
            sigma_r: 12.0,
            grad_clip: 1.0,
            precision: Precision::Double,
            seed: 0,
            target_accuracy: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.clip_len == 0 || self.tbptt_k == 0 || self.epochs == 0 {
            return bad("clip_len, tbptt_k and epochs must be positive");
        }
        if self.sigma_l <= 0.0 || self.sigma_r <= 0.0 {
            return bad("sigma_l and sigma_r must be positive");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("label_smoothing must lie in [0, 1)");
        }
        if self.grad_clip <= 0.0 || self.weight_decay < 0.0 {
            return bad("grad_clip must be positive and weight_decay non-negative");
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            w_sm: self.w_sm,
            w_trans: self.w_trans,
            label_smoothing: self.label_smoothing,
        }
    }
}

/// Linear warmup followed by cosine decay to zero, in optimizer steps.
#[derive(Clone, Copy, Debug)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Schedule {
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let prog = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * prog).cos())
    }
}

/// AdamW with decoupled weight decay on matrix weights.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    decay: Vec<bool>,
    t: i32,
}

impl AdamW {
    pub fn new(params: &ParamStore, weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: params.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect(),
            v: params.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect(),
            decay: params
                .iter()
                .map(|(_, n, _)| n.ends_with(".weight") || n.ends_with(".w1") || n.ends_with(".w2"))
                .collect(),
            t: 0,
        }
    }

    /// One update with dense gradients in store order.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f64>], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let p = params.get_mut(id).data_mut();
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            let wd = if self.decay[i] { self.weight_decay } else { 0.0 };
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let upd = (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
                p[j] -= lr * (upd + wd * p[j]);
            }
        }
    }
}

/// Scales `grads` so that their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// One clip of a video together with its supervision.
#[derive(Clone, Debug)]
pub struct Clip {
    pub video: usize,
    pub start: usize,
    pub features: Tensor,
    pub targets: PhaseTargets,
}

/// Cuts a labeled video into consecutive clips of at most `clip_len` frames.
pub fn make_clips(video_id: usize, video: &Video, clip_len: usize, sigma_l: f64, sigma_r: f64) -> Result<Vec<Clip>> {
    ensure!(clip_len > 0, "clip length must be positive");
    let labels = video.labels()?;
    let mut out = Vec::new();
    let mut start = 0;
    while start < video.len() {
        let end = (start + clip_len).min(video.len());
        let part = video.slice(start..end);
        let prev = (start > 0).then(|| labels[start - 1]);
        let targets = PhaseTargets::with_previous(part.labels.expect("labeled"), part.mask, prev, sigma_l, sigma_r)?;
        out.push(Clip {
            video: video_id,
            start,
            features: part.features,
            targets,
        });
        start = end;
    }
    Ok(out)
}

fn check_window(clips: &[Clip]) -> Result<()> {
    ensure!(!clips.is_empty(), "a window needs at least one clip");
    for w in clips.windows(2) {
        ensure!(w[0].video == w[1].video, "window mixes videos {} and {}", w[0].video, w[1].video);
        ensure!(
            w[0].start + w[0].targets.len() == w[1].start,
            "clips at {} and {} are not contiguous",
            w[0].start,
            w[1].start
        );
    }
    Ok(())
}

/// Loss and gradients of one truncation window.
#[derive(Clone, Debug)]
pub struct WindowGrads {
    /// Mean over the window's clips.
    pub loss: LossBreakdown,
    /// Dense gradients in store order.
    pub grads: Vec<Vec<f64>>,
    pub carries: Vec<Carry>,
    /// Per clip `T x C` probabilities.
    pub probs: Vec<Tensor>,
}

fn mean_breakdown(parts: &[LossBreakdown]) -> LossBreakdown {
    let k = parts.len() as f64;
    let avg = |f: fn(&LossBreakdown) -> f64| parts.iter().map(f).sum::<f64>() / k;
    LossBreakdown {
        ce: avg(|b| b.ce),
        smooth: avg(|b| b.smooth),
        trans: avg(|b| b.trans),
        total: avg(|b| b.total),
        w_sm: parts[0].w_sm,
        w_trans: parts[0].w_trans,
        empty_mask: parts.iter().all(|b| b.empty_mask),
    }
}

/// Forward over the window with carry propagation and one backward pass.
/// Carries entering the window are constants.
pub fn window_grads(model: &DualPathModel, clips: &[Clip], carries: &[Carry], weights: LossWeights) -> Result<WindowGrads> {
    window_eval(model, clips, carries, weights, true)
}

/// Mean window loss without gradients.
pub fn window_loss(model: &DualPathModel, clips: &[Clip], carries: &[Carry], weights: LossWeights) -> Result<f64> {
    Ok(window_eval(model, clips, carries, weights, false)?.loss.total)
}

fn window_eval(model: &DualPathModel, clips: &[Clip], carries: &[Carry], weights: LossWeights, grad: bool) -> Result<WindowGrads> {
    check_window(clips)?;
    let classes = model.config().classes;
    let mut tape = if grad { Tape::new() } else { Tape::inference() };
    let mut cv = model.carries_on_tape(&mut tape, carries);
    let k = clips.len() as f64;
    let mut seeds = Vec::new();
    let mut parts = Vec::new();
    let mut probs_out = Vec::new();
    for clip in clips {
        let out = model.forward_clip(&mut tape, &clip.features, &cv, ForwardOptions::default())?;
        let logits = tape.value(out.logits);
        let probs = softmax_rows(logits.data(), classes);
        let lambdas: Vec<Vec<f64>> = out
            .lambdas
            .iter()
            .flatten()
            .map(|v| tape.value(*v).data().to_vec())
            .collect();
        let (b, g) = total_loss(&probs, classes, &lambdas, &clip.targets, weights)?;
        if grad {
            let dlogits: Vec<f64> = softmax_backward(&probs, &g.probs, classes).into_iter().map(|v| v / k).collect();
            seeds.push((out.logits, Tensor::new(logits.shape(), dlogits)));
            for (var, dl) in out.lambdas.iter().flatten().zip(g.lambdas) {
                let shape = tape.value(*var).shape().to_vec();
                seeds.push((*var, Tensor::new(&shape, dl.into_iter().map(|v| v / k).collect())));
            }
        }
        probs_out.push(Tensor::new(&[clip.targets.len(), classes], probs));
        parts.push(b);
        cv = out.carries;
    }
    let params = model.params();
    let mut grads: Vec<Vec<f64>> = params.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
    if grad {
        for (pid, g) in tape.backward(&seeds).params() {
            grads[pid.0] = g.into_data();
        }
    }
    Ok(WindowGrads {
        loss: mean_breakdown(&parts),
        grads,
        carries: model.carries_from_tape(&tape, &cv)?,
        probs: probs_out,
    })
}

/// Forward, backward, clip and one optimizer update on a window of clips.
pub fn tbptt_step(
    model: &mut DualPathModel,
    opt: &mut AdamW,
    clips: &[Clip],
    carries: &[Carry],
    cfg: &TrainConfig,
    lr: f64,
) -> Result<(LossBreakdown, Vec<Carry>)> {
    let mut wg = window_grads(model, clips, carries, cfg.loss_weights())?;
    if !wg.loss.total.is_finite() {
        return Err(Error::Diverged {
            epoch: 0,
            step: 0,
            detail: format!("non-finite loss {:?}", wg.loss),
        });
    }
    clip_global_norm(&mut wg.grads, cfg.grad_clip);
    opt.step(model.params_mut(), &wg.grads, lr);
    if cfg.precision == Precision::Single {
        for id in model.params().ids().collect::<Vec<_>>() {
            model.params_mut().get_mut(id).data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }
    Ok((wg.loss, wg.carries))
}

// ---- metrics ---------------------------------------------------------------

/// Video-averaged accuracy and phase-then-video averaged Pr / Re / Jac, all
/// as fractions.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub jaccard: f64,
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Acc {:.2}%  Pr {:.2}%  Re {:.2}%  Jac {:.2}%",
            100.0 * self.accuracy,
            100.0 * self.precision,
            100.0 * self.recall,
            100.0 * self.jaccard
        )
    }
}

fn mean_defined(v: &[Option<f64>]) -> Option<f64> {
    let d: Vec<f64> = v.iter().flatten().copied().collect();
    (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64)
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Per-video metrics over valid frames. Ratios with a zero denominator are
/// left out of the phase average.
pub fn video_metrics(pred: &[usize], truth: &[usize], mask: &[bool], classes: usize) -> Result<Metrics> {
    ensure!(pred.len() == truth.len() && truth.len() == mask.len(), "prediction, truth and mask lengths differ");
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fne = vec![0usize; classes];
    let mut correct = 0;
    let mut n = 0;
    for t in (0..pred.len()).filter(|&t| mask[t]) {
        let (p, y) = (pred[t], truth[t]);
        ensure!(p < classes && y < classes, "class index out of range");
        n += 1;
        if p == y {
            correct += 1;
            tp[y] += 1;
        } else {
            fp[p] += 1;
            fne[y] += 1;
        }
    }
    let pr: Vec<_> = (0..classes).map(|c| ratio(tp[c], tp[c] + fp[c])).collect();
    let re: Vec<_> = (0..classes).map(|c| ratio(tp[c], tp[c] + fne[c])).collect();
    let jac: Vec<_> = (0..classes).map(|c| ratio(tp[c], tp[c] + fp[c] + fne[c])).collect();
    Ok(Metrics {
        accuracy: ratio(correct, n).unwrap_or(0.0),
        precision: mean_defined(&pr).unwrap_or(0.0),
        recall: mean_defined(&re).unwrap_or(0.0),
        jaccard: mean_defined(&jac).unwrap_or(0.0),
    })
}

/// Mean of per-video metrics.
pub fn average_metrics(per_video: &[Metrics]) -> Metrics {
    let n = per_video.len().max(1) as f64;
    let s = |f: fn(&Metrics) -> f64| per_video.iter().map(f).sum::<f64>() / n;
    Metrics {
        accuracy: s(|m| m.accuracy),
        precision: s(|m| m.precision),
        recall: s(|m| m.recall),
        jaccard: s(|m| m.jaccard),
    }
}

/// Online predictions for a whole video, clip by clip with carry.
pub fn predict_video(model: &DualPathModel, video: &Video, clip_len: usize) -> Result<Vec<usize>> {
    ensure!(clip_len > 0, "clip length must be positive");
    let mut carries = model.zero_carries();
    let mut pred = Vec::with_capacity(video.len());
    let classes = model.config().classes;
    let mut start = 0;
    while start < video.len() {
        let end = (start + clip_len).min(video.len());
        let out = model.infer_clip(&video.slice(start..end).features, &carries, ForwardOptions::default())?;
        for row in out.probs.data().chunks(classes) {
            pred.push(argmax(row));
        }
        carries = out.carries;
        start = end;
    }
    Ok(pred)
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn evaluate(model: &DualPathModel, videos: &[Video], clip_len: usize) -> Result<Metrics> {
    let mut per = Vec::with_capacity(videos.len());
    for v in videos {
        let pred = predict_video(model, v, clip_len)?;
        per.push(video_metrics(&pred, v.labels()?, &v.mask, model.config().classes)?);
    }
    Ok(average_metrics(&per))
}

// ---- training loop ---------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub ce: f64,
    pub smooth: f64,
    pub trans: f64,
    pub test: Metrics,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub steps: usize,
}

impl TrainReport {
    pub fn final_metrics(&self) -> Option<Metrics> {
        self.epochs.last().map(|e| e.test)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,lr,loss,ce,smooth,trans,acc,pr,re,jac\n");
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{:.6e},{:.6},{:.6},{:.6},{:.6},{:.4},{:.4},{:.4},{:.4}\n",
                e.epoch,
                e.lr,
                e.loss,
                e.ce,
                e.smooth,
                e.trans,
                100.0 * e.test.accuracy,
                100.0 * e.test.precision,
                100.0 * e.test.recall,
                100.0 * e.test.jaccard
            ));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Trains `model` in place on `train`, evaluating on `test` after every epoch.
/// `on_epoch` sees each record as it is produced.
pub fn train(
    model: &mut DualPathModel,
    train: &[Video],
    test: &[Video],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    ensure!(!train.is_empty(), "no training videos");
    let mc = model.config().clone();
    let mut clips_per_video = Vec::with_capacity(train.len());
    for (i, v) in train.iter().enumerate() {
        ensure!(v.feature_dim() == mc.feature_dim, "video {i} has {} channels", v.feature_dim());
        clips_per_video.push(make_clips(i, v, cfg.clip_len, cfg.sigma_l, cfg.sigma_r)?);
    }
    let steps_per_epoch: usize = clips_per_video.iter().map(|c| c.len().div_ceil(cfg.tbptt_k)).sum();
    let schedule = Schedule {
        base_lr: cfg.lr,
        warmup_steps: cfg.warmup_epochs * steps_per_epoch,
        total_steps: cfg.epochs * steps_per_epoch,
    };
    let mut opt = AdamW::new(model.params(), cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_696e);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    let mut records = Vec::new();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut acc = [0.0f64; 4];
        let mut windows = 0.0;
        let mut last_lr = 0.0;
        for &vi in &order {
            let mut carries = model.zero_carries();
            for window in clips_per_video[vi].chunks(cfg.tbptt_k) {
                let lr = schedule.lr(step);
                last_lr = lr;
                let (b, c) = tbptt_step(model, &mut opt, window, &carries, cfg, lr).map_err(|e| match e {
                    Error::Diverged { detail, .. } => Error::Diverged { epoch, step, detail },
                    other => other,
                })?;
                carries = c;
                acc[0] += b.total;
                acc[1] += b.ce;
                acc[2] += b.smooth;
                acc[3] += b.trans;
                windows += 1.0;
                step += 1;
            }
        }
        let test_metrics = if test.is_empty() {
            Metrics::default()
        } else {
            evaluate(model, test, cfg.clip_len)?
        };
        let rec = EpochRecord {
            epoch,
            lr: last_lr,
            loss: acc[0] / windows,
            ce: acc[1] / windows,
            smooth: acc[2] / windows,
            trans: acc[3] / windows,
            test: test_metrics,
        };
        on_epoch(&rec);
        records.push(rec);
        if cfg.target_accuracy > 0.0 && test_metrics.accuracy >= cfg.target_accuracy {
            break;
        }
    }
    Ok(TrainReport { epochs: records, steps: step })
}

// ---- gradient check --------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct GroupError {
    pub group: String,
    pub entries: usize,
    pub max_rel: f64,
    pub max_abs: f64,
    /// Largest analytic gradient magnitude in the group.
    pub max_grad: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel: f64,
    /// Parameter entry with the largest relative error.
    pub worst: String,
    pub groups: Vec<GroupError>,
    pub loss: LossBreakdown,
}

impl GradCheckReport {
    pub fn group(&self, name: &str) -> Option<&GroupError> {
        self.groups.iter().find(|g| g.group == name)
    }
}

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Parameter group of a canonical parameter name.
pub fn param_group(name: &str) -> &'static str {
    let in_path = |p: &str| name.contains(p);
    if in_path(".regram.") {
        if in_path(".slow.") {
            "slow.regram"
        } else if in_path(".fast.") {
            "fast.regram"
        } else {
            "head.regram"
        }
    } else if in_path(".intensity.") {
        "slow.intensity"
    } else if in_path(".slow.") {
        "slow"
    } else if in_path(".fast.") {
        "fast"
    } else if name.starts_with("head.") {
        "head"
    } else if name.starts_with("embed.") {
        "embed"
    } else {
        "block"
    }
}

/// Random two-clip window over a toy labeled sequence for `cfg`.
pub fn toy_window(cfg: &ModelConfig, clip_len: usize, seed: u64) -> Result<(Vec<Clip>, Vec<Carry>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = 2 * clip_len;
    let labels: Vec<usize> = (0..t).map(|i| (i * cfg.classes / t + usize::from(i % 7 == 3)) % cfg.classes).collect();
    let mut mask = vec![true; t];
    mask[t / 3] = false;
    let video = Video {
        features: Tensor::new(&[t, cfg.feature_dim], (0..t * cfg.feature_dim).map(|_| rng.random_range(-1.0..1.0)).collect()),
        classes: cfg.classes,
        labels: Some(labels),
        mask,
    };
    let clips = make_clips(0, &video, clip_len, 2.0, 12.0)?;
    let carries = (0..cfg.layers)
        .map(|_| -> Result<Carry> {
            let n = cfg.heads * cfg.head_dim * cfg.state_dim;
            let m = (cfg.d_conv - 1) * cfg.d_inner();
            Ok(Carry {
                ssm: SsmState::from_vec(cfg.heads, cfg.head_dim, cfg.state_dim, (0..n).map(|_| rng.random_range(-0.5..0.5)).collect())?,
                conv: ConvCarry::from_rows(cfg.d_conv, cfg.d_inner(), (0..m).map(|_| rng.random_range(-0.5..0.5)).collect())?,
            })
        })
        .collect::<Result<_>>()?;
    Ok((clips, carries))
}

/// Moves a fresh model away from its structured initial point so that every
/// parameter group sees generic gradients: all entries are jittered and the
/// angle biases are lifted to angles of order one.
pub fn perturb_for_check(model: &mut DualPathModel, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        let name = model.params().name(id).to_string();
        let p = model.params_mut().get_mut(id).data_mut();
        if name.ends_with("regram.theta.b2") {
            p.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        } else {
            p.iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
        }
    }
}

/// Compares analytic gradients of the mean window loss with central
/// differences for every parameter entry of `model`.
pub fn grad_check(model: &DualPathModel, clips: &[Clip], carries: &[Carry], weights: LossWeights) -> Result<GradCheckReport> {
    let wg = window_grads(model, clips, carries, weights)?;
    let mut probe = model.clone();
    let mut groups: Vec<GroupError> = Vec::new();
    let mut max_rel = 0.0;
    let mut worst = String::new();
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        let name = model.params().name(id).to_string();
        let group = param_group(&name);
        let gi = match groups.iter().position(|g| g.group == group) {
            Some(i) => i,
            None => {
                groups.push(GroupError {
                    group: group.to_string(),
                    entries: 0,
                    max_rel: 0.0,
                    max_abs: 0.0,
                    max_grad: 0.0,
                });
                groups.len() - 1
            }
        };
        for j in 0..model.params().get(id).numel() {
            let orig = model.params().get(id).data()[j];
            probe.params_mut().get_mut(id).data_mut()[j] = orig + FD_STEP;
            let lp = window_loss(&probe, clips, carries, weights)?;
            probe.params_mut().get_mut(id).data_mut()[j] = orig - FD_STEP;
            let lm = window_loss(&probe, clips, carries, weights)?;
            probe.params_mut().get_mut(id).data_mut()[j] = orig;
            let numeric = (lp - lm) / (2.0 * FD_STEP);
            let analytic = wg.grads[id.0][j];
            let rel = relative_error(analytic, numeric);
            let g = &mut groups[gi];
            g.entries += 1;
            g.max_abs = g.max_abs.max((analytic - numeric).abs());
            g.max_grad = g.max_grad.max(analytic.abs());
            if rel > g.max_rel {
                g.max_rel = rel;
            }
            if rel > max_rel {
                max_rel = rel;
                worst = format!("{name}[{j}]: analytic {analytic:e}, numeric {numeric:e}");
            }
        }
    }
    Ok(GradCheckReport {
        max_rel,
        worst,
        groups,
        loss: wg.loss,
    })
}

/// Model variants of the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Full,
    /// λ removed: plain step sizes.
    NoWarp,
    /// Regram removed: Z = I at every boundary.
    NoRegram,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::NoWarp, Variant::NoRegram];

    pub fn apply(self, cfg: &ModelConfig) -> ModelConfig {
        let mut c = cfg.clone();
        match self {
            Variant::Full => {}
            Variant::NoWarp => c.use_intensity = false,
            Variant::NoRegram => c.use_regram = false,
        }
        c
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoWarp => "no-warp",
            Variant::NoRegram => "no-regram",
        }
    }
}

/// Trains one variant from `seed` (model init and shuffling) and returns its
/// final test metrics.
pub fn run_variant(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    train_set: &[Video],
    test_set: &[Video],
    variant: Variant,
    seed: u64,
) -> Result<(Metrics, TrainReport)> {
    let cfg = TrainConfig {
        seed,
        ..train_cfg.clone()
    };
    let mut model = DualPathModel::new(variant.apply(model_cfg), seed)?;
    let report = train(&mut model, train_set, test_set, &cfg, |_| {})?;
    let m = report.final_metrics().ok_or_else(|| Error::contract("training ran no epochs"))?;
    Ok((m, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro() -> ModelConfig {
        ModelConfig {
            feature_dim: 4,
            d_model: 6,
            heads: 2,
            head_dim: 3,
            state_dim: 4,
            d_conv: 2,
            chunk_size: 4,
            layers: 1,
            classes: 3,
            rank: 1,
            dt_rank: 2,
            ffn_mult: 1,
            ..Default::default()
        }
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let s = Schedule {
            base_lr: 1.0,
            warmup_steps: 10,
            total_steps: 110,
        };
        assert!((s.lr(0) - 0.1).abs() < 1e-15);
        assert!((s.lr(9) - 1.0).abs() < 1e-15);
        assert!((s.lr(10) - 1.0).abs() < 1e-15);
        assert!((s.lr(60) - 0.5).abs() < 1e-12);
        assert!(s.lr(109) < 1e-3);
        for i in 10..109 {
            assert!(s.lr(i + 1) <= s.lr(i));
        }
    }

    #[test]
    fn clipping_bounds_the_global_norm() {
        let mut g = vec![vec![3.0, 0.0], vec![4.0]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
        let mut small = vec![vec![0.1]];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0][0], 0.1);
    }

    #[test]
    fn perfect_predictor_scores_one() {
        let y = vec![0, 0, 1, 1, 2, 2, 2];
        let m = video_metrics(&y, &y, &[true; 7], 4).unwrap();
        assert_eq!(m, Metrics { accuracy: 1.0, precision: 1.0, recall: 1.0, jaccard: 1.0 });
    }

    #[test]
    fn two_phase_confusion_by_hand() {
        // truth 0 0 0 0 1 1, pred 0 0 1 1 1 1
        let truth = [0, 0, 0, 0, 1, 1];
        let pred = [0, 0, 1, 1, 1, 1];
        let m = video_metrics(&pred, &truth, &[true; 6], 2).unwrap();
        // phase 0: TP 2 FP 0 FN 2; phase 1: TP 2 FP 2 FN 0
        assert!((m.jaccard - (2.0 / 4.0 + 2.0 / 4.0) / 2.0).abs() < 1e-15);
        assert!((m.precision - (1.0 + 0.5) / 2.0).abs() < 1e-15);
        assert!((m.recall - (0.5 + 1.0) / 2.0).abs() < 1e-15);
        assert!((m.accuracy - 4.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn window_rejects_mixed_videos() {
        let cfg = micro();
        let (mut clips, carries) = toy_window(&cfg, 5, 1).unwrap();
        let model = DualPathModel::new(cfg, 0).unwrap();
        clips[1].video = 4;
        assert!(matches!(window_grads(&model, &clips, &carries, LossWeights::default()), Err(Error::Contract(_))));
        clips[1].video = 0;
        clips[1].start += 1;
        assert!(window_grads(&model, &clips, &carries, LossWeights::default()).is_err());
    }

    #[test]
    fn single_clip_window_equals_plain_backprop() {
        let cfg = micro();
        let (clips, carries) = toy_window(&cfg, 6, 2).unwrap();
        let model = DualPathModel::new(cfg, 1).unwrap();
        let a = window_grads(&model, &clips[..1], &carries, LossWeights::default()).unwrap();
        let mut tape = Tape::new();
        let cv = model.carries_on_tape(&mut tape, &carries);
        let out = model.forward_clip(&mut tape, &clips[0].features, &cv, ForwardOptions::default()).unwrap();
        let probs = softmax_rows(tape.value(out.logits).data(), 3);
        let lam: Vec<Vec<f64>> = out.lambdas.iter().flatten().map(|v| tape.value(*v).data().to_vec()).collect();
        let (_, g) = total_loss(&probs, 3, &lam, &clips[0].targets, LossWeights::default()).unwrap();
        let mut seeds = vec![(out.logits, Tensor::new(&[6, 3], softmax_backward(&probs, &g.probs, 3)))];
        for (v, d) in out.lambdas.iter().flatten().zip(g.lambdas) {
            seeds.push((*v, Tensor::new(&[6, 1], d)));
        }
        for (pid, gr) in tape.backward(&seeds).params() {
            assert_eq!(gr.data(), &a.grads[pid.0][..]);
        }
    }

    #[test]
    fn unused_parameters_get_zero_gradient() {
        let cfg = ModelConfig {
            use_intensity: false,
            ..micro()
        };
        let (clips, carries) = toy_window(&cfg, 5, 3).unwrap();
        let mut model = DualPathModel::new(cfg, 2).unwrap();
        perturb_for_check(&mut model, 4);
        let report = grad_check(&model, &clips, &carries, LossWeights::default()).unwrap();
        let g = report.group("slow.intensity").unwrap();
        assert!(g.max_grad == 0.0 && g.max_abs < 1e-8);
    }

    #[test]
    fn micro_model_gradients_match_finite_differences() {
        let cfg = micro();
        let (clips, carries) = toy_window(&cfg, 6, 5).unwrap();
        let mut model = DualPathModel::new(cfg, 3).unwrap();
        perturb_for_check(&mut model, 6);
        let report = grad_check(&model, &clips, &carries, LossWeights::default()).unwrap();
        assert!(report.max_rel < 1e-4, "{}", report.worst);
        for g in ["slow.regram", "fast.regram", "head.regram", "slow.intensity", "slow", "fast", "head", "embed", "block"] {
            assert!(report.group(g).unwrap().max_grad > 0.0, "{g} has no gradient");
        }
    }

    #[test]
    fn window_gradient_reaches_back_through_the_carry() {
        // the loss of clip 2 depends on clip-1 parameters via the carry:
        // gradients of the two-clip window differ from the clip-2-only one.
        let cfg = micro();
        let (clips, carries) = toy_window(&cfg, 6, 7).unwrap();
        let model = DualPathModel::new(cfg, 5).unwrap();
        let w = LossWeights::default();
        let both = window_grads(&model, &clips, &carries, w).unwrap();
        let first = window_grads(&model, &clips[..1], &carries, w).unwrap();
        let second = window_grads(&model, &clips[1..], &first.carries, w).unwrap();
        let id = model.params().id("layers.0.slow.in_proj.weight").unwrap();
        let summed: Vec<f64> = first.grads[id.0].iter().zip(&second.grads[id.0]).map(|(a, b)| (a + b) / 2.0).collect();
        let diff = summed.iter().zip(&both.grads[id.0]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff > 1e-8);
        assert!((both.loss.total - (first.loss.total + second.loss.total) / 2.0).abs() < 1e-12);
    }
}
