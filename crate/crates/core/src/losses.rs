//! Training objectives: masked cross-entropy with label smoothing, the
//! confidence-weighted smoothness term, the asymmetric Gaussian transition
//! target and the per-layer intensity BCE.
//!
//! Every loss returns its value together with the gradient with respect to
//! its probability (or intensity) inputs; the caller maps probability
//! gradients to logits with [`crate::nn::softmax_backward`].

use crate::error::{ensure, Result};

/// Floor applied to probabilities before any logarithm.
pub const PROB_FLOOR: f64 = 1e-8;

/// Per-frame supervision of one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseTargets {
    pub labels: Vec<usize>,
    pub mask: Vec<bool>,
    /// Transition target in `[0, 1]`.
    pub g: Vec<f64>,
}

impl PhaseTargets {
    /// Targets whose transition map is built from the labels themselves.
    pub fn new(labels: Vec<usize>, mask: Vec<bool>, sigma_l: f64, sigma_r: f64) -> Result<Self> {
        Self::with_previous(labels, mask, None, sigma_l, sigma_r)
    }

    /// As [`PhaseTargets::new`], with the label of the frame preceding the
    /// clip so that a phase change exactly at frame 0 is seen.
    pub fn with_previous(
        labels: Vec<usize>,
        mask: Vec<bool>,
        previous: Option<usize>,
        sigma_l: f64,
        sigma_r: f64,
    ) -> Result<Self> {
        ensure!(labels.len() == mask.len(), "labels and mask lengths differ");
        let g = transition_target_from(&labels, previous, sigma_l, sigma_r)?;
        Ok(PhaseTargets { labels, mask, g })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub w_sm: f64,
    pub w_trans: f64,
    pub label_smoothing: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_sm: 1.0,
            w_trans: 1.0,
            label_smoothing: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    pub smooth: f64,
    pub trans: f64,
    pub total: f64,
    pub w_sm: f64,
    pub w_trans: f64,
    /// Set when no frame of the clip is valid.
    pub empty_mask: bool,
}

/// Gradients of the total loss.
#[derive(Clone, Debug)]
pub struct LossGrads {
    /// `T x C`
    pub probs: Vec<f64>,
    /// One length-`T` vector per layer.
    pub lambdas: Vec<Vec<f64>>,
}

fn ln_floor(p: f64) -> (f64, f64) {
    if p > PROB_FLOOR {
        (p.ln(), 1.0 / p)
    } else {
        (PROB_FLOOR.ln(), 0.0)
    }
}

fn check_probs(probs: &[f64], classes: usize, t: usize) -> Result<()> {
    ensure!(classes >= 2, "at least two classes are required");
    ensure!(probs.len() == t * classes, "probs must be T x C");
    ensure!(probs.iter().all(|p| p.is_finite()), "probs must be finite");
    Ok(())
}

/// Mean smoothed cross-entropy over valid frames. Returns
/// `(loss, d loss / d probs, empty_mask)`.
pub fn ce_masked(probs: &[f64], classes: usize, targets: &PhaseTargets, smoothing: f64) -> Result<(f64, Vec<f64>, bool)> {
    let t_len = targets.len();
    check_probs(probs, classes, t_len)?;
    ensure!((0.0..1.0).contains(&smoothing), "label smoothing must lie in [0, 1)");
    let mut grad = vec![0.0; probs.len()];
    let n = targets.valid_count();
    if n == 0 {
        return Ok((0.0, grad, true));
    }
    let off = smoothing / classes as f64;
    let mut loss = 0.0;
    for t in (0..t_len).filter(|&t| targets.mask[t]) {
        let y = targets.labels[t];
        ensure!(y < classes, "label {y} out of range for {classes} classes");
        for c in 0..classes {
            let q = off + if c == y { 1.0 - smoothing } else { 0.0 };
            let (l, d) = ln_floor(probs[t * classes + c]);
            loss -= q * l;
            grad[t * classes + c] = -q * d / n as f64;
        }
    }
    Ok((loss / n as f64, grad, false))
}

/// Confidence `1 - H(p)/ln C` and its gradient.
fn confidence(p: &[f64]) -> (f64, Vec<f64>) {
    let ln_c = (p.len() as f64).ln();
    let mut h = 0.0;
    let mut dh = vec![0.0; p.len()];
    for (i, &pi) in p.iter().enumerate() {
        let (l, d) = ln_floor(pi);
        h -= pi * l;
        dh[i] = -(l + pi * d);
    }
    (1.0 - h / ln_c, dh.into_iter().map(|v| -v / ln_c).collect())
}

/// `KL(p ‖ q)` and its gradients with respect to `p` and `q`.
fn kl(p: &[f64], q: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let mut v = 0.0;
    let mut dp = vec![0.0; p.len()];
    let mut dq = vec![0.0; q.len()];
    for i in 0..p.len() {
        let (lp, dlp) = ln_floor(p[i]);
        let (lq, dlq) = ln_floor(q[i]);
        v += p[i] * (lp - lq);
        dp[i] = lp - lq + p[i] * dlp;
        dq[i] = -p[i] * dlq;
    }
    (v, dp, dq)
}

/// Mean over valid adjacent pairs of `c_t c_{t+1} KL(p_t ‖ p_{t+1})`.
/// Returns `(loss, d loss / d probs)`.
pub fn smooth_loss(probs: &[f64], classes: usize, mask: &[bool]) -> Result<(f64, Vec<f64>)> {
    let t_len = mask.len();
    check_probs(probs, classes, t_len)?;
    let mut grad = vec![0.0; probs.len()];
    let pairs: Vec<usize> = (0..t_len.saturating_sub(1)).filter(|&t| mask[t] && mask[t + 1]).collect();
    if pairs.is_empty() {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / pairs.len() as f64;
    let row = |t: usize| &probs[t * classes..(t + 1) * classes];
    let mut loss = 0.0;
    for t in pairs {
        let (ca, dca) = confidence(row(t));
        let (cb, dcb) = confidence(row(t + 1));
        let (k, dkp, dkq) = kl(row(t), row(t + 1));
        loss += ca * cb * k;
        for i in 0..classes {
            grad[t * classes + i] += scale * (dca[i] * cb * k + ca * cb * dkp[i]);
            grad[(t + 1) * classes + i] += scale * (ca * dcb[i] * k + ca * cb * dkq[i]);
        }
    }
    Ok((loss * scale, grad))
}

/// Frames `t >= 1` whose label differs from the previous frame.
pub fn transitions(labels: &[usize]) -> Vec<usize> {
    (1..labels.len()).filter(|&t| labels[t] != labels[t - 1]).collect()
}

/// Pointwise maximum of asymmetric Gaussian bumps, one per transition.
pub fn transition_target(labels: &[usize], sigma_l: f64, sigma_r: f64) -> Result<Vec<f64>> {
    transition_target_from(labels, None, sigma_l, sigma_r)
}

fn transition_target_from(labels: &[usize], previous: Option<usize>, sigma_l: f64, sigma_r: f64) -> Result<Vec<f64>> {
    ensure!(sigma_l > 0.0 && sigma_r > 0.0, "transition widths must be positive");
    let mut peaks = transitions(labels);
    if let (Some(p), Some(&first)) = (previous, labels.first()) {
        if p != first {
            peaks.insert(0, 0);
        }
    }
    Ok(bumps(labels.len(), &peaks, sigma_l, sigma_r))
}

/// Bumps at the given peak frames.
pub fn bumps(len: usize, peaks: &[usize], sigma_l: f64, sigma_r: f64) -> Vec<f64> {
    let mut g = vec![0.0f64; len];
    for &p in peaks {
        for (t, gt) in g.iter_mut().enumerate() {
            let d = t as f64 - p as f64;
            let s = if d < 0.0 { sigma_l } else { sigma_r };
            *gt = gt.max((-0.5 * (d / s).powi(2)).exp());
        }
    }
    g
}

/// Masked-mean BCE of one intensity trace against `g`. Returns `(loss, d loss / d λ)`.
pub fn intensity_bce(lambda: &[f64], g: &[f64], mask: &[bool]) -> Result<(f64, Vec<f64>)> {
    ensure!(lambda.len() == g.len() && g.len() == mask.len(), "λ, g and mask lengths differ");
    let n = mask.iter().filter(|&&m| m).count();
    let mut grad = vec![0.0; lambda.len()];
    if n == 0 {
        return Ok((0.0, grad));
    }
    let mut loss = 0.0;
    for t in (0..lambda.len()).filter(|&t| mask[t]) {
        ensure!(lambda[t].is_finite() && (0.0..=1.0).contains(&lambda[t]), "λ must lie in [0, 1]");
        let (l1, d1) = ln_floor(lambda[t]);
        let (l0, d0) = ln_floor(1.0 - lambda[t]);
        loss -= g[t] * l1 + (1.0 - g[t]) * l0;
        grad[t] = (-g[t] * d1 + (1.0 - g[t]) * d0) / n as f64;
    }
    Ok((loss / n as f64, grad))
}

/// `ce + w_sm·smooth + w_trans·trans` with trans averaged over the layers.
pub fn total_loss(
    probs: &[f64],
    classes: usize,
    lambdas: &[Vec<f64>],
    targets: &PhaseTargets,
    weights: LossWeights,
) -> Result<(LossBreakdown, LossGrads)> {
    let (ce, mut dprobs, empty) = ce_masked(probs, classes, targets, weights.label_smoothing)?;
    let (smooth, ds) = smooth_loss(probs, classes, &targets.mask)?;
    for (d, s) in dprobs.iter_mut().zip(&ds) {
        *d += weights.w_sm * s;
    }
    let mut trans = 0.0;
    let mut dl = Vec::with_capacity(lambdas.len());
    let k = lambdas.len().max(1) as f64;
    for lam in lambdas {
        let (b, g) = intensity_bce(lam, &targets.g, &targets.mask)?;
        trans += b / k;
        dl.push(g.into_iter().map(|v| v * weights.w_trans / k).collect());
    }
    let total = ce + weights.w_sm * smooth + weights.w_trans * trans;
    ensure!(total.is_finite(), "loss is not finite");
    Ok((
        LossBreakdown {
            ce,
            smooth,
            trans,
            total,
            w_sm: weights.w_sm,
            w_trans: weights.w_trans,
            empty_mask: empty,
        },
        LossGrads {
            probs: dprobs,
            lambdas: dl,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::softmax_rows;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_probs(rng: &mut ChaCha8Rng, t: usize, c: usize) -> Vec<f64> {
        let logits: Vec<f64> = (0..t * c).map(|_| rng.random_range(-3.0..3.0)).collect();
        softmax_rows(&logits, c)
    }

    fn targets(labels: Vec<usize>, mask: Vec<bool>) -> PhaseTargets {
        PhaseTargets::new(labels, mask, 2.0, 12.0).unwrap()
    }

    #[test]
    fn ce_reference_values() {
        let c = 5;
        let t = targets(vec![0, 3, 1], vec![true; 3]);
        let (l, _, _) = ce_masked(&vec![0.2; 15], c, &t, 0.0).unwrap();
        assert!((l - (5.0f64).ln()).abs() < 1e-12);
        let mut onehot = vec![0.0; 15];
        for (i, &y) in t.labels.iter().enumerate() {
            onehot[i * c + y] = 1.0;
        }
        assert_eq!(ce_masked(&onehot, c, &t, 0.0).unwrap().0, 0.0);
    }

    #[test]
    fn ce_matches_per_frame_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (tl, c, eps) = (12, 4, 0.1);
        let p = random_probs(&mut rng, tl, c);
        let labels: Vec<usize> = (0..tl).map(|_| rng.random_range(0..c)).collect();
        let mask: Vec<bool> = (0..tl).map(|i| i % 5 != 2).collect();
        let t = targets(labels.clone(), mask.clone());
        let mut sum = 0.0;
        let mut n = 0.0;
        for i in 0..tl {
            if !mask[i] {
                continue;
            }
            n += 1.0;
            for k in 0..c {
                let q = if k == labels[i] { 1.0 - eps + eps / c as f64 } else { eps / c as f64 };
                sum += -q * p[i * c + k].ln();
            }
        }
        assert!((ce_masked(&p, c, &t, eps).unwrap().0 - sum / n).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_is_flagged() {
        let t = targets(vec![0, 1], vec![false, false]);
        let (l, _, empty) = ce_masked(&[0.5; 4], 2, &t, 0.1).unwrap();
        assert_eq!(l, 0.0);
        assert!(empty);
    }

    #[test]
    fn smooth_loss_zero_cases() {
        let p = vec![0.7, 0.2, 0.1, 0.7, 0.2, 0.1, 0.7, 0.2, 0.1];
        assert_eq!(smooth_loss(&p, 3, &[true; 3]).unwrap().0, 0.0);
        let u = vec![0.25; 12];
        assert!(smooth_loss(&u, 4, &[true; 3]).unwrap().0.abs() < 1e-15);
    }

    #[test]
    fn smooth_loss_two_confident_frames() {
        let p = [0.9, 0.05, 0.05];
        let q = [0.05, 0.9, 0.05];
        let probs: Vec<f64> = p.iter().chain(&q).copied().collect();
        let ent = |d: &[f64]| -d.iter().map(|x| x * x.ln()).sum::<f64>();
        let c = |d: &[f64]| 1.0 - ent(d) / 3f64.ln();
        let klv: f64 = p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum();
        let expect = c(&p) * c(&q) * klv;
        assert!((smooth_loss(&probs, 3, &[true, true]).unwrap().0 - expect).abs() < 1e-12);
    }

    #[test]
    fn transition_target_shape() {
        let labels = [vec![0; 20], vec![1; 20]].concat();
        let g = transition_target(&labels, 2.0, 12.0).unwrap();
        assert_eq!(g[20], 1.0);
        assert!((g[18] - (-0.5f64).exp()).abs() < 1e-12);
        assert!((g[32] - (-0.5f64).exp()).abs() < 1e-12);
        assert!(transition_target(&[2; 10], 2.0, 12.0).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn transition_at_clip_start_uses_previous_label() {
        let t = PhaseTargets::with_previous(vec![1; 6], vec![true; 6], Some(0), 2.0, 12.0).unwrap();
        assert_eq!(t.g[0], 1.0);
        let t = PhaseTargets::with_previous(vec![1; 6], vec![true; 6], Some(1), 2.0, 12.0).unwrap();
        assert!(t.g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bce_at_target_is_binary_entropy() {
        let g = vec![0.0, 0.3, 0.9, 1.0];
        let (l, _) = intensity_bce(&g, &g, &[true; 4]).unwrap();
        let h: f64 = g
            .iter()
            .map(|&p: &f64| -(p * p.max(PROB_FLOOR).ln() + (1.0 - p) * (1.0 - p).max(PROB_FLOOR).ln()))
            .sum::<f64>()
            / 4.0;
        assert!((l - h).abs() < 1e-12);
    }

    #[test]
    fn zero_weights_reduce_to_ce() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_probs(&mut rng, 6, 3);
        let t = targets(vec![0, 0, 1, 1, 2, 2], vec![true; 6]);
        let w = LossWeights {
            w_sm: 0.0,
            w_trans: 0.0,
            ..Default::default()
        };
        let (b, _) = total_loss(&p, 3, &[vec![0.5; 6]], &t, w).unwrap();
        assert_eq!(b.total, b.ce);
        assert_eq!(LossWeights::default().w_sm, 1.0);
        assert_eq!(LossWeights::default().w_trans, 1.0);
    }

    #[test]
    fn masked_frames_do_not_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (tl, c) = (10, 4);
        let p = random_probs(&mut rng, tl, c);
        let mask: Vec<bool> = (0..tl).map(|i| i != 3 && i != 7).collect();
        let t = targets(vec![0, 0, 1, 1, 1, 2, 2, 3, 3, 3], mask);
        let lam: Vec<f64> = (0..tl).map(|_| rng.random_range(0.05..0.95)).collect();
        let (a, _) = total_loss(&p, c, &[lam.clone()], &t, LossWeights::default()).unwrap();
        let mut p2 = p.clone();
        let other = random_probs(&mut rng, 1, c);
        p2[3 * c..4 * c].copy_from_slice(&other);
        let mut lam2 = lam.clone();
        lam2[7] = 0.999;
        let (b, _) = total_loss(&p2, c, &[lam2], &t, LossWeights::default()).unwrap();
        assert_eq!(a.total, b.total);
    }

    #[test]
    fn total_loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (tl, c) = (9, 3);
        let p = random_probs(&mut rng, tl, c);
        let lams: Vec<Vec<f64>> = (0..2).map(|_| (0..tl).map(|_| rng.random_range(0.05..0.95)).collect()).collect();
        let t = targets(vec![0, 0, 0, 1, 1, 2, 2, 2, 2], (0..tl).map(|i| i != 4).collect());
        let w = LossWeights::default();
        let (_, g) = total_loss(&p, c, &lams, &t, w).unwrap();
        let f = |p: &[f64], l: &[Vec<f64>]| total_loss(p, c, l, &t, w).unwrap().0.total;
        let h = 1e-6;
        for i in 0..p.len() {
            let (mut a, mut b) = (p.clone(), p.clone());
            a[i] += h;
            b[i] -= h;
            let fd = (f(&a, &lams) - f(&b, &lams)) / (2.0 * h);
            assert!((fd - g.probs[i]).abs() <= 1e-6 * (1.0 + fd.abs()), "p[{i}] {fd} vs {}", g.probs[i]);
        }
        for k in 0..2 {
            for i in 0..tl {
                let (mut a, mut b) = (lams.clone(), lams.clone());
                a[k][i] += h;
                b[k][i] -= h;
                let fd = (f(&p, &a) - f(&p, &b)) / (2.0 * h);
                assert!((fd - g.lambdas[k][i]).abs() <= 1e-6 * (1.0 + fd.abs()));
            }
        }
    }
}
