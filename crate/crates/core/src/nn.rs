//! Row-wise `f64` kernels shared by the gradient tape and the streaming engine.
//!
//! Every forward kernel here is used verbatim by both evaluation modes so
//! that clip-mode and per-frame results agree to rounding.

use crate::real::{sigmoid, silu};
use crate::tensor::gemm;

/// Epsilon inside RMSNorm and the model's layer norms.
pub const NORM_EPS: f64 = 1e-5;

/// `x (rows x input) · w (input x output) + b`.
pub fn linear(x: &[f64], rows: usize, w: &[f64], input: usize, output: usize, bias: Option<&[f64]>) -> Vec<f64> {
    let mut out = vec![0.0; rows * output];
    if let Some(b) = bias {
        assert_eq!(b.len(), output);
        for r in 0..rows {
            out[r * output..(r + 1) * output].copy_from_slice(b);
        }
    }
    gemm(rows, input, output, 1.0, x, false, w, false, if bias.is_some() { 1.0 } else { 0.0 }, &mut out);
    out
}

pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn silu_vec(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| silu(v)).collect()
}

/// Backward of a grouped layer norm given the cached normalized values.
/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward(
    dy: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    group: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; dy.len()];
    let mut dgamma = vec![0.0; group];
    let mut dbeta = vec![0.0; group];
    let gf = group as f64;
    for (g, &inv) in inv_std.iter().enumerate() {
        let off = g * group;
        let mut sum_dxh = 0.0;
        let mut sum_dxh_xh = 0.0;
        for i in 0..group {
            let d = dy[off + i];
            dgamma[i] += d * xhat[off + i];
            dbeta[i] += d;
            let dxh = d * gamma[i];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xhat[off + i];
        }
        for i in 0..group {
            let dxh = dy[off + i] * gamma[i];
            dx[off + i] = inv * (dxh - sum_dxh / gf - xhat[off + i] * sum_dxh_xh / gf);
        }
    }
    (dx, dgamma, dbeta)
}

/// RMSNorm over rows of width `cols`; the all-zero row maps to zero.
/// Returns `(output, inverse rms per row)`.
pub fn rms_norm(x: &[f64], cols: usize, gamma: &[f64]) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(gamma.len(), cols);
    let rows = x.len() / cols;
    let mut out = vec![0.0; x.len()];
    let mut inv = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let ms = row.iter().map(|v| v * v).sum::<f64>() / cols as f64;
        let ir = 1.0 / (ms + NORM_EPS).sqrt();
        inv[r] = ir;
        for i in 0..cols {
            out[r * cols + i] = row[i] * ir * gamma[i];
        }
    }
    (out, inv)
}

/// Returns `(dx, dgamma)`.
pub fn rms_norm_backward(dy: &[f64], x: &[f64], inv: &[f64], gamma: &[f64], cols: usize) -> (Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; x.len()];
    let mut dgamma = vec![0.0; cols];
    for (r, &ir) in inv.iter().enumerate() {
        let off = r * cols;
        let mut dot = 0.0;
        for i in 0..cols {
            dgamma[i] += dy[off + i] * x[off + i] * ir;
            dot += dy[off + i] * gamma[i] * x[off + i];
        }
        let k = ir * ir * ir * dot / cols as f64;
        for i in 0..cols {
            dx[off + i] = dy[off + i] * gamma[i] * ir - x[off + i] * k;
        }
    }
    (dx, dgamma)
}

/// Backward of [`crate::ssm::depthwise_conv_valid`] (pre-activation).
/// Returns `(dxp, dkernel)`.
pub fn depthwise_conv_backward(dy: &[f64], xp: &[f64], rows: usize, kernel: &[f64], d_conv: usize, channels: usize) -> (Vec<f64>, Vec<f64>) {
    let mut dxp = vec![0.0; xp.len()];
    let mut dk = vec![0.0; kernel.len()];
    for t in 0..rows {
        for j in 0..d_conv {
            let src = (t + j) * channels;
            let kr = j * channels;
            for ch in 0..channels {
                let g = dy[t * channels + ch];
                dxp[src + ch] += g * kernel[kr + ch];
                dk[kr + ch] += g * xp[src + ch];
            }
        }
    }
    (dxp, dk)
}

/// Row-wise softmax.
pub fn softmax_rows(logits: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    for (src, dst) in logits.chunks(cols).zip(out.chunks_mut(cols)) {
        let m = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - m).exp();
            z += *d;
        }
        dst.iter_mut().for_each(|d| *d /= z);
    }
    out
}

/// Maps a gradient with respect to softmax probabilities back to logits.
pub fn softmax_backward(probs: &[f64], dprobs: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; probs.len()];
    for ((p, dp), o) in probs.chunks(cols).zip(dprobs.chunks(cols)).zip(out.chunks_mut(cols)) {
        let dot: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
        for i in 0..cols {
            o[i] = p[i] * (dp[i] - dot);
        }
    }
    out
}
