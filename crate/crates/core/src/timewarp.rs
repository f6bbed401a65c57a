//! Intensity-modulated time warp of the slow path's discretization step.
//!
//! A per-frame intensity `λ ∈ [0, 1]` sets the local rate `α = 1 + λ ∈ [1, 2]`
//! of intrinsic time. Warping by `α` is the same as running the ordinary ZOH
//! discretization with step `α·Δ`, so the scan itself is unchanged.

use crate::error::{Error, Result};
use crate::real::{sigmoid, silu, softplus, Real};

/// Bottleneck MLP emitting one intensity per frame:
/// `λ = σ(w2 · SiLU(W1ᵀ x + b1) + b2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct IntensityNet<F> {
    pub input_dim: usize,
    pub hidden: usize,
    /// `input_dim x hidden`
    pub w1: Vec<F>,
    pub b1: Vec<F>,
    /// `hidden`
    pub w2: Vec<F>,
    pub b2: F,
}

impl<F: Real> IntensityNet<F> {
    /// Hidden width `input_dim / 4` (at least 1).
    pub fn hidden_width(input_dim: usize) -> usize {
        (input_dim / 4).max(1)
    }

    pub fn zeros(input_dim: usize) -> Self {
        let hidden = Self::hidden_width(input_dim);
        IntensityNet {
            input_dim,
            hidden,
            w1: vec![F::zero(); input_dim * hidden],
            b1: vec![F::zero(); hidden],
            w2: vec![F::zero(); hidden],
            b2: F::zero(),
        }
    }

    /// Pre-sigmoid activation for one frame.
    pub fn pre_activation(&self, x: &[F]) -> Result<F> {
        if x.len() != self.input_dim {
            return Err(Error::contract(format!(
                "intensity input has {} channels, expected {}",
                x.len(),
                self.input_dim
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("intensity input must be finite"));
        }
        let mut out = self.b2;
        for j in 0..self.hidden {
            let mut acc = self.b1[j];
            for (i, &xi) in x.iter().enumerate() {
                acc = acc + xi * self.w1[i * self.hidden + j];
            }
            out = out + self.w2[j] * silu(acc);
        }
        Ok(out)
    }

    pub fn intensity(&self, x: &[F]) -> Result<F> {
        Ok(sigmoid(self.pre_activation(x)?))
    }
}

/// Warped discretization step of one frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WarpedStep<F> {
    pub lambda: F,
    /// `1 + λ`, in `[1, 2]`.
    pub alpha: F,
    pub delta: F,
}

/// `Δ = (1 + λ) · softplus(w_delta · delta_raw + b_delta)`.
pub fn warped_step<F: Real>(delta_raw: F, lambda: F, w_delta: F, b_delta: F) -> Result<WarpedStep<F>> {
    if !(lambda >= F::zero() && lambda <= F::one()) {
        return Err(Error::contract(format!("intensity must lie in [0, 1], got {lambda}")));
    }
    let alpha = F::one() + lambda;
    let delta = alpha * softplus(w_delta * delta_raw + b_delta);
    Ok(WarpedStep { lambda, alpha, delta })
}

/// Effective decay of the warped step and its sensitivity to `λ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EffectiveDecay<F> {
    /// `exp(α Δ A)`
    pub a_bar: F,
    /// log-decay `α Δ A`
    pub d_a: F,
    /// `∂ā/∂λ = Δ A exp(α Δ A)`, strictly negative.
    pub d_a_bar_d_lambda: F,
    /// `∂(dA)/∂λ = Δ A`
    pub d_log_decay_d_lambda: F,
}

pub fn effective_decay_and_grad<F: Real>(a: F, delta: F, lambda: F) -> Result<EffectiveDecay<F>> {
    if !(a < F::zero()) {
        return Err(Error::domain(format!("decay rate must be negative, got {a}")));
    }
    if !(delta > F::zero()) || !delta.is_finite() {
        return Err(Error::domain(format!("step must be positive, got {delta}")));
    }
    let alpha = F::one() + lambda;
    let d_a = alpha * delta * a;
    let a_bar = d_a.exp();
    Ok(EffectiveDecay {
        a_bar,
        d_a,
        d_a_bar_d_lambda: delta * a * a_bar,
        d_log_decay_d_lambda: delta * a,
    })
}
