//! Intensity-warped discretization: how λ stretches the step and speeds up
//! the decay, with the analytic sensitivity checked by central differences.
//!
//! ```text
//! cargo run --release --example time_warp
//! ```

use dualpath_ssm::timewarp::{effective_decay_and_grad, warped_step, IntensityNet};

fn main() -> dualpath_ssm::Result<()> {
    let (a, delta_raw, w, b) = (-0.8, 0.3, 1.0, -1.0);
    println!("{:>5} {:>8} {:>8} {:>12} {:>12}", "λ", "Δ", "ā", "∂ā/∂λ", "central diff");
    for lambda in [0.0f64, 0.25, 0.5, 0.75, 1.0] {
        let step = warped_step(delta_raw, lambda, w, b)?;
        let base = step.delta / step.alpha;
        let e = effective_decay_and_grad(a, base, lambda)?;
        let h: f64 = 1e-6;
        let lo = (lambda - h).max(0.0);
        let hi = (lambda + h).min(1.0);
        let fd = (effective_decay_and_grad(a, base, hi)?.a_bar - effective_decay_and_grad(a, base, lo)?.a_bar) / (hi - lo);
        println!("{lambda:>5.2} {:>8.4} {:>8.4} {:>12.6} {:>12.6}", step.delta, e.a_bar, e.d_a_bar_d_lambda, fd);
    }

    // an untrained intensity net sits at σ(0) = 1/2
    let net = IntensityNet::<f64>::zeros(16);
    println!("zero intensity net: λ = {}", net.intensity(&[0.3; 16])?);
    let mut off = net.clone();
    off.b2 = -1000.0;
    println!("bias -1000: λ = {} (the baseline step is recovered)", off.intensity(&[0.3; 16])?);
    Ok(())
}
