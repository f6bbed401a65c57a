//! The asymmetric transition target and the three training losses on a toy
//! prediction.
//!
//! ```text
//! cargo run --release --example transition_target
//! ```

use dualpath_ssm::losses::{total_loss, transition_target, LossWeights, PhaseTargets};

fn main() -> dualpath_ssm::Result<()> {
    let labels: Vec<usize> = [vec![0; 20], vec![1; 8], vec![2; 22]].concat();
    let g = transition_target(&labels, 2.0, 12.0)?;
    println!("frame  label  g");
    for t in (14..44).step_by(2) {
        println!("{t:>5} {:>6}  {:.4} {}", labels[t], g[t], "#".repeat((g[t] * 40.0) as usize));
    }

    // a prediction that is right but lags each change by three frames
    let classes = 3;
    let mut probs = vec![0.0; labels.len() * classes];
    for t in 0..labels.len() {
        let y = labels[t.saturating_sub(3)];
        for c in 0..classes {
            probs[t * classes + c] = if c == y { 0.8 } else { 0.1 };
        }
    }
    let targets = PhaseTargets::new(labels.clone(), vec![true; labels.len()], 2.0, 12.0)?;
    let lambda = vec![g.iter().map(|v| 0.5 * v).collect::<Vec<_>>()];
    let (loss, grads) = total_loss(&probs, classes, &lambda, &targets, LossWeights::default())?;
    println!(
        "ce {:.4}  smooth {:.4}  trans {:.4}  total {:.4}  (|dL/dp| max {:.3})",
        loss.ce,
        loss.smooth,
        loss.trans,
        loss.total,
        grads.probs.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    );
    Ok(())
}
