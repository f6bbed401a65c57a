//! Streams a video frame by frame, checks the result against clip-mode
//! inference, and exports the per-frame and per-chunk traces.
//!
//! ```text
//! cargo run --release --example streaming_traces [-- <checkpoint> [<trace dir>]]
//! ```
//!
//! Without a checkpoint a randomly initialised small model is used.

use std::path::PathBuf;

use dualpath_ssm::checkpoint;
use dualpath_ssm::data::{gen_synthetic, SyntheticConfig};
use dualpath_ssm::model::{DualPathModel, ForwardOptions, ModelConfig};
use dualpath_ssm::stream::{run_trace, StreamEngine};
use dualpath_ssm::tensor::Tensor;

fn main() -> dualpath_ssm::Result<()> {
    let mut args = std::env::args().skip(1);
    let (model, clip_len) = match args.next() {
        Some(p) => {
            let c = checkpoint::load(&PathBuf::from(p))?;
            (c.model, c.clip_len)
        }
        None => {
            let cfg = ModelConfig {
                d_model: 32,
                heads: 4,
                head_dim: 8,
                state_dim: 16,
                chunk_size: 32,
                layers: 2,
                rank: 4,
                dt_rank: 4,
                ffn_mult: 2,
                ..ModelConfig::default()
            };
            (DualPathModel::new(cfg, 0)?, 128)
        }
    };
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "target/streaming_traces".into()));
    let video = gen_synthetic(&SyntheticConfig {
        train_videos: 0,
        test_videos: 1,
        ..SyntheticConfig::default()
    })?
    .test
    .remove(0)
    .slice(0..1024);

    let mut engine = StreamEngine::new(&model, clip_len)?;
    let bytes = engine.state_bytes();
    let run = run_trace(&mut engine, &video.features, 16)?;
    println!("streamed {} frames, state {} bytes (unchanged: {})", run.steps.len(), bytes, bytes == engine.state_bytes());

    // clip mode over the same frames with carries
    let f = model.config().feature_dim;
    let mut carries = model.zero_carries();
    let mut gap: f64 = 0.0;
    for start in (0..video.len()).step_by(clip_len) {
        let end = (start + clip_len).min(video.len());
        let x = Tensor::new(&[end - start, f], video.features.data()[start * f..end * f].to_vec());
        let out = model.infer_clip(&x, &carries, ForwardOptions::default())?;
        for t in start..end {
            let row = out.probs.row(t - start);
            gap = gap.max(row.iter().zip(&run.steps[t].probs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        }
        carries = out.carries;
    }
    println!("max |p_stream - p_clip| = {gap:.2e}");

    run.export(&dir)?;
    println!("traces written to {}", dir.display());
    let lam: Vec<f64> = run.steps.iter().map(|s| s.lambda[0]).collect();
    println!(
        "layer-0 λ: min {:.3} max {:.3}; {} regram events",
        lam.iter().copied().fold(f64::INFINITY, f64::min),
        lam.iter().copied().fold(0.0, f64::max),
        run.rotations.len()
    );
    Ok(())
}
