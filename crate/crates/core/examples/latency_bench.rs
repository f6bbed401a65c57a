//! Per-frame latency of the streaming engine against frame index.
//!
//! ```text
//! cargo run --release --example latency_bench [-- <frames>]
//! ```

use dualpath_ssm::model::{DualPathModel, ModelConfig};
use dualpath_ssm::stream::{bench, StreamEngine};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> dualpath_ssm::Result<()> {
    let frames: usize = std::env::args().nth(1).map_or(20_000, |s| s.parse().expect("frames"));
    let cfg = ModelConfig {
        d_model: 64,
        heads: 4,
        head_dim: 16,
        state_dim: 16,
        chunk_size: 32,
        layers: 2,
        rank: 4,
        dt_rank: 8,
        ffn_mult: 2,
        ..ModelConfig::default()
    };
    let model = DualPathModel::new(cfg, 0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pool: Vec<Vec<f64>> = (0..64).map(|_| (0..256).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let points: Vec<usize> = [100, 1_000, 10_000].into_iter().filter(|&p| 2 * p <= frames).collect();
    let mut engine = StreamEngine::new(&model, 256)?;
    let r = bench(&mut engine, frames, &points, 101, 20, |t| pool[t % pool.len()].clone())?;
    for p in &r.points {
        println!("frame {:>6}: median {:.1} µs", p.frame, 1e6 * p.median_s);
    }
    println!(
        "slope {:.3e} µs/frame, 95% CI [{:.3e}, {:.3e}]; state {} -> {} bytes",
        1e6 * r.slope,
        1e6 * r.slope_ci.0,
        1e6 * r.slope_ci.1,
        r.state_bytes_start,
        r.state_bytes_end
    );
    Ok(())
}
