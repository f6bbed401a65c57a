//! Full model vs λ-ablated vs Z-ablated on the transition-dense synthetic
//! task, averaged over seeds.
//!
//! ```text
//! cargo run --release --example ablation [-- <seeds> <epochs> <lr>]
//! ```

use dualpath_ssm::data::{gen_synthetic, SyntheticConfig};
use dualpath_ssm::model::ModelConfig;
use dualpath_ssm::train::{run_variant, TrainConfig, Variant};

fn main() -> dualpath_ssm::Result<()> {
    let mut args = std::env::args().skip(1);
    let seeds: u64 = args.next().map_or(3, |s| s.parse().expect("seeds"));
    let epochs: usize = args.next().map_or(50, |s| s.parse().expect("epochs"));
    let lr: f64 = args.next().map_or(1e-4, |s| s.parse().expect("lr"));

    let model = ModelConfig {
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
    let train = TrainConfig {
        lr,
        epochs,
        clip_len: 128,
        ..TrainConfig::default()
    };

    let mut jac = [0.0; 3];
    for seed in 0..seeds {
        let data = gen_synthetic(&SyntheticConfig { seed, ..SyntheticConfig::default() }.transition_dense())?;
        for (i, v) in Variant::ALL.into_iter().enumerate() {
            let t0 = std::time::Instant::now();
            let (m, _) = run_variant(&model, &train, &data.train, &data.test, v, seed)?;
            println!("seed {seed} {:<10} {m}  ({:.0}s)", v.name(), t0.elapsed().as_secs_f64());
            jac[i] += m.jaccard / seeds as f64;
        }
    }
    for (v, j) in Variant::ALL.iter().zip(jac) {
        println!("{:<10} mean Jaccard {:.2}%", v.name(), 100.0 * j);
    }
    Ok(())
}
