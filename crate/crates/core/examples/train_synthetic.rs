//! Trains a small dual-path model on the default synthetic task with TBPTT,
//! writes an SMCK checkpoint plus the per-epoch metric CSV, and reloads it.
//!
//! ```text
//! cargo run --release --example train_synthetic [-- <out dir>]
//! ```

use std::path::PathBuf;

use dualpath_ssm::checkpoint::{self, Checkpoint};
use dualpath_ssm::data::{gen_synthetic, SyntheticConfig};
use dualpath_ssm::model::{DualPathModel, ModelConfig};
use dualpath_ssm::train::{evaluate, train, TrainConfig};

fn main() -> dualpath_ssm::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/train_synthetic".into()));
    std::fs::create_dir_all(&out).map_err(|e| dualpath_ssm::Error::Io { path: out.clone(), source: e })?;

    let data = gen_synthetic(&SyntheticConfig::default())?;
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
    let tc = TrainConfig {
        clip_len: 128,
        target_accuracy: 0.95,
        ..TrainConfig::default()
    };
    let mut model = DualPathModel::new(cfg, tc.seed)?;
    println!("{} parameters", model.params().numel());
    let report = train(&mut model, &data.train, &data.test, &tc, |e| {
        println!("epoch {:>2}  lr {:.2e}  loss {:.4}  test {}", e.epoch, e.lr, e.loss, e.test);
    })?;
    report.write_csv(&out.join("metrics.csv"))?;

    let path = out.join("model.smck");
    let ckpt = Checkpoint {
        model,
        clip_len: tc.clip_len,
        extra: Default::default(),
    };
    checkpoint::save(&path, &ckpt)?;
    let back = checkpoint::load(&path)?;
    println!("reloaded {}: test {}", path.display(), evaluate(&back.model, &data.test, back.clip_len)?);
    Ok(())
}
