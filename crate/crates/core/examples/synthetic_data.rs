//! Generates the default synthetic phase-stream task, round-trips one video
//! through SMFD and scores a per-frame nearest-class-mean classifier.
//!
//! ```text
//! cargo run --release --example synthetic_data [-- <noise>]
//! ```

use dualpath_ssm::data::{decode_smfd, encode_smfd, gen_synthetic, SyntheticConfig, Video};

fn class_means(videos: &[Video], classes: usize) -> Vec<Vec<f64>> {
    let d = videos[0].feature_dim();
    let mut sums = vec![vec![0.0; d]; classes];
    let mut counts = vec![0usize; classes];
    for v in videos {
        for (t, &y) in v.labels().unwrap().iter().enumerate() {
            counts[y] += 1;
            for (s, x) in sums[y].iter_mut().zip(v.features.row(t)) {
                *s += x;
            }
        }
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        s.iter_mut().for_each(|x| *x /= n.max(1) as f64);
    }
    sums
}

fn main() -> dualpath_ssm::Result<()> {
    let mut cfg = SyntheticConfig::default();
    if let Some(noise) = std::env::args().nth(1) {
        cfg.noise = noise.parse().expect("noise must be a number");
    }
    let data = gen_synthetic(&cfg)?;
    let frames: usize = data.train.iter().map(Video::len).sum();
    println!("{} train / {} test videos, {frames} train frames", data.train.len(), data.test.len());

    let first = &data.train[0];
    let labels = first.labels()?;
    let changes = (1..labels.len()).filter(|&t| labels[t] != labels[t - 1]).count();
    println!("video 0: {} frames, {} phase changes", first.len(), changes);
    let bytes = encode_smfd(first)?;
    assert_eq!(&decode_smfd(&bytes)?, first);
    println!("SMFD round trip ok ({} bytes)", bytes.len());

    let means = class_means(&data.train, cfg.classes);
    let (mut hit, mut total) = (0usize, 0usize);
    for v in &data.test {
        for (t, &y) in v.labels()?.iter().enumerate() {
            let x = v.features.row(t);
            let pred = (0..cfg.classes)
                .min_by(|&a, &b| {
                    let d = |c: usize| means[c].iter().zip(x).map(|(m, v)| (m - v) * (m - v)).sum::<f64>();
                    d(a).total_cmp(&d(b))
                })
                .unwrap();
            hit += usize::from(pred == y);
            total += 1;
        }
    }
    println!("per-frame nearest-mean accuracy: {:.1}%", 100.0 * hit as f64 / total as f64);
    Ok(())
}
