//! Synthetic phase-labeled feature streams and the SMFD feature file.
//!
//! A video walks through the phases `0..C` left to right, possibly skipping
//! some. Each phase emits Gaussian features around its own mean; around a
//! phase change the mean is blended linearly over `blur` frames while the
//! label switches as a step.
//!
//! # SMFD layout (little-endian)
//!
//! ```text
//! "SMFD" | version u32 | T u32 | D u32 | C u32 | flags u32
//! T x D f32 features, row-major
//! T x u16 labels          (only when flags bit 0 is set)
//! T x u8 mask
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, StandardNormal};

use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

pub const SMFD_MAGIC: &[u8; 4] = b"SMFD";
pub const SMFD_VERSION: u32 = 1;
const FLAG_LABELS: u32 = 1;

/// One feature stream with optional supervision.
#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    /// `T x D`
    pub features: Tensor,
    pub classes: usize,
    pub labels: Option<Vec<usize>>,
    pub mask: Vec<bool>,
}

impl Video {
    pub fn len(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feature_dim(&self) -> usize {
        self.features.shape()[1]
    }

    /// Rows `range` of the video as a new video.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Video {
        let d = self.feature_dim();
        Video {
            features: Tensor::new(&[range.len(), d], self.features.data()[range.start * d..range.end * d].to_vec()),
            classes: self.classes,
            labels: self.labels.as_ref().map(|l| l[range.clone()].to_vec()),
            mask: self.mask[range].to_vec(),
        }
    }

    pub fn labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::contract("video carries no labels"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub train_videos: usize,
    pub test_videos: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub feature_dim: usize,
    pub classes: usize,
    /// Shape of the Gamma law of relative phase durations.
    pub duration_shape: f64,
    /// Length of each phase mean vector.
    pub separation: f64,
    /// Per-coordinate noise standard deviation.
    pub noise: f64,
    /// Width in frames of the linear blend around a phase change.
    pub blur: usize,
    /// Probability that an inner phase is skipped.
    pub skip_prob: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            train_videos: 20,
            test_videos: 10,
            min_len: 1800,
            max_len: 2200,
            feature_dim: 256,
            classes: 7,
            duration_shape: 4.0,
            separation: 1.0,
            noise: 0.52,
            blur: 8,
            skip_prob: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    /// Same emission model with many short phases.
    pub fn transition_dense(self) -> Self {
        SyntheticConfig {
            min_len: 280,
            max_len: 420,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.classes < 2 {
            return bad("classes must be at least 2");
        }
        if self.min_len < self.classes || self.max_len < self.min_len {
            return bad("need classes <= min_len <= max_len");
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be positive");
        }
        if !(self.duration_shape > 0.0 && self.separation >= 0.0 && self.noise >= 0.0) {
            return bad("duration_shape must be positive, separation and noise non-negative");
        }
        if !(0.0..1.0).contains(&self.skip_prob) {
            return bad("skip_prob must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<Video>,
    pub test: Vec<Video>,
}

/// Phase means shared by every video of a dataset.
fn phase_means(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..cfg.classes)
        .map(|_| {
            let v: Vec<f64> = (0..cfg.feature_dim).map(|_| StandardNormal.sample(rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            v.into_iter().map(|x| cfg.separation * x / n).collect()
        })
        .collect()
}

/// Phase sequence and per-phase durations summing to `len`.
fn phase_plan(cfg: &SyntheticConfig, len: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let c = cfg.classes;
    let phases: Vec<usize> = (0..c)
        .filter(|&p| p == 0 || p == c - 1 || !rng.random_bool(cfg.skip_prob))
        .collect();
    let gamma = Gamma::new(cfg.duration_shape, 1.0).expect("validated shape");
    let w: Vec<f64> = phases.iter().map(|_| gamma.sample(rng)).collect();
    let total: f64 = w.iter().sum();
    let spare = len - phases.len();
    let mut durs: Vec<usize> = w.iter().map(|x| 1 + (spare as f64 * x / total).floor() as usize).collect();
    let assigned: usize = durs.iter().sum();
    let last = durs.len() - 1;
    durs[last] += len - assigned;
    phases.into_iter().zip(durs).collect()
}

fn synth_video(cfg: &SyntheticConfig, means: &[Vec<f64>], rng: &mut ChaCha8Rng) -> Video {
    let len = rng.random_range(cfg.min_len..=cfg.max_len);
    let plan = phase_plan(cfg, len, rng);
    let mut labels = Vec::with_capacity(len);
    for &(p, d) in &plan {
        labels.extend(std::iter::repeat_n(p, d));
    }
    let mut starts = Vec::new();
    let mut acc = 0;
    for &(_, d) in &plan[..plan.len() - 1] {
        acc += d;
        starts.push(acc);
    }
    let d = cfg.feature_dim;
    let noise = Normal::new(0.0, cfg.noise).expect("validated noise");
    let mut data = Vec::with_capacity(len * d);
    for t in 0..len {
        let mut mean = means[labels[t]].clone();
        if cfg.blur > 0 {
            // blend towards the neighbouring phase inside the blur window
            for &s in &starts {
                let half = cfg.blur as f64 / 2.0;
                let off = t as f64 + 0.5 - s as f64;
                if off.abs() < half {
                    let w = (off + half) / cfg.blur as f64;
                    let (a, b) = (&means[labels[s - 1]], &means[labels[s]]);
                    for i in 0..d {
                        mean[i] = (1.0 - w) * a[i] + w * b[i];
                    }
                }
            }
        }
        for m in mean {
            let v: f64 = m + noise.sample(rng);
            data.push(v as f32 as f64);
        }
    }
    Video {
        features: Tensor::new(&[len, d], data),
        classes: cfg.classes,
        labels: Some(labels),
        mask: vec![true; len],
    }
}

/// Deterministic dataset for `cfg.seed`.
pub fn gen_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let means = phase_means(cfg, &mut rng);
    let train = (0..cfg.train_videos).map(|_| synth_video(cfg, &means, &mut rng)).collect();
    let test = (0..cfg.test_videos).map(|_| synth_video(cfg, &means, &mut rng)).collect();
    Ok(Dataset { train, test })
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format {
        context: "SMFD".into(),
        message: msg.into(),
    }
}

pub fn encode_smfd(video: &Video) -> Result<Vec<u8>> {
    let (t, d) = (video.len(), video.feature_dim());
    ensure!(video.mask.len() == t, "mask length differs from frame count");
    ensure!(video.classes <= u16::MAX as usize + 1, "too many classes for u16 labels");
    let to_u32 = |v: usize, what: &str| u32::try_from(v).map_err(|_| Error::contract(format!("{what} exceeds u32")));
    let mut out = Vec::with_capacity(24 + 4 * t * d + 3 * t);
    out.extend_from_slice(SMFD_MAGIC);
    out.extend_from_slice(&SMFD_VERSION.to_le_bytes());
    out.extend_from_slice(&to_u32(t, "T")?.to_le_bytes());
    out.extend_from_slice(&to_u32(d, "D")?.to_le_bytes());
    out.extend_from_slice(&to_u32(video.classes, "C")?.to_le_bytes());
    let flags = if video.labels.is_some() { FLAG_LABELS } else { 0 };
    out.extend_from_slice(&flags.to_le_bytes());
    for &v in video.features.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    if let Some(labels) = &video.labels {
        ensure!(labels.len() == t, "label length differs from frame count");
        for &l in labels {
            ensure!(l < video.classes, "label {l} out of range");
            out.extend_from_slice(&(l as u16).to_le_bytes());
        }
    }
    out.extend(video.mask.iter().map(|&m| m as u8));
    Ok(out)
}

pub fn decode_smfd(bytes: &[u8]) -> Result<Video> {
    if bytes.len() < 24 {
        return Err(fmt_err("file shorter than the header"));
    }
    if &bytes[..4] != SMFD_MAGIC {
        return Err(fmt_err("bad magic"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let version = u32_at(4);
    if version != SMFD_VERSION {
        return Err(fmt_err(format!("unsupported version {version}")));
    }
    let (t, d, c, flags) = (u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize, u32_at(20));
    if flags & !FLAG_LABELS != 0 {
        return Err(fmt_err(format!("unknown flag bits {flags:#x}")));
    }
    let has_labels = flags & FLAG_LABELS != 0;
    let expect = (t as u64) * (d as u64) * 4 + if has_labels { 2 * t as u64 } else { 0 } + t as u64 + 24;
    if bytes.len() as u64 != expect {
        return Err(fmt_err(format!("expected {expect} bytes, found {}", bytes.len())));
    }
    let mut off = 24;
    let mut data = Vec::with_capacity(t * d);
    for _ in 0..t * d {
        data.push(f32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes")) as f64);
        off += 4;
    }
    let labels = if has_labels {
        let mut l = Vec::with_capacity(t);
        for _ in 0..t {
            let v = u16::from_le_bytes([bytes[off], bytes[off + 1]]) as usize;
            if v >= c {
                return Err(fmt_err(format!("label {v} out of range for {c} classes")));
            }
            l.push(v);
            off += 2;
        }
        Some(l)
    } else {
        None
    };
    let mut mask = Vec::with_capacity(t);
    for &b in &bytes[off..off + t] {
        match b {
            0 => mask.push(false),
            1 => mask.push(true),
            _ => return Err(fmt_err(format!("mask byte {b} is not 0 or 1"))),
        }
    }
    Ok(Video {
        features: Tensor::new(&[t, d], data),
        classes: c,
        labels,
        mask,
    })
}

pub fn write_smfd(path: &Path, video: &Video) -> Result<()> {
    fs::write(path, encode_smfd(video)?).map_err(|e| Error::io(path, e))
}

pub fn read_smfd(path: &Path) -> Result<Video> {
    decode_smfd(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Writes `train_NNN.smfd` and `test_NNN.smfd` into `dir`.
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for (prefix, videos) in [("train", &data.train), ("test", &data.test)] {
        for (i, v) in videos.iter().enumerate() {
            let p = dir.join(format!("{prefix}_{i:03}.smfd"));
            write_smfd(&p, v)?;
            paths.push(p);
        }
    }
    Ok(paths)
}

/// Reads a directory written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "smfd"))
        .collect();
    entries.sort();
    let mut data = Dataset {
        train: Vec::new(),
        test: Vec::new(),
    };
    for p in entries {
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if name.starts_with("train_") {
            data.train.push(read_smfd(&p)?);
        } else if name.starts_with("test_") {
            data.test.push(read_smfd(&p)?);
        }
    }
    if data.train.is_empty() {
        return Err(Error::Format {
            context: dir.display().to_string(),
            message: "no train_*.smfd files".into(),
        });
    }
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            train_videos: 3,
            test_videos: 2,
            min_len: 60,
            max_len: 90,
            feature_dim: 8,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        assert_eq!(gen_synthetic(&small()).unwrap(), gen_synthetic(&small()).unwrap());
        let other = gen_synthetic(&SyntheticConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(other, gen_synthetic(&small()).unwrap());
    }

    #[test]
    fn phases_are_monotone_and_complete() {
        for v in gen_synthetic(&small()).unwrap().train {
            let l = v.labels().unwrap();
            assert!(l.windows(2).all(|w| w[0] <= w[1]));
            assert_eq!(l[0], 0);
            assert_eq!(*l.last().unwrap(), 6);
            assert!((60..=90).contains(&l.len()));
        }
    }

    #[test]
    fn zero_blur_gives_piecewise_stationary_means() {
        let cfg = SyntheticConfig {
            blur: 0,
            noise: 0.0,
            ..small()
        };
        for v in gen_synthetic(&cfg).unwrap().train {
            let l = v.labels().unwrap();
            for t in 1..v.len() {
                let same = v.features.row(t) == v.features.row(t - 1);
                assert_eq!(same, l[t] == l[t - 1]);
            }
        }
    }

    #[test]
    fn default_task_shape() {
        let c = SyntheticConfig::default();
        assert_eq!((c.classes, c.feature_dim, c.train_videos, c.test_videos), (7, 256, 20, 10));
    }

    #[test]
    fn smfd_round_trip_and_length_checks() {
        let v = gen_synthetic(&small()).unwrap().train.remove(0);
        let bytes = encode_smfd(&v).unwrap();
        assert_eq!(bytes.len(), 24 + 4 * v.len() * 8 + 3 * v.len());
        assert_eq!(decode_smfd(&bytes).unwrap(), v);
        assert!(decode_smfd(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_smfd(&bad).is_err());

        let unlabeled = Video { labels: None, ..v };
        let bytes = encode_smfd(&unlabeled).unwrap();
        assert_eq!(decode_smfd(&bytes).unwrap(), unlabeled);
    }
}
