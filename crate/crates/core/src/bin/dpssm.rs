use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use dualpath_ssm::checkpoint::{self, Checkpoint};
use dualpath_ssm::config::RunConfig;
use dualpath_ssm::data::{gen_synthetic, read_dataset, read_smfd, write_dataset};
use dualpath_ssm::model::DualPathModel;
use dualpath_ssm::stream::{bench, run_trace, StreamEngine};
use dualpath_ssm::train::{train, video_metrics};
use dualpath_ssm::verify::{self, Check, VerifyOptions, VerifyReport};
use dualpath_ssm::Precision;

#[derive(Parser)]
#[command(name = "dpssm", version, about = "Dual-path streaming SSM for online phase recognition")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic phase-stream dataset as SMFD files.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a dataset directory and write an SMCK checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stream one SMFD file through a checkpoint and export traces.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        trace: PathBuf,
        /// Keep every n-th slow state in slow_states.bin.
        #[arg(long, default_value_t = 16)]
        state_every: usize,
    },
    /// Run the matrix-view and invariant suites.
    Verify {
        #[arg(long, default_value_t = 100)]
        seeds: usize,
        #[arg(long, default_value = "double")]
        precision: Precision,
    },
    /// Per-frame latency and state footprint of the streaming engine.
    Bench {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 20_000)]
        frames: usize,
    },
    /// Finite-difference gradient check of the tiny model.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// A failed run: exit code 1 with `summary` on stderr.
struct Failure(Value);

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure(json!({ "passed": false, "error": e.to_string() }))
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::GenData { config, out } => gen_data(&config, &out),
        Cmd::Train { config, data, out } => train_cmd(&config, &data, &out),
        Cmd::Infer {
            ckpt,
            input,
            trace,
            state_every,
        } => infer(&ckpt, &input, &trace, state_every),
        Cmd::Verify { seeds, precision } => verify_cmd(seeds, precision),
        Cmd::Bench { ckpt, frames } => bench_cmd(&ckpt, frames),
        Cmd::GradCheck { seed } => grad_check_cmd(seed),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(v)) => {
            eprintln!("{v}");
            ExitCode::FAILURE
        }
    }
}

fn gen_data(config: &Path, out: &Path) -> Outcome {
    let cfg = RunConfig::load(config)?;
    let data = gen_synthetic(&cfg.data)?;
    let files = write_dataset(out, &data)?;
    println!(
        "{}",
        json!({ "train": data.train.len(), "test": data.test.len(), "files": files.len(), "dir": out })
    );
    Ok(())
}

fn train_cmd(config: &Path, data: &Path, out: &Path) -> Outcome {
    let cfg = RunConfig::load(config)?;
    let ds = read_dataset(data)?;
    let mut model = DualPathModel::new(cfg.model.clone(), cfg.train.seed)?;
    let report = train(&mut model, &ds.train, &ds.test, &cfg.train, |e| {
        println!(
            "epoch {:>3} lr {:.2e} loss {:.4} (ce {:.4} sm {:.4} tr {:.4}) test {}",
            e.epoch, e.lr, e.loss, e.ce, e.smooth, e.trans, e.test
        );
    })?;
    let epochs = report.epochs.len();
    let ckpt = Checkpoint {
        model,
        clip_len: cfg.train.clip_len,
        extra: [("epochs".to_string(), epochs.to_string())].into(),
    };
    checkpoint::save(out, &ckpt)?;
    let csv = out.with_extension("metrics.csv");
    report.write_csv(&csv)?;
    let m = report.final_metrics();
    println!(
        "{}",
        json!({
            "checkpoint": out,
            "metrics_csv": csv,
            "epochs": epochs,
            "steps": report.steps,
            "accuracy": m.map(|m| m.accuracy),
            "jaccard": m.map(|m| m.jaccard),
        })
    );
    Ok(())
}

fn infer(ckpt: &Path, input: &Path, trace: &Path, state_every: usize) -> Outcome {
    let ck = checkpoint::load(ckpt)?;
    let video = read_smfd(input)?;
    let mut engine = StreamEngine::new(&ck.model, ck.clip_len)?;
    let run = run_trace(&mut engine, &video.features, state_every.max(1))?;
    run.export(trace)?;
    let mut summary = json!({ "frames": run.steps.len(), "trace": trace, "state_bytes": engine.state_bytes() });
    if let Some(labels) = &video.labels {
        let pred: Vec<usize> = run.steps.iter().map(|s| s.predicted).collect();
        let m = video_metrics(&pred, labels, &video.mask, ck.model.config().classes)?;
        summary["accuracy"] = json!(m.accuracy);
        summary["jaccard"] = json!(m.jaccard);
    }
    println!("{summary}");
    Ok(())
}

fn report_outcome(report: &VerifyReport) -> Outcome {
    for c in &report.checks {
        println!("{c}");
    }
    if report.passed() {
        println!("{}", json!({ "passed": true, "checks": report.checks.len(), "seconds": report.seconds }));
        Ok(())
    } else {
        Err(Failure(report.failure_json()))
    }
}

fn verify_cmd(seeds: usize, precision: Precision) -> Outcome {
    report_outcome(&verify::run(VerifyOptions { seeds, precision })?)
}

fn grad_check_cmd(seed: u64) -> Outcome {
    let start = std::time::Instant::now();
    let checks = verify::gradient_check(seed)?;
    report_outcome(&VerifyReport {
        checks,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn bench_cmd(ckpt: &Path, frames: usize) -> Outcome {
    let ck = checkpoint::load(ckpt)?;
    let f = ck.model.config().feature_dim;
    let points: Vec<usize> = [100, 1_000, 10_000, 50_000].into_iter().filter(|&p| 2 * p <= frames).collect();
    if points.len() < 2 {
        return Err(Failure(json!({ "passed": false, "error": "bench needs --frames >= 2000" })));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let pool: Vec<Vec<f64>> = (0..256).map(|_| (0..f).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let mut engine = StreamEngine::new(&ck.model, ck.clip_len)?;
    let report = bench(&mut engine, frames, &points, 101, 20, |t| pool[t % pool.len()].clone())?;
    let last = *points.last().expect("two points");
    let ratio = report.ratio(last, 100).unwrap_or(f64::NAN);
    let checks = vec![
        Check::below("bench.latency_ratio", (ratio - 1.0).abs(), 0.2, format!("frame {last} vs frame 100: {ratio:.3}")),
        Check::below(
            "bench.slope_ci_contains_zero",
            if report.slope_ci_contains_zero() { 0.0 } else { 1.0 },
            0.5,
            format!("slope {:.3e} s/frame, ci [{:.3e}, {:.3e}]", report.slope, report.slope_ci.0, report.slope_ci.1),
        ),
        Check::below(
            "bench.state_bytes_constant",
            report.state_bytes_end.abs_diff(report.state_bytes_start) as f64,
            0.5,
            format!("{} bytes", report.state_bytes_end),
        ),
    ];
    println!("{}", report.to_json());
    report_outcome(&VerifyReport { checks, seconds: report.mean_s * frames as f64 })
}
