use std::path::Path;
use std::process::Command;

fn dpssm(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_dpssm")).args(args).output().expect("binary runs")
}

fn smoke_config() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.cfg").to_string_lossy().into_owned()
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).to_string_lossy().into_owned();
    let cfg = smoke_config();

    let out = dpssm(&["gen-data", "--config", &cfg, "--out", &p("data")]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("data/test_000.smfd").exists());

    let out = dpssm(&["train", "--config", &cfg, "--data", &p("data"), "--out", &p("m.smck")]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("m.metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);

    for run in ["a", "b"] {
        let out = dpssm(&["infer", "--ckpt", &p("m.smck"), "--input", &p("data/test_000.smfd"), "--trace", &p(run)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for f in ["frames.csv", "angles.csv", "plane_cosine.csv", "slow_states.bin"] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs between runs");
    }

    let frames = std::fs::read_to_string(dir.path().join("a/frames.csv")).unwrap();
    let header: Vec<&str> = frames.lines().next().unwrap().split(',').collect();
    let lam = header.iter().position(|h| *h == "lambda_0").unwrap();
    let (p10, mean, p90) = (
        header.iter().position(|h| *h == "dA_p10_0").unwrap(),
        header.iter().position(|h| *h == "dA_mean_0").unwrap(),
        header.iter().position(|h| *h == "dA_p90_0").unwrap(),
    );
    for row in frames.lines().skip(1) {
        let v: Vec<f64> = row.split(',').map(|x| x.parse().unwrap()).collect();
        assert!((0.0..=1.0).contains(&v[lam]));
        assert!(v[p10] <= v[mean] + 1e-9 && v[mean] <= v[p90] + 1e-9);
    }
    let cos = std::fs::read_to_string(dir.path().join("a/plane_cosine.csv")).unwrap();
    for row in cos.lines().skip(1) {
        let v: Vec<&str> = row.split(',').collect();
        if v[1] == v[2] {
            assert!((v[3].parse::<f64>().unwrap() - 1.0).abs() < 1e-9);
        }
    }

    let out = dpssm(&["bench", "--ckpt", &p("m.smck"), "--frames", "1000"]);
    assert!(!out.status.success());
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["passed"], false);
}

#[test]
fn failures_exit_nonzero_with_json() {
    let out = dpssm(&["infer", "--ckpt", "/nonexistent.smck", "--input", "x.smfd", "--trace", "t"]);
    assert!(!out.status.success());
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["passed"], false);
    assert!(err["error"].as_str().unwrap().contains("nonexistent"));
}

#[test]
fn verify_passes_quickly() {
    let out = dpssm(&["verify", "--seeds", "5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().filter(|l| l.starts_with("PASS")).count() >= 15);
}
