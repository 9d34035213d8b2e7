use std::path::Path;
use std::process::{Command, Output};

use rand::Rng;
use rmtprune::linalg::RealMatrix;
use rmtprune::matrixio;
use rmtprune::nn::{Activation, Layer, MLPModel, Weight};
use rmtprune::rng;
use serde_json::Value;

fn rmtprune(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rmtprune")).args(args).output().expect("binary runs")
}

fn read_json(p: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap()
}

fn write_idx(dir: &Path, prefix: &str, images: &[Vec<u8>], labels: &[u8]) {
    let mut img = Vec::new();
    for v in [0x0803, images.len() as u32, 4, 4] {
        img.extend(u32::to_be_bytes(v));
    }
    img.extend(images.concat());
    std::fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), img).unwrap();
    let mut lab = Vec::new();
    for v in [0x0801, labels.len() as u32] {
        lab.extend(u32::to_be_bytes(v));
    }
    lab.extend(labels);
    std::fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), lab).unwrap();
}

/// Ten classes of noisy 4×4 images.
fn toy_data(dir: &Path) {
    let mut r = rng::seeded(5);
    for (prefix, n) in [("train", 200), ("t10k", 50)] {
        let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
        let images: Vec<Vec<u8>> = labels
            .iter()
            .map(|&c| (0..16u8).map(|p| if (p + c) % 10 < 4 { 180 } else { 40 } + r.gen_range(0..60u8)).collect())
            .collect();
        write_idx(dir, prefix, &images, &labels);
    }
}

#[test]
fn missing_seed_is_a_contract_error_with_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("spiked.csv");
    let o = rmtprune(&["spiked", "--n-rows", "20", "--n-cols", "20", "--sigmas", "3", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let m = read_json(&dir.path().join("spiked.csv.manifest.json"));
    assert_eq!(m["exit_code"], 1);
    assert!(m["error"].as_str().unwrap().contains("seed"));
    assert!(!out.exists());
}

#[test]
fn malformed_seed_list_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r");
    let o = rmtprune(&["regress", "--seed", "3..x", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(read_json(&out.join("manifest.json"))["subcommand"], "regress");
}

#[test]
fn seed_range_expands_in_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("spiked.csv");
    let o = rmtprune(&["spiked", "--n-rows", "40", "--n-cols", "30", "--sigmas", "3", "--seed", "2..5", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let m = read_json(&dir.path().join("spiked.csv.manifest.json"));
    assert_eq!(m["seeds"], serde_json::json!([2, 3, 4]));
    assert_eq!(m["exit_code"], 0);
}

#[test]
fn analyze_pure_noise_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let n = 1000;
    // A single draw; at β = 0.1 roughly one draw in ten still has its top
    // eigenvalue above the fitted edge.
    let w = RealMatrix::gaussian(n, n, 1.0, &mut rng::seeded(14));
    let layer = Layer { weight: Weight::Dense(w), bias: None, mask: None };
    let model = MLPModel::new(vec![layer], Activation::Relu, false).unwrap();
    let ckpt = dir.path().join("noise.ckpt");
    matrixio::save_checkpoint(&model.to_checkpoint(), &ckpt).unwrap();
    let report = dir.path().join("a.json");
    let o = rmtprune(&["analyze", "--model", ckpt.to_str().unwrap(), "--report", report.to_str().unwrap(), "--beta", "0.1"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_json(&report);
    let row = &rows[0];
    assert!(row["mu"].as_f64().unwrap() < 0.05, "{row}");
    assert_eq!(row["gamma"].as_f64().unwrap(), 1.0, "{row}");
    assert_eq!(row["nnz"], n * n);
}

#[test]
fn mp_pruned_training_logs_ranks() {
    let dir = tempfile::tempdir().unwrap();
    toy_data(dir.path());
    let cfg = dir.path().join("prune.toml");
    std::fs::write(&cfg, "min_dim = 4\n").unwrap();
    let log = dir.path().join("log.csv");
    let d = dir.path().to_str().unwrap();
    let o = rmtprune(&[
        "train", "--data", d, "--topology", "16,12,10", "--seed", "1", "--epochs", "8", "--lr", "0.05",
        "--mp-prune-every", "4", "--f-slope", "1/200", "--prune-config", cfg.to_str().unwrap(),
        "--out", dir.path().join("m.ckpt").to_str().unwrap(), "--log", log.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let mut rdr = csv::Reader::from_path(&log).unwrap();
    let header: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
    assert!(header.iter().any(|h| h == "retained_rank_0"), "{header:?}");
    assert_eq!(rdr.records().count(), 8);
}

#[test]
fn diverging_training_is_a_numeric_failure() {
    let dir = tempfile::tempdir().unwrap();
    toy_data(dir.path());
    let log = dir.path().join("log.csv");
    let o = rmtprune(&[
        "train", "--data", dir.path().to_str().unwrap(), "--topology", "16,12,10", "--seed", "1", "--epochs", "5",
        "--lr", "1e200", "--out", dir.path().join("m.ckpt").to_str().unwrap(), "--log", log.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    let m = read_json(&dir.path().join("log.csv.manifest.json"));
    assert_eq!(m["exit_code"], 2);
    assert!(m["error"].as_str().unwrap().contains("non-finite"));
}

#[test]
fn regress_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r");
    let o = rmtprune(&["regress", "--seed", "0,1", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv::Reader::from_path(out.join("mse.csv")).unwrap().records().count();
    assert_eq!(rows, 2 * 4);
}
