use std::path::Path;
use std::process::{Command, Output};

use relguide::data::{load_dataset, Mask};
use relguide::training::{tumor_lrp_score, ScoreVariant};
use relguide::Tensor;
use serde_json::{json, Value};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_relguide")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn small_config(dir: &Path) -> String {
    let cfg = json!({
        "seed": 3,
        "generator": {"height": 16, "width": 16, "samples_per_class": 6, "validation_per_class": 3},
        "model": {"input_shape": [3, 16, 16], "conv_channels": [4, 4], "dense_units": 8},
        "train": {"epochs": 1, "batch_size": 4},
        "loss": {"mode": "penalization", "power": 1.0},
        "retrieval": {"k": 3, "grid": 4, "connections": 4}
    });
    let path = dir.join("config.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    path.to_str().unwrap().to_string()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&run(&[])), 1);
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["train", "--bogus"])), 1);
    assert_eq!(code(&run(&["train", "--loss", "sideways"])), 1);

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"seed": 1, "train": {"epochs": 1, "epochz": 2}}"#).unwrap();
    let out = run(&["generate", "--config", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochz"));

    let cfg = small_config(dir.path());
    let out = run(&["explain", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 1, "missing --weights");
    let missing = dir.path().join("missing.rgtw");
    let out = run(&["evaluate", "--config", &cfg, "--weights", missing.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 2);
}

#[test]
fn generate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        assert_eq!(code(&run(&["generate", "--config", &cfg, "--out", out.to_str().unwrap()])), 0);
    }
    for file in ["train.rgtd", "val.rgtd"] {
        assert_eq!(std::fs::read(a.join(file)).unwrap(), std::fs::read(b.join(file)).unwrap());
    }
    let c = dir.path().join("c");
    run(&["generate", "--config", &cfg, "--seed", "4", "--out", c.to_str().unwrap()]);
    assert_ne!(std::fs::read(a.join("train.rgtd")).unwrap(), std::fs::read(c.join("train.rgtd")).unwrap());
    let manifest = read_json(&a.join("manifest.json"));
    assert_eq!(manifest["command"], "generate");
    assert_eq!(manifest["seed"], 3);
}

#[test]
fn train_explain_retrieve_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let data = dir.path().join("data");
    let d = data.to_str().unwrap();
    assert_eq!(code(&run(&["generate", "--config", &cfg, "--out", d])), 0);

    let trained = dir.path().join("trained");
    let out = run(&["train", "--config", &cfg, "--data", d, "--out", trained.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(trained.join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("epoch,loss,accuracy,f1_weighted,score_class0,score_class1"));
    assert_eq!(lines.count(), 1);
    let manifest = read_json(&trained.join("manifest.json"));
    assert_eq!(manifest["parameters"]["mode"], "penalization");
    let weights = trained.join("weights.rgtw");
    let w = weights.to_str().unwrap();

    // the manifest doubles as a config
    let manifest_path = trained.join("manifest.json");
    let eval = dir.path().join("eval");
    let out = run(&["evaluate", "--config", manifest_path.to_str().unwrap(), "--weights", w, "--data", d, "--out", eval.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report = read_json(&eval.join("evaluation.json"));
    assert!(report["accuracy"].as_f64().unwrap() <= 1.0);

    let val = load_dataset(&data.join("val.rgtd")).unwrap();
    let sample = &val[1];
    let id = sample.id.to_string();
    let explain = dir.path().join("explain");
    let out = run(&["explain", "--config", &cfg, "--weights", w, "--data", d, "--sample", &id, "--out", explain.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report = read_json(&explain.join("explain.json"));
    let pgm = std::fs::read(explain.join("heatmap_true.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n16 16\n255\n"));
    assert_eq!(pgm.len(), 13 + 256);
    // the score recomputed from the channel-summed CSV
    let rel: Vec<f32> = std::fs::read_to_string(explain.join("relevance_true.csv"))
        .unwrap()
        .lines()
        .flat_map(|l| l.split(',').map(|v| v.parse::<f32>().unwrap()).collect::<Vec<_>>())
        .collect();
    let rel = Tensor::new(&[1, 16, 16], rel).unwrap();
    let lesion = Mask::new(16, 16, sample.lesion_mask.data().to_vec()).unwrap();
    let recomputed = tumor_lrp_score(&rel, &lesion, &sample.object_mask, ScoreVariant::Unnormalized, 1e-3).unwrap();
    assert_eq!(report["score_true"].as_f64().unwrap() as f32, recomputed);
    assert!(String::from_utf8_lossy(&out.stdout).contains("score"));

    let retrieve = dir.path().join("retrieve");
    let out = run(&["retrieve", "--config", &cfg, "--weights", w, "--data", d, "--sample", &id, "--out", retrieve.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report = read_json(&retrieve.join("neighbors.json"));
    let neighbors = report["neighbors"].as_array().unwrap();
    assert_eq!(neighbors.len(), 3);
    let distances: Vec<f64> = neighbors.iter().map(|n| n["distance"].as_f64().unwrap()).collect();
    assert!(distances.windows(2).all(|p| p[0] <= p[1]));
    for n in neighbors {
        let pair = read_json(&retrieve.join(n["bilrp"].as_str().unwrap()));
        assert_eq!(pair["grid"], 4);
        assert!(pair["connections"].as_array().unwrap().len() <= 4);
    }
    assert!(retrieve.join("atlas.rgta").exists());

    let out = run(&["explain", "--config", &cfg, "--weights", w, "--data", d, "--sample", "99999", "--out", explain.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
}
