use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn occupancy(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_occupancy"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn arg(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

#[test]
fn usage_errors_exit_with_one() {
    let none = occupancy(&[]);
    assert_eq!(none.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&none.stderr).contains("Usage"));
    assert_eq!(occupancy(&["gradcheck", "--bogus"]).status.code(), Some(1));
    assert_eq!(occupancy(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(occupancy(&["repro", "no-such-preset"]).status.code(), Some(1));
    assert_eq!(occupancy(&["--help"]).status.code(), Some(0));
}

#[test]
fn gradcheck_passes() {
    let out = occupancy(&["gradcheck", "--seed", "3"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(0), "{text}");
    assert!(text.contains("composite") && !text.contains("FAIL"));
}

#[test]
fn stages_chain_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let synth_cfg = d.join("synth.json");
    fs::write(&synth_cfg, r#"{"template": {"kind": "sphere", "dims": 32, "radius": 0.4}, "scenes": 3}"#).unwrap();
    let data = d.join("data");
    let out = occupancy(&["synth", "--config", arg(&synth_cfg), "--seed", "2", "--out", arg(&data)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(data.join("dataset.json").exists() && data.join("scene_000/scene.json").exists());

    let sample_cfg = d.join("sample.json");
    fs::write(&sample_cfg, r#"{"budget": {"volume_points": 500, "boundary_points": 300, "sigmas": [[1.0, 0.02]]}}"#).unwrap();
    let queries = d.join("queries");
    let out = occupancy(&["sample", arg(&data), "--config", arg(&sample_cfg), "--out", arg(&queries)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let header = fs::read_to_string(queries.join("scene_000.json")).unwrap();
    assert!(header.contains("fingerprint") && header.contains("seed"));

    let train_cfg = d.join("train.json");
    fs::write(
        &train_cfg,
        r#"{"train": {"epochs": 2, "points_per_volume": 128, "base_channels": 1, "hidden_dim": 8, "val_points": 128}}"#,
    )
    .unwrap();
    let run = d.join("run");
    let out = occupancy(&[
        "train",
        arg(&data),
        "--queries",
        arg(&queries),
        "--config",
        arg(&train_cfg),
        "--seed",
        "4",
        "--out",
        arg(&run),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["checkpoint.json", "checkpoint.raw", "last.json", "loss.csv", "epochs.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert!(fs::read_to_string(run.join("loss.csv")).unwrap().starts_with("# fingerprint="));

    let resumed = d.join("resumed");
    let longer = d.join("train3.json");
    fs::write(
        &longer,
        r#"{"train": {"epochs": 3, "points_per_volume": 128, "base_channels": 1, "hidden_dim": 8, "val_points": 128}}"#,
    )
    .unwrap();
    let out = occupancy(&[
        "train",
        arg(&data),
        "--queries",
        arg(&queries),
        "--config",
        arg(&longer),
        "--seed",
        "4",
        "--resume",
        arg(&run.join("last.json")),
        "--out",
        arg(&resumed),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_to_string(resumed.join("loss.csv")).unwrap().lines().count(), 2 + 1);

    let rec_cfg = d.join("rec.json");
    fs::write(&rec_cfg, r#"{"inference": {"kind": "dense", "out_dims": [48, 48, 48], "chunk": 5000}}"#).unwrap();
    let rec = d.join("rec");
    let out = occupancy(&[
        "reconstruct",
        arg(&run.join("checkpoint.json")),
        arg(&data.join("scene_000/volume.vol")),
        "--config",
        arg(&rec_cfg),
        "--out",
        arg(&rec),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(rec.join("occupancy_0.vol").exists() && rec.join("organ_0.obj").exists());

    let eval = d.join("eval");
    let out = occupancy(&[
        "evaluate",
        arg(&data.join("scene_000/sphere.obj")),
        arg(&data.join("scene_000/sphere.obj")),
        "--volume",
        arg(&data.join("scene_000/volume.vol")),
        "--out",
        arg(&eval),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(eval.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(report["organs"][0]["iou"], 100.0);
    assert!(report["organs"][0]["assd"].as_f64().unwrap() < 0.5);

    let mismatch = occupancy(&[
        "evaluate",
        arg(&data.join("scene_000/sphere.obj")),
        arg(&data.join("scene_000/sphere.obj")),
        "--pred-occupancy",
        arg(&rec.join("occupancy_0.vol")),
        "--gt-occupancy",
        arg(&data.join("scene_000/volume.vol")),
    ]);
    assert_eq!(mismatch.status.code(), Some(2));
    let err = String::from_utf8_lossy(&mismatch.stderr);
    assert!(err.contains("frame_mismatch"), "{err}");
}

#[test]
fn missing_inputs_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = occupancy(&["sample", arg(&dir.path().join("absent")), "--out", arg(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"scenes": "many"}"#).unwrap();
    let out = occupancy(&["synth", "--config", arg(&bad), "--out", arg(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn repro_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let runs: Vec<_> = ["a", "b"]
        .iter()
        .map(|name| {
            let out_dir = dir.path().join(name);
            let out = occupancy(&["repro", "sphere", "--seed", "7", "--deterministic", "--threads", "1", "--out", arg(&out_dir)]);
            assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
            out_dir
        })
        .collect();
    for f in ["report.json", "checkpoint.json", "checkpoint.raw", "loss.csv"] {
        assert_eq!(fs::read(runs[0].join(f)).unwrap(), fs::read(runs[1].join(f)).unwrap(), "{f}");
    }
}
