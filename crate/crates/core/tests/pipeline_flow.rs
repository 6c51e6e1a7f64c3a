use occupancy::experiments::{preset, run_experiment, ExperimentConfig, ExperimentReport};
use occupancy::geometry::ImplicitShape;
use occupancy::metrics::{evaluate, EvalConfig, Reference};
use occupancy::pipeline::{
    infer_dense, load_checkpoint, reconstruct, save_checkpoint, train, LabelSource, ReconstructConfig, TrainConfig,
    TrainingSample, DEFAULT_CHUNK,
};
use occupancy::rng;
use occupancy::sampling::QueryBudget;
use occupancy::synth::{make_dataset, SceneTemplate};
use occupancy::Error;

fn tiny_train() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        points_per_volume: 256,
        base_channels: 2,
        hidden_dim: Some(16),
        val_points: 256,
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn train_checkpoint_infer_reconstruct_evaluate() {
    let data = make_dataset(3, &SceneTemplate::Sphere { dims: 32, radius: 0.45 }, 8).unwrap();
    let budget = QueryBudget::new(1500, 800);
    let samples: Vec<TrainingSample> = data
        .scenes
        .iter()
        .enumerate()
        .map(|(i, s)| TrainingSample::from_scene(s, &budget, LabelSource::Exact, None, &mut rng::seeded(i as u64)).unwrap())
        .collect();
    let outcome = train(&samples[..2], &samples[2..], &tiny_train(), None).unwrap();
    assert_eq!(outcome.epochs.len(), 3);
    assert!(outcome.steps.iter().all(|s| s.loss.is_finite()));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    let params = outcome.selected();
    save_checkpoint(params, &path).unwrap();
    let loaded = load_checkpoint(&path, Some(&params.config)).unwrap();
    let other = TrainConfig {
        hidden_dim: Some(32),
        ..tiny_train()
    }
    .model_config(1);
    assert!(matches!(load_checkpoint(&path, Some(&other)), Err(Error::Config(_))));

    let v = &samples[2].volume;
    let a = infer_dense(params, v, [48; 3], DEFAULT_CHUNK).unwrap();
    let b = infer_dense(&loaded, v, [48; 3], 4096).unwrap();
    assert_eq!(a, b);

    let mesh = reconstruct(&a[0], &ReconstructConfig::default()).unwrap();
    let scene = &data.scenes[2];
    let shapes = scene.shapes();
    let reference = Reference {
        name: "sphere",
        mesh: &scene.meshes[0],
        shape: Some(shapes[0] as &dyn ImplicitShape),
    };
    let cfg = EvalConfig {
        n_surface_points: 2000,
        voxel_dims: [32; 3],
        seed: 1,
    };
    let m = evaluate(&mesh, Some(&a[0]), &reference, &scene.volume.frame(), &cfg).unwrap();
    assert!(m.hd90.is_finite() && m.assd >= 0.0 && (0.0..=100.0).contains(&m.iou));
}

#[test]
fn experiment_writes_artifacts_and_round_trips_config() {
    let mut cfg = preset("sphere", 4).unwrap();
    cfg.scenes = 4;
    cfg.train = TrainConfig {
        epochs: 2,
        ..tiny_train()
    };
    cfg.baseline = true;
    let text = serde_json::to_string(&cfg).unwrap();
    assert_eq!(ExperimentConfig::from_json(&text).unwrap(), cfg);

    let dir = tempfile::tempdir().unwrap();
    let out = run_experiment(&cfg, Some(dir.path())).unwrap();
    for f in ["checkpoint.json", "checkpoint.raw", "loss.csv", "report.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let report: ExperimentReport =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report, out.report);
    assert_eq!(report.fingerprint, cfg.fingerprint());
    assert_eq!(report.scenes.len(), report.test_scenes.len());
    assert!(report.baseline_mean.is_some());
    let header = std::fs::read_to_string(dir.path().join("loss.csv")).unwrap();
    assert!(header.starts_with(&format!("# fingerprint={}", report.model_fingerprint)));
}

#[test]
fn unknown_preset_and_bad_config_are_rejected() {
    assert!(matches!(preset("nope", 0), Err(Error::Config(_))));
    assert!(ExperimentConfig::from_json(r#"{"name": "x"}"#).is_err());
}
