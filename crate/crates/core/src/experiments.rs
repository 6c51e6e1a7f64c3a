//! End-to-end experiment runner and the named reproduction presets.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{apply, sample_affine, warp_volume, AffineAugment, AugmentConfig, TransformedShape};
use crate::error::{Error, Result};
use crate::geometry::TriMesh;
use crate::metrics::{self, EvalConfig, OrganMetrics, Reference};
use crate::model::{DecoderVariant, ModelParams};
use crate::pipeline::{
    self, binarize, infer_dense, infer_patchwise, reconstruct, upsample_nearest, LabelSource, PatchInference,
    ReconstructConfig, TrainConfig, TrainMode, TrainingSample,
};
use crate::rng;
use crate::sampling::QueryBudget;
use crate::synth::{make_dataset, Scene, SceneTemplate};
use crate::volume::{self, VolumeGrid};

/// SHA-256 hex digest of a value's compact JSON form.
pub fn config_fingerprint<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("config serializes");
    Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

const SAMPLE_STREAM: u64 = 0x7361_6d70;
const POSE_STREAM: u64 = 0x706f_7365;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InferenceMode {
    /// Whole-volume encoding evaluated on an `out_dims` grid.
    Dense { out_dims: [usize; 3], chunk: usize },
    /// Hann-blended patch-wise inference.
    Patch(PatchInference),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub template: SceneTemplate,
    pub scenes: usize,
    pub seed: u64,
    pub budget: QueryBudget,
    pub labels: LabelSource,
    /// Network input resolution; `None` keeps the scene resolution.
    pub input_dims: Option<[usize; 3]>,
    pub train: TrainConfig,
    pub inference: InferenceMode,
    #[serde(default)]
    pub reconstruct: ReconstructConfig,
    pub eval: EvalConfig,
    /// Also score the explicit baseline: the thresholded prediction at the
    /// input resolution, nearest-neighbor upsampled to the output grid.
    #[serde(default)]
    pub baseline: bool,
    /// Evaluate test scenes under held-out random affine poses.
    #[serde(default)]
    pub test_poses: Option<AugmentConfig>,
}

impl ExperimentConfig {
    pub fn fingerprint(&self) -> String {
        config_fingerprint(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.scenes < 3 {
            return Err(Error::Config("an experiment needs at least 3 scenes".into()));
        }
        if self.train.mode == TrainMode::Patch && self.input_dims.is_some_and(|d| d != [self.template.dims(); 3]) {
            return Err(Error::Config("patch training runs at the scene resolution".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneResult {
    pub index: usize,
    pub seed: u64,
    pub metrics: Vec<OrganMetrics>,
    pub baseline: Option<Vec<OrganMetrics>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub name: String,
    pub hd90: f64,
    pub assd: f64,
    pub chamfer: f64,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub fingerprint: String,
    pub model_fingerprint: String,
    pub seed: u64,
    pub train_scenes: Vec<usize>,
    pub val_scenes: Vec<usize>,
    pub test_scenes: Vec<usize>,
    pub steps: u64,
    pub final_train_loss: Option<f64>,
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
    pub scenes: Vec<SceneResult>,
    pub mean: Vec<MeanMetrics>,
    pub baseline_mean: Option<Vec<MeanMetrics>>,
    pub chamfer_convention: String,
    pub hd_convention: String,
}

impl ExperimentReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn organ(&self, name: &str) -> Option<&MeanMetrics> {
        self.mean.iter().find(|m| m.name == name)
    }

    /// Aligned table of mean test metrics (Chamfer shown ×10⁻³).
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{}\n{:<22} {:>10} {:>10} {:>10} {:>14}\n",
            self.name, "organ", "HD90 mm", "ASSD mm", "IoU %", "CD mm² ×1e-3"
        );
        let rows = self.mean.iter().map(|m| (m.name.clone(), m)).chain(
            self.baseline_mean
                .iter()
                .flatten()
                .map(|m| (format!("{} (baseline)", m.name), m)),
        );
        for (name, m) in rows {
            s += &format!(
                "{:<22} {:>10.3} {:>10.3} {:>10.2} {:>14.4}\n",
                name,
                m.hd90,
                m.assd,
                m.iou,
                m.chamfer / 1e3
            );
        }
        s
    }
}

pub struct ExperimentOutcome {
    pub report: ExperimentReport,
    pub params: ModelParams,
}

fn mean_metrics(rows: &[&[OrganMetrics]]) -> Vec<MeanMetrics> {
    let Some(first) = rows.first() else { return Vec::new() };
    let n = rows.len() as f64;
    (0..first.len())
        .map(|k| MeanMetrics {
            name: first[k].name.clone(),
            hd90: rows.iter().map(|r| r[k].hd90).sum::<f64>() / n,
            assd: rows.iter().map(|r| r[k].assd).sum::<f64>() / n,
            chamfer: rows.iter().map(|r| r[k].chamfer).sum::<f64>() / n,
            iou: rows.iter().map(|r| r[k].iou).sum::<f64>() / n,
        })
        .collect()
}

/// Z-scores `raw` and resamples it to the network input resolution.
pub fn network_input(raw: &VolumeGrid, input_dims: Option<[usize; 3]>) -> Result<VolumeGrid> {
    let (mut v, _) = volume::normalize(raw)?;
    if let Some(dims) = input_dims {
        if dims != v.dims() {
            let fill = v.fill();
            v = volume::resample(&v, dims)?.with_fill(fill);
        }
    }
    Ok(v)
}

/// Per-organ occupancy grids for one network input.
pub fn infer(params: &ModelParams, input: &VolumeGrid, mode: &InferenceMode) -> Result<Vec<VolumeGrid>> {
    match mode {
        InferenceMode::Dense { out_dims, chunk } => infer_dense(params, input, *out_dims, *chunk),
        InferenceMode::Patch(p) => infer_patchwise(params, input, p),
    }
}

/// A test scene as presented at evaluation time, optionally moved to a held-out pose.
struct TestCase<'a> {
    raw: VolumeGrid,
    meshes: Vec<TriMesh>,
    shapes: Vec<TransformedShape<'a>>,
}

fn test_case<'a>(scene: &'a Scene, poses: Option<&AugmentConfig>, seed: u64, index: usize) -> Result<TestCase<'a>> {
    let shapes = |a: &AffineAugment| {
        scene
            .shapes()
            .into_iter()
            .map(|s| TransformedShape::new(s, a))
            .collect::<Result<Vec<_>>>()
    };
    let Some(cfg) = poses else {
        return Ok(TestCase {
            raw: scene.volume.clone(),
            meshes: scene.meshes.clone(),
            shapes: shapes(&AffineAugment::identity())?,
        });
    };
    let a = sample_affine(cfg, &mut rng::stream(seed, &[POSE_STREAM, index as u64]))?;
    let frame = scene.volume.frame();
    let meshes = scene
        .meshes
        .iter()
        .map(|m| m.map_vertices(|w| frame.normalized_to_world(apply(&a.matrix, frame.world_to_normalized(w)))))
        .collect();
    Ok(TestCase {
        raw: warp_volume(&scene.volume, &a)?,
        meshes,
        shapes: shapes(&a)?,
    })
}

fn score(
    grids: &[VolumeGrid],
    case: &TestCase<'_>,
    names: &[String],
    cfg: &ExperimentConfig,
) -> Result<Vec<OrganMetrics>> {
    let frame = case.raw.frame();
    grids
        .iter()
        .enumerate()
        .map(|(k, occ)| {
            let mesh = reconstruct(occ, &cfg.reconstruct)?;
            let reference = Reference {
                name: &names[k],
                mesh: &case.meshes[k],
                shape: Some(&case.shapes[k]),
            };
            let occupancy = binarize(occ);
            metrics::evaluate(&mesh, Some(&occupancy), &reference, &frame, &cfg.eval)
        })
        .collect()
}

/// Generates the dataset, trains, infers on the test split and scores it.
/// With `out`, writes the checkpoint, loss trace, meshes and report there.
pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let fingerprint = cfg.fingerprint();
    let data = make_dataset(cfg.scenes, &cfg.template, cfg.seed)?;
    let sample = |i: usize| {
        let mut r = rng::stream(cfg.seed, &[SAMPLE_STREAM, i as u64]);
        TrainingSample::from_scene(&data.scenes[i], &cfg.budget, cfg.labels, cfg.input_dims, &mut r)
    };
    let train_set = data.split.train.iter().map(|&i| sample(i)).collect::<Result<Vec<_>>>()?;
    let val_set = data.split.val.iter().map(|&i| sample(i)).collect::<Result<Vec<_>>>()?;
    let train_cfg = TrainConfig {
        seed: cfg.seed,
        ..cfg.train.clone()
    };
    let outcome = pipeline::train(&train_set, &val_set, &train_cfg, None)?;
    let params = outcome.selected().clone();
    let names: Vec<String> = data.scenes[0].spec.organs.iter().map(|o| o.name.clone()).collect();

    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        pipeline::save_checkpoint(&params, &dir.join("checkpoint.json"))?;
        let trace = pipeline::loss_trace_csv(&outcome.steps, &params.fingerprint(), cfg.seed);
        let path = dir.join("loss.csv");
        fs::write(&path, trace).map_err(|e| Error::io(&path, e))?;
    }

    let mut scenes = Vec::new();
    for &i in &data.split.test {
        let case = test_case(&data.scenes[i], cfg.test_poses.as_ref(), cfg.seed, i)?;
        let input = match cfg.train.mode {
            TrainMode::Whole => network_input(&case.raw, cfg.input_dims)?,
            TrainMode::Patch => network_input(&case.raw, None)?,
        };
        let grids = infer(&params, &input, &cfg.inference)?;
        let metrics = score(&grids, &case, &names, cfg)?;
        let baseline = if cfg.baseline {
            let coarse = infer_dense(&params, &input, input.dims(), pipeline::DEFAULT_CHUNK)?;
            let out_dims = grids[0].dims();
            let factor = out_dims[0] / input.dims()[0];
            if (0..3).any(|a| out_dims[a] != input.dims()[a] * factor) {
                return Err(Error::Config("baseline needs an integer upsampling factor".into()));
            }
            let up = coarse
                .iter()
                .map(|g| upsample_nearest(&binarize(g), factor))
                .collect::<Result<Vec<_>>>()?;
            Some(score(&up, &case, &names, cfg)?)
        } else {
            None
        };
        if let Some(dir) = out {
            let provenance = format!("fingerprint {fingerprint} seed {}", cfg.seed);
            for (k, g) in grids.iter().enumerate() {
                let mesh = reconstruct(g, &cfg.reconstruct)?;
                mesh.write_obj(&dir.join(format!("scene{i:03}_{}.obj", names[k])), &provenance)?;
            }
        }
        scenes.push(SceneResult {
            index: i,
            seed: data.scenes[i].spec.seed,
            metrics,
            baseline,
        });
    }

    let rows: Vec<&[OrganMetrics]> = scenes.iter().map(|s| s.metrics.as_slice()).collect();
    let baseline_rows: Vec<&[OrganMetrics]> = scenes.iter().filter_map(|s| s.baseline.as_deref()).collect();
    let last_epoch = outcome.epochs.last();
    let report = ExperimentReport {
        name: cfg.name.clone(),
        fingerprint,
        model_fingerprint: params.fingerprint(),
        seed: cfg.seed,
        train_scenes: data.split.train.clone(),
        val_scenes: data.split.val.clone(),
        test_scenes: data.split.test.clone(),
        steps: outcome.params.step,
        final_train_loss: last_epoch.map(|e| e.train_loss),
        best_epoch: outcome.best_epoch,
        best_val_loss: outcome.epochs.iter().filter_map(|e| e.val_loss).reduce(f64::min),
        mean: mean_metrics(&rows),
        baseline_mean: cfg.baseline.then(|| mean_metrics(&baseline_rows)),
        scenes,
        chamfer_convention: "squared nearest-neighbor distances, mean per direction, summed".into(),
        hd_convention: "max of directed nearest-rank 90th percentiles, ceil(0.9 n)".into(),
    };
    if let Some(dir) = out {
        let path = dir.join("report.json");
        fs::write(&path, report.to_json()).map_err(|e| Error::io(&path, e))?;
    }
    Ok(ExperimentOutcome { report, params })
}

/// Names accepted by [`preset`].
pub const PRESETS: &[&str] = &[
    "sphere",
    "single-organ",
    "multi-single-decoder",
    "multi-multi-decoder",
    "augmentation-on",
    "augmentation-off",
    "labels-exact",
    "labels-mask",
    "patch",
    "whole-downsampled",
];

/// Reproduction presets: desk analogs of the single-organ, decoder, patch,
/// labeling and augmentation studies.
pub fn preset(name: &str, seed: u64) -> Result<ExperimentConfig> {
    let whole = |epochs: usize, hidden: Option<usize>| TrainConfig {
        epochs,
        hidden_dim: hidden,
        seed,
        ..TrainConfig::default()
    };
    let dense = |d: usize| InferenceMode::Dense {
        out_dims: [d; 3],
        chunk: pipeline::DEFAULT_CHUNK,
    };
    let eval = EvalConfig {
        n_surface_points: 10_000,
        voxel_dims: [64; 3],
        seed,
    };
    let base = ExperimentConfig {
        name: name.to_string(),
        template: SceneTemplate::SingleOrgan { dims: 32 },
        scenes: 20,
        seed,
        budget: QueryBudget::new(20_000, 10_000),
        labels: LabelSource::Exact,
        input_dims: None,
        train: whole(100, None),
        inference: dense(64),
        reconstruct: ReconstructConfig::default(),
        eval,
        baseline: false,
        test_poses: None,
    };
    let two_organ = |dims: usize, capsule: (f64, f64)| SceneTemplate::TwoOrganContact {
        dims,
        capsule_radius: capsule,
    };
    let cfg = match name {
        "sphere" => ExperimentConfig {
            template: SceneTemplate::Sphere { dims: 32, radius: 0.45 },
            scenes: 4,
            budget: QueryBudget::new(4_000, 2_000),
            train: TrainConfig {
                points_per_volume: 1024,
                base_channels: 4,
                ..whole(30, Some(64))
            },
            eval: EvalConfig {
                n_surface_points: 2_000,
                voxel_dims: [32; 3],
                seed,
            },
            inference: dense(32),
            ..base
        },
        "single-organ" => ExperimentConfig {
            baseline: true,
            ..base
        },
        "multi-single-decoder" | "multi-multi-decoder" => ExperimentConfig {
            template: two_organ(32, (0.12, 0.15)),
            scenes: 24,
            budget: QueryBudget::new(20_000, 10_000),
            train: TrainConfig {
                decoder: if name == "multi-single-decoder" {
                    DecoderVariant::Single
                } else {
                    DecoderVariant::Multi
                },
                augment: true,
                ..whole(80, Some(128))
            },
            ..base
        },
        "augmentation-on" | "augmentation-off" => ExperimentConfig {
            scenes: 12,
            train: TrainConfig {
                augment: name == "augmentation-on",
                ..whole(60, Some(128))
            },
            test_poses: Some(AugmentConfig::default()),
            ..base
        },
        "labels-exact" | "labels-mask" => ExperimentConfig {
            scenes: 12,
            labels: if name == "labels-exact" {
                LabelSource::Exact
            } else {
                LabelSource::Mask { dims: [32; 3] }
            },
            train: whole(60, Some(128)),
            ..base
        },
        "patch" => ExperimentConfig {
            template: two_organ(64, (0.08, 0.1)),
            scenes: 8,
            budget: QueryBudget::new(40_000, 10_000),
            train: TrainConfig {
                mode: TrainMode::Patch,
                min_patch_points: 512,
                ..whole(240, Some(128))
            },
            inference: InferenceMode::Patch(PatchInference {
                patch_size: [32; 3],
                stride: [16; 3],
                out_scale: 1,
                chunk: pipeline::DEFAULT_CHUNK,
                threads: 1,
            }),
            ..base
        },
        "whole-downsampled" => ExperimentConfig {
            template: two_organ(64, (0.08, 0.1)),
            scenes: 8,
            budget: QueryBudget::new(40_000, 10_000),
            input_dims: Some([32; 3]),
            train: whole(240, Some(128)),
            ..base
        },
        other => {
            return Err(Error::Config(format!(
                "unknown preset {other:?}; expected one of {}",
                PRESETS.join(", ")
            )))
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ImplicitShape;

    #[test]
    fn presets_are_valid_and_distinct() {
        let mut prints = std::collections::HashSet::new();
        for name in PRESETS {
            let cfg = preset(name, 7).unwrap();
            assert!(prints.insert(cfg.fingerprint()), "{name}");
            let back = ExperimentConfig::from_json(&serde_json::to_string(&cfg).unwrap()).unwrap();
            assert_eq!(back, cfg);
        }
        assert!(matches!(preset("nope", 1), Err(Error::Config(_))));
    }

    #[test]
    fn held_out_pose_keeps_reference_consistent() {
        let data = make_dataset(3, &SceneTemplate::SingleOrgan { dims: 16 }, 4).unwrap();
        let scene = &data.scenes[0];
        let case = test_case(scene, Some(&AugmentConfig::default()), 4, 0).unwrap();
        let frame = case.raw.frame();
        for &w in case.meshes[0].vertices.iter().step_by(7) {
            let p = frame.world_to_normalized(w);
            assert!(case.shapes[0].sdf(p).abs() < 0.02, "{}", case.shapes[0].sdf(p));
        }
    }

    #[test]
    fn sphere_preset_runs_end_to_end() {
        let mut cfg = preset("sphere", 3).unwrap();
        cfg.train.epochs = 2;
        cfg.baseline = true;
        let dir = tempfile::tempdir().unwrap();
        let out = run_experiment(&cfg, Some(dir.path())).unwrap();
        let r = &out.report;
        assert_eq!(r.scenes.len(), r.test_scenes.len());
        assert_eq!(r.mean.len(), 1);
        assert!(r.baseline_mean.is_some());
        assert!(r.to_table().contains("sphere"));
        for f in ["checkpoint.json", "checkpoint.raw", "loss.csv", "report.json"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let text = fs::read_to_string(dir.path().join("report.json")).unwrap();
        let back: ExperimentReport = serde_json::from_str(&text).unwrap();
        assert_eq!(&back, r);
    }
}
