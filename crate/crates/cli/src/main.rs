use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use occupancy::autodiff::gradcheck;
use occupancy::error::{Error, Result};
use occupancy::experiments::{self, config_fingerprint, network_input, InferenceMode, PRESETS};
use occupancy::geometry::{Aabb, TriMesh};
use occupancy::metrics::{self, EvalConfig, MetricsReport, OrganMetrics, SurfaceDistances};
use occupancy::pipeline::{self, LabelSource, ReconstructConfig, TrainConfig, TrainingSample};
use occupancy::rng;
use occupancy::sampling::{self, CoordinateFrame, QueryBudget};
use occupancy::synth::{self, make_dataset, Scene, SceneTemplate, Split};
use occupancy::volume::{read_vol, write_vol, Provenance};

#[derive(Parser)]
#[command(name = "occupancy", version, about = "Implicit multi-organ surface reconstruction")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON configuration file for the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for patch inference.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Force sequential evaluation and reductions.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene dataset.
    Synth,
    /// Build labeled query sets for every scene of a dataset.
    Sample {
        /// Dataset directory written by `synth`.
        dataset: PathBuf,
    },
    /// Train a model on a dataset's training split.
    Train {
        dataset: PathBuf,
        /// Query sets written by `sample`; built on the fly when omitted.
        #[arg(long)]
        queries: Option<PathBuf>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Infer occupancy for a volume and extract meshes.
    Reconstruct {
        checkpoint: PathBuf,
        volume: PathBuf,
    },
    /// Score predicted surfaces against references.
    Evaluate {
        /// Predicted mesh (OBJ).
        pred: PathBuf,
        /// Reference mesh (OBJ).
        gt: PathBuf,
        /// Predicted occupancy grid (.vol) for IoU.
        #[arg(long)]
        pred_occupancy: Option<PathBuf>,
        /// Reference occupancy grid (.vol) for IoU.
        #[arg(long)]
        gt_occupancy: Option<PathBuf>,
        /// Volume whose frame hosts the IoU voxelization when no grids are given.
        #[arg(long)]
        volume: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck,
    /// Run a named preset end to end.
    Repro {
        #[arg(value_parser = clap::builder::PossibleValuesParser::new(PRESETS))]
        preset: String,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SynthConfig {
    template: SceneTemplate,
    scenes: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            template: SceneTemplate::SingleOrgan { dims: 32 },
            scenes: 20,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SampleConfig {
    budget: QueryBudget,
    labels: LabelSource,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            budget: QueryBudget::new(20_000, 10_000),
            labels: LabelSource::Exact,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainFile {
    train: TrainConfig,
    sample: SampleConfig,
    input_dims: Option<[usize; 3]>,
}

impl Default for TrainFile {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            sample: SampleConfig::default(),
            input_dims: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ReconstructFile {
    inference: InferenceMode,
    reconstruct: ReconstructConfig,
    input_dims: Option<[usize; 3]>,
}

impl Default for ReconstructFile {
    fn default() -> Self {
        Self {
            inference: InferenceMode::Dense {
                out_dims: [64; 3],
                chunk: pipeline::DEFAULT_CHUNK,
            },
            reconstruct: ReconstructConfig::default(),
            input_dims: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetManifest {
    template: SceneTemplate,
    seed: u64,
    scenes: Vec<String>,
    split: Split,
    fingerprint: String,
}

fn read_config<T: for<'de> Deserialize<'de> + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.into(),
                source: e,
            })?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

fn out_dir(common: &Common) -> Result<PathBuf> {
    let dir = common
        .out
        .clone()
        .ok_or_else(|| Error::InvalidArgument("--out <dir> is required".into()))?;
    fs::create_dir_all(&dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })
}

fn read_manifest(dataset: &Path) -> Result<DatasetManifest> {
    let path = dataset.join("dataset.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::Io {
        path: path.clone(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path,
        reason: e.to_string(),
    })
}

fn load_scenes(dataset: &Path, manifest: &DatasetManifest) -> Result<Vec<Scene>> {
    manifest.scenes.iter().map(|s| synth::load_scene(&dataset.join(s))).collect()
}

fn synth_cmd(common: &Common) -> Result<()> {
    let cfg: SynthConfig = read_config(common.config.as_deref())?;
    let out = out_dir(common)?;
    let fingerprint = config_fingerprint(&cfg);
    let data = make_dataset(cfg.scenes, &cfg.template, common.seed)?;
    let mut names = Vec::new();
    for (i, scene) in data.scenes.iter().enumerate() {
        let name = format!("scene_{i:03}");
        synth::save_scene(scene, &out.join(&name), &fingerprint)?;
        names.push(name);
    }
    let manifest = DatasetManifest {
        template: cfg.template,
        seed: common.seed,
        scenes: names,
        split: data.split,
        fingerprint,
    };
    write_text(&out.join("dataset.json"), &serde_json::to_string_pretty(&manifest).expect("manifest serializes"))?;
    println!("wrote {} scenes to {}", cfg.scenes, out.display());
    Ok(())
}

fn sample_cmd(common: &Common, dataset: &Path) -> Result<()> {
    let cfg: SampleConfig = read_config(common.config.as_deref())?;
    let out = out_dir(common)?;
    let manifest = read_manifest(dataset)?;
    let fingerprint = config_fingerprint(&cfg);
    for (i, scene) in load_scenes(dataset, &manifest)?.iter().enumerate() {
        let mut r = rng::stream(common.seed, &[i as u64]);
        let sample = TrainingSample::from_scene(scene, &cfg.budget, cfg.labels, None, &mut r)?;
        let provenance = Provenance {
            fingerprint: Some(fingerprint.clone()),
            seed: Some(common.seed),
        };
        sampling::write_queryset(&sample.queries, &out.join(format!("{}.json", manifest.scenes[i])), &provenance)?;
    }
    println!("wrote {} query sets to {}", manifest.scenes.len(), out.display());
    Ok(())
}

fn train_cmd(common: &Common, dataset: &Path, queries: Option<&Path>, resume: Option<&Path>) -> Result<()> {
    let file: TrainFile = read_config(common.config.as_deref())?;
    let out = out_dir(common)?;
    let manifest = read_manifest(dataset)?;
    let scenes = load_scenes(dataset, &manifest)?;
    let sample = |i: usize| -> Result<TrainingSample> {
        match queries {
            Some(dir) => {
                let (q, _) = sampling::read_queryset(&dir.join(format!("{}.json", manifest.scenes[i])))?;
                Ok(TrainingSample {
                    volume: network_input(&scenes[i].volume, file.input_dims)?,
                    queries: q,
                })
            }
            None => {
                let mut r = rng::stream(common.seed, &[i as u64]);
                TrainingSample::from_scene(&scenes[i], &file.sample.budget, file.sample.labels, file.input_dims, &mut r)
            }
        }
    };
    let train = manifest.split.train.iter().map(|&i| sample(i)).collect::<Result<Vec<_>>>()?;
    let val = manifest.split.val.iter().map(|&i| sample(i)).collect::<Result<Vec<_>>>()?;
    let cfg = TrainConfig {
        seed: common.seed,
        ..file.train
    };
    let start = resume.map(|p| pipeline::load_checkpoint(p, None)).transpose()?;
    let outcome = pipeline::train(&train, &val, &cfg, start)?;
    pipeline::save_checkpoint(&outcome.params, &out.join("last.json"))?;
    pipeline::save_checkpoint(outcome.selected(), &out.join("checkpoint.json"))?;
    write_text(
        &out.join("loss.csv"),
        &pipeline::loss_trace_csv(&outcome.steps, &outcome.params.fingerprint(), cfg.seed),
    )?;
    let epochs = serde_json::json!({
        "fingerprint": outcome.params.fingerprint(),
        "seed": cfg.seed,
        "best_epoch": outcome.best_epoch,
        "epochs": outcome.epochs,
    });
    write_text(&out.join("epochs.json"), &serde_json::to_string_pretty(&epochs).expect("json"))?;
    if let Some(last) = outcome.epochs.last() {
        println!(
            "trained {} steps; last epoch loss {:.5}; best epoch {:?}",
            outcome.params.step, last.train_loss, outcome.best_epoch
        );
    }
    Ok(())
}

fn reconstruct_cmd(common: &Common, checkpoint: &Path, vol: &Path) -> Result<()> {
    let mut file: ReconstructFile = read_config(common.config.as_deref())?;
    if let InferenceMode::Patch(p) = &mut file.inference {
        p.threads = if common.deterministic { 1 } else { common.threads.max(1) };
    }
    let out = out_dir(common)?;
    let params = pipeline::load_checkpoint(checkpoint, None)?;
    let (raw, _) = read_vol(vol)?;
    let input = network_input(&raw, file.input_dims)?;
    let grids = experiments::infer(&params, &input, &file.inference)?;
    let provenance = Provenance {
        fingerprint: Some(params.fingerprint()),
        seed: Some(params.seed),
    };
    for (k, g) in grids.iter().enumerate() {
        write_vol(g, &out.join(format!("occupancy_{k}.vol")), &provenance)?;
        let mesh = pipeline::reconstruct(g, &file.reconstruct)?;
        let header = format!("organ {k} fingerprint {} seed {}", params.fingerprint(), params.seed);
        mesh.write_obj(&out.join(format!("organ_{k}.obj")), &header)?;
        println!("organ {k}: {} vertices, {} triangles", mesh.vertices.len(), mesh.triangles.len());
    }
    Ok(())
}

fn mesh_frame(a: &TriMesh, b: &TriMesh, dims: [usize; 3]) -> Result<CoordinateFrame> {
    let mut bb = Aabb::empty();
    for &v in a.vertices.iter().chain(&b.vertices) {
        bb.grow(v);
    }
    if bb.min.iter().zip(&bb.max).any(|(lo, hi)| !(hi >= lo)) {
        return Err(Error::DegenerateInput("no vertices to frame the IoU grid".into()));
    }
    let side = (0..3).map(|k| bb.max[k] - bb.min[k]).fold(0.0, f64::max) * 1.1 + 1e-9;
    let spacing: [f64; 3] = std::array::from_fn(|k| side / dims[k] as f64);
    let origin = std::array::from_fn(|k| 0.5 * (bb.min[k] + bb.max[k]) - 0.5 * side + 0.5 * spacing[k]);
    Ok(CoordinateFrame { dims, spacing, origin })
}

fn evaluate_cmd(
    common: &Common,
    pred: &Path,
    gt: &Path,
    pred_occ: Option<&Path>,
    gt_occ: Option<&Path>,
    vol: Option<&Path>,
) -> Result<()> {
    let cfg: EvalConfig = match common.config.as_deref() {
        Some(_) => read_config(common.config.as_deref())?,
        None => EvalConfig {
            seed: common.seed,
            ..EvalConfig::default()
        },
    };
    let pred_mesh = TriMesh::read_obj(pred)?;
    let gt_mesh = TriMesh::read_obj(gt)?;
    let (iou, voxels) = match (pred_occ, gt_occ) {
        (Some(p), Some(g)) => {
            let (p, _) = read_vol(p)?;
            let (g, _) = read_vol(g)?;
            (metrics::iou(&p, &g)?, g.len())
        }
        (None, None) => {
            let frame = match vol {
                Some(v) => read_vol(v)?.0.frame().rescaled(cfg.voxel_dims),
                None => mesh_frame(&pred_mesh, &gt_mesh, cfg.voxel_dims)?,
            };
            let p = metrics::voxelize_mesh(&pred_mesh, &frame)?;
            let g = metrics::voxelize_mesh(&gt_mesh, &frame)?;
            (metrics::iou(&p, &g)?, g.len())
        }
        _ => {
            return Err(Error::InvalidArgument(
                "--pred-occupancy and --gt-occupancy must be given together".into(),
            ))
        }
    };
    let d = SurfaceDistances::between_meshes(&pred_mesh, &gt_mesh, cfg.n_surface_points, cfg.seed)?;
    let organ = OrganMetrics {
        name: gt.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        hd90: d.hd90,
        assd: d.assd,
        chamfer: d.chamfer,
        iou,
        surface_points: cfg.n_surface_points,
        voxels,
        empty_prediction: false,
    };
    let report = MetricsReport::new(vec![organ], &cfg, Some(config_fingerprint(&cfg)));
    print!("{}", report.to_table());
    if let Some(dir) = &common.out {
        let dir = out_dir(&Common {
            out: Some(dir.clone()),
            ..common.clone()
        })?;
        write_text(&dir.join("metrics.json"), &report.to_json())?;
    }
    Ok(())
}

fn gradcheck_cmd(common: &Common) -> Result<()> {
    let results = gradcheck::run_suite(common.seed)?;
    println!("{:<18} {:>12} {:>8}  result", "operation", "rel. error", "params");
    for r in &results {
        println!(
            "{:<18} {:>12.3e} {:>8}  {}",
            r.name,
            r.max_rel_error,
            r.parameters,
            if r.passed { "pass" } else { "FAIL" }
        );
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn repro_cmd(common: &Common, name: &str) -> Result<()> {
    let mut cfg = match common.config.as_deref() {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.into(),
                source: e,
            })?;
            experiments::ExperimentConfig::from_json(&text)?
        }
        None => experiments::preset(name, common.seed)?,
    };
    cfg.seed = common.seed;
    cfg.train.seed = common.seed;
    cfg.eval.seed = common.seed;
    if let InferenceMode::Patch(p) = &mut cfg.inference {
        p.threads = if common.deterministic { 1 } else { common.threads.max(1) };
    }
    let out = out_dir(common)?;
    let outcome = experiments::run_experiment(&cfg, Some(&out))?;
    write_text(&out.join("config.json"), &serde_json::to_string_pretty(&cfg).expect("config serializes"))?;
    print!("{}", outcome.report.to_table());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    match &cli.command {
        Command::Synth => synth_cmd(common),
        Command::Sample { dataset } => sample_cmd(common, dataset),
        Command::Train {
            dataset,
            queries,
            resume,
        } => train_cmd(common, dataset, queries.as_deref(), resume.as_deref()),
        Command::Reconstruct { checkpoint, volume } => reconstruct_cmd(common, checkpoint, volume),
        Command::Evaluate {
            pred,
            gt,
            pred_occupancy,
            gt_occupancy,
            volume,
        } => evaluate_cmd(
            common,
            pred,
            gt,
            pred_occupancy.as_deref(),
            gt_occupancy.as_deref(),
            volume.as_deref(),
        ),
        Command::Gradcheck => gradcheck_cmd(common),
        Command::Repro { preset } => repro_cmd(common, preset),
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::InvalidArgument(_) => "invalid_argument",
        Error::DegenerateInput(_) => "degenerate_input",
        Error::Topology(_) => "topology",
        Error::Config(_) => "config",
        Error::LabelConflict(_) => "label_conflict",
        Error::FrameMismatch(_) => "frame_mismatch",
        Error::Spec(_) => "spec",
        Error::Numeric(_) => "numeric",
        Error::Layout(_) => "layout",
        Error::Io { .. } => "io",
        Error::Json { .. } => "json",
        Error::Format { .. } => "format",
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let diag = serde_json::json!({ "error": error_kind(&e), "message": e.to_string() });
            eprintln!("{diag}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn config_defaults_round_trip() {
        let t: TrainFile = serde_json::from_str("{}").unwrap();
        assert_eq!(t.train, TrainConfig::default());
        let r: ReconstructFile = serde_json::from_str(r#"{"inference": {"kind": "dense", "out_dims": [32, 32, 32], "chunk": 100}}"#).unwrap();
        assert!(matches!(r.inference, InferenceMode::Dense { chunk: 100, .. }));
        assert!(serde_json::from_str::<SynthConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn mesh_frame_contains_both_meshes() {
        let a = occupancy::geometry::icosphere([0.0; 3], 5.0, 1);
        let b = occupancy::geometry::icosphere([3.0, 0.0, 0.0], 5.0, 1);
        let f = mesh_frame(&a, &b, [16; 3]).unwrap();
        for v in a.vertices.iter().chain(&b.vertices) {
            let p = f.world_to_normalized(*v);
            assert!(p.iter().all(|c| c.abs() < 1.0));
        }
    }
}
