//! Training loops (whole-image and patch-wise), dense and Hann-blended patch
//! inference, surface reconstruction, and checkpoint files.

use std::borrow::Cow;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_paired, AugmentConfig};
use crate::autodiff::{Adam, AdamState, BatchNormMode, PointBatch, RunningStats, Tape, Tensor};
use crate::error::{Error, Result};
use crate::geometry::{marching_cubes, smooth_mesh, TriMesh};
use crate::model::{self, DecoderVariant, EncoderConfig, ModelConfig, ModelParams};
use crate::rng::{self, Rng};
use crate::sampling::{self, to_patch_frame, CoordinateFrame, QueryBudget, QuerySet};
use crate::synth::Scene;
use crate::volume::{self, extract_patch, is_background_patch, plan_patches, VolumeGrid};

/// Points per decoder evaluation chunk during inference.
pub const DEFAULT_CHUNK: usize = 32_768;
const EPOCH_STREAM: u64 = 0x6570_6f63;
const STEP_STREAM: u64 = 0x7374_6570;
const VAL_STREAM: u64 = 0x7661_6c69;
const CHECKPOINT_FORMAT: &str = "occupancy-checkpoint/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Whole,
    Patch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    /// Volumes per optimization step (b).
    pub batch_size: usize,
    /// Query points drawn per volume per step (n).
    pub points_per_volume: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub augment: bool,
    pub augmentation: AugmentConfig,
    pub decoder: DecoderVariant,
    pub base_channels: usize,
    /// Decoder width; `None` keeps 512 for one organ and 256 otherwise.
    pub hidden_dim: Option<usize>,
    pub patch_size: [usize; 3],
    /// Patch offsets are redrawn until a patch holds at least this many query points.
    pub min_patch_points: usize,
    pub max_patch_attempts: usize,
    /// Validate every this many epochs; 0 disables validation.
    pub val_every: usize,
    pub val_points: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Whole,
            epochs: 200,
            batch_size: 1,
            points_per_volume: 2048,
            learning_rate: 1e-3,
            weight_decay: 1e-5,
            augment: false,
            augmentation: AugmentConfig::default(),
            decoder: DecoderVariant::Multi,
            base_channels: 8,
            hidden_dim: None,
            patch_size: [32; 3],
            min_patch_points: 256,
            max_patch_attempts: 64,
            val_every: 1,
            val_points: 4096,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.points_per_volume == 0 {
            return Err(Error::Config("epochs, batch_size and points_per_volume must be ≥ 1".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("learning_rate must be > 0 and weight_decay ≥ 0".into()));
        }
        if self.augment {
            self.augmentation.validate()?;
        }
        Ok(())
    }

    pub fn model_config(&self, organs: usize) -> ModelConfig {
        let mut config = ModelConfig::new(organs, self.decoder);
        config.encoder = EncoderConfig {
            base_channels: self.base_channels,
            ..config.encoder
        };
        if let Some(h) = self.hidden_dim {
            config.decoder.hidden_dim = h;
        }
        config
    }

    pub fn optimizer(&self) -> Adam {
        Adam {
            lr: self.learning_rate,
            weight_decay: self.weight_decay,
            ..Adam::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// How query-point occupancy labels are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LabelSource {
    /// Exact sign of the analytic shape.
    Exact,
    /// Nearest-voxel lookup in a binary mask voxelized at `dims`.
    Mask { dims: [usize; 3] },
}

/// A normalized input volume with its labeled query points.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub volume: VolumeGrid,
    pub queries: QuerySet,
}

impl TrainingSample {
    /// Builds the query set from the scene at its native resolution, then
    /// z-scores the volume and optionally resamples it to `input_dims`.
    /// Normalized coordinates are resolution independent, so labels carry over.
    pub fn from_scene(
        scene: &Scene,
        budget: &QueryBudget,
        labels: LabelSource,
        input_dims: Option<[usize; 3]>,
        rng: &mut Rng,
    ) -> Result<Self> {
        let shapes = scene.shapes();
        let mut queries = sampling::build_queryset(&shapes, &scene.meshes, &scene.volume, budget, rng)?;
        if let LabelSource::Mask { dims } = labels {
            let frame = scene.volume.frame().rescaled(dims);
            let masks = shapes
                .iter()
                .map(|s| sampling::voxelize_shape(*s, &frame))
                .collect::<Result<Vec<_>>>()?;
            let organs = shapes.len();
            for i in 0..queries.len() {
                let p = queries.coords[i];
                for (k, mask) in masks.iter().enumerate() {
                    queries.labels[i * organs + k] = sampling::mask_label(mask, p);
                }
            }
        }
        let (mut volume, _) = volume::normalize(&scene.volume)?;
        if let Some(dims) = input_dims {
            if dims != volume.dims() {
                let fill = volume.fill();
                volume = volume::resample(&volume, dims)?.with_fill(fill);
            }
        }
        Ok(Self { volume, queries })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    /// Mean BCE per organ (multi-decoder only).
    pub organ_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters after the last step.
    pub params: ModelParams,
    /// Parameters at the lowest validation loss, when validation ran.
    pub best: Option<ModelParams>,
    pub best_epoch: Option<usize>,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainOutcome {
    /// Best-validation parameters when available, else the final ones.
    pub fn selected(&self) -> &ModelParams {
        self.best.as_ref().unwrap_or(&self.params)
    }
}

/// One drawn training example: a network input and its labeled points.
struct Example {
    volume: VolumeGrid,
    coords: Vec<[f64; 3]>,
    labels: Vec<u8>,
}

fn draw_example(sample: &TrainingSample, cfg: &TrainConfig, rng: &mut Rng, augment: bool) -> Result<Example> {
    let (volume, queries) = if augment {
        let (v, q, _) = apply_paired(&sample.volume, &sample.queries, &cfg.augmentation, rng)?;
        (Cow::Owned(v), Cow::Owned(q))
    } else {
        (Cow::Borrowed(&sample.volume), Cow::Borrowed(&sample.queries))
    };
    let (volume, queries) = match cfg.mode {
        TrainMode::Whole => (volume.into_owned(), queries),
        TrainMode::Patch => {
            let (patch, q) = draw_patch(&volume, &queries, cfg, rng)?;
            (patch, Cow::Owned(q))
        }
    };
    if queries.is_empty() {
        return Err(Error::DegenerateInput("no query points left for a training example".into()));
    }
    let n = cfg.points_per_volume;
    let picks: Vec<usize> = if queries.len() >= n {
        rand::seq::index::sample(rng, queries.len(), n).into_vec()
    } else {
        (0..n).map(|_| rng.random_range(0..queries.len())).collect()
    };
    let organs = queries.organs;
    let mut coords = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n * organs);
    for i in picks {
        coords.push(queries.coords[i]);
        labels.extend_from_slice(queries.point_labels(i));
    }
    Ok(Example { volume, coords, labels })
}

/// Random patch with intensity variation and enough query points, in the patch frame.
fn draw_patch(v: &VolumeGrid, q: &QuerySet, cfg: &TrainConfig, rng: &mut Rng) -> Result<(VolumeGrid, QuerySet)> {
    let dims = v.dims();
    let size = cfg.patch_size;
    if (0..3).any(|a| size[a] > dims[a]) {
        return Err(Error::invalid(format!("patch {size:?} exceeds volume {dims:?}")));
    }
    let frame = v.frame();
    for _ in 0..cfg.max_patch_attempts.max(1) {
        let offset: [usize; 3] = std::array::from_fn(|a| rng.random_range(0..=dims[a] - size[a]));
        let patch = extract_patch(v, offset, size)?;
        if is_background_patch(&patch) {
            continue;
        }
        let local = to_patch_frame(q, offset, size, &frame);
        if local.len() >= cfg.min_patch_points.max(1) {
            return Ok((patch, local));
        }
    }
    Err(Error::DegenerateInput(format!(
        "no patch with ≥ {} query points after {} attempts",
        cfg.min_patch_points, cfg.max_patch_attempts
    )))
}

fn check_dataset(train: &[TrainingSample], cfg: &TrainConfig, config: &ModelConfig) -> Result<()> {
    let first = train
        .first()
        .ok_or_else(|| Error::invalid("training set is empty"))?;
    let divisor = config.encoder.divisor();
    for s in train {
        if s.queries.organs != first.queries.organs {
            return Err(Error::invalid("training samples disagree on the organ count"));
        }
        let input = match cfg.mode {
            TrainMode::Whole => {
                if s.volume.dims() != first.volume.dims() {
                    return Err(Error::invalid("whole-image training needs uniform input dims"));
                }
                s.volume.dims()
            }
            TrainMode::Patch => cfg.patch_size,
        };
        if input.iter().any(|d| d % divisor != 0) {
            return Err(Error::invalid(format!(
                "network input {input:?} is not divisible by {divisor}"
            )));
        }
        let coarsest: usize = input.iter().map(|d| d / divisor).product();
        if coarsest * cfg.batch_size.min(train.len()) < 2 {
            return Err(Error::invalid(format!(
                "network input {input:?} leaves one value per channel for batch statistics"
            )));
        }
    }
    if train.iter().all(|s| is_background_patch(&s.volume)) {
        return Err(Error::DegenerateInput("every training volume is pure background".into()));
    }
    Ok(())
}

/// Eval-mode loss and per-organ BCE for fixed examples.
fn evaluate_loss(params: &ModelParams, examples: &[Example]) -> Result<f64> {
    let mut total = 0.0;
    for ex in examples {
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape, false);
        let input = tape.constant(model::volume_batch(&[&ex.volume])?);
        let mut stats = params.batchnorm.clone();
        let pyr = model::encode(&mut tape, &params.config, &vars, input, &mut stats, BatchNormMode::Eval)?;
        let feats = model::query_features(&mut tape, &pyr, &PointBatch::single(ex.coords.clone()))?;
        let logits = model::decode(&mut tape, &params.config, &vars, feats)?;
        let l = model::loss(&mut tape, &params.config, logits, &ex.labels)?;
        total += tape.value(l).data[0] as f64;
    }
    Ok(total / examples.len().max(1) as f64)
}

fn organ_bce(logits: &Tensor<f32>, labels: &[u8], organs: usize) -> Vec<f64> {
    let [n, _, p] = logits.shape[..] else { return Vec::new() };
    (0..organs)
        .map(|k| {
            let mut s = 0.0;
            for b in 0..n {
                for i in 0..p {
                    let x = logits.data[(b * organs + k) * p + i] as f64;
                    let y = labels[(b * p + i) * organs + k] as f64;
                    s += x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
                }
            }
            s / (n * p) as f64
        })
        .collect()
}

/// Runs the fixed epoch budget of `cfg`, continuing from `resume` when given.
///
/// Every step draws its volumes, augmentation and points from an RNG stream
/// keyed by (seed, global step), and epoch orderings from (seed, epoch), so a
/// run resumed from a checkpoint at step `s` replays the uninterrupted run.
pub fn train(
    train: &[TrainingSample],
    val: &[TrainingSample],
    cfg: &TrainConfig,
    resume: Option<ModelParams>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let organs = train
        .first()
        .ok_or_else(|| Error::invalid("training set is empty"))?
        .queries
        .organs;
    let config = cfg.model_config(organs);
    check_dataset(train, cfg, &config)?;
    let mut params = match resume {
        Some(p) => {
            if p.fingerprint() != config.fingerprint() {
                return Err(Error::Config("resumed checkpoint does not match the training config".into()));
            }
            p
        }
        None => ModelParams::init(config, cfg.seed)?,
    };
    let adam = cfg.optimizer();
    let val_examples = if cfg.val_every > 0 {
        let val_cfg = TrainConfig {
            points_per_volume: cfg.val_points,
            ..cfg.clone()
        };
        val.iter()
            .enumerate()
            .map(|(i, s)| draw_example(s, &val_cfg, &mut rng::stream(cfg.seed, &[VAL_STREAM, i as u64]), false))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };

    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = (cfg.epochs * per_epoch) as u64;
    let mut outcome_steps = Vec::new();
    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut order: Vec<usize> = Vec::new();
    let mut order_epoch = usize::MAX;
    let mut epoch_losses = Vec::new();

    for step in params.step..total {
        let epoch = (step / per_epoch as u64) as usize;
        let slot = (step % per_epoch as u64) as usize;
        if epoch != order_epoch {
            order = (0..train.len()).collect();
            order.shuffle(&mut rng::stream(cfg.seed, &[EPOCH_STREAM, epoch as u64]));
            order_epoch = epoch;
        }
        let batch = &order[slot * cfg.batch_size..((slot + 1) * cfg.batch_size).min(train.len())];
        let mut examples = Vec::with_capacity(batch.len());
        for (j, &i) in batch.iter().enumerate() {
            let mut r = rng::stream(cfg.seed, &[STEP_STREAM, step, j as u64]);
            examples.push(draw_example(&train[i], cfg, &mut r, cfg.augment)?);
        }
        let volumes: Vec<&VolumeGrid> = examples.iter().map(|e| &e.volume).collect();
        let coords: Vec<[f64; 3]> = examples.iter().flat_map(|e| e.coords.iter().copied()).collect();
        let labels: Vec<u8> = examples.iter().flat_map(|e| e.labels.iter().copied()).collect();

        let mut tape = Tape::new();
        let vars = params.bind(&mut tape, true);
        let input = tape.constant(model::volume_batch(&volumes)?);
        let mut stats = params.batchnorm.clone();
        let pyr = model::encode(&mut tape, &params.config, &vars, input, &mut stats, BatchNormMode::Train)?;
        let points = PointBatch::new(examples.len(), cfg.points_per_volume, coords)?;
        let feats = model::query_features(&mut tape, &pyr, &points)?;
        let logits = model::decode(&mut tape, &params.config, &vars, feats)?;
        let l = model::loss(&mut tape, &params.config, logits, &labels)?;
        let loss = tape.value(l).data[0] as f64;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite training loss at step {step}")));
        }
        let organ_losses = match params.config.decoder.variant {
            DecoderVariant::Multi => organ_bce(tape.value(logits), &labels, organs),
            DecoderVariant::Single => Vec::new(),
        };
        tape.backward(l)?;
        let grads: Vec<Vec<f32>> = vars
            .iter()
            .zip(&params.tensors)
            .map(|(&v, t)| tape.grad(v).map(|g| g.data).unwrap_or_else(|| vec![0.0; t.len()]))
            .collect();
        drop(tape);
        let grad_refs: Vec<&[f32]> = grads.iter().map(Vec::as_slice).collect();
        let mut slices: Vec<&mut [f32]> = params.tensors.iter_mut().map(|t| t.data.as_mut_slice()).collect();
        adam.step(&mut slices, &grad_refs, &mut params.adam)?;
        params.batchnorm = stats;
        params.step = step + 1;
        outcome_steps.push(StepRecord {
            step,
            epoch,
            loss,
            organ_losses,
        });
        epoch_losses.push(loss);

        if slot + 1 == per_epoch {
            let train_loss = epoch_losses.iter().sum::<f64>() / epoch_losses.len() as f64;
            epoch_losses.clear();
            let validate = !val_examples.is_empty() && ((epoch + 1) % cfg.val_every == 0 || params.step == total);
            let val_loss = if validate {
                let v = evaluate_loss(&params, &val_examples)?;
                if !v.is_finite() {
                    return Err(Error::Numeric(format!("non-finite validation loss at epoch {epoch}")));
                }
                if best.as_ref().is_none_or(|(b, _, _)| v < *b) {
                    best = Some((v, epoch, params.clone()));
                }
                Some(v)
            } else {
                None
            };
            epochs.push(EpochRecord {
                epoch,
                train_loss,
                val_loss,
            });
        }
    }
    let (best_epoch, best) = match best {
        Some((_, e, p)) => (Some(e), Some(p)),
        None => (None, None),
    };
    Ok(TrainOutcome {
        params,
        best,
        best_epoch,
        steps: outcome_steps,
        epochs,
    })
}

/// Loss trace as CSV: `step,epoch,loss,loss_organ0,...`, preceded by a provenance comment.
pub fn loss_trace_csv(steps: &[StepRecord], fingerprint: &str, seed: u64) -> String {
    let organs = steps.iter().map(|s| s.organ_losses.len()).max().unwrap_or(0);
    let mut s = format!("# fingerprint={fingerprint} seed={seed}\nstep,epoch,loss");
    for k in 0..organs {
        let _ = write!(s, ",loss_organ{k}");
    }
    s.push('\n');
    for r in steps {
        let _ = write!(s, "{},{},{:.9}", r.step, r.epoch, r.loss);
        for k in 0..organs {
            match r.organ_losses.get(k) {
                Some(l) => {
                    let _ = write!(s, ",{l:.9}");
                }
                None => s.push(','),
            }
        }
        s.push('\n');
    }
    s
}

/// Normalized voxel centers of `frame`, x fastest.
pub fn grid_points(frame: &CoordinateFrame) -> Vec<[f64; 3]> {
    let [dx, dy, dz] = frame.dims;
    let mut pts = Vec::with_capacity(dx * dy * dz);
    for z in 0..dz {
        for y in 0..dy {
            for x in 0..dx {
                pts.push(frame.voxel_center_normalized([x, y, z]));
            }
        }
    }
    pts
}

fn evaluate_grid(
    params: &ModelParams,
    encoded: &model::EncodedVolumes,
    points: &[[f64; 3]],
    chunk: usize,
) -> Result<Vec<Vec<f32>>> {
    let c = params.config.decoder.organs;
    let mut out = vec![Vec::with_capacity(points.len()); c];
    for part in points.chunks(chunk.max(1)) {
        let probs = model::query_encoded(params, encoded, &PointBatch::single(part.to_vec()))?;
        for (k, o) in out.iter_mut().enumerate() {
            o.extend_from_slice(&probs[k * part.len()..(k + 1) * part.len()]);
        }
    }
    Ok(out)
}

/// Encodes `v` once and evaluates every organ's occupancy at the voxel centers
/// of an `out_dims` grid covering the same physical box.
pub fn infer_dense(params: &ModelParams, v: &VolumeGrid, out_dims: [usize; 3], chunk: usize) -> Result<Vec<VolumeGrid>> {
    let divisor = params.config.encoder.divisor();
    if v.dims().iter().any(|d| d % divisor != 0) {
        return Err(Error::invalid(format!("input {:?} is not divisible by {divisor}", v.dims())));
    }
    if out_dims.contains(&0) {
        return Err(Error::invalid("output dims must be positive"));
    }
    let frame = v.frame().rescaled(out_dims);
    let encoded = model::encode_eval(params, &[v])?;
    evaluate_grid(params, &encoded, &grid_points(&frame), chunk)?
        .into_iter()
        .map(|p| VolumeGrid::new(out_dims, frame.spacing, frame.origin, p))
        .collect()
}

/// Half-sample-shifted periodic Hann window, `0.5·(1 − cos(2π(i + ½)/N))`.
/// Strictly positive, and shifted copies at hop `N/2` sum to exactly 1.
pub fn hann_1d(n: usize) -> Vec<f32> {
    (0..n)
        .map(|i| (0.5 * (1.0 - (2.0 * std::f64::consts::PI * (i as f64 + 0.5) / n as f64).cos())) as f32)
        .collect()
}

/// Separable 3D Hann window over a patch-local grid, x fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct HannWindow3D {
    pub size: [usize; 3],
    pub weights: Vec<f32>,
}

impl HannWindow3D {
    pub fn new(size: [usize; 3]) -> Self {
        let [wx, wy, wz] = size.map(hann_1d);
        let mut weights = Vec::with_capacity(size.iter().product());
        for z in &wz {
            for y in &wy {
                for x in &wx {
                    weights.push(x * y * z);
                }
            }
        }
        Self { size, weights }
    }
}

/// Pre-normalization weight field of a patch layout at output scale `scale`.
pub fn blend_weights(layout: &volume::PatchLayout, scale: usize) -> Vec<f64> {
    let size = layout.patch_size.map(|p| p * scale);
    let dims = layout.padded_dims.map(|d| d * scale);
    let window = HannWindow3D::new(size);
    let mut acc = vec![0.0; dims.iter().product()];
    for off in &layout.offsets {
        accumulate_weights(&mut acc, dims, off.map(|o| o * scale), size, &window.weights);
    }
    acc
}

fn for_each_patch_voxel(dims: [usize; 3], offset: [usize; 3], size: [usize; 3], mut f: impl FnMut(usize, usize)) {
    let mut i = 0;
    for z in 0..size[2] {
        for y in 0..size[1] {
            let row = ((offset[2] + z) * dims[1] + offset[1] + y) * dims[0] + offset[0];
            for x in 0..size[0] {
                f(row + x, i);
                i += 1;
            }
        }
    }
}

fn accumulate_weights(weight_sum: &mut [f64], dims: [usize; 3], offset: [usize; 3], size: [usize; 3], window: &[f32]) {
    for_each_patch_voxel(dims, offset, size, |g, i| weight_sum[g] += window[i] as f64);
}

fn accumulate_values(
    value_sum: &mut [f64],
    dims: [usize; 3],
    offset: [usize; 3],
    size: [usize; 3],
    window: &[f32],
    values: &[f32],
) {
    for_each_patch_voxel(dims, offset, size, |g, i| value_sum[g] += window[i] as f64 * values[i] as f64);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchInference {
    pub patch_size: [usize; 3],
    pub stride: [usize; 3],
    pub out_scale: usize,
    pub chunk: usize,
    /// Worker threads evaluating patches; blending always runs in patch order.
    pub threads: usize,
}

impl Default for PatchInference {
    fn default() -> Self {
        Self {
            patch_size: [32; 3],
            stride: [16; 3],
            out_scale: 2,
            chunk: DEFAULT_CHUNK,
            threads: 1,
        }
    }
}

/// Patch-wise inference blended with a 3D Hann window.
///
/// The volume is padded (with its background) to the layout's padded dims,
/// each patch is encoded independently and evaluated on its `out_scale`-refined
/// local grid, and the per-voxel result is Σ w·p / Σ w cropped back to the
/// original box. The output grid covers `v`'s box with `dims·out_scale` voxels.
pub fn infer_patchwise(params: &ModelParams, v: &VolumeGrid, cfg: &PatchInference) -> Result<Vec<VolumeGrid>> {
    let (ps, stride, s) = (cfg.patch_size, cfg.stride, cfg.out_scale);
    if s == 0 {
        return Err(Error::invalid("out_scale must be ≥ 1"));
    }
    if (0..3).any(|a| ps[a] % 2 != 0 || stride[a] * 2 != ps[a]) {
        return Err(Error::invalid(format!(
            "stride {stride:?} must be half of an even patch size {ps:?}"
        )));
    }
    let divisor = params.config.encoder.divisor();
    if ps.iter().any(|d| d % divisor != 0) {
        return Err(Error::invalid(format!("patch {ps:?} is not divisible by {divisor}")));
    }
    let layout = plan_patches(v.dims(), ps, stride)?;
    let padded = volume::pad(v, [0; 3], layout.padded_dims, v.background())?;
    let local_dims = ps.map(|p| p * s);
    let local_frame = CoordinateFrame {
        dims: ps,
        spacing: [1.0; 3],
        origin: [0.0; 3],
    }
    .rescaled(local_dims);
    let local_points = grid_points(&local_frame);
    let window = HannWindow3D::new(local_dims);
    let organs = params.config.decoder.organs;

    let eval_patch = |offset: [usize; 3]| -> Result<Vec<Vec<f32>>> {
        let patch = extract_patch(&padded, offset, ps)?;
        let encoded = model::encode_eval(params, &[&patch])?;
        evaluate_grid(params, &encoded, &local_points, cfg.chunk)
    };
    let threads = cfg.threads.max(1).min(layout.offsets.len());
    let results: Vec<Result<Vec<Vec<f32>>>> = if threads <= 1 {
        layout.offsets.iter().map(|&o| eval_patch(o)).collect()
    } else {
        let per = layout.offsets.len().div_ceil(threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = layout
                .offsets
                .chunks(per)
                .map(|group| scope.spawn(|| group.iter().map(|&o| eval_patch(o)).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("patch worker panicked"))
                .collect()
        })
    };

    let out_padded = layout.padded_dims.map(|d| d * s);
    let n: usize = out_padded.iter().product();
    let mut weight_sum = vec![0.0; n];
    let mut value_sums = vec![vec![0.0; n]; organs];
    for (offset, probs) in layout.offsets.iter().zip(results) {
        let probs = probs?;
        let off = offset.map(|o| o * s);
        accumulate_weights(&mut weight_sum, out_padded, off, local_dims, &window.weights);
        for (sums, p) in value_sums.iter_mut().zip(&probs) {
            accumulate_values(sums, out_padded, off, local_dims, &window.weights, p);
        }
    }

    let out_dims = v.dims().map(|d| d * s);
    let frame = v.frame().rescaled(out_dims);
    let mut grids = Vec::with_capacity(organs);
    for sums in &value_sums {
        let mut values = Vec::with_capacity(out_dims.iter().product());
        for z in 0..out_dims[2] {
            for y in 0..out_dims[1] {
                for x in 0..out_dims[0] {
                    let i = (z * out_padded[1] + y) * out_padded[0] + x;
                    let w = weight_sum[i];
                    if !(w > 0.0) {
                        return Err(Error::Layout(format!("zero blend weight at output voxel {:?}", [x, y, z])));
                    }
                    values.push((sums[i] / w) as f32);
                }
            }
        }
        grids.push(VolumeGrid::new(out_dims, frame.spacing, frame.origin, values)?);
    }
    Ok(grids)
}

/// Nearest-neighbor upsampling by an integer factor over the same physical box.
pub fn upsample_nearest(v: &VolumeGrid, factor: usize) -> Result<VolumeGrid> {
    if factor == 0 {
        return Err(Error::invalid("upsampling factor must be ≥ 1"));
    }
    let dims = v.dims().map(|d| d * factor);
    let frame = v.frame().rescaled(dims);
    VolumeGrid::from_fn(dims, frame.spacing, frame.origin, |[x, y, z]| {
        v.get([x / factor, y / factor, z / factor])
    })
}

/// Thresholds at 0.5 into a {0, 1} grid.
pub fn binarize(v: &VolumeGrid) -> VolumeGrid {
    let mut out = v.clone();
    for x in out.values_mut() {
        *x = (*x >= 0.5) as u8 as f32;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReconstructConfig {
    pub iso: f32,
    pub smoothing_iterations: usize,
    pub smoothing_lambda: f64,
}

impl Default for ReconstructConfig {
    fn default() -> Self {
        Self {
            iso: 0.5,
            smoothing_iterations: 2,
            smoothing_lambda: 0.5,
        }
    }
}

/// Marching cubes at `iso` on the occupancy grid bordered by one voxel of zeros,
/// so surfaces touching the grid boundary are still closed, then smoothing.
pub fn reconstruct(occ: &VolumeGrid, cfg: &ReconstructConfig) -> Result<TriMesh> {
    if !(cfg.iso > 0.0 && cfg.iso < 1.0) {
        return Err(Error::invalid(format!("iso level {} must lie in (0, 1)", cfg.iso)));
    }
    let bordered = volume::pad(occ, [1; 3], occ.dims().map(|d| d + 2), 0.0)?;
    let mesh = marching_cubes(&bordered, cfg.iso);
    Ok(smooth_mesh(&mesh, cfg.smoothing_iterations, cfg.smoothing_lambda))
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    fingerprint: String,
    config: ModelConfig,
    seed: u64,
    step: u64,
    adam_step: u64,
    tensors: Vec<TensorEntry>,
    batchnorm_channels: Vec<usize>,
    batchnorm_momentum: Vec<f32>,
    payload: String,
    payload_bytes: usize,
    layout: String,
}

/// Writes a JSON manifest at `path` and the raw little-endian f32 payload next
/// to it: tensors in manifest order, then BN running mean/var per layer, then
/// Adam first and second moments per tensor.
pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let mut payload = Vec::new();
    let mut put = |xs: &[f32]| {
        for x in xs {
            payload.extend_from_slice(&x.to_le_bytes());
        }
    };
    for t in &params.tensors {
        put(&t.data);
    }
    for bn in &params.batchnorm {
        put(&bn.mean);
        put(&bn.var);
    }
    for m in &params.adam.m {
        put(m);
    }
    for v in &params.adam.v {
        put(v);
    }
    let raw = volume::payload_path(path);
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        fingerprint: params.fingerprint(),
        config: params.config.clone(),
        seed: params.seed,
        step: params.step,
        adam_step: params.adam.step,
        tensors: params
            .names
            .iter()
            .zip(&params.tensors)
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape.clone(),
            })
            .collect(),
        batchnorm_channels: params.batchnorm.iter().map(|b| b.mean.len()).collect(),
        batchnorm_momentum: params.batchnorm.iter().map(|b| b.momentum).collect(),
        payload: raw
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default(),
        payload_bytes: payload.len(),
        layout: "f32 le: tensors, batchnorm (mean, var) per layer, adam m per tensor, adam v per tensor".into(),
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(path, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    fs::write(&raw, payload).map_err(|e| Error::io(&raw, e))
}

/// Reads a checkpoint; with `expected`, a differing architecture is a config error.
pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<ModelParams> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: CheckpointManifest = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    let format_err = |reason: String| Error::Format {
        path: path.into(),
        reason,
    };
    if m.format != CHECKPOINT_FORMAT {
        return Err(format_err(format!("unknown checkpoint format {:?}", m.format)));
    }
    m.config.validate()?;
    if m.config.fingerprint() != m.fingerprint {
        return Err(Error::Config(format!(
            "{}: manifest fingerprint does not match its config",
            path.display()
        )));
    }
    if let Some(cfg) = expected {
        if cfg.fingerprint() != m.fingerprint {
            return Err(Error::Config(format!(
                "{}: checkpoint architecture {} does not match the requested {}",
                path.display(),
                m.fingerprint,
                cfg.fingerprint()
            )));
        }
    }
    let specs = m.config.param_specs();
    let declared: Vec<(String, Vec<usize>)> = m.tensors.iter().map(|t| (t.name.clone(), t.shape.clone())).collect();
    if specs != declared || m.batchnorm_channels != m.config.batchnorm_channels() {
        return Err(format_err("tensor table does not match the config".into()));
    }
    if m.batchnorm_momentum.len() != m.batchnorm_channels.len() {
        return Err(format_err("batch-norm table is inconsistent".into()));
    }
    let raw = volume::payload_path(path);
    let bytes = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    let sizes: Vec<usize> = specs.iter().map(|(_, s)| s.iter().product()).collect();
    let floats = 2 * sizes.iter().sum::<usize>() + sizes.iter().sum::<usize>()
        + 2 * m.batchnorm_channels.iter().sum::<usize>();
    if bytes.len() != floats * 4 || m.payload_bytes != bytes.len() {
        return Err(format_err(format!("expected {} payload bytes, found {}", floats * 4, bytes.len())));
    }
    let mut cursor = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    let mut take = |n: usize| -> Vec<f32> { cursor.by_ref().take(n).collect() };
    let tensors = specs
        .iter()
        .zip(&sizes)
        .map(|((_, shape), &n)| Tensor {
            shape: shape.clone(),
            data: take(n),
        })
        .collect();
    let batchnorm = m
        .batchnorm_channels
        .iter()
        .zip(&m.batchnorm_momentum)
        .map(|(&c, &momentum)| RunningStats {
            mean: take(c),
            var: take(c),
            momentum,
        })
        .collect();
    let adam_m = sizes.iter().map(|&n| take(n)).collect();
    let adam_v = sizes.iter().map(|&n| take(n)).collect();
    Ok(ModelParams {
        config: m.config,
        names: specs.into_iter().map(|(n, _)| n).collect(),
        tensors,
        batchnorm,
        adam: AdamState {
            step: m.adam_step,
            m: adam_m,
            v: adam_v,
        },
        seed: m.seed,
        step: m.step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ImplicitShape;
    use crate::synth::{generate_scene, sample_spec, SceneTemplate};

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            points_per_volume: 64,
            base_channels: 1,
            hidden_dim: Some(8),
            patch_size: [32; 3],
            min_patch_points: 8,
            val_points: 64,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    fn sphere_sample(dims: usize, seed: u64) -> TrainingSample {
        let scene = generate_scene(&sample_spec(&SceneTemplate::Sphere { dims, radius: 0.4 }, seed)).unwrap();
        TrainingSample::from_scene(
            &scene,
            &QueryBudget::new(400, 200),
            LabelSource::Exact,
            None,
            &mut rng::seeded(seed),
        )
        .unwrap()
    }

    fn tiny_params() -> ModelParams {
        ModelParams::init(tiny_cfg().model_config(1), 3).unwrap()
    }

    #[test]
    fn hann_window_blends_to_one() {
        let w = hann_1d(4);
        assert!(w.iter().all(|&x| x > 0.0 && x <= 1.0));
        assert!((w[0] + w[2] - 1.0).abs() < 1e-7 && (w[1] + w[3] - 1.0).abs() < 1e-7);
        let layout = plan_patches([40, 24, 32], [16; 3], [8; 3]).unwrap();
        let acc = blend_weights(&layout, 2);
        let d = layout.padded_dims.map(|x| x * 2);
        for z in 16..d[2] - 16 {
            for y in 16..d[1] - 16 {
                for x in 16..d[0] - 16 {
                    assert!((acc[(z * d[1] + y) * d[0] + x] - 1.0).abs() < 1e-6);
                }
            }
        }
        assert!(acc.iter().all(|&w| w > 0.0));
    }

    #[test]
    fn dense_inference_matches_forward_and_is_chunk_invariant() {
        let params = tiny_params();
        let v = sphere_sample(16, 1).volume;
        let grids = infer_dense(&params, &v, [16; 3], DEFAULT_CHUNK).unwrap();
        let pts = grid_points(&v.frame());
        let direct = model::forward(&params, &[&v], &PointBatch::single(pts)).unwrap();
        assert_eq!(grids[0].values(), &direct[..]);
        assert!(grids[0].same_frame(&v));
        let fine = infer_dense(&params, &v, [32; 3], DEFAULT_CHUNK).unwrap();
        let chunked = infer_dense(&params, &v, [32; 3], 1000).unwrap();
        assert_eq!(fine, chunked);
        assert!(fine[0].values().iter().all(|p| (0.0..=1.0).contains(p)));
        assert!(infer_dense(&params, &volume::resample(&v, [12; 3]).unwrap(), [12; 3], 10).is_err());
    }

    #[test]
    fn single_patch_inference_equals_dense() {
        let params = tiny_params();
        let v = sphere_sample(16, 2).volume;
        let cfg = PatchInference {
            patch_size: [16; 3],
            stride: [8; 3],
            out_scale: 2,
            chunk: 777,
            threads: 1,
        };
        let patched = infer_patchwise(&params, &v, &cfg).unwrap();
        let dense = infer_dense(&params, &v, [32; 3], DEFAULT_CHUNK).unwrap();
        assert_eq!(patched, dense);
    }

    #[test]
    fn patch_inference_shapes_and_threads() {
        let params = tiny_params();
        let v = sphere_sample(32, 3).volume;
        let cfg = PatchInference {
            patch_size: [16; 3],
            stride: [8; 3],
            out_scale: 2,
            chunk: DEFAULT_CHUNK,
            threads: 1,
        };
        let one = infer_patchwise(&params, &v, &cfg).unwrap();
        assert_eq!(one[0].dims(), [64; 3]);
        assert!(one[0].values().iter().all(|p| (0.0..=1.0).contains(p)));
        let many = infer_patchwise(&params, &v, &PatchInference { threads: 3, ..cfg }).unwrap();
        assert_eq!(one, many);
        assert!(infer_patchwise(&params, &v, &PatchInference { stride: [16; 3], ..cfg }).is_err());
    }

    #[test]
    fn reconstruct_levels() {
        let zeros = VolumeGrid::filled([8; 3], [1.0; 3], [0.0; 3], 0.0).unwrap();
        assert!(reconstruct(&zeros, &ReconstructConfig::default()).unwrap().is_empty());
        let ball = VolumeGrid::from_fn([24; 3], [1.0; 3], [0.0; 3], |ijk| {
            let r = ijk.iter().map(|&i| (i as f64 - 11.5).powi(2)).sum::<f64>().sqrt();
            (1.0 / (1.0 + (r - 7.0).exp())) as f32
        })
        .unwrap();
        let at = |iso| {
            reconstruct(
                &ball,
                &ReconstructConfig {
                    iso,
                    smoothing_iterations: 0,
                    ..ReconstructConfig::default()
                },
            )
            .unwrap()
        };
        let (hi, lo) = (at(0.6), at(0.4));
        assert!(hi.is_closed() && lo.is_closed());
        assert!(hi.signed_volume() <= lo.signed_volume());
        let full = VolumeGrid::filled([6; 3], [1.0; 3], [0.0; 3], 1.0).unwrap();
        let boxed = reconstruct(&full, &ReconstructConfig::default()).unwrap();
        assert!(boxed.is_closed() && boxed.signed_volume() > 0.0);
    }

    #[test]
    fn upsampling_and_binarizing() {
        let v = VolumeGrid::from_fn([2, 2, 2], [2.0; 3], [0.0; 3], |[x, y, z]| (x + 2 * y + 4 * z) as f32 / 8.0).unwrap();
        let up = upsample_nearest(&v, 2).unwrap();
        assert_eq!(up.dims(), [4; 3]);
        assert_eq!(up.get([3, 2, 1]), v.get([1, 1, 0]));
        assert!(up.frame().approx_eq(&v.frame().rescaled([4; 3]), 1e-12));
        assert_eq!(binarize(&v).values().iter().filter(|&&x| x == 1.0).count(), 4);
    }

    #[test]
    fn checkpoint_round_trip_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let samples = vec![sphere_sample(32, 4)];
        let cfg = TrainConfig { epochs: 1, ..tiny_cfg() };
        let params = train(&samples, &[], &cfg, None).unwrap().params;
        let a = dir.path().join("a.json");
        let b = dir.path().join("b.json");
        save_checkpoint(&params, &a).unwrap();
        let loaded = load_checkpoint(&a, Some(&params.config)).unwrap();
        assert_eq!(loaded, params);
        save_checkpoint(&loaded, &b).unwrap();
        assert_eq!(fs::read(&a).unwrap().len(), fs::read(&b).unwrap().len());
        assert_eq!(fs::read(volume::payload_path(&a)).unwrap(), fs::read(volume::payload_path(&b)).unwrap());
        let other = TrainConfig { base_channels: 2, ..cfg }.model_config(1);
        assert!(matches!(load_checkpoint(&a, Some(&other)), Err(Error::Config(_))));
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let samples = vec![sphere_sample(32, 6), sphere_sample(32, 7)];
        let val = vec![sphere_sample(32, 8)];
        let cfg = TrainConfig { epochs: 3, ..tiny_cfg() };
        let full = train(&samples, &val, &cfg, None).unwrap();
        let again = train(&samples, &val, &cfg, None).unwrap();
        assert_eq!(full.params, again.params);
        assert_eq!(full.steps, again.steps);
        assert_eq!(full.steps.len(), 6);
        assert_eq!(full.epochs.len(), 3);
        assert!(full.best.is_some() && full.epochs.iter().all(|e| e.val_loss.is_some()));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let head = train(&samples, &val, &TrainConfig { epochs: 1, ..cfg.clone() }, None).unwrap();
        save_checkpoint(&head.params, &path).unwrap();
        let resumed = train(&samples, &val, &cfg, Some(load_checkpoint(&path, None).unwrap())).unwrap();
        assert_eq!(resumed.params, full.params);
        assert_eq!(resumed.steps[..], full.steps[2..]);
        let csv = loss_trace_csv(&full.steps, &full.params.fingerprint(), cfg.seed);
        assert!(csv.lines().nth(1).unwrap().starts_with("step,epoch,loss,loss_organ0"));
        assert_eq!(csv.lines().count(), 8);
    }

    #[test]
    fn training_reduces_loss() {
        let samples = vec![sphere_sample(32, 9)];
        let cfg = TrainConfig {
            epochs: 60,
            points_per_volume: 256,
            base_channels: 2,
            hidden_dim: Some(32),
            learning_rate: 3e-3,
            val_every: 0,
            ..tiny_cfg()
        };
        let out = train(&samples, &[], &cfg, None).unwrap();
        let head: f64 = out.steps[..10].iter().map(|s| s.loss).sum::<f64>() / 10.0;
        let tail: f64 = out.steps[50..].iter().map(|s| s.loss).sum::<f64>() / 10.0;
        assert!(tail < 0.5 * head, "{head} → {tail}");
        assert!(out.best.is_none());
    }

    #[test]
    fn patch_mode_draws_informative_patches() {
        let sample = sphere_sample(48, 10);
        let cfg = TrainConfig {
            mode: TrainMode::Patch,
            ..tiny_cfg()
        };
        let mut r = rng::seeded(1);
        for _ in 0..20 {
            let (patch, q) = draw_patch(&sample.volume, &sample.queries, &cfg, &mut r).unwrap();
            let (lo, hi) = patch.min_max();
            assert!(hi > lo && q.len() >= cfg.min_patch_points);
            assert!(q.coords.iter().flatten().all(|c| (-1.0..=1.0).contains(c)));
        }
        let mut flat = sample.clone();
        flat.volume.values_mut().fill(0.5);
        assert!(matches!(
            train(&[flat], &[], &cfg, None),
            Err(Error::DegenerateInput(_))
        ));
        let out = train(&[sample], &[], &TrainConfig { epochs: 1, ..cfg }, None).unwrap();
        assert_eq!(out.steps.len(), 1);
    }

    #[test]
    fn mask_labels_differ_only_near_the_surface() {
        let scene = generate_scene(&sample_spec(&SceneTemplate::Sphere { dims: 16, radius: 0.4 }, 11)).unwrap();
        let budget = QueryBudget::new(300, 300);
        let exact = TrainingSample::from_scene(&scene, &budget, LabelSource::Exact, None, &mut rng::seeded(0)).unwrap();
        let masked = TrainingSample::from_scene(
            &scene,
            &budget,
            LabelSource::Mask { dims: [16; 3] },
            Some([16; 3]),
            &mut rng::seeded(0),
        )
        .unwrap();
        assert_eq!(exact.queries.coords, masked.queries.coords);
        let shape = &scene.spec.organs[0].shape;
        let mut differ = 0;
        for i in 0..exact.queries.len() {
            if exact.queries.labels[i] != masked.queries.labels[i] {
                differ += 1;
                assert!(shape.sdf(exact.queries.coords[i]).abs() < 2.0 * 2.0 / 16.0);
            }
        }
        assert!(differ > 0);
    }

    #[test]
    fn config_json_defaults() {
        let cfg = TrainConfig::from_json(r#"{"epochs": 3, "mode": "patch"}"#).unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.mode, TrainMode::Patch);
        assert_eq!(cfg.batch_size, 1);
        assert!(TrainConfig::from_json(r#"{"batch_size": 0}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"bogus": 1}"#).is_err());
    }
}
