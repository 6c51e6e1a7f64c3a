//! The occupancy network: a five-block 3D CNN encoder producing a feature
//! pyramid, multi-scale trilinear feature querying, and per-point implicit
//! decoders (one shared multi-class head, or one binary head per organ).

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Activation, AdamState, BatchNormMode, PointBatch, RunningStats, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::volume::VolumeGrid;

pub const BN_EPS: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub base_channels: usize,
    pub blocks: usize,
    pub include_raw_input_scale: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            base_channels: 8,
            blocks: 5,
            include_raw_input_scale: true,
        }
    }
}

impl EncoderConfig {
    /// Output channels of every block: `base · 2^k`.
    pub fn block_channels(&self) -> Vec<usize> {
        (0..self.blocks).map(|k| self.base_channels << k).collect()
    }

    /// Channels of every pyramid scale, raw input first when enabled.
    pub fn scale_channels(&self) -> Vec<usize> {
        let mut c = Vec::with_capacity(self.blocks + 1);
        if self.include_raw_input_scale {
            c.push(1);
        }
        c.extend(self.block_channels());
        c
    }

    pub fn feature_dim(&self) -> usize {
        self.scale_channels().iter().sum()
    }

    /// Input extents must survive `blocks − 1` halvings.
    pub fn divisor(&self) -> usize {
        1 << (self.blocks - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderVariant {
    /// One decoder emitting `organs + 1` softmax classes (0 = background).
    Single,
    /// One independent binary decoder per organ.
    Multi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub variant: DecoderVariant,
    pub hidden_dim: usize,
    pub layers: usize,
    pub organs: usize,
}

impl DecoderConfig {
    /// Default hidden width: 512 for one organ, 256 for several.
    pub fn for_organs(variant: DecoderVariant, organs: usize) -> Self {
        Self {
            variant,
            hidden_dim: if organs == 1 { 512 } else { 256 },
            layers: 3,
            organs,
        }
    }

    pub fn heads(&self) -> usize {
        match self.variant {
            DecoderVariant::Single => 1,
            DecoderVariant::Multi => self.organs,
        }
    }

    pub fn head_outputs(&self) -> usize {
        match self.variant {
            DecoderVariant::Single => self.organs + 1,
            DecoderVariant::Multi => 1,
        }
    }

    /// Logit channels of the full decoder output.
    pub fn output_channels(&self) -> usize {
        self.heads() * self.head_outputs()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn new(organs: usize, variant: DecoderVariant) -> Self {
        Self {
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::for_organs(variant, organs),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        let d = &self.decoder;
        if e.base_channels == 0 || e.blocks == 0 || e.blocks > 8 {
            return Err(Error::Config(format!(
                "encoder needs base_channels ≥ 1 and 1..=8 blocks, got {} / {}",
                e.base_channels, e.blocks
            )));
        }
        if d.layers < 2 || d.hidden_dim == 0 || d.organs == 0 {
            return Err(Error::Config(format!(
                "decoder needs ≥ 2 layers, a hidden width and ≥ 1 organ, got {d:?}"
            )));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON of the architecture.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Names and shapes of every trainable tensor, in storage order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let mut specs = Vec::new();
        let mut cin = 1;
        for (k, c) in self.encoder.block_channels().into_iter().enumerate() {
            for (half, inc) in [("a", cin), ("b", c)] {
                specs.push((format!("enc{k}.conv{half}.weight"), vec![c, inc, 3, 3, 3]));
                specs.push((format!("enc{k}.conv{half}.bias"), vec![c]));
                specs.push((format!("enc{k}.bn{half}.gamma"), vec![c]));
                specs.push((format!("enc{k}.bn{half}.beta"), vec![c]));
            }
            cin = c;
        }
        let d = &self.decoder;
        let f = self.encoder.feature_dim();
        for h in 0..d.heads() {
            let mut fan_in = f;
            for l in 0..d.layers {
                let out = if l + 1 == d.layers { d.head_outputs() } else { d.hidden_dim };
                specs.push((format!("dec{h}.fc{l}.weight"), vec![out, fan_in]));
                specs.push((format!("dec{h}.fc{l}.bias"), vec![out]));
                fan_in = out;
            }
        }
        specs
    }

    /// Channels of every batch-normalization layer, in storage order.
    pub fn batchnorm_channels(&self) -> Vec<usize> {
        self.encoder.block_channels().into_iter().flat_map(|c| [c, c]).collect()
    }

    fn decoder_offset(&self) -> usize {
        8 * self.encoder.blocks
    }
}

/// All learned and optimizer state of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<f32>>,
    pub batchnorm: Vec<RunningStats<f32>>,
    pub adam: AdamState<f32>,
    pub seed: u64,
    pub step: u64,
}

impl ModelParams {
    /// He-normal convolution and decoder weights, zero biases, unit BN scale.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, &[0x1417]);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in config.param_specs() {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".weight") {
                let fan_in: usize = shape[1..].iter().product();
                let std = (2.0 / fan_in as f64).sqrt();
                (0..n).map(|_| (rng.sample::<f64, _>(StandardNormal) * std) as f32).collect()
            } else if name.ends_with(".gamma") {
                vec![1.0; n]
            } else {
                vec![0.0; n]
            };
            names.push(name);
            tensors.push(Tensor { shape, data });
        }
        let batchnorm = config.batchnorm_channels().into_iter().map(RunningStats::new).collect();
        let adam = AdamState::new(tensors.iter().map(Tensor::len));
        Ok(Self {
            config,
            names,
            tensors,
            batchnorm,
            adam,
            seed,
            step: 0,
        })
    }

    pub fn fingerprint(&self) -> String {
        self.config.fingerprint()
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every tensor on `tape`, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape<f32>, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect()
    }
}

/// Per-scale feature grids, finest first (raw input first when enabled).
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub scales: Vec<Var>,
}

/// Stacks volumes into an `[N, 1, D, H, W]` tensor (`W` ↔ x).
pub fn volume_batch(volumes: &[&VolumeGrid]) -> Result<Tensor<f32>> {
    let first = volumes.first().ok_or_else(|| Error::invalid("empty volume batch"))?;
    let [dx, dy, dz] = first.dims();
    let mut data = Vec::with_capacity(volumes.len() * first.len());
    for v in volumes {
        if v.dims() != first.dims() {
            return Err(Error::invalid(format!(
                "volume batch mixes dims {:?} and {:?}",
                first.dims(),
                v.dims()
            )));
        }
        data.extend_from_slice(v.values());
    }
    Tensor::new(vec![volumes.len(), 1, dz, dy, dx], data)
}

/// Five blocks of (conv → BN → ReLU) ×2 with 2× max pooling between blocks.
pub fn encode(
    tape: &mut Tape<f32>,
    config: &ModelConfig,
    vars: &[Var],
    input: Var,
    stats: &mut [RunningStats<f32>],
    mode: BatchNormMode,
) -> Result<FeaturePyramid> {
    let shape = tape.shape(input).to_vec();
    let div = config.encoder.divisor();
    if shape.len() != 5 || shape[1] != 1 || shape[2..].iter().any(|&d| d == 0 || d % div != 0) {
        return Err(Error::invalid(format!(
            "encoder input {shape:?} must be [N, 1, D, H, W] with extents divisible by {div}"
        )));
    }
    let mut scales = Vec::with_capacity(config.encoder.blocks + 1);
    if config.encoder.include_raw_input_scale {
        scales.push(input);
    }
    let mut x = input;
    for k in 0..config.encoder.blocks {
        if k > 0 {
            x = tape.maxpool3d(x)?;
        }
        for half in 0..2 {
            let p = &vars[8 * k + 4 * half..8 * k + 4 * half + 4];
            let c = tape.conv3d(x, p[0], p[1])?;
            let b = tape.batchnorm3d(c, p[2], p[3], &mut stats[2 * k + half], mode, BN_EPS)?;
            x = tape.relu(b);
        }
        scales.push(x);
    }
    Ok(FeaturePyramid { scales })
}

/// Samples every scale at the same normalized points and concatenates channels: `[N, F, P]`.
pub fn query_features(tape: &mut Tape<f32>, pyramid: &FeaturePyramid, points: &PointBatch) -> Result<Var> {
    let sampled = pyramid
        .scales
        .iter()
        .map(|&s| tape.trilinear_sample(s, points))
        .collect::<Result<Vec<_>>>()?;
    tape.concat_channels(&sampled)
}

/// Runs every decoder head and stacks their logits: `[N, output_channels, P]`.
pub fn decode(tape: &mut Tape<f32>, config: &ModelConfig, vars: &[Var], features: Var) -> Result<Var> {
    let f = config.encoder.feature_dim();
    if tape.shape(features).get(1) != Some(&f) {
        return Err(Error::invalid(format!(
            "decoder expects {f} features per point, got shape {:?}",
            tape.shape(features)
        )));
    }
    let d = &config.decoder;
    let base = config.decoder_offset();
    if vars.len() != base + 2 * d.layers * d.heads() {
        return Err(Error::invalid("parameter list does not match the decoder configuration"));
    }
    let mut heads = Vec::with_capacity(d.heads());
    for h in 0..d.heads() {
        let mut x = features;
        for l in 0..d.layers {
            let i = base + 2 * (h * d.layers + l);
            let act = if l + 1 == d.layers { Activation::None } else { Activation::Relu };
            x = tape.pointwise_layer(x, vars[i], vars[i + 1], act)?;
        }
        heads.push(x);
    }
    if heads.len() == 1 {
        Ok(heads[0])
    } else {
        tape.concat_channels(&heads)
    }
}

/// Class id per point for the single-decoder variant: 0 background, `k + 1` organ `k`.
pub fn class_ids(labels: &[u8], organs: usize) -> Result<Vec<usize>> {
    labels
        .chunks_exact(organs)
        .enumerate()
        .map(|(i, l)| {
            let mut id = 0;
            for (k, &v) in l.iter().enumerate() {
                if v != 0 {
                    if id != 0 {
                        return Err(Error::LabelConflict(format!(
                            "point {i} is inside organs {} and {}",
                            id - 1,
                            k
                        )));
                    }
                    id = k + 1;
                }
            }
            Ok(id)
        })
        .collect()
}

/// Occupancy loss. `labels` holds `organs` bytes per point, points ordered
/// batch-major as in the logits' point axis.
///
/// Multi variant: sum over organs of the mean BCE. Single variant: mean
/// softmax cross-entropy against derived class ids.
pub fn loss(tape: &mut Tape<f32>, config: &ModelConfig, logits: Var, labels: &[u8]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    let [n, k, p] = shape[..] else {
        return Err(Error::invalid(format!("logits must be [N, K, P], got {shape:?}")));
    };
    let c = config.decoder.organs;
    if k != config.decoder.output_channels() || labels.len() != n * p * c {
        return Err(Error::invalid(format!(
            "logits {shape:?} / {} labels do not match {c} organs",
            labels.len()
        )));
    }
    match config.decoder.variant {
        DecoderVariant::Multi => {
            let mut total: Option<Var> = None;
            for organ in 0..c {
                let l = tape.select_channel(logits, organ)?;
                let y: Vec<f32> = (0..n * p).map(|i| labels[i * c + organ] as f32).collect();
                let b = tape.bce_with_logits(l, &y)?;
                total = Some(match total {
                    Some(t) => tape.add(t, b)?,
                    None => b,
                });
            }
            Ok(total.expect("at least one organ"))
        }
        DecoderVariant::Single => {
            let ids = class_ids(labels, c)?;
            tape.cross_entropy(logits, &ids)
        }
    }
}

/// Converts logits `[N, K, P]` to per-organ occupancy probabilities `[N, c, P]`.
pub fn probabilities(config: &ModelConfig, logits: &Tensor<f32>) -> Vec<f32> {
    let [n, k, p] = logits.shape[..] else { panic!("logits must be rank 3") };
    let c = config.decoder.organs;
    let x = &logits.data;
    match config.decoder.variant {
        DecoderVariant::Multi => x
            .iter()
            .map(|&l| (1.0 / (1.0 + (-(l as f64)).exp())) as f32)
            .collect(),
        DecoderVariant::Single => {
            let mut out = vec![0.0f32; n * c * p];
            for b in 0..n {
                for j in 0..p {
                    let at = |ch: usize| x[(b * k + ch) * p + j] as f64;
                    let m = (0..k).map(at).fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = (0..k).map(|ch| (at(ch) - m).exp()).sum();
                    for organ in 0..c {
                        out[(b * c + organ) * p + j] = ((at(organ + 1) - m).exp() / z) as f32;
                    }
                }
            }
            out
        }
    }
}

/// Encodes volumes once in eval mode and keeps the pyramid values for
/// repeated point queries.
pub struct EncodedVolumes {
    pub scales: Vec<Tensor<f32>>,
}

pub fn encode_eval(params: &ModelParams, volumes: &[&VolumeGrid]) -> Result<EncodedVolumes> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false);
    let input = tape.constant(volume_batch(volumes)?);
    let mut stats = params.batchnorm.clone();
    let pyr = encode(&mut tape, &params.config, &vars, input, &mut stats, BatchNormMode::Eval)?;
    Ok(EncodedVolumes {
        scales: pyr.scales.iter().map(|&s| tape.value(s).clone()).collect(),
    })
}

/// Decoder-side evaluation against a precomputed pyramid: probabilities `[N, c, P]`.
pub fn query_encoded(params: &ModelParams, encoded: &EncodedVolumes, points: &PointBatch) -> Result<Vec<f32>> {
    let mut tape = Tape::new();
    let scales = encoded.scales.iter().map(|s| tape.constant(s.clone())).collect();
    let pyr = FeaturePyramid { scales };
    let vars = params.bind(&mut tape, false);
    let feats = query_features(&mut tape, &pyr, points)?;
    let logits = decode(&mut tape, &params.config, &vars, feats)?;
    Ok(probabilities(&params.config, tape.value(logits)))
}

/// Eval-mode end to end: encode → query → decode → sigmoid/softmax, `[N, c, P]`.
pub fn forward(params: &ModelParams, volumes: &[&VolumeGrid], points: &PointBatch) -> Result<Vec<f32>> {
    let encoded = encode_eval(params, volumes)?;
    query_encoded(params, &encoded, points)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(variant: DecoderVariant, organs: usize) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                base_channels: 2,
                blocks: 3,
                include_raw_input_scale: true,
            },
            decoder: DecoderConfig {
                variant,
                hidden_dim: 8,
                layers: 3,
                organs,
            },
        }
    }

    fn ramp(n: usize) -> VolumeGrid {
        VolumeGrid::from_fn([n; 3], [1.0; 3], [0.0; 3], |[x, y, z]| ((x * 3 + y * 5 + z * 7) % 11) as f32 * 0.2 - 1.0)
            .unwrap()
    }

    #[test]
    fn desk_feature_dim_is_249() {
        assert_eq!(EncoderConfig::default().feature_dim(), 249);
        assert_eq!(EncoderConfig::default().scale_channels(), vec![1, 8, 16, 32, 64, 128]);
    }

    #[test]
    fn pyramid_follows_halving_and_doubling() {
        let config = ModelConfig::new(1, DecoderVariant::Multi);
        let params = ModelParams::init(config, 1).unwrap();
        let enc = encode_eval(&params, &[&ramp(32)]).unwrap();
        let shapes: Vec<Vec<usize>> = enc.scales.iter().map(|t| t.shape.clone()).collect();
        assert_eq!(shapes[0], vec![1, 1, 32, 32, 32]);
        for (k, (c, r)) in [(8, 32), (16, 16), (32, 8), (64, 4), (128, 2)].into_iter().enumerate() {
            assert_eq!(shapes[k + 1], vec![1, c, r, r, r]);
        }
        assert!(encode_eval(&params, &[&ramp(24)]).is_err());
    }

    #[test]
    fn zero_conv_weights_give_spatially_constant_features() {
        let mut params = ModelParams::init(small(DecoderVariant::Multi, 1), 3).unwrap();
        for (name, t) in params.names.iter().zip(params.tensors.iter_mut()) {
            if name.starts_with("enc") && name.ends_with(".weight") {
                t.data.fill(0.0);
            }
            if name.starts_with("enc") && name.ends_with(".bias") {
                for (i, v) in t.data.iter_mut().enumerate() {
                    *v = 0.1 * (i as f32 + 1.0);
                }
            }
        }
        let v = VolumeGrid::filled([8; 3], [1.0; 3], [0.0; 3], 2.5).unwrap();
        let enc = encode_eval(&params, &[&v]).unwrap();
        for t in &enc.scales[1..] {
            let s: usize = t.shape[2..].iter().product();
            for ch in t.data.chunks_exact(s) {
                assert!(ch.iter().all(|&x| x == ch[0]));
            }
        }
    }

    #[test]
    fn coarse_voxel_center_query_reads_stored_feature() {
        let params = ModelParams::init(small(DecoderVariant::Multi, 1), 4).unwrap();
        let v = ramp(8);
        let enc = encode_eval(&params, &[&v]).unwrap();
        let coarse = enc.scales.last().unwrap();
        let r = coarse.shape[2];
        let ijk = [1usize, 0, 1];
        let p = ijk.map(|i| (2 * i + 1) as f64 / r as f64 - 1.0);
        let mut tape = Tape::new();
        let pyr = FeaturePyramid {
            scales: enc.scales.iter().map(|s| tape.constant(s.clone())).collect(),
        };
        let f = query_features(&mut tape, &pyr, &PointBatch::single(vec![p])).unwrap();
        let fv = &tape.value(f).data;
        let ch = coarse.shape[1];
        let fdim = fv.len();
        for c in 0..ch {
            let stored = coarse.data[c * r * r * r + (ijk[2] * r + ijk[1]) * r + ijk[0]];
            assert_eq!(fv[fdim - ch + c], stored);
        }
    }

    #[test]
    fn points_in_one_coarse_cell_differ_in_fine_slices() {
        let params = ModelParams::init(small(DecoderVariant::Multi, 1), 4).unwrap();
        let enc = encode_eval(&params, &[&ramp(8)]).unwrap();
        let mut tape = Tape::new();
        let pyr = FeaturePyramid {
            scales: enc.scales.iter().map(|s| tape.constant(s.clone())).collect(),
        };
        // raw scale has 8 voxels per axis: x = −0.8 and −0.55 fall into different fine cells,
        // both clamp to the first coarse (2-voxel) cell's left half.
        let pts = vec![[-0.8, -0.6, -0.6], [-0.55, -0.6, -0.6]];
        let f = query_features(&mut tape, &pyr, &PointBatch::single(pts)).unwrap();
        let v = &tape.value(f).data;
        assert_ne!(v[0], v[1]);
        let fdim = v.len() / 2;
        let coarse = enc.scales.last().unwrap().shape[1];
        for c in fdim - coarse..fdim {
            assert_eq!(v[2 * c], v[2 * c + 1]);
        }
    }

    #[test]
    fn zero_decoder_weights_emit_output_bias() {
        let mut params = ModelParams::init(small(DecoderVariant::Multi, 1), 5).unwrap();
        for (name, t) in params.names.iter().zip(params.tensors.iter_mut()) {
            if name.starts_with("dec") {
                t.data.fill(if name == "dec0.fc2.bias" { 0.7 } else { 0.0 });
            }
        }
        let probs = forward(&params, &[&ramp(8)], &PointBatch::single(vec![[0.1, 0.2, 0.3], [-0.9, 0.0, 0.9]])).unwrap();
        let expect = (1.0 / (1.0 + (-0.7f64).exp())) as f32;
        assert!(probs.iter().all(|&p| (p - expect).abs() < 1e-7));
    }

    #[test]
    fn decoder_output_shapes_and_isolation() {
        let v = ramp(8);
        let pts = PointBatch::single(vec![[0.1, 0.2, 0.3], [-0.5, 0.4, 0.0], [0.7, -0.7, 0.2]]);
        for (variant, k) in [(DecoderVariant::Multi, 2), (DecoderVariant::Single, 3)] {
            let params = ModelParams::init(small(variant, 2), 6).unwrap();
            let mut tape = Tape::new();
            let vars = params.bind(&mut tape, false);
            let input = tape.constant(volume_batch(&[&v]).unwrap());
            let mut stats = params.batchnorm.clone();
            let pyr = encode(&mut tape, &params.config, &vars, input, &mut stats, BatchNormMode::Eval).unwrap();
            let f = query_features(&mut tape, &pyr, &pts).unwrap();
            let out = decode(&mut tape, &params.config, &vars, f).unwrap();
            assert_eq!(tape.shape(out), &[1, k, 3]);
        }
        let params = ModelParams::init(small(DecoderVariant::Multi, 2), 6).unwrap();
        let before = forward(&params, &[&v], &pts).unwrap();
        let mut perturbed = params.clone();
        for t in perturbed.tensor_mut("dec0.fc0.weight").unwrap().data.iter_mut() {
            *t += 0.3;
        }
        let after = forward(&perturbed, &[&v], &pts).unwrap();
        assert_ne!(before[..3], after[..3]);
        assert_eq!(before[3..], after[3..]);
    }

    #[test]
    fn multi_decoder_gradients_are_isolated() {
        let params = ModelParams::init(small(DecoderVariant::Multi, 2), 8).unwrap();
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape, true);
        let input = tape.constant(volume_batch(&[&ramp(8)]).unwrap());
        let mut stats = params.batchnorm.clone();
        let pyr = encode(&mut tape, &params.config, &vars, input, &mut stats, BatchNormMode::Train).unwrap();
        let f = query_features(&mut tape, &pyr, &PointBatch::single(vec![[0.1, 0.2, 0.3], [0.5, 0.5, -0.5]])).unwrap();
        let out = decode(&mut tape, &params.config, &vars, f).unwrap();
        let organ1 = tape.select_channel(out, 1).unwrap();
        let l = tape.sum(organ1);
        tape.backward(l).unwrap();
        let dec0 = params.names.iter().position(|n| n == "dec0.fc0.weight").unwrap();
        assert!(tape.grad(vars[dec0]).unwrap().data.iter().all(|&g| g == 0.0));
        let dec1 = params.names.iter().position(|n| n == "dec1.fc0.weight").unwrap();
        assert!(tape.grad(vars[dec1]).unwrap().data.iter().any(|&g| g != 0.0));
    }

    #[test]
    fn loss_examples() {
        let config = small(DecoderVariant::Multi, 1);
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(vec![1, 1, 4]));
        let l = loss(&mut tape, &config, logits, &[1, 1, 1, 1]).unwrap();
        assert!((tape.value(l).data[0] - std::f32::consts::LN_2).abs() < 1e-6);

        let config = small(DecoderVariant::Multi, 2);
        let data = vec![0.3, -1.2, 2.0, 0.5, -0.4, 1.1];
        let logits = tape.constant(Tensor::new(vec![1, 2, 3], data.clone()).unwrap());
        let labels = [1u8, 0, 0, 1, 1, 1];
        let total = loss(&mut tape, &config, logits, &labels).unwrap();
        let naive = |x: f64, y: f64| {
            let s = 1.0 / (1.0 + (-x).exp());
            -(y * s.ln() + (1.0 - y) * (1.0 - s).ln())
        };
        let mut expect = 0.0;
        for organ in 0..2 {
            let mut l = 0.0;
            for j in 0..3 {
                l += naive(data[organ * 3 + j] as f64, labels[j * 2 + organ] as f64);
            }
            expect += l / 3.0;
        }
        assert!((tape.value(total).data[0] as f64 - expect).abs() < 1e-6);
    }

    #[test]
    fn single_variant_rejects_overlapping_labels() {
        let config = small(DecoderVariant::Single, 2);
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(vec![1, 3, 2]));
        assert!(matches!(
            loss(&mut tape, &config, logits, &[1, 1, 0, 0]),
            Err(Error::LabelConflict(_))
        ));
        let l = loss(&mut tape, &config, logits, &[1, 0, 0, 0]).unwrap();
        assert!((tape.value(l).data[0] - 3f32.ln()).abs() < 1e-6);
        assert!(loss(&mut tape, &small(DecoderVariant::Multi, 2), logits, &[1, 1, 0, 0]).is_err());
    }

    #[test]
    fn forward_is_deterministic_and_in_range() {
        let params = ModelParams::init(small(DecoderVariant::Single, 2), 9).unwrap();
        let pts = PointBatch::single(vec![[0.0; 3], [0.9, -0.9, 0.1], [-1.0, 1.0, 0.5]]);
        let a = forward(&params, &[&ramp(8)], &pts).unwrap();
        let b = forward(&params, &[&ramp(8)], &pts).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2 * 3);
        assert!(a.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn permuting_points_permutes_outputs() {
        let params = ModelParams::init(small(DecoderVariant::Multi, 1), 10).unwrap();
        let pts = vec![[0.1, 0.2, 0.3], [-0.4, 0.5, -0.6], [0.7, 0.8, -0.9]];
        let rev: Vec<_> = pts.iter().rev().copied().collect();
        let a = forward(&params, &[&ramp(8)], &PointBatch::single(pts)).unwrap();
        let b = forward(&params, &[&ramp(8)], &PointBatch::single(rev)).unwrap();
        assert_eq!(a, b.into_iter().rev().collect::<Vec<_>>());
    }

    #[test]
    fn fingerprint_tracks_architecture() {
        let a = ModelConfig::new(1, DecoderVariant::Multi);
        let mut b = a;
        b.encoder.base_channels = 4;
        assert_eq!(a.fingerprint(), ModelConfig::new(1, DecoderVariant::Multi).fingerprint());
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint().len(), 64);
    }
}
