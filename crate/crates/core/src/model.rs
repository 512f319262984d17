//! 1D-convolutional backbone with pluggable normalization, source training
//! and a binary checkpoint format.
//!
//! # Checkpoint layout
//!
//! All integers little-endian.
//!
//! ```text
//! magic     8 bytes   "TTACKPT\0"
//! version   u32       1
//! sections  u32       number of sections that follow
//! section   tag [u8; 4] | length u64 | payload (length bytes)
//! ```
//!
//! Sections, in this order:
//!
//! * `ARCH` – UTF-8 JSON [`BackboneConfig`] plus the per-norm-layer tracking flags.
//! * `META` – UTF-8 JSON [`TrainingMeta`].
//! * `PARM` – every parameter vector in network order as `f64` values.
//! * `STAT` – for each normalization layer in network order, running means then running variances, as `f64`.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, input_err, state_err, Result, TtaError};
use crate::normalization::{Alpha, ChannelStats, NormKind, NormLayer, NormMode};
use crate::numerics::{
    argmax, batch_softmax, cross_entropy_with_grad, Conv1dLayer, DenseLayer, Layer, Sequential,
    Tape, Tensor,
};
use crate::rng::{derive_rng, stream_id};

const MAGIC: &[u8; 8] = b"TTACKPT\0";
const VERSION: u32 = 1;

/// Architecture of a [`Backbone`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub input_channels: usize,
    pub input_len: usize,
    /// Output channels of each `conv -> norm -> relu` block.
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    pub classes: usize,
    pub norm: NormKind,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_channels: 1,
            input_len: 32,
            conv_channels: vec![8, 16],
            kernel: 5,
            classes: 10,
            norm: NormKind::Batch,
        }
    }
}

impl BackboneConfig {
    pub fn with_norm(mut self, norm: NormKind) -> Self {
        self.norm = norm;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.classes < 2 || self.conv_channels.is_empty() {
            return config_err("backbone needs input channels, >= 2 classes and >= 1 conv block");
        }
        if self.conv_channels.contains(&0) || self.kernel == 0 {
            return config_err("conv widths and kernel must be positive");
        }
        let blocks = self.conv_channels.len();
        if self.input_len < blocks * (self.kernel - 1) + 2 {
            return config_err(format!(
                "input length {} too short for {blocks} conv blocks of kernel {}",
                self.input_len, self.kernel
            ));
        }
        Ok(())
    }
}

/// Labeled samples stored as one `N x C x L` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if labels.len() != inputs.batch() {
            return config_err(format!("{} labels for {} samples", labels.len(), inputs.batch()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return input_err(format!("label {bad} out of range for {classes} classes"));
        }
        Ok(Self { inputs, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample(&self, i: usize) -> Tensor {
        self.inputs.sample(i)
    }

    pub fn gather(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let samples: Vec<Tensor> = idx.iter().map(|&i| self.inputs.sample(i)).collect();
        Ok((Tensor::stack(&samples)?, idx.iter().map(|&i| self.labels[i]).collect()))
    }
}

/// Provenance stored alongside the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub final_train_accuracy: Option<f64>,
}

/// Source-training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 15, learning_rate: 0.05, momentum: 0.9, batch_size: 32, weight_decay: 5e-4 }
    }
}

/// Prediction for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub class: usize,
    pub probabilities: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub net: Sequential,
}

impl Backbone {
    /// Freshly initialized backbone; identical seeds give identical parameters.
    pub fn build(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if let NormKind::InstanceAware { alpha: Alpha::Finite(a) } = config.norm {
            Alpha::new(a)?;
        }
        let mut rng = derive_rng(seed, stream_id::INIT);
        let mut layers = Vec::new();
        let mut in_ch = config.input_channels;
        for &out in &config.conv_channels {
            layers.push(Layer::Conv1d(Conv1dLayer::new(in_ch, out, config.kernel, 1, &mut rng)));
            layers.push(Layer::Norm(NormLayer::with_kind(out, config.norm)));
            layers.push(Layer::Relu);
            in_ch = out;
        }
        layers.push(Layer::GlobalAvgPool);
        layers.push(Layer::Dense(DenseLayer::new(in_ch, config.classes, &mut rng)));
        Ok(Self { config, net: Sequential::new(layers) })
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    pub fn norm_layers(&self) -> impl Iterator<Item = &NormLayer> {
        self.net.layers.iter().filter_map(|l| match l {
            Layer::Norm(n) => Some(n),
            _ => None,
        })
    }

    pub fn norm_layers_mut(&mut self) -> impl Iterator<Item = &mut NormLayer> {
        self.net.layers.iter_mut().filter_map(|l| match l {
            Layer::Norm(n) => Some(n),
            _ => None,
        })
    }

    pub fn is_instance_aware(&self) -> bool {
        self.norm_layers().all(|n| n.kind.is_instance_aware())
    }

    /// Number of normalization channels summed over layers.
    pub fn norm_channels(&self) -> usize {
        self.norm_layers().map(NormLayer::channels).sum()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.channels() != self.config.input_channels || x.len() != self.config.input_len {
            return config_err(format!(
                "backbone expects {}x{} inputs, got {}x{}",
                self.config.input_channels,
                self.config.input_len,
                x.channels(),
                x.len()
            ));
        }
        Ok(())
    }

    fn check_tracked(&self) -> Result<()> {
        if self.norm_layers().any(|n| !n.tracked) {
            return state_err("normalization running statistics were never estimated");
        }
        Ok(())
    }

    /// Logits, recording onto `tape` when given. Training mode updates running statistics.
    pub fn forward(&mut self, x: &Tensor, mode: NormMode, tape: Option<&mut Tape>) -> Result<Tensor> {
        self.check_input(x)?;
        self.net.forward(x, mode, tape)
    }

    /// Logits without touching any state.
    pub fn logits(&self, x: &Tensor, mode: NormMode) -> Result<Tensor> {
        self.check_input(x)?;
        self.net.infer(x, mode)
    }

    /// Per-sample predictions. IABN and evaluation-mode BN work at any batch
    /// size, including one; test-batch mode needs at least two samples,
    /// because a lone sample's batch statistics are its own instance statistics.
    pub fn predict_batch(&self, x: &Tensor, mode: NormMode) -> Result<Vec<Prediction>> {
        self.check_tracked()?;
        if mode == NormMode::TestBatch && x.batch() < 2 {
            return state_err("test-batch normalization is degenerate for a single sample");
        }
        let logits = self.logits(x, mode)?;
        Ok(batch_softmax(&logits)
            .into_iter()
            .map(|p| Prediction { class: argmax(&p), probabilities: p })
            .collect())
    }

    /// Batch-free prediction of a single `1 x C x L` sample.
    pub fn predict(&self, x: &Tensor) -> Result<Prediction> {
        if x.batch() != 1 {
            return input_err("predict takes exactly one sample");
        }
        Ok(self.predict_batch(x, NormMode::Eval)?.remove(0))
    }

    /// Replace every batch-norm layer by IABN with the given width, keeping
    /// affine parameters and running statistics.
    pub fn convert_bn_to_iabn(&mut self, alpha: Alpha) -> Result<()> {
        self.check_tracked()?;
        for n in self.norm_layers_mut() {
            n.kind = NormKind::InstanceAware { alpha };
        }
        self.config.norm = NormKind::InstanceAware { alpha };
        Ok(())
    }

    /// Source training: SGD with momentum, cosine-annealed learning rate,
    /// cross-entropy loss, training-mode normalization. Returns the final
    /// epoch's training accuracy.
    pub fn train_source(&mut self, data: &Dataset, cfg: &TrainConfig, seed: u64) -> Result<f64> {
        if data.is_empty() {
            return input_err("cannot train on an empty dataset");
        }
        if data.classes != self.classes() {
            return config_err("dataset and backbone disagree on the class count");
        }
        if cfg.batch_size < 2 {
            return config_err("training batches need at least two samples");
        }
        self.net.set_trainable(|_| true);
        let mut rng = derive_rng(seed, stream_id::TRAIN);
        let mut velocity: Vec<Vec<f64>> = self.net.param_shapes().iter().map(|&n| vec![0.0; n]).collect();
        let mut tape = Tape::new();
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut accuracy = 0.0;
        let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
        let total_steps = (cfg.epochs * steps_per_epoch).max(1);
        let mut step = 0;
        for _epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut correct = 0usize;
            for chunk in order.chunks(cfg.batch_size) {
                if chunk.len() < 2 {
                    continue;
                }
                let lr = 0.5 * cfg.learning_rate
                    * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos());
                step += 1;
                let (x, y) = data.gather(chunk)?;
                let logits = self.forward(&x, NormMode::Train, Some(&mut tape))?;
                let (loss, grad) = cross_entropy_with_grad(&logits, &y)?;
                if !loss.is_finite() {
                    return Err(TtaError::Numeric("training loss diverged".into()));
                }
                correct += batch_softmax(&logits)
                    .iter()
                    .zip(&y)
                    .filter(|(p, &t)| argmax(p) == t)
                    .count();
                let grads = self.net.backward(&tape, grad)?;
                for ((p, g), v) in self.net.params_mut().into_iter().zip(&grads.params).zip(&mut velocity) {
                    let Some(g) = g else { continue };
                    for j in 0..p.value.len() {
                        v[j] = cfg.momentum * v[j] + g[j] + cfg.weight_decay * p.value[j];
                        p.value[j] -= lr * v[j];
                    }
                }
            }
            accuracy = correct as f64 / data.len() as f64;
        }
        Ok(accuracy)
    }

    /// Fraction of correctly classified samples under `mode`.
    pub fn accuracy(&self, data: &Dataset, mode: NormMode) -> Result<f64> {
        let preds = self.predict_batch(&data.inputs, mode)?;
        let correct = preds.iter().zip(&data.labels).filter(|(p, &y)| p.class == y).count();
        Ok(correct as f64 / data.len() as f64)
    }
}

#[derive(Serialize, Deserialize)]
struct ArchSection {
    config: BackboneConfig,
    tracked: Vec<bool>,
}

/// A trained backbone plus provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub backbone: Backbone,
    pub meta: TrainingMeta,
}

fn write_section<W: Write>(out: &mut W, tag: &[u8; 4], payload: &[u8]) -> Result<()> {
    out.write_all(tag)?;
    out.write_all(&(payload.len() as u64).to_le_bytes())?;
    out.write_all(payload)?;
    Ok(())
}

fn f64_blob(values: impl Iterator<Item = f64>) -> Vec<u8> {
    values.flat_map(f64::to_le_bytes).collect()
}

fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(TtaError::Format(msg.into()))
}

fn read_exact_vec<R: Read>(input: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    input.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => TtaError::Format("checkpoint truncated".into()),
        _ => TtaError::Io(e),
    })?;
    Ok(buf)
}

struct F64Reader<'a> {
    bytes: &'a [u8],
}

impl F64Reader<'_> {
    fn take(&mut self, n: usize) -> Result<Vec<f64>> {
        if self.bytes.len() < n * 8 {
            return format_err("parameter section too short");
        }
        let (head, rest) = self.bytes.split_at(n * 8);
        self.bytes = rest;
        Ok(head.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        let bb = &self.backbone;
        let arch = ArchSection {
            config: bb.config.clone(),
            tracked: bb.norm_layers().map(|n| n.tracked).collect(),
        };
        let arch = serde_json::to_vec(&arch).map_err(|e| TtaError::Format(e.to_string()))?;
        let meta = serde_json::to_vec(&self.meta).map_err(|e| TtaError::Format(e.to_string()))?;
        let params = f64_blob(bb.net.params().into_iter().flat_map(|p| p.value.iter().copied()));
        let stats = f64_blob(
            bb.norm_layers()
                .flat_map(|n| n.running.mean.iter().chain(&n.running.var).copied().collect::<Vec<_>>()),
        );
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&4u32.to_le_bytes())?;
        write_section(&mut out, b"ARCH", &arch)?;
        write_section(&mut out, b"META", &meta)?;
        write_section(&mut out, b"PARM", &params)?;
        write_section(&mut out, b"STAT", &stats)?;
        out.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let magic = read_exact_vec(&mut input, 8)?;
        if magic != MAGIC {
            return format_err("not a checkpoint file (bad magic)");
        }
        let version = u32::from_le_bytes(read_exact_vec(&mut input, 4)?.try_into().unwrap());
        if version != VERSION {
            return format_err(format!("unsupported checkpoint version {version}"));
        }
        let count = u32::from_le_bytes(read_exact_vec(&mut input, 4)?.try_into().unwrap());
        let mut sections = std::collections::HashMap::new();
        for _ in 0..count {
            let tag: [u8; 4] = read_exact_vec(&mut input, 4)?.try_into().unwrap();
            let len = u64::from_le_bytes(read_exact_vec(&mut input, 8)?.try_into().unwrap());
            let payload = read_exact_vec(&mut input, len as usize)?;
            sections.insert(tag, payload);
        }
        let section = |tag: &[u8; 4]| {
            sections
                .get(tag)
                .ok_or_else(|| TtaError::Format(format!("missing {} section", String::from_utf8_lossy(tag))))
        };
        let arch: ArchSection =
            serde_json::from_slice(section(b"ARCH")?).map_err(|e| TtaError::Format(e.to_string()))?;
        let meta: TrainingMeta =
            serde_json::from_slice(section(b"META")?).map_err(|e| TtaError::Format(e.to_string()))?;
        let mut backbone = Backbone::build(arch.config, 0)?;
        let mut params = F64Reader { bytes: section(b"PARM")? };
        for p in backbone.net.params_mut() {
            let n = p.value.len();
            p.value = params.take(n)?;
        }
        if !params.bytes.is_empty() {
            return format_err("parameter section has trailing data");
        }
        let mut stats = F64Reader { bytes: section(b"STAT")? };
        let norms: Vec<&mut NormLayer> = backbone.norm_layers_mut().collect();
        if norms.len() != arch.tracked.len() {
            return format_err("tracking flags do not match the architecture");
        }
        for (n, tracked) in norms.into_iter().zip(arch.tracked) {
            let c = n.channels();
            let mean = stats.take(c)?;
            let var = stats.take(c)?;
            n.running = ChannelStats { mean, var };
            n.tracked = tracked;
        }
        if !stats.bytes.is_empty() {
            return format_err("statistics section has trailing data");
        }
        Ok(Self { backbone, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
