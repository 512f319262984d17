//! Online test-time adaptation engines.
//!
//! Every engine consumes a stream of unlabeled samples in order and emits one
//! prediction per sample before that sample can influence the model. Labels
//! are only used afterwards, to score the trace.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, input_err, state_err, Result, TtaError};
use crate::model::{Backbone, Dataset, Prediction};
use crate::normalization::{batch_stats, ema_update_stats, Alpha, ChannelStats, NormMode};
use crate::numerics::{
    argmax, batch_softmax, cross_entropy_with_grad, entropy_with_grad, Adam, Layer, Tape, Tensor,
};
use crate::rng::{derive_rng, stream_id};
use crate::sampler::MemoryBank;
use crate::streams::StreamOrder;

/// Adaptation method, including the ablation variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Frozen source model.
    Source,
    /// Normalize with the statistics of each test batch.
    BnStats,
    /// Running statistics updated from accumulated test batches.
    Onda,
    /// Test-batch statistics plus entropy minimization of the affine parameters.
    Tent,
    /// Test-batch statistics plus cross-entropy on hard pseudo-labels.
    Pl,
    /// IABN with a prediction-balanced memory; adapts every `N` samples.
    Note,
    /// IABN adapted directly on incoming test batches.
    NoteStar,
    /// IABN inference, no adaptation.
    IabnOnly,
    /// Prediction-balanced memory driving a batch-norm backbone.
    PbrsOnly,
    /// IABN with a plain reservoir memory.
    IabnRs,
    /// Batch-norm backbone converted to IABN at test time, no adaptation.
    IabnStar,
}

impl Method {
    pub const ALL: [Method; 11] = [
        Method::Source,
        Method::BnStats,
        Method::Onda,
        Method::Tent,
        Method::Pl,
        Method::Note,
        Method::NoteStar,
        Method::IabnOnly,
        Method::PbrsOnly,
        Method::IabnRs,
        Method::IabnStar,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Source => "source",
            Method::BnStats => "bn-stats",
            Method::Onda => "onda",
            Method::Tent => "tent",
            Method::Pl => "pl",
            Method::Note => "note",
            Method::NoteStar => "note-star",
            Method::IabnOnly => "iabn-only",
            Method::PbrsOnly => "pbrs-only",
            Method::IabnRs => "iabn-rs",
            Method::IabnStar => "iabn-star",
        }
    }

    /// Whether the method runs on a backbone trained with IABN layers.
    pub fn needs_iabn_backbone(self) -> bool {
        matches!(self, Method::Note | Method::NoteStar | Method::IabnOnly | Method::IabnRs)
    }

    /// Whether the method processes the stream in fixed-size batches.
    pub fn is_batched(self) -> bool {
        matches!(self, Method::BnStats | Method::Onda | Method::Tent | Method::Pl | Method::NoteStar)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = TtaError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| TtaError::Input(format!("unknown method {s:?}")))
    }
}

/// Memory policy of the memory-based engines.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sampling {
    PredictionBalanced,
    Reservoir,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub method: Method,
    /// Memory capacity `N`; NOTE adapts once every `N` samples.
    pub memory_size: usize,
    /// EMA momentum `m` for normalization statistics.
    pub momentum: f64,
    pub learning_rate: f64,
    pub alpha: Alpha,
    pub batch_size: usize,
    /// ONDA: update the running statistics every this many batches.
    pub onda_frequency: usize,
    /// ONDA: moving-average decay.
    pub onda_decay: f64,
    /// Memory-based engines only; `false` keeps the model frozen.
    pub adapt: bool,
    pub sampling: Sampling,
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.memory_size < 2 {
            return config_err("memory size must be >= 2");
        }
        if !(self.momentum > 0.0 && self.momentum <= 1.0) {
            return config_err("momentum must lie in (0, 1]");
        }
        if !(self.learning_rate >= 0.0) {
            return config_err("learning rate must be non-negative");
        }
        if self.batch_size == 0 || self.onda_frequency == 0 {
            return config_err("batch size and ONDA frequency must be positive");
        }
        if !(self.onda_decay > 0.0 && self.onda_decay <= 1.0) {
            return config_err("ONDA decay must lie in (0, 1]");
        }
        Ok(())
    }
}

/// Default hyperparameters of `method`.
pub fn default_config(method: Method) -> AdaptConfig {
    let base = AdaptConfig {
        method,
        memory_size: 64,
        momentum: 0.01,
        learning_rate: 1e-4,
        alpha: Alpha::Finite(4.0),
        batch_size: 64,
        onda_frequency: 10,
        onda_decay: 0.1,
        adapt: true,
        sampling: Sampling::PredictionBalanced,
    };
    match method {
        Method::Tent | Method::Pl | Method::NoteStar => AdaptConfig { learning_rate: 1e-3, ..base },
        Method::IabnOnly | Method::IabnStar => AdaptConfig { adapt: false, ..base },
        Method::PbrsOnly => AdaptConfig { alpha: Alpha::Infinite, ..base },
        Method::IabnRs => AdaptConfig { sampling: Sampling::Reservoir, ..base },
        _ => base,
    }
}

/// Default configuration looked up by method name.
pub fn default_config_for(name: &str) -> Result<AdaptConfig> {
    Ok(default_config(name.parse()?))
}

/// One scored prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TraceRow {
    pub true_label: usize,
    pub predicted_label: usize,
}

/// Per-sample outcomes of a run in stream order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ErrorTrace {
    pub rows: Vec<TraceRow>,
}

impl ErrorTrace {
    pub fn push(&mut self, true_label: usize, predicted_label: usize) {
        self.rows.push(TraceRow { true_label, predicted_label });
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn correct(&self) -> Vec<bool> {
        self.rows.iter().map(|r| r.true_label == r.predicted_label).collect()
    }

    /// Error rate over the first `t` samples, for `t = 1..=len`.
    pub fn cumulative_error(&self) -> Vec<f64> {
        let mut errors = 0usize;
        self.rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                errors += usize::from(r.true_label != r.predicted_label);
                errors as f64 / (i + 1) as f64
            })
            .collect()
    }

    pub fn error_rate(&self) -> f64 {
        self.cumulative_error().last().copied().unwrap_or(0.0)
    }

    /// CSV with columns `t,true_label,predicted_label,cumulative_error`; `t` starts at 1.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| TtaError::Io(std::io::Error::other(e));
        w.write_record(["t", "true_label", "predicted_label", "cumulative_error"]).map_err(io)?;
        for (i, (r, e)) in self.rows.iter().zip(self.cumulative_error()).enumerate() {
            w.write_record([
                (i + 1).to_string(),
                r.true_label.to_string(),
                r.predicted_label.to_string(),
                crate::harness::fmt_sig(e),
            ])
            .map_err(io)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Parse a CSV written by [`ErrorTrace::write_csv`].
    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let mut trace = ErrorTrace::default();
        for rec in r.records() {
            let rec = rec.map_err(|e| TtaError::Format(e.to_string()))?;
            let field = |i: usize| -> Result<usize> {
                rec.get(i)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| TtaError::Format("malformed trace row".into()))
            };
            trace.push(field(1)?, field(2)?);
        }
        Ok(trace)
    }
}

/// Forward `x` through the backbone in evaluation mode; at every normalization
/// layer, first hand the layer input's batch statistics to `update`.
fn collect_and_update(
    backbone: &mut Backbone,
    x: &Tensor,
    mut update: impl FnMut(&mut ChannelStats, &ChannelStats) -> Result<()>,
) -> Result<()> {
    let mut h = x.clone();
    let layers = backbone.net.layers.len();
    for (i, layer) in backbone.net.layers.iter_mut().enumerate() {
        if let Layer::Norm(norm) = layer {
            let stats = batch_stats(&h);
            update(&mut norm.running, &stats)?;
        }
        if i + 1 < layers {
            h = layer.forward(i, &h, NormMode::Eval, None)?;
        }
    }
    Ok(())
}

/// Freeze everything except normalization affine parameters.
fn freeze_to_affine(backbone: &mut Backbone) -> Adam {
    backbone.net.set_trainable(|l| matches!(l, Layer::Norm(_)));
    Adam::new(&backbone.net.param_shapes())
}

/// One entropy-minimization step on `x` under `mode`; returns the logits of the
/// forward pass used for the step.
fn entropy_step(backbone: &mut Backbone, adam: &mut Adam, x: &Tensor, mode: NormMode, lr: f64) -> Result<Tensor> {
    let mut tape = Tape::new();
    let logits = backbone.forward(x, mode, Some(&mut tape))?;
    let (_, grad) = entropy_with_grad(&logits)?;
    let grads = backbone.net.backward(&tape, grad)?;
    backbone.net.adam_step(adam, &grads, lr)?;
    Ok(logits)
}

/// NOTE: batch-free IABN inference feeding a memory that drives periodic
/// adaptation of normalization statistics and affine parameters.
#[derive(Clone, Debug)]
pub struct NoteState {
    pub backbone: Backbone,
    pub memory: MemoryBank<Tensor>,
    pub adam: Adam,
    pub config: AdaptConfig,
    seen: u64,
    adaptations: u64,
}

impl NoteState {
    pub fn new(mut backbone: Backbone, config: AdaptConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if !backbone.is_instance_aware() {
            return config_err("NOTE needs a backbone with IABN layers");
        }
        let adam = freeze_to_affine(&mut backbone);
        let memory = MemoryBank::new(config.memory_size, backbone.classes(), derive_rng(seed, stream_id::MEMORY));
        Ok(Self { backbone, memory, adam, config, seen: 0, adaptations: 0 })
    }

    pub fn samples_seen(&self) -> u64 {
        self.seen
    }

    pub fn adaptations(&self) -> u64 {
        self.adaptations
    }

    /// Predict one sample, store it according to the memory policy, and adapt
    /// once every `N` samples. The prediction never depends on `x` having been stored.
    pub fn infer(&mut self, x: &Tensor) -> Result<Prediction> {
        let pred = self.backbone.predict(x)?;
        if !self.config.adapt {
            self.seen += 1;
            return Ok(pred);
        }
        match self.config.sampling {
            Sampling::PredictionBalanced => self.memory.pbrs_insert(x.clone(), pred.class)?,
            Sampling::Reservoir => self.memory.rs_insert(x.clone(), pred.class)?,
        };
        self.seen += 1;
        if self.seen.is_multiple_of(self.config.memory_size as u64) {
            self.adapt_step()?;
        }
        Ok(pred)
    }

    /// EMA update of every IABN layer's running statistics from the memory
    /// batch, then one entropy-minimization step on the affine parameters.
    pub fn adapt_step(&mut self) -> Result<()> {
        let (x, _) = self.memory.batch()?;
        let (m, n) = (self.config.momentum, self.config.memory_size);
        collect_and_update(&mut self.backbone, &x, |running, stats| ema_update_stats(running, stats, m, n))?;
        entropy_step(&mut self.backbone, &mut self.adam, &x, NormMode::Eval, self.config.learning_rate)?;
        self.adaptations += 1;
        Ok(())
    }
}

/// Result of one adaptation run.
#[derive(Clone, Debug)]
pub struct TtaRun {
    pub trace: ErrorTrace,
    /// Model state after the last sample.
    pub backbone: Backbone,
    pub adaptations: u64,
}

fn check_backbone(method: Method, backbone: &Backbone) -> Result<()> {
    if method.needs_iabn_backbone() != backbone.is_instance_aware() {
        let want = if method.needs_iabn_backbone() { "IABN" } else { "batch-norm" };
        return config_err(format!("{method} needs a {want} backbone"));
    }
    Ok(())
}

/// Run `method` over `data` presented in `order`.
pub fn run_tta(
    method: Method,
    backbone: &Backbone,
    data: &Dataset,
    order: &StreamOrder,
    config: &AdaptConfig,
    seed: u64,
) -> Result<TtaRun> {
    config.validate()?;
    check_backbone(method, backbone)?;
    if order.is_empty() {
        return input_err("empty stream");
    }
    if let Some(&bad) = order.indices().iter().find(|&&i| i >= data.len()) {
        return input_err(format!("stream index {bad} out of range"));
    }
    if method.is_batched() && order.len() < config.batch_size {
        return input_err(format!(
            "{method} needs at least one full batch of {} samples, stream has {}",
            config.batch_size,
            order.len()
        ));
    }
    let mut model = backbone.clone();
    let mut trace = ErrorTrace::default();
    let mut adaptations = 0;
    match method {
        Method::Source | Method::IabnStar => {
            if method == Method::IabnStar {
                model.convert_bn_to_iabn(config.alpha)?;
            }
            for &i in order.indices() {
                trace.push(data.labels[i], model.predict(&data.sample(i))?.class);
            }
        }
        Method::Note | Method::IabnOnly | Method::IabnRs | Method::PbrsOnly => {
            if method == Method::PbrsOnly {
                model.convert_bn_to_iabn(Alpha::Infinite)?;
            }
            let mut state = NoteState::new(model, config.clone(), seed)?;
            for &i in order.indices() {
                trace.push(data.labels[i], state.infer(&data.sample(i))?.class);
            }
            adaptations = state.adaptations();
            model = state.backbone;
        }
        Method::BnStats | Method::Onda | Method::Tent | Method::Pl | Method::NoteStar => {
            let mut adam = freeze_to_affine(&mut model);
            let mut pending: Vec<Tensor> = Vec::new();
            for (batch_no, chunk) in order.indices().chunks(config.batch_size).enumerate() {
                let (x, labels) = data.gather(chunk)?;
                let predicted: Vec<usize> = match method {
                    Method::BnStats => {
                        batch_softmax(&model.logits(&x, NormMode::TestBatch)?).iter().map(|p| argmax(p)).collect()
                    }
                    Method::Tent => {
                        let logits = entropy_step(&mut model, &mut adam, &x, NormMode::TestBatch, config.learning_rate)?;
                        adaptations += 1;
                        batch_softmax(&logits).iter().map(|p| argmax(p)).collect()
                    }
                    Method::Pl => {
                        let mut tape = Tape::new();
                        let logits = model.forward(&x, NormMode::TestBatch, Some(&mut tape))?;
                        let pseudo: Vec<usize> = batch_softmax(&logits).iter().map(|p| argmax(p)).collect();
                        let (_, grad) = cross_entropy_with_grad(&logits, &pseudo)?;
                        let grads = model.net.backward(&tape, grad)?;
                        model.net.adam_step(&mut adam, &grads, config.learning_rate)?;
                        adaptations += 1;
                        pseudo
                    }
                    Method::Onda => {
                        let preds = batch_softmax(&model.logits(&x, NormMode::Eval)?)
                            .iter()
                            .map(|p| argmax(p))
                            .collect();
                        pending.extend(chunk.iter().map(|&i| data.sample(i)));
                        if (batch_no + 1) % config.onda_frequency == 0 {
                            let acc = Tensor::stack(&pending)?;
                            let decay = config.onda_decay;
                            collect_and_update(&mut model, &acc, |running, stats| {
                                for c in 0..running.channels() {
                                    running.mean[c] = (1.0 - decay) * running.mean[c] + decay * stats.mean[c];
                                    running.var[c] = (1.0 - decay) * running.var[c] + decay * stats.var[c];
                                }
                                Ok(())
                            })?;
                            pending.clear();
                            adaptations += 1;
                        }
                        preds
                    }
                    Method::NoteStar => {
                        let preds = batch_softmax(&model.logits(&x, NormMode::Eval)?)
                            .iter()
                            .map(|p| argmax(p))
                            .collect();
                        if x.batch() >= 2 {
                            let (m, n) = (config.momentum, x.batch());
                            collect_and_update(&mut model, &x, |running, stats| ema_update_stats(running, stats, m, n))?;
                            entropy_step(&mut model, &mut adam, &x, NormMode::Eval, config.learning_rate)?;
                            adaptations += 1;
                        }
                        preds
                    }
                    _ => unreachable!("non-batched method in batched branch"),
                };
                for (y, p) in labels.into_iter().zip(predicted) {
                    trace.push(y, p);
                }
            }
        }
    }
    if trace.len() != order.len() {
        return state_err("trace length does not match the stream");
    }
    Ok(TtaRun { trace, backbone: model, adaptations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{gen_synthetic_dataset, Split, SyntheticTaskSpec};
    use crate::model::{BackboneConfig, TrainConfig};
    use crate::normalization::NormKind;
    use crate::numerics::entropy_loss;
    use crate::streams::{make_iid_stream, make_sorted_stream};

    fn task() -> SyntheticTaskSpec {
        SyntheticTaskSpec { source_per_class: 30, target_per_class: 20, ..Default::default() }
    }

    fn trained(iabn: bool, seed: u64) -> Backbone {
        let norm = if iabn { NormKind::InstanceAware { alpha: Alpha::Finite(4.0) } } else { NormKind::Batch };
        let mut b = Backbone::build(BackboneConfig::default().with_norm(norm), seed).unwrap();
        let src = gen_synthetic_dataset(&task(), Split::Source, seed).unwrap();
        b.train_source(&src, &TrainConfig { epochs: 3, ..Default::default() }, seed).unwrap();
        b
    }

    fn target(seed: u64) -> Dataset {
        gen_synthetic_dataset(&task(), Split::Target, seed).unwrap()
    }

    fn run(method: Method, b: &Backbone, data: &Dataset, order: &StreamOrder, cfg: &AdaptConfig) -> TtaRun {
        run_tta(method, b, data, order, cfg, 0).unwrap()
    }

    #[test]
    fn default_hyperparameters() {
        let note = default_config(Method::Note);
        assert_eq!((note.memory_size, note.momentum, note.learning_rate), (64, 0.01, 1e-4));
        assert_eq!(note.alpha, Alpha::Finite(4.0));
        assert_eq!(note.sampling, Sampling::PredictionBalanced);
        assert!(note.adapt);
        assert_eq!(default_config(Method::Tent).learning_rate, 1e-3);
        assert_eq!(default_config(Method::Pl).learning_rate, 1e-3);
        assert_eq!(default_config(Method::Tent).batch_size, 64);
        assert_eq!(default_config(Method::Onda).onda_frequency, 10);
        assert_eq!(default_config(Method::Onda).onda_decay, 0.1);
        assert!(!default_config(Method::IabnOnly).adapt);
        assert_eq!(default_config(Method::IabnRs).sampling, Sampling::Reservoir);
        assert_eq!(default_config(Method::PbrsOnly).alpha, Alpha::Infinite);
        for m in Method::ALL {
            default_config(m).validate().unwrap();
        }
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!(matches!(default_config_for("lame"), Err(TtaError::Input(_))));
    }

    #[test]
    fn note_adapts_once_per_memory_fill() {
        let b = trained(true, 0);
        let data = target(0);
        let mut state = NoteState::new(b, default_config(Method::Note), 0).unwrap();
        for i in 0..200 {
            state.infer(&data.sample(i)).unwrap();
            assert_eq!(state.adaptations(), (i as u64 + 1) / 64);
        }
        assert_eq!(state.samples_seen(), 200);
    }

    #[test]
    fn note_needs_iabn_backbone() {
        assert!(matches!(NoteState::new(trained(false, 0), default_config(Method::Note), 0), Err(TtaError::Config(_))));
        let data = target(0);
        let order = make_iid_stream(data.len(), 0);
        let cfg = default_config(Method::Note);
        assert!(run_tta(Method::Note, &trained(false, 0), &data, &order, &cfg, 0).is_err());
        assert!(run_tta(Method::Tent, &trained(true, 0), &data, &order, &cfg, 0).is_err());
    }

    fn changed_scalars(a: &Backbone, b: &Backbone) -> (usize, bool) {
        let mut count = 0;
        let mut only_affine = true;
        for (la, lb) in a.net.layers.iter().zip(&b.net.layers) {
            for (pa, pb) in la.params().iter().zip(lb.params()) {
                let diff = pa.value.iter().zip(pb.value.iter()).filter(|(x, y)| x.to_bits() != y.to_bits()).count();
                count += diff;
                only_affine &= diff == 0 || matches!(la, Layer::Norm(_));
            }
        }
        (count, only_affine)
    }

    #[test]
    fn note_touches_only_affine_parameters_and_stats() {
        let b = trained(true, 1);
        let data = target(1);
        let order = make_iid_stream(data.len(), 1);
        let after = run(Method::Note, &b, &data, &order, &default_config(Method::Note)).backbone;
        let (count, only_affine) = changed_scalars(&b, &after);
        assert!(only_affine);
        assert_eq!(count, 2 * b.norm_channels());
        let moved = b.norm_layers().zip(after.norm_layers()).all(|(x, y)| x.running != y.running);
        assert!(moved);

        let frozen = AdaptConfig { learning_rate: 0.0, ..default_config(Method::Note) };
        let after = run(Method::Note, &b, &data, &order, &frozen).backbone;
        assert_eq!(changed_scalars(&b, &after).0, 0);
        assert!(b.norm_layers().zip(after.norm_layers()).all(|(x, y)| x.running != y.running));
    }

    #[test]
    fn predictions_never_see_the_future() {
        let b = trained(true, 2);
        let data = target(2);
        let a = make_iid_stream(data.len(), 2);
        let mut alt = a.clone();
        alt.0[150..].reverse();
        for m in [Method::Note, Method::IabnRs] {
            let cfg = default_config(m);
            let ta = run(m, &b, &data, &a, &cfg).trace;
            let tb = run(m, &b, &data, &alt, &cfg).trace;
            assert_eq!(ta.rows[..150], tb.rows[..150]);
        }
        let bn = trained(false, 2);
        for m in [Method::BnStats, Method::Tent, Method::Onda] {
            let cfg = default_config(m);
            let ta = run(m, &bn, &data, &a, &cfg).trace;
            let tb = run(m, &bn, &data, &alt, &cfg).trace;
            assert_eq!(ta.rows[..128], tb.rows[..128]);
        }
    }

    #[test]
    fn entropy_step_lowers_batch_entropy() {
        let mut improved = 0;
        for seed in 0..50 {
            let mut b = Backbone::build(
                BackboneConfig::default().with_norm(NormKind::InstanceAware { alpha: Alpha::Finite(4.0) }),
                seed,
            )
            .unwrap();
            for norm in b.norm_layers_mut() {
                let stats = ChannelStats::standard(norm.channels());
                norm.set_running(stats).unwrap();
            }
            let data = target(seed);
            let (x, _) = data.gather(&make_iid_stream(data.len(), seed).0[..32]).unwrap();
            let mut adam = freeze_to_affine(&mut b);
            let h = |b: &Backbone| entropy_loss(&batch_softmax(&b.logits(&x, NormMode::Eval).unwrap())).unwrap();
            let before = h(&b);
            entropy_step(&mut b, &mut adam, &x, NormMode::Eval, 1e-3).unwrap();
            improved += usize::from(h(&b) <= before);
        }
        assert!(improved >= 45, "{improved}/50");
    }

    #[test]
    fn source_is_order_free() {
        let b = trained(false, 3);
        let data = target(3);
        let cfg = default_config(Method::Source);
        let by_index = |order: &StreamOrder| {
            let trace = run(Method::Source, &b, &data, order, &cfg).trace;
            let mut out = vec![0; data.len()];
            for (&i, r) in order.indices().iter().zip(&trace.rows) {
                out[i] = r.predicted_label;
            }
            out
        };
        assert_eq!(by_index(&make_iid_stream(data.len(), 3)), by_index(&make_sorted_stream(&data.labels)));
    }

    #[test]
    fn bn_stats_depends_on_order() {
        let b = trained(false, 3);
        let data = target(3);
        let cfg = default_config(Method::BnStats);
        let iid = make_iid_stream(data.len(), 3);
        let sorted = make_sorted_stream(&data.labels);
        let by_index = |order: &StreamOrder| {
            let trace = run(Method::BnStats, &b, &data, order, &cfg).trace;
            let mut out = vec![0; data.len()];
            for (&i, r) in order.indices().iter().zip(&trace.rows) {
                out[i] = r.predicted_label;
            }
            out
        };
        assert_ne!(by_index(&iid), by_index(&sorted));
    }

    #[test]
    fn degenerate_methods_coincide() {
        let bn = trained(false, 4);
        let iabn = trained(true, 4);
        let data = target(4);
        let order = make_iid_stream(data.len(), 4);
        let tent = AdaptConfig { learning_rate: 0.0, ..default_config(Method::Tent) };
        assert_eq!(
            run(Method::Tent, &bn, &data, &order, &tent).trace,
            run(Method::BnStats, &bn, &data, &order, &default_config(Method::BnStats)).trace
        );
        let never = AdaptConfig { memory_size: 1_000_000, ..default_config(Method::Note) };
        let note = run(Method::Note, &iabn, &data, &order, &never);
        assert_eq!(note.adaptations, 0);
        assert_eq!(note.trace, run(Method::IabnOnly, &iabn, &data, &order, &default_config(Method::IabnOnly)).trace);
    }

    #[test]
    fn short_stream_for_batched_method_is_rejected() {
        let b = trained(false, 5);
        let data = target(5);
        let order = StreamOrder((0..10).collect());
        for m in Method::ALL.into_iter().filter(|m| m.is_batched()) {
            let backbone = if m.needs_iabn_backbone() { trained(true, 5) } else { b.clone() };
            assert!(matches!(
                run_tta(m, &backbone, &data, &order, &default_config(m), 0),
                Err(TtaError::Input(_))
            ));
        }
        assert!(matches!(
            run_tta(Method::Source, &b, &data, &StreamOrder(vec![data.len()]), &default_config(Method::Source), 0),
            Err(TtaError::Input(_))
        ));
    }

    #[test]
    fn every_method_scores_every_sample() {
        let bn = trained(false, 6);
        let iabn = trained(true, 6);
        let data = target(6);
        let order = make_iid_stream(data.len(), 6);
        for m in Method::ALL {
            let b = if m.needs_iabn_backbone() { &iabn } else { &bn };
            let r = run(m, b, &data, &order, &default_config(m));
            assert_eq!(r.trace.len(), data.len(), "{m}");
            assert!(r.trace.rows.iter().all(|row| row.predicted_label < 10));
        }
    }

    #[test]
    fn trace_csv_layout_and_round_trip() {
        let mut t = ErrorTrace::default();
        t.push(1, 1);
        t.push(2, 0);
        t.push(0, 0);
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf.clone()).unwrap(),
            "t,true_label,predicted_label,cumulative_error\n1,1,1,0\n2,2,0,0.500000000\n3,0,0,0.333333333\n"
        );
        assert_eq!(ErrorTrace::read_csv(&buf[..]).unwrap(), t);
        assert!(matches!(ErrorTrace::read_csv("t,a\n1,x\n".as_bytes()), Err(TtaError::Format(_))));
        assert_eq!(t.cumulative_error(), vec![0.0, 0.5, 1.0 / 3.0]);
    }
}
