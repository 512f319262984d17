use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::fmt_sig;
use super::synthetic::{gen_synthetic_dataset, Split, SyntheticTaskSpec};
use crate::adapt::{default_config, run_tta, AdaptConfig, ErrorTrace, Method};
use crate::error::{config_err, Result, TtaError};
use crate::model::{Backbone, BackboneConfig, Checkpoint, Dataset, TrainConfig, TrainingMeta};
use crate::normalization::{Alpha, NormKind};
use crate::streams::{make_dirichlet_stream, make_iid_stream, make_sorted_stream, StreamOrder, StreamSpec};

pub const CONFIG_VERSION: u32 = 1;

/// Concentrations visited by the delta sweep.
pub const SWEEP_DELTAS: [f64; 4] = [10.0, 1.0, 0.1, 0.01];
/// Batch sizes visited by the batch-size sweep. NOTE's memory follows the batch size.
pub const SWEEP_BATCH_SIZES: [usize; 4] = [16, 32, 64, 128];

/// How a stream orders the target split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum StreamKind {
    Dirichlet { delta: f64 },
    Iid,
    Sorted,
}

impl StreamKind {
    pub fn name(&self) -> &'static str {
        match self {
            StreamKind::Dirichlet { .. } => "dirichlet",
            StreamKind::Iid => "iid",
            StreamKind::Sorted => "sorted",
        }
    }

    pub fn delta(&self) -> Option<f64> {
        match self {
            StreamKind::Dirichlet { delta } => Some(*delta),
            _ => None,
        }
    }

    /// File-name friendly label, e.g. `dirichlet-0.1`.
    pub fn label(&self) -> String {
        match self.delta() {
            Some(d) => format!("{}-{d}", self.name()),
            None => self.name().to_string(),
        }
    }

    /// Order `labels`. `tokens` defaults to the number of classes for Dirichlet streams.
    pub fn build(&self, labels: &[usize], tokens: Option<usize>, seed: u64) -> Result<StreamOrder> {
        match *self {
            StreamKind::Dirichlet { delta } => {
                let classes = labels.iter().max().map_or(0, |&c| c + 1);
                let spec = StreamSpec::uniform(delta, tokens.unwrap_or(classes), seed);
                make_dirichlet_stream(labels, &spec)
            }
            StreamKind::Iid => Ok(make_iid_stream(labels.len(), seed)),
            StreamKind::Sorted => Ok(make_sorted_stream(labels)),
        }
    }
}

/// Architecture of the source models; input shape and class count come from the task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    /// Shrinkage confidence of IABN backbones and of test-time conversion.
    pub alpha: Alpha,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        let d = BackboneConfig::default();
        Self { conv_channels: d.conv_channels, kernel: d.kernel, alpha: Alpha::Finite(4.0) }
    }
}

impl BackboneSpec {
    pub fn config(&self, task: &SyntheticTaskSpec, instance_aware: bool) -> BackboneConfig {
        let norm = if instance_aware {
            NormKind::InstanceAware { alpha: self.alpha }
        } else {
            NormKind::Batch
        };
        BackboneConfig {
            input_channels: task.channels,
            input_len: task.length,
            conv_channels: self.conv_channels.clone(),
            kernel: self.kernel,
            classes: task.classes,
            norm,
        }
    }
}

fn default_streams() -> Vec<StreamKind> {
    vec![StreamKind::Iid, StreamKind::Dirichlet { delta: 0.1 }]
}

/// JSON experiment description. Only `version`, `methods`, `seeds` and
/// `output_dir` are required; everything else falls back to the desk-scale defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    #[serde(default)]
    pub task: SyntheticTaskSpec,
    #[serde(default)]
    pub backbone: BackboneSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_streams")]
    pub streams: Vec<StreamKind>,
    /// Dirichlet token count; defaults to the number of classes.
    #[serde(default)]
    pub tokens: Option<usize>,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Load source models from here instead of training them.
    #[serde(default)]
    pub checkpoint_dir: Option<PathBuf>,
    /// Overrides every method's batch size and NOTE's memory size.
    #[serde(default)]
    pub batch_size: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            task: SyntheticTaskSpec::default(),
            backbone: BackboneSpec::default(),
            train: TrainConfig::default(),
            streams: default_streams(),
            tokens: None,
            methods: Method::ALL.to_vec(),
            seeds: vec![0, 1, 2],
            output_dir: PathBuf::from("results"),
            checkpoint_dir: None,
            batch_size: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return config_err(format!("unsupported config version {} (expected {CONFIG_VERSION})", self.version));
        }
        if self.seeds.is_empty() || self.methods.is_empty() || self.streams.is_empty() {
            return config_err("seeds, methods and streams must be non-empty");
        }
        if self.tokens == Some(0) {
            return config_err("tokens must be positive");
        }
        if let Some(b) = self.batch_size {
            if b < 2 {
                return config_err("batch size must be >= 2");
            }
        }
        for s in &self.streams {
            if let Some(d) = s.delta() {
                if !(d > 0.0 && d.is_finite()) {
                    return config_err("dirichlet delta must be positive and finite");
                }
            }
        }
        self.task.validate()?;
        self.backbone.config(&self.task, true).validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| TtaError::Config(format!("malformed config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read and validate a config file. An unreadable file counts as a configuration error.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| TtaError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Hyperparameters for `method` after applying the experiment-wide overrides.
    pub fn adapt_config(&self, method: Method) -> AdaptConfig {
        let mut cfg = default_config(method);
        if method != Method::PbrsOnly {
            cfg.alpha = self.backbone.alpha;
        }
        if let Some(b) = self.batch_size {
            cfg.batch_size = b;
            cfg.memory_size = b;
        }
        cfg
    }
}

/// Name of the checkpoint file for one seed.
pub fn checkpoint_name(instance_aware: bool, seed: u64) -> String {
    let kind = if instance_aware { "iabn" } else { "bn" };
    format!("source-{kind}-seed{seed}.ckpt")
}

/// Train a source model on the task's source split.
pub fn train_checkpoint(config: &ExperimentConfig, instance_aware: bool, seed: u64) -> Result<Checkpoint> {
    let data = gen_synthetic_dataset(&config.task, Split::Source, seed)?;
    let mut backbone = Backbone::build(config.backbone.config(&config.task, instance_aware), seed)?;
    let acc = backbone.train_source(&data, &config.train, seed)?;
    let meta = TrainingMeta {
        seed,
        epochs: config.train.epochs,
        learning_rate: config.train.learning_rate,
        final_train_accuracy: Some(acc),
    };
    Ok(Checkpoint { backbone, meta })
}

/// Source models of one seed; a slot is empty when no method needs it.
struct SourceModels {
    seed: u64,
    bn: Option<Backbone>,
    iabn: Option<Backbone>,
}

impl SourceModels {
    fn for_method(&self, method: Method) -> &Backbone {
        let slot = if method.needs_iabn_backbone() { &self.iabn } else { &self.bn };
        slot.as_ref().expect("model prepared for every configured method")
    }
}

fn prepare_models(config: &ExperimentConfig) -> Result<Vec<SourceModels>> {
    let need_iabn = config.methods.iter().any(|m| m.needs_iabn_backbone());
    let need_bn = config.methods.iter().any(|m| !m.needs_iabn_backbone());
    let get = |instance_aware: bool, seed: u64| -> Result<Backbone> {
        match &config.checkpoint_dir {
            Some(dir) => {
                let ckpt = Checkpoint::load(&dir.join(checkpoint_name(instance_aware, seed)))?;
                if ckpt.backbone.is_instance_aware() != instance_aware {
                    return config_err(format!("checkpoint for seed {seed} has the wrong normalization kind"));
                }
                Ok(ckpt.backbone)
            }
            None => Ok(train_checkpoint(config, instance_aware, seed)?.backbone),
        }
    };
    config
        .seeds
        .par_iter()
        .map(|&seed| {
            Ok(SourceModels {
                seed,
                bn: if need_bn { Some(get(false, seed)?) } else { None },
                iabn: if need_iabn { Some(get(true, seed)?) } else { None },
            })
        })
        .collect()
}

/// One (method, stream, seed) cell.
#[derive(Clone, Debug)]
pub struct RunRecord {
    pub method: Method,
    pub stream: StreamKind,
    pub seed: u64,
    pub trace: ErrorTrace,
}

/// Mean and population standard deviation of one (method, stream) pair over seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregateRow {
    pub method: Method,
    pub stream: StreamKind,
    pub mean_error: f64,
    pub std_error: f64,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub runs: Vec<RunRecord>,
    pub rows: Vec<AggregateRow>,
}

impl ExperimentReport {
    pub fn row(&self, method: Method, stream: StreamKind) -> Option<&AggregateRow> {
        self.rows.iter().find(|r| r.method == method && r.stream == stream)
    }
}

fn run_grid(config: &ExperimentConfig, models: &[SourceModels]) -> Result<Vec<RunRecord>> {
    let mut cells = Vec::new();
    for m in models {
        let target = gen_synthetic_dataset(&config.task, Split::Target, m.seed)?;
        for &stream in &config.streams {
            let order = stream.build(&target.labels, config.tokens, m.seed)?;
            cells.push((m, stream, target.clone(), order));
        }
    }
    let jobs: Vec<(&SourceModels, StreamKind, &Dataset, &StreamOrder, Method)> = cells
        .iter()
        .flat_map(|(m, s, d, o)| config.methods.iter().map(move |&method| (*m, *s, d, o, method)))
        .collect();
    jobs.into_par_iter()
        .map(|(models, stream, data, order, method)| {
            let run = run_tta(method, models.for_method(method), data, order, &config.adapt_config(method), models.seed)?;
            Ok(RunRecord { method, stream, seed: models.seed, trace: run.trace })
        })
        .collect()
}

/// Population statistics of `values`.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Collapse run records into one row per (method, stream), in config order.
pub fn aggregate(config: &ExperimentConfig, runs: &[RunRecord]) -> Vec<AggregateRow> {
    let mut rows = Vec::new();
    for &method in &config.methods {
        for &stream in &config.streams {
            let cell: Vec<&RunRecord> = runs.iter().filter(|r| r.method == method && r.stream == stream).collect();
            if cell.is_empty() {
                continue;
            }
            let errors: Vec<f64> = cell.iter().map(|r| r.trace.error_rate()).collect();
            let (mean_error, std_error) = mean_std(&errors);
            rows.push(AggregateRow { method, stream, mean_error, std_error, seeds: cell.iter().map(|r| r.seed).collect() });
        }
    }
    rows
}

const AGGREGATE_HEADER: [&str; 6] = ["method", "stream_kind", "delta", "mean_error", "std_error", "seeds"];

fn aggregate_fields(row: &AggregateRow) -> Vec<String> {
    let seeds: Vec<String> = row.seeds.iter().map(u64::to_string).collect();
    vec![
        row.method.to_string(),
        row.stream.name().to_string(),
        row.stream.delta().map(fmt_sig).unwrap_or_default(),
        fmt_sig(row.mean_error),
        fmt_sig(row.std_error),
        seeds.join(";"),
    ]
}

fn csv_err(e: csv::Error) -> TtaError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => TtaError::Io(io),
        other => TtaError::Format(format!("{other:?}")),
    }
}

/// Write the aggregate table as CSV.
pub fn write_aggregate_csv<W: Write>(rows: &[AggregateRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(AGGREGATE_HEADER).map_err(csv_err)?;
    for row in rows {
        w.write_record(aggregate_fields(row)).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn trace_file_name(method: Method, stream: StreamKind, seed: u64) -> String {
    format!("{method}_{}_seed{seed}.csv", stream.label())
}

fn write_traces(dir: &Path, runs: &[RunRecord]) -> Result<()> {
    let traces = dir.join("traces");
    fs::create_dir_all(&traces)?;
    for r in runs {
        let file = fs::File::create(traces.join(trace_file_name(r.method, r.stream, r.seed)))?;
        r.trace.write_csv(std::io::BufWriter::new(file))?;
    }
    Ok(())
}

/// Train or load source models, run every (method, stream, seed) cell and
/// write `traces/*.csv` plus `aggregate.csv` under the output directory.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let models = prepare_models(config)?;
    let runs = run_grid(config, &models)?;
    let rows = aggregate(config, &runs);
    fs::create_dir_all(&config.output_dir)?;
    write_traces(&config.output_dir, &runs)?;
    write_aggregate_csv(&rows, fs::File::create(config.output_dir.join("aggregate.csv"))?)?;
    Ok(ExperimentReport { runs, rows })
}

/// Swept hyperparameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum SweepParam {
    Delta,
    BatchSize,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Delta => "delta",
            SweepParam::BatchSize => "batch-size",
        }
    }
}

/// One aggregate row tagged with the swept value.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub row: AggregateRow,
}

/// Re-run the grid for each swept value, reusing one set of source models.
/// The delta sweep replaces the configured streams with one Dirichlet stream
/// per concentration; the batch-size sweep keeps them. Writes
/// `sweep-<param>.csv` and per-value traces under the output directory.
pub fn run_sweep(config: &ExperimentConfig, param: SweepParam) -> Result<Vec<SweepRow>> {
    config.validate()?;
    let models = prepare_models(config)?;
    let variants: Vec<(f64, ExperimentConfig)> = match param {
        SweepParam::Delta => SWEEP_DELTAS
            .iter()
            .map(|&delta| (delta, ExperimentConfig { streams: vec![StreamKind::Dirichlet { delta }], ..config.clone() }))
            .collect(),
        SweepParam::BatchSize => SWEEP_BATCH_SIZES
            .iter()
            .map(|&b| (b as f64, ExperimentConfig { batch_size: Some(b), ..config.clone() }))
            .collect(),
    };
    let mut out = Vec::new();
    for (value, variant) in &variants {
        let runs = run_grid(variant, &models)?;
        write_traces(&config.output_dir.join(format!("{}-{value}", param.name())), &runs)?;
        out.extend(aggregate(variant, &runs).into_iter().map(|row| SweepRow { value: *value, row }));
    }
    fs::create_dir_all(&config.output_dir)?;
    let file = fs::File::create(config.output_dir.join(format!("sweep-{}.csv", param.name())))?;
    let mut w = csv::Writer::from_writer(file);
    let mut header = vec![param.name()];
    header.extend(AGGREGATE_HEADER);
    w.write_record(&header).map_err(csv_err)?;
    for r in &out {
        let mut fields = vec![fmt_sig(r.value)];
        fields.extend(aggregate_fields(&r.row));
        w.write_record(&fields).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(out)
}

/// Dataset as CSV: `label, x0, x1, ...` with channels laid out one after another.
pub fn write_dataset_csv<W: Write>(data: &Dataset, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let (_, channels, len) = data.inputs.shape();
    let mut header = vec!["label".to_string()];
    header.extend((0..channels * len).map(|i| format!("x{i}")));
    w.write_record(&header).map_err(csv_err)?;
    for (i, &label) in data.labels.iter().enumerate() {
        let mut fields = vec![label.to_string()];
        fields.extend(data.inputs.sample_values(i).iter().map(|&v| fmt_sig(v)));
        w.write_record(&fields).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
