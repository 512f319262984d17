//! Batch, instance and instance-aware batch normalization.
//!
//! A [`NormLayer`] holds per-channel running statistics and affine parameters.
//! Its [`NormKind`] decides how the per-sample normalization statistics are
//! formed: plain batch normalization always uses the reference statistics,
//! while IABN moves each sample's statistics away from the reference only by
//! the part of the instance deviation that exceeds `alpha` sampling standard
//! deviations (soft-shrinkage).

mod layer;

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub use layer::{NormCache, NormGrads, NormLayer, NormMode};

use crate::error::{config_err, Result};
use crate::numerics::Tensor;

/// Stability constant added to the variance before the square root.
pub const DEFAULT_EPSILON: f64 = 1e-5;
/// Running-statistic momentum used by training-mode forwards.
pub const DEFAULT_TRAIN_MOMENTUM: f64 = 0.1;

/// Per-channel mean and variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl ChannelStats {
    /// Zero mean, unit variance.
    pub fn standard(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], var: vec![1.0; channels] }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// Shrinkage width in units of sampling standard deviations.
///
/// `Infinite` keeps the reference statistics for every sample, which makes IABN
/// coincide exactly with evaluation-mode batch normalization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Alpha {
    Finite(f64),
    Infinite,
}

impl Alpha {
    pub fn new(value: f64) -> Result<Self> {
        if value.is_nan() || value < 0.0 {
            return config_err(format!("alpha must be >= 0, got {value}"));
        }
        Ok(if value.is_infinite() { Alpha::Infinite } else { Alpha::Finite(value) })
    }

    /// Threshold `alpha * s`; infinite alpha yields an infinite threshold even for `s = 0`.
    pub fn threshold(self, sampling_std: f64) -> f64 {
        match self {
            Alpha::Finite(a) => a * sampling_std,
            Alpha::Infinite => f64::INFINITY,
        }
    }

    /// `d threshold / d s`.
    fn threshold_slope(self) -> f64 {
        match self {
            Alpha::Finite(a) => a,
            Alpha::Infinite => 0.0,
        }
    }

    pub fn as_f64(self) -> f64 {
        match self {
            Alpha::Finite(a) => a,
            Alpha::Infinite => f64::INFINITY,
        }
    }
}

impl fmt::Display for Alpha {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Alpha::Finite(a) => write!(f, "{a}"),
            Alpha::Infinite => f.write_str("inf"),
        }
    }
}

impl Serialize for Alpha {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Alpha::Finite(a) => s.serialize_f64(*a),
            Alpha::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Alpha {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Alpha::new(v).map_err(serde::de::Error::custom),
            Raw::Str(s) if matches!(s.as_str(), "inf" | "infinity" | "Infinity") => Ok(Alpha::Infinite),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("invalid alpha {s:?}"))),
        }
    }
}

/// Normalization flavour of a layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NormKind {
    Batch,
    InstanceAware { alpha: Alpha },
}

impl NormKind {
    pub fn is_instance_aware(&self) -> bool {
        matches!(self, NormKind::InstanceAware { .. })
    }

    /// Batch normalization behaves as IABN with an infinite width.
    pub fn alpha(&self) -> Alpha {
        match self {
            NormKind::Batch => Alpha::Infinite,
            NormKind::InstanceAware { alpha } => *alpha,
        }
    }
}

/// Per-sample, per-channel statistics, indexed `[b * C + c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceStats {
    pub batch: usize,
    pub channels: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl InstanceStats {
    pub fn mean_at(&self, b: usize, c: usize) -> f64 {
        self.mean[b * self.channels + c]
    }

    pub fn var_at(&self, b: usize, c: usize) -> f64 {
        self.var[b * self.channels + c]
    }
}

/// Standard deviations of the sampling distributions of the instance mean and
/// instance variance, under the reference statistics as population.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingStdDevs {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl SamplingStdDevs {
    pub fn new(reference: &ChannelStats, len: usize) -> Result<Self> {
        if len < 2 {
            return config_err(format!("instance-aware normalization needs L >= 2, got {len}"));
        }
        let l = len as f64;
        Ok(Self {
            mean: reference.var.iter().map(|&v| (v / l).sqrt()).collect(),
            var: reference.var.iter().map(|&v| (2.0 * v * v / (l - 1.0)).sqrt()).collect(),
        })
    }
}

/// Pooled statistics over batch and positions with the biased (1/(B·L)) variance.
pub fn batch_stats(f: &Tensor) -> ChannelStats {
    let (bsz, channels, len) = f.shape();
    let n = (bsz * len) as f64;
    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    for c in 0..channels {
        let m = (0..bsz).map(|b| f.row(b, c).iter().sum::<f64>()).sum::<f64>() / n;
        let v = (0..bsz)
            .map(|b| f.row(b, c).iter().map(|&x| (x - m) * (x - m)).sum::<f64>())
            .sum::<f64>()
            / n;
        mean[c] = m;
        var[c] = v;
    }
    ChannelStats { mean, var }
}

fn row_stats(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let m = row.iter().sum::<f64>() / n;
    let v = row.iter().map(|&x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v)
}

/// Per-`(b, c)` mean and biased variance over positions.
pub fn instance_stats(f: &Tensor) -> Result<InstanceStats> {
    let (bsz, channels, len) = f.shape();
    if len < 2 {
        return config_err(format!("instance statistics need L >= 2, got {len}"));
    }
    let mut mean = Vec::with_capacity(bsz * channels);
    let mut var = Vec::with_capacity(bsz * channels);
    for b in 0..bsz {
        for c in 0..channels {
            let (m, v) = row_stats(f.row(b, c));
            mean.push(m);
            var.push(v);
        }
    }
    Ok(InstanceStats { batch: bsz, channels, mean, var })
}

/// Soft-shrinkage: moves `x` toward zero by `lam`, mapping `|x| <= lam` to zero.
pub fn soft_shrink(x: f64, lam: f64) -> f64 {
    if x > lam {
        x - lam
    } else if x < -lam {
        x + lam
    } else {
        0.0
    }
}

/// IABN statistics for a `B x C` grid, indexed `[b * C + c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrectedStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Shrink each instance statistic toward the reference statistics.
pub fn iabn_correct_stats(
    inst: &InstanceStats,
    reference: &ChannelStats,
    alpha: Alpha,
    len: usize,
) -> Result<CorrectedStats> {
    if reference.channels() != inst.channels {
        return config_err("reference statistics and instance statistics disagree on channels");
    }
    let s = SamplingStdDevs::new(reference, len)?;
    let mut mean = Vec::with_capacity(inst.mean.len());
    let mut var = Vec::with_capacity(inst.var.len());
    for b in 0..inst.batch {
        for c in 0..inst.channels {
            let (mu_ref, var_ref) = (reference.mean[c], reference.var[c]);
            mean.push(mu_ref + soft_shrink(inst.mean_at(b, c) - mu_ref, alpha.threshold(s.mean[c])));
            var.push(var_ref + soft_shrink(inst.var_at(b, c) - var_ref, alpha.threshold(s.var[c])));
        }
    }
    Ok(CorrectedStats { mean, var })
}

/// Exponential moving average of running statistics from a memory batch of
/// size `memory_size`; the batch statistic is scaled by `N / (N - 1)`.
pub fn ema_update_stats(
    running: &mut ChannelStats,
    batch: &ChannelStats,
    momentum: f64,
    memory_size: usize,
) -> Result<()> {
    if memory_size < 2 {
        return config_err(format!("memory size must be >= 2, got {memory_size}"));
    }
    if !(0.0..=1.0).contains(&momentum) {
        return config_err(format!("momentum must lie in [0, 1], got {momentum}"));
    }
    if batch.channels() != running.channels() {
        return config_err("batch statistics have the wrong channel count");
    }
    let factor = memory_size as f64 / (memory_size as f64 - 1.0);
    for (r, &b) in running.mean.iter_mut().zip(&batch.mean) {
        *r = (1.0 - momentum) * *r + momentum * factor * b;
    }
    for (r, &b) in running.var.iter_mut().zip(&batch.var) {
        *r = (1.0 - momentum) * *r + momentum * factor * b;
    }
    Ok(())
}
