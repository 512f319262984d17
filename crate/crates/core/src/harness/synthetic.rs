use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::model::Dataset;
use crate::numerics::Tensor;
use crate::rng::{derive_rng, stream_id};

/// Per-channel affine transform applied to target inputs: `scale * x + offset`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
}

impl ShiftSpec {
    pub fn none(channels: usize) -> Self {
        Self { offset: vec![0.0; channels], scale: vec![1.0; channels] }
    }
}

/// Sinusoidal classification task with a covariate shift between splits.
///
/// Class `c` is a sinusoid whose frequency is `1 + c mod G` cycles per window
/// and whose amplitude is picked by `c div G`, with `G = ceil(classes /
/// amplitudes.len())`. Every sample gets a uniformly random phase and additive
/// Gaussian noise. Because classes sharing a frequency differ only in
/// amplitude, normalizing with statistics pooled over a single-class batch
/// erases the information that separates them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub classes: usize,
    pub length: usize,
    pub channels: usize,
    pub amplitudes: Vec<f64>,
    pub noise: f64,
    pub source_per_class: usize,
    pub target_per_class: usize,
    pub shift: ShiftSpec,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            length: 32,
            channels: 1,
            amplitudes: vec![1.0, 2.0],
            noise: 0.3,
            source_per_class: 200,
            target_per_class: 100,
            shift: ShiftSpec { offset: vec![0.8], scale: vec![1.0] },
        }
    }
}

/// Which split of the task to generate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    /// Training data, unshifted.
    Source,
    /// Held-out unshifted data with the target split's per-class count.
    Holdout,
    /// Shifted test data.
    Target,
}

impl SyntheticTaskSpec {
    fn groups(&self) -> usize {
        self.classes.div_ceil(self.amplitudes.len().max(1))
    }

    /// Frequency (cycles per window) and amplitude of class `c`.
    pub fn template(&self, c: usize) -> (f64, f64) {
        let g = self.groups();
        ((1 + c % g) as f64, self.amplitudes[c / g])
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.channels == 0 || self.length < 4 {
            return config_err("task needs >= 2 classes, >= 1 channel and length >= 4");
        }
        if self.amplitudes.is_empty() || self.amplitudes.iter().any(|&a| !(a > 0.0)) {
            return config_err("amplitudes must be positive");
        }
        let mut amps = self.amplitudes.clone();
        amps.sort_by(f64::total_cmp);
        if amps.windows(2).any(|w| w[0] == w[1]) {
            return config_err("degenerate templates: repeated amplitude");
        }
        if self.groups() as f64 + 1.0 > self.length as f64 / 2.0 {
            return config_err("degenerate templates: frequencies exceed the Nyquist limit");
        }
        if self.classes > self.groups() * self.amplitudes.len() {
            return config_err("not enough amplitudes for the class count");
        }
        if !(self.noise >= 0.0) {
            return config_err("noise must be non-negative");
        }
        if self.shift.offset.len() != self.channels || self.shift.scale.len() != self.channels {
            return config_err("shift needs one offset and one scale per channel");
        }
        if self.shift.scale.iter().any(|&s| !(s > 0.0)) {
            return config_err("shift scales must be positive");
        }
        if self.source_per_class == 0 || self.target_per_class == 0 {
            return config_err("per-class counts must be positive");
        }
        Ok(())
    }
}

/// Generate one split. Samples are ordered class-major; labels follow.
pub fn gen_synthetic_dataset(spec: &SyntheticTaskSpec, split: Split, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let (per_class, stream) = match split {
        Split::Source => (spec.source_per_class, stream_id::DATA_SOURCE),
        Split::Holdout => (spec.target_per_class, stream_id::DATA_HOLDOUT),
        Split::Target => (spec.target_per_class, stream_id::DATA_TARGET),
    };
    let mut rng = derive_rng(seed, stream);
    let n = spec.classes * per_class;
    let len = spec.length;
    let mut data = Vec::with_capacity(n * spec.channels * len);
    let mut labels = Vec::with_capacity(n);
    for c in 0..spec.classes {
        let (freq, amp) = spec.template(c);
        for _ in 0..per_class {
            let phase = rng.random_range(0.0..2.0 * PI);
            for ch in 0..spec.channels {
                let (scale, offset) = match split {
                    Split::Target => (spec.shift.scale[ch], spec.shift.offset[ch]),
                    _ => (1.0, 0.0),
                };
                for l in 0..len {
                    let t = 2.0 * PI * freq * l as f64 / len as f64 + phase + 0.5 * ch as f64;
                    let noise: f64 = rng.sample(StandardNormal);
                    data.push(scale * (amp * t.sin() + spec.noise * noise) + offset);
                }
            }
            labels.push(c);
        }
    }
    Dataset::new(Tensor::new(n, spec.channels, len, data)?, labels, spec.classes)
}
