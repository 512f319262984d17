//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Each exported function wraps a plain Rust function of the same name with a
//! `_impl` suffix so the logic can be tested natively.

use tta_core::normalization::{iabn_correct_stats, Alpha, ChannelStats, InstanceStats};
use tta_core::rng::derive_rng;
use tta_core::sampler::MemoryBank;
use tta_core::streams::{make_dirichlet_stream, StreamSpec};
use tta_core::{Result, TtaError};
use wasm_bindgen::prelude::*;

const MAX_POINTS: usize = 10_000;
const MAX_SAMPLES: usize = 200_000;

fn to_js(e: TtaError) -> JsError {
    JsError::new(&e.to_string())
}

fn parse_alpha(alpha: f64) -> Result<Alpha> {
    if alpha == f64::INFINITY {
        Ok(Alpha::Infinite)
    } else {
        Alpha::new(alpha)
    }
}

/// Corrected instance mean and variance against a unit reference (mean 0, variance 1).
///
/// Returns `[d, mean(d), var(d)]` triples for `points` deviations `d` spread
/// evenly over `[-range, range]`. The instance mean is `d` and the instance
/// variance is `1 + |d|`, so both corrections are visible on one axis.
pub fn shrinkage_curve_impl(alpha: f64, len: usize, range: f64, points: usize) -> Result<Vec<f64>> {
    let alpha = parse_alpha(alpha)?;
    if !(2..=MAX_POINTS).contains(&points) || !(range > 0.0 && range.is_finite()) {
        return Err(TtaError::Input("need 2..=10000 points over a positive finite range".into()));
    }
    let d: Vec<f64> = (0..points).map(|i| -range + 2.0 * range * i as f64 / (points - 1) as f64).collect();
    let inst = InstanceStats { batch: points, channels: 1, mean: d.clone(), var: d.iter().map(|x| 1.0 + x.abs()).collect() };
    let out = iabn_correct_stats(&inst, &ChannelStats::standard(1), alpha, len)?;
    Ok(d.iter().zip(out.mean.iter().zip(&out.var)).flat_map(|(&x, (&m, &v))| [x, m, v]).collect())
}

#[wasm_bindgen]
pub fn shrinkage_curve(alpha: f64, len: usize, range: f64, points: usize) -> std::result::Result<Vec<f64>, JsError> {
    shrinkage_curve_impl(alpha, len, range, points).map_err(to_js)
}

fn balanced_labels(classes: usize, per_class: usize) -> Result<Vec<usize>> {
    if classes == 0 || per_class == 0 || classes * per_class > MAX_SAMPLES {
        return Err(TtaError::Input("need at least one class, one sample per class, and at most 200000 samples".into()));
    }
    Ok((0..classes * per_class).map(|i| i % classes).collect())
}

/// Class labels of a Dirichlet-ordered stream over a balanced label set.
pub fn dirichlet_labels_impl(delta: f64, classes: usize, per_class: usize, seed: u32) -> Result<Vec<u32>> {
    let labels = balanced_labels(classes, per_class)?;
    let order = make_dirichlet_stream(&labels, &StreamSpec::uniform(delta, classes, seed.into()))?;
    Ok(order.labels(&labels).map(|y| y as u32).collect())
}

#[wasm_bindgen]
pub fn dirichlet_labels(delta: f64, classes: usize, per_class: usize, seed: u32) -> std::result::Result<Vec<u32>, JsError> {
    dirichlet_labels_impl(delta, classes, per_class, seed).map_err(to_js)
}

/// Offer a Dirichlet stream's labels to a prediction-balanced memory and to a
/// plain reservoir of the same capacity. Returns the per-class counts of both
/// memories at the end, prediction-balanced first.
pub fn memory_histograms_impl(delta: f64, classes: usize, per_class: usize, capacity: usize, seed: u32) -> Result<Vec<u32>> {
    if capacity == 0 {
        return Err(TtaError::Input("memory capacity must be positive".into()));
    }
    let stream = dirichlet_labels_impl(delta, classes, per_class, seed)?;
    let mut pbrs = MemoryBank::new(capacity, classes, derive_rng(seed.into(), 6));
    let mut rs = MemoryBank::new(capacity, classes, derive_rng(seed.into(), 6));
    for &y in &stream {
        pbrs.pbrs_insert((), y as usize)?;
        rs.rs_insert((), y as usize)?;
    }
    Ok(pbrs.class_counts().into_iter().chain(rs.class_counts()).map(|c| c as u32).collect())
}

#[wasm_bindgen]
pub fn memory_histograms(
    delta: f64,
    classes: usize,
    per_class: usize,
    capacity: usize,
    seed: u32,
) -> std::result::Result<Vec<u32>, JsError> {
    memory_histograms_impl(delta, classes, per_class, capacity, seed).map_err(to_js)
}
