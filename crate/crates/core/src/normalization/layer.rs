use super::{
    batch_stats, instance_stats, soft_shrink, Alpha, ChannelStats, NormKind, SamplingStdDevs,
    DEFAULT_EPSILON, DEFAULT_TRAIN_MOMENTUM,
};
use crate::error::{config_err, Result, TtaError};
use crate::numerics::{Param, Tensor};

/// Where the reference statistics of a forward pass come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Batch statistics as reference; running statistics updated with the training momentum.
    Train,
    /// Running statistics as reference.
    Eval,
    /// Batch statistics as reference; running statistics untouched.
    TestBatch,
}

/// Normalization layer with running statistics and affine parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct NormLayer {
    pub kind: NormKind,
    pub running: ChannelStats,
    pub gamma: Param,
    pub beta: Param,
    pub epsilon: f64,
    pub momentum: f64,
    /// Whether `running` holds statistics estimated from data.
    pub tracked: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Branch {
    Dead,
    /// Active shrinkage branch; the stored value is the sign of the deviation.
    Active(f64),
}

/// Forward quantities needed to differentiate a normalization layer.
#[derive(Clone, Debug)]
pub struct NormCache {
    input: Tensor,
    reference: ChannelStats,
    reference_from_batch: bool,
    alpha: Alpha,
    mean_adj: Vec<f64>,
    var_adj: Vec<f64>,
    inst_mean: Vec<f64>,
    mean_branch: Vec<Branch>,
    var_branch: Vec<Branch>,
}

impl NormCache {
    pub fn input(&self) -> &Tensor {
        &self.input
    }

    /// Reference statistics the pass normalized against.
    pub fn reference(&self) -> &ChannelStats {
        &self.reference
    }

    /// Normalization statistics actually applied to each `(b, c)`.
    pub fn applied_stats(&self) -> (&[f64], &[f64]) {
        (&self.mean_adj, &self.var_adj)
    }
}

pub struct NormGrads {
    pub input: Tensor,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

fn shrink_branch(d: f64, lam: f64) -> Branch {
    if d > lam {
        Branch::Active(1.0)
    } else if d < -lam {
        Branch::Active(-1.0)
    } else {
        Branch::Dead
    }
}

impl NormLayer {
    pub fn batch_norm(channels: usize) -> Self {
        Self::with_kind(channels, NormKind::Batch)
    }

    pub fn iabn(channels: usize, alpha: Alpha) -> Self {
        Self::with_kind(channels, NormKind::InstanceAware { alpha })
    }

    pub fn with_kind(channels: usize, kind: NormKind) -> Self {
        Self {
            kind,
            running: ChannelStats::standard(channels),
            gamma: Param::new(vec![1.0; channels]),
            beta: Param::new(vec![0.0; channels]),
            epsilon: DEFAULT_EPSILON,
            momentum: DEFAULT_TRAIN_MOMENTUM,
            tracked: false,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn set_running(&mut self, stats: ChannelStats) -> Result<()> {
        if stats.channels() != self.channels() {
            return config_err("running statistics have the wrong channel count");
        }
        if stats.var.iter().any(|&v| !(v >= 0.0)) {
            return config_err("running variance must be non-negative");
        }
        self.running = stats;
        self.tracked = true;
        Ok(())
    }

    /// Blend batch statistics of `n` values per channel into the running
    /// statistics with the training momentum (variance unbiased by `n / (n - 1)`).
    pub fn update_running(&mut self, batch: &ChannelStats, n: usize) {
        let unbias = if n > 1 { n as f64 / (n as f64 - 1.0) } else { 1.0 };
        let m = self.momentum;
        for c in 0..self.channels() {
            self.running.mean[c] = (1.0 - m) * self.running.mean[c] + m * batch.mean[c];
            self.running.var[c] = (1.0 - m) * self.running.var[c] + m * batch.var[c] * unbias;
        }
        self.tracked = true;
    }

    /// Normalize `x` as dictated by the layer kind and `mode`, and in
    /// [`NormMode::Train`] also update the running statistics.
    pub fn forward_train(&mut self, x: &Tensor, mode: NormMode) -> Result<(Tensor, NormCache)> {
        let (y, cache) = self.forward(x, mode)?;
        if mode == NormMode::Train {
            self.update_running(&cache.reference, x.batch() * x.len());
        }
        Ok((y, cache))
    }

    /// Normalize `x` as dictated by the layer kind and `mode`. Never touches
    /// the running statistics.
    pub fn forward(&self, x: &Tensor, mode: NormMode) -> Result<(Tensor, NormCache)> {
        let (bsz, channels, len) = x.shape();
        if channels != self.channels() {
            return config_err(format!(
                "normalization layer has {} channels, input has {channels}",
                self.channels()
            ));
        }
        x.ensure_finite("normalization input")?;
        let from_batch = mode != NormMode::Eval;
        if from_batch && bsz * len < 2 {
            return config_err("batch statistics need at least two values per channel");
        }
        let reference = if from_batch { batch_stats(x) } else { self.running.clone() };

        let alpha = self.kind.alpha();
        let mut cache = NormCache {
            input: x.clone(),
            reference,
            reference_from_batch: from_batch,
            alpha,
            mean_adj: Vec::with_capacity(bsz * channels),
            var_adj: Vec::with_capacity(bsz * channels),
            inst_mean: Vec::with_capacity(bsz * channels),
            mean_branch: Vec::with_capacity(bsz * channels),
            var_branch: Vec::with_capacity(bsz * channels),
        };
        if alpha == Alpha::Infinite {
            for _ in 0..bsz {
                for c in 0..channels {
                    cache.mean_adj.push(cache.reference.mean[c]);
                    cache.var_adj.push(cache.reference.var[c]);
                    cache.inst_mean.push(0.0);
                    cache.mean_branch.push(Branch::Dead);
                    cache.var_branch.push(Branch::Dead);
                }
            }
        } else {
            let inst = instance_stats(x)?;
            let s = SamplingStdDevs::new(&cache.reference, len)?;
            for b in 0..bsz {
                for c in 0..channels {
                    let (mu_ref, var_ref) = (cache.reference.mean[c], cache.reference.var[c]);
                    let dm = inst.mean_at(b, c) - mu_ref;
                    let dv = inst.var_at(b, c) - var_ref;
                    let lam_m = alpha.threshold(s.mean[c]);
                    let lam_v = alpha.threshold(s.var[c]);
                    cache.mean_adj.push(mu_ref + soft_shrink(dm, lam_m));
                    cache.var_adj.push(var_ref + soft_shrink(dv, lam_v));
                    cache.inst_mean.push(inst.mean_at(b, c));
                    cache.mean_branch.push(shrink_branch(dm, lam_m));
                    cache.var_branch.push(shrink_branch(dv, lam_v));
                }
            }
        }

        let mut y = Tensor::zeros(bsz, channels, len);
        for b in 0..bsz {
            for c in 0..channels {
                let k = b * channels + c;
                let inv = 1.0 / (cache.var_adj[k] + self.epsilon).sqrt();
                let (g, be, mu) = (self.gamma.value[c], self.beta.value[c], cache.mean_adj[k]);
                for (o, &v) in y.row_mut(b, c).iter_mut().zip(x.row(b, c)) {
                    *o = g * (v - mu) * inv + be;
                }
            }
        }
        if !y.is_finite() {
            return Err(TtaError::Numeric("normalization produced non-finite output".into()));
        }
        Ok((y, cache))
    }

    /// Gradients of the loss w.r.t. the layer input, `gamma` and `beta`.
    ///
    /// The shrinkage is differentiated piecewise: on the active branch the
    /// corrected statistic follows the instance statistic (and the threshold,
    /// which depends on the reference variance); in the dead zone it follows
    /// the reference statistic. Boundaries count as dead zone.
    pub fn backward(&self, cache: &NormCache, grad: &Tensor) -> NormGrads {
        let x = &cache.input;
        let (bsz, channels, len) = x.shape();
        let l = len as f64;
        let mut dx = Tensor::zeros(bsz, channels, len);
        let mut dgamma = vec![0.0; channels];
        let mut dbeta = vec![0.0; channels];
        let mut d_ref_mean = vec![0.0; channels];
        let mut d_ref_var = vec![0.0; channels];
        let slope = cache.alpha.threshold_slope();

        for b in 0..bsz {
            for c in 0..channels {
                let k = b * channels + c;
                let gamma = self.gamma.value[c];
                let mu = cache.mean_adj[k];
                let sd = (cache.var_adj[k] + self.epsilon).sqrt();
                let row = x.row(b, c);
                let g = grad.row(b, c);

                let mut d_mu = 0.0;
                let mut d_var = 0.0;
                for (&gl, &xl) in g.iter().zip(row) {
                    let centered = xl - mu;
                    dbeta[c] += gl;
                    dgamma[c] += gl * centered / sd;
                    let gh = gl * gamma;
                    d_mu -= gh / sd;
                    d_var -= 0.5 * gh * centered / (sd * sd * sd);
                }
                let drow = dx.row_mut(b, c);
                for (d, &gl) in drow.iter_mut().zip(g) {
                    *d += gl * gamma / sd;
                }

                let var_ref = cache.reference.var[c];
                let mut d_inst_mean = 0.0;
                let mut d_inst_var = 0.0;
                match cache.mean_branch[k] {
                    Branch::Dead => d_ref_mean[c] += d_mu,
                    Branch::Active(sign) => {
                        d_inst_mean = d_mu;
                        if var_ref > 0.0 {
                            // threshold = alpha * sqrt(var_ref / L)
                            d_ref_var[c] -= d_mu * sign * slope / (2.0 * (var_ref * l).sqrt());
                        }
                    }
                }
                match cache.var_branch[k] {
                    Branch::Dead => d_ref_var[c] += d_var,
                    Branch::Active(sign) => {
                        d_inst_var = d_var;
                        // threshold = alpha * var_ref * sqrt(2 / (L - 1))
                        d_ref_var[c] -= d_var * sign * slope * (2.0 / (l - 1.0)).sqrt();
                    }
                }
                if d_inst_mean != 0.0 || d_inst_var != 0.0 {
                    let m_inst = cache.inst_mean[k];
                    for (d, &xl) in drow.iter_mut().zip(row) {
                        *d += d_inst_mean / l + d_inst_var * 2.0 * (xl - m_inst) / l;
                    }
                }
            }
        }

        if cache.reference_from_batch {
            let n = (bsz * len) as f64;
            for c in 0..channels {
                let m = cache.reference.mean[c];
                for b in 0..bsz {
                    let row = x.row(b, c).to_vec();
                    for (d, xl) in dx.row_mut(b, c).iter_mut().zip(row) {
                        *d += d_ref_mean[c] / n + d_ref_var[c] * 2.0 * (xl - m) / n;
                    }
                }
            }
        }
        NormGrads { input: dx, gamma: dgamma, beta: dbeta }
    }
}
