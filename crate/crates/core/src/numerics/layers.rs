use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{config_err, Result};

/// A parameter vector with a trainability flag.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Vec<f64>,
    pub trainable: bool,
}

impl Param {
    pub fn new(value: Vec<f64>) -> Self {
        Self { value, trainable: true }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

fn he_uniform(rng: &mut impl Rng, n: usize, fan_in: usize) -> Vec<f64> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

/// Fully-connected layer on the flattened `channel x position` axis.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    /// `outputs x inputs`, row-major.
    pub weights: Param,
    pub bias: Param,
}

impl DenseLayer {
    pub fn new(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        Self {
            inputs,
            outputs,
            weights: Param::new(he_uniform(rng, inputs * outputs, inputs)),
            bias: Param::new(vec![0.0; outputs]),
        }
    }

    pub fn from_parts(weights: Vec<Vec<f64>>, bias: Vec<f64>) -> Result<Self> {
        let outputs = weights.len();
        let inputs = weights.first().map_or(0, Vec::len);
        if outputs == 0 || inputs == 0 || weights.iter().any(|r| r.len() != inputs) {
            return config_err("dense weights must be a non-empty rectangular matrix");
        }
        if bias.len() != outputs {
            return config_err(format!("dense bias has {} entries, expected {outputs}", bias.len()));
        }
        Ok(Self {
            inputs,
            outputs,
            weights: Param::new(weights.concat()),
            bias: Param::new(bias),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let width = x.channels() * x.len();
        if width != self.inputs {
            return config_err(format!(
                "dense layer expects {} inputs, got {}x{}",
                self.inputs,
                x.channels(),
                x.len()
            ));
        }
        let w = &self.weights.value;
        let mut y = Tensor::zeros(x.batch(), self.outputs, 1);
        for b in 0..x.batch() {
            let xs = x.sample_values(b);
            for o in 0..self.outputs {
                let row = &w[o * width..(o + 1) * width];
                let dot: f64 = row.iter().zip(xs).map(|(a, b)| a * b).sum();
                y.data_mut()[b * self.outputs + o] = dot + self.bias.value[o];
            }
        }
        Ok(y)
    }

    /// Returns `(d_input, d_weights, d_bias)`.
    pub fn backward(&self, input: &Tensor, grad: &Tensor) -> (Tensor, Vec<f64>, Vec<f64>) {
        let width = self.inputs;
        let w = &self.weights.value;
        let mut dx = Tensor::zeros(input.batch(), input.channels(), input.len());
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; self.outputs];
        for b in 0..input.batch() {
            let xs = input.sample_values(b);
            let base = b * width;
            for o in 0..self.outputs {
                let g = grad.data()[b * self.outputs + o];
                if g == 0.0 {
                    continue;
                }
                db[o] += g;
                let row = &w[o * width..(o + 1) * width];
                let drow = &mut dw[o * width..(o + 1) * width];
                for i in 0..width {
                    drow[i] += g * xs[i];
                    dx.data_mut()[base + i] += g * row[i];
                }
            }
        }
        (dx, dw, db)
    }
}

/// Valid (unpadded) 1D cross-correlation.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv1dLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// `out x in x kernel`, row-major.
    pub kernels: Param,
    pub bias: Param,
}

impl Conv1dLayer {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel;
        Self {
            in_channels,
            out_channels,
            kernel,
            stride: stride.max(1),
            kernels: Param::new(he_uniform(rng, out_channels * fan_in, fan_in)),
            bias: Param::new(vec![0.0; out_channels]),
        }
    }

    pub fn output_len(&self, input_len: usize) -> Result<usize> {
        if self.kernel == 0 || self.kernel > input_len {
            return config_err(format!(
                "kernel width {} does not fit input length {input_len}",
                self.kernel
            ));
        }
        Ok((input_len - self.kernel) / self.stride + 1)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.channels() != self.in_channels {
            return config_err(format!(
                "conv1d expects {} input channels, got {}",
                self.in_channels,
                x.channels()
            ));
        }
        let out_len = self.output_len(x.len())?;
        let k = self.kernel;
        let kw = &self.kernels.value;
        let mut y = Tensor::zeros(x.batch(), self.out_channels, out_len);
        for b in 0..x.batch() {
            for o in 0..self.out_channels {
                let out = y.row_mut(b, o);
                out.fill(self.bias.value[o]);
                for i in 0..self.in_channels {
                    let ker = &kw[(o * self.in_channels + i) * k..(o * self.in_channels + i + 1) * k];
                    let row = x.row(b, i);
                    for (j, v) in out.iter_mut().enumerate() {
                        let start = j * self.stride;
                        *v += ker.iter().zip(&row[start..start + k]).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
        }
        Ok(y)
    }

    /// Returns `(d_input, d_kernels, d_bias)`.
    pub fn backward(&self, input: &Tensor, grad: &Tensor) -> (Tensor, Vec<f64>, Vec<f64>) {
        let k = self.kernel;
        let kw = &self.kernels.value;
        let mut dx = Tensor::zeros(input.batch(), input.channels(), input.len());
        let mut dk = vec![0.0; kw.len()];
        let mut db = vec![0.0; self.out_channels];
        for b in 0..input.batch() {
            for o in 0..self.out_channels {
                let g = grad.row(b, o);
                db[o] += g.iter().sum::<f64>();
                for i in 0..self.in_channels {
                    let off = (o * self.in_channels + i) * k;
                    let row = input.row(b, i);
                    for (j, &gj) in g.iter().enumerate() {
                        if gj == 0.0 {
                            continue;
                        }
                        let start = j * self.stride;
                        for t in 0..k {
                            dk[off + t] += gj * row[start + t];
                        }
                    }
                    let drow = dx.row_mut(b, i);
                    for (j, &gj) in g.iter().enumerate() {
                        let start = j * self.stride;
                        for t in 0..k {
                            drow[start + t] += gj * kw[off + t];
                        }
                    }
                }
            }
        }
        (dx, dk, db)
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn relu_backward(input: &Tensor, grad: &Tensor) -> Tensor {
    let mut dx = grad.clone();
    for (d, &x) in dx.data_mut().iter_mut().zip(input.data()) {
        if x <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

/// Mean over positions, producing `B x C x 1`.
pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let n = x.len() as f64;
    Tensor::from_fn(x.batch(), x.channels(), 1, |b, c, _| x.row(b, c).iter().sum::<f64>() / n)
}

pub fn global_avg_pool_backward(input_len: usize, grad: &Tensor) -> Tensor {
    let n = input_len as f64;
    Tensor::from_fn(grad.batch(), grad.channels(), input_len, |b, c, _| grad.at(b, c, 0) / n)
}

/// Architecture-level description of a layer, used in checkpoints.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv1d { in_channels: usize, out_channels: usize, kernel: usize, stride: usize },
    Norm { channels: usize },
    Relu,
    GlobalAvgPool,
    Dense { inputs: usize, outputs: usize },
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;

    #[test]
    fn relu_clamps_negatives() {
        let x = Tensor::new(1, 1, 3, vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn pool_takes_channel_mean() {
        let x = Tensor::new(1, 1, 2, vec![1.0, 3.0]).unwrap();
        assert_eq!(global_avg_pool(&x).data(), &[2.0]);
    }

    #[test]
    fn dense_identity() {
        let d = DenseLayer::from_parts(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0.0, 0.0]).unwrap();
        let x = Tensor::new(1, 2, 1, vec![5.0, 7.0]).unwrap();
        assert_eq!(d.forward(&x).unwrap().data(), &[5.0, 7.0]);
        let bad = Tensor::new(1, 3, 1, vec![1.0; 3]).unwrap();
        assert!(d.forward(&bad).is_err());
    }

    #[test]
    fn conv_valid_cross_correlation() {
        let mut rng = derive_rng(0, 0);
        let mut conv = Conv1dLayer::new(1, 1, 2, 1, &mut rng);
        conv.kernels.value = vec![1.0, -1.0];
        conv.bias.value = vec![0.5];
        let x = Tensor::new(1, 1, 4, vec![1.0, 2.0, 4.0, 8.0]).unwrap();
        let y = conv.forward(&x).unwrap();
        assert_eq!(y.data(), &[-0.5, -1.5, -3.5]);

        conv.stride = 2;
        assert_eq!(conv.forward(&x).unwrap().data(), &[-0.5, -3.5]);

        conv.kernel = 5;
        assert!(conv.forward(&x).is_err());
    }
}
