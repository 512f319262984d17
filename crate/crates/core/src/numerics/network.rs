use super::layers::{
    global_avg_pool, global_avg_pool_backward, relu, relu_backward, Conv1dLayer, DenseLayer,
    LayerSpec, Param,
};
use super::Adam;
use super::Tensor;
use crate::error::{config_err, state_err, Result, TtaError};
use crate::normalization::{NormCache, NormLayer, NormMode};

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv1d(Conv1dLayer),
    Norm(NormLayer),
    Relu,
    GlobalAvgPool,
    Dense(DenseLayer),
}

/// One recorded forward operation with what its backward needs.
#[derive(Clone, Debug)]
pub enum TapeOp {
    Conv1d { layer: usize, input: Tensor },
    Norm { layer: usize, cache: NormCache },
    Relu { layer: usize, input: Tensor },
    GlobalAvgPool { layer: usize, input_len: usize },
    Dense { layer: usize, input: Tensor },
}

impl TapeOp {
    pub fn layer(&self) -> usize {
        match self {
            TapeOp::Conv1d { layer, .. }
            | TapeOp::Norm { layer, .. }
            | TapeOp::Relu { layer, .. }
            | TapeOp::GlobalAvgPool { layer, .. }
            | TapeOp::Dense { layer, .. } => *layer,
        }
    }
}

/// Forward record, replayed in reverse by [`Sequential::backward`].
#[derive(Clone, Debug, Default)]
pub struct Tape {
    ops: Vec<TapeOp>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, op: TapeOp) {
        self.ops.push(op);
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn ops(&self) -> &[TapeOp] {
        &self.ops
    }

    pub fn clear(&mut self) {
        self.ops.clear();
    }
}

impl Layer {
    /// Forward one layer, recording the op on `tape` when given.
    pub fn forward(
        &mut self,
        index: usize,
        x: &Tensor,
        mode: NormMode,
        tape: Option<&mut Tape>,
    ) -> Result<Tensor> {
        x.ensure_finite("layer input")?;
        let (y, op) = match self {
            Layer::Conv1d(conv) => {
                (conv.forward(x)?, tape.is_some().then(|| TapeOp::Conv1d { layer: index, input: x.clone() }))
            }
            Layer::Dense(dense) => {
                (dense.forward(x)?, tape.is_some().then(|| TapeOp::Dense { layer: index, input: x.clone() }))
            }
            Layer::Relu => (relu(x), tape.is_some().then(|| TapeOp::Relu { layer: index, input: x.clone() })),
            Layer::GlobalAvgPool => (
                global_avg_pool(x),
                tape.is_some().then(|| TapeOp::GlobalAvgPool { layer: index, input_len: x.len() }),
            ),
            Layer::Norm(norm) => {
                let (y, cache) = norm.forward_train(x, mode)?;
                (y, Some(TapeOp::Norm { layer: index, cache }))
            }
        };
        if let (Some(tape), Some(op)) = (tape, op) {
            tape.push(op);
        }
        Ok(y)
    }

    pub fn params(&self) -> Vec<&Param> {
        match self {
            Layer::Conv1d(c) => vec![&c.kernels, &c.bias],
            Layer::Dense(d) => vec![&d.weights, &d.bias],
            Layer::Norm(n) => vec![&n.gamma, &n.beta],
            Layer::Relu | Layer::GlobalAvgPool => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Layer::Conv1d(c) => vec![&mut c.kernels, &mut c.bias],
            Layer::Dense(d) => vec![&mut d.weights, &mut d.bias],
            Layer::Norm(n) => vec![&mut n.gamma, &mut n.beta],
            Layer::Relu | Layer::GlobalAvgPool => vec![],
        }
    }

    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Conv1d(c) => LayerSpec::Conv1d {
                in_channels: c.in_channels,
                out_channels: c.out_channels,
                kernel: c.kernel,
                stride: c.stride,
            },
            Layer::Norm(n) => LayerSpec::Norm { channels: n.channels() },
            Layer::Relu => LayerSpec::Relu,
            Layer::GlobalAvgPool => LayerSpec::GlobalAvgPool,
            Layer::Dense(d) => LayerSpec::Dense { inputs: d.inputs, outputs: d.outputs },
        }
    }
}

/// Gradients aligned with [`Sequential::params`]; `None` marks frozen parameters.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub params: Vec<Option<Vec<f64>>>,
    pub input: Tensor,
}

/// A chain of layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn forward(&mut self, x: &Tensor, mode: NormMode, mut tape: Option<&mut Tape>) -> Result<Tensor> {
        if let Some(t) = tape.as_deref_mut() {
            t.clear();
        }
        let mut h = x.clone();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            h = layer.forward(i, &h, mode, tape.as_deref_mut())?;
        }
        h.ensure_finite("network output")?;
        Ok(h)
    }

    /// Forward without recording and without touching any layer state.
    /// Training mode is rejected because it updates running statistics.
    pub fn infer(&self, x: &Tensor, mode: NormMode) -> Result<Tensor> {
        if mode == NormMode::Train {
            return config_err("inference cannot run in training mode");
        }
        let mut h = x.clone();
        for layer in &self.layers {
            h.ensure_finite("layer input")?;
            h = match layer {
                Layer::Conv1d(conv) => conv.forward(&h)?,
                Layer::Dense(dense) => dense.forward(&h)?,
                Layer::Relu => relu(&h),
                Layer::GlobalAvgPool => global_avg_pool(&h),
                Layer::Norm(norm) => norm.forward(&h, mode)?.0,
            };
        }
        h.ensure_finite("network output")?;
        Ok(h)
    }

    pub fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    pub fn param_shapes(&self) -> Vec<usize> {
        self.params().iter().map(|p| p.len()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.params().iter().filter(|p| p.trainable).map(|p| p.len()).sum()
    }

    pub fn set_trainable(&mut self, pred: impl Fn(&Layer) -> bool) {
        for layer in &mut self.layers {
            let flag = pred(layer);
            for p in layer.params_mut() {
                p.trainable = flag;
            }
        }
    }

    /// Index of the first parameter of each layer in [`Sequential::params`] order.
    fn param_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut acc = 0;
        for layer in &self.layers {
            offsets.push(acc);
            acc += layer.params().len();
        }
        offsets
    }

    /// Reverse pass over `tape` starting from `grad` (gradient of the scalar
    /// loss w.r.t. the network output).
    pub fn backward(&self, tape: &Tape, grad: Tensor) -> Result<Gradients> {
        if tape.is_empty() {
            return state_err("backward called without a recorded forward pass");
        }
        let offsets = self.param_offsets();
        let mut params: Vec<Option<Vec<f64>>> = vec![None; offsets.last().map_or(0, |&o| {
            o + self.layers.last().map_or(0, |l| l.params().len())
        })];
        let mut g = grad;
        let mut last = usize::MAX;
        for op in tape.ops().iter().rev() {
            let idx = op.layer();
            if idx >= last || idx >= self.layers.len() {
                return state_err("tape does not match this network");
            }
            last = idx;
            let layer = &self.layers[idx];
            let mut store = |slot: usize, value: Vec<f64>| {
                if layer.params()[slot].trainable {
                    params[offsets[idx] + slot] = Some(value);
                }
            };
            g = match (op, layer) {
                (TapeOp::Conv1d { input, .. }, Layer::Conv1d(conv)) => {
                    let (dx, dk, db) = conv.backward(input, &g);
                    store(0, dk);
                    store(1, db);
                    dx
                }
                (TapeOp::Dense { input, .. }, Layer::Dense(dense)) => {
                    let (dx, dw, db) = dense.backward(input, &g);
                    store(0, dw);
                    store(1, db);
                    dx
                }
                (TapeOp::Relu { input, .. }, Layer::Relu) => relu_backward(input, &g),
                (TapeOp::GlobalAvgPool { input_len, .. }, Layer::GlobalAvgPool) => {
                    global_avg_pool_backward(*input_len, &g)
                }
                (TapeOp::Norm { cache, .. }, Layer::Norm(norm)) => {
                    let out = norm.backward(cache, &g);
                    store(0, out.gamma);
                    store(1, out.beta);
                    out.input
                }
                _ => return state_err(format!("tape op for layer {idx} does not match the layer kind")),
            };
        }
        if g.data().iter().any(|v| !v.is_finite()) {
            return Err(TtaError::Numeric("non-finite gradient".into()));
        }
        Ok(Gradients { params, input: g })
    }

    /// Apply one Adam step with `grads` to the trainable parameters.
    pub fn adam_step(&mut self, adam: &mut Adam, grads: &Gradients, lr: f64) -> Result<()> {
        if grads.params.len() != self.params().len() {
            return config_err("gradients do not match the network parameters");
        }
        let mut params: Vec<&mut [f64]> =
            self.params_mut().into_iter().map(|p| p.value.as_mut_slice()).collect();
        let g: Vec<Option<&[f64]>> = grads.params.iter().map(|g| g.as_deref()).collect();
        adam.step(&mut params, &g, lr)
    }
}
