//! Dense numeric core: tensors, layers, losses, a reverse-mode tape and Adam.

mod adam;
mod layers;
mod loss;
mod network;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use layers::{
    global_avg_pool, global_avg_pool_backward, relu, relu_backward, Conv1dLayer, DenseLayer,
    LayerSpec, Param,
};
pub use loss::{
    argmax, batch_softmax, cross_entropy_with_grad, entropy_loss, entropy_with_grad, softmax,
    softmax_cross_entropy, LOG_CLAMP,
};
pub use network::{Gradients, Layer, Sequential, Tape, TapeOp};
pub use tensor::Tensor;

/// Central differences `(f(θ + h e_i) - f(θ - h e_i)) / 2h` for every coordinate.
pub fn finite_difference_grad(
    mut f: impl FnMut(&[f64]) -> f64,
    params: &[f64],
    h: f64,
) -> Vec<f64> {
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut theta = params.to_vec();
    (0..params.len())
        .map(|i| {
            let orig = theta[i];
            theta[i] = orig + h;
            let up = f(&theta);
            theta[i] = orig - h;
            let down = f(&theta);
            theta[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_differences_of_simple_functions() {
        let g = finite_difference_grad(|t| t[0] * t[0], &[3.0], 1e-4);
        assert!((g[0] - 6.0).abs() < 1e-6);
        let g = finite_difference_grad(|t| t[0].abs(), &[1.0], 1e-4);
        assert!((g[0] - 1.0).abs() < 1e-12);
        let g = finite_difference_grad(|t| t[0] * t[1], &[2.0, 5.0], 1e-3);
        assert!((g[0] - 5.0).abs() < 1e-9 && (g[1] - 2.0).abs() < 1e-9);
    }
}
