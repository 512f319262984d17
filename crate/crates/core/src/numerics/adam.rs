use crate::error::{config_err, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Adam moments for a fixed list of parameter vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(shapes: &[usize]) -> Self {
        Self::with_config(shapes, AdamConfig::default())
    }

    pub fn with_config(shapes: &[usize], config: AdamConfig) -> Self {
        Self {
            config,
            first: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update. `None` gradients leave the matching
    /// parameter and its moments untouched.
    pub fn step(
        &mut self,
        params: &mut [&mut [f64]],
        grads: &[Option<&[f64]>],
        lr: f64,
    ) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return config_err(format!(
                "adam tracks {} parameters, got {} params and {} gradients",
                self.first.len(),
                params.len(),
                grads.len()
            ));
        }
        if !(lr >= 0.0) {
            return config_err(format!("learning rate must be >= 0, got {lr}"));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.first[i].len() || g.is_some_and(|g| g.len() != p.len()) {
                return config_err(format!("parameter {i} does not match its adam moments"));
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, epsilon } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for j in 0..p.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] -= lr * mh / (vh.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_keeps_params() {
        let mut adam = Adam::new(&[3]);
        let mut p = vec![1.0, -2.0, 3.0];
        adam.step(&mut [&mut p], &[Some(&[0.0; 3])], 0.01).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut adam = Adam::new(&[1]);
        let mut p = vec![0.0];
        adam.step(&mut [&mut p], &[Some(&[1.0])], 0.001).unwrap();
        // m_hat / sqrt(v_hat) = 1
        assert!((p[0] + 0.001 / (1.0 + 1e-8)).abs() < 1e-15);

        let first = p[0];
        adam.step(&mut [&mut p], &[Some(&[1.0])], 0.001).unwrap();
        let second = p[0] - first;
        assert!((second.abs() / first.abs() - 1.0).abs() < 0.01);
        assert_eq!(adam.steps(), 2);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut adam = Adam::new(&[2]);
        let mut p = vec![0.0; 3];
        assert!(adam.step(&mut [&mut p], &[Some(&[1.0; 3])], 0.1).is_err());
        let mut p = vec![0.0; 2];
        assert!(adam.step(&mut [&mut p], &[Some(&[1.0; 3])], 0.1).is_err());
    }
}
