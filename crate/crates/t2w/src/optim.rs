//! Adam with bias correction, global-norm gradient clipping, and the cosine
//! learning-rate schedule with linear warmup used by the denoiser trainer.

use crate::matrix::DenseMatrix;

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam state for a fixed list of parameter tensors (matched by position).
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, shapes: &[(usize, usize)]) -> Self {
        let m = shapes.iter().map(|(r, c)| vec![0.0; r * c]).collect();
        let v = shapes.iter().map(|(r, c)| vec![0.0; r * c]).collect();
        Self { config, m, v, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over all parameters. `lr_scale` multiplies the base rate
    /// (schedule hook); gradients are applied in position order.
    pub fn step(&mut self, params: &mut [DenseMatrix], grads: &[DenseMatrix], lr_scale: f64) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.step += 1;
        let t = self.step as f64;
        let b1 = self.config.beta1;
        let b2 = self.config.beta2;
        let bc1 = 1.0 - b1.powf(t);
        let bc2 = 1.0 - b2.powf(t);
        let lr = self.config.lr * lr_scale;
        for ((param, grad), (m, v)) in
            params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let pv = param.values_mut();
            let gv = grad.values();
            for i in 0..pv.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * gv[i];
                v[i] = b2 * v[i] + (1.0 - b2) * gv[i] * gv[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                pv[i] -= lr * m_hat / (v_hat.sqrt() + self.config.eps);
            }
        }
    }
}

/// Scales gradients in place so their global L2 norm does not exceed
/// `max_norm`. Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [DenseMatrix], max_norm: f64) -> f64 {
    let total: f64 = grads.iter().map(|g| g.values().iter().map(|x| x * x).sum::<f64>()).sum();
    let norm = total.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads {
            for x in g.values_mut() {
                *x *= scale;
            }
        }
    }
    norm
}

/// Linear warmup to 1.0 over `warmup` epochs, then cosine decay to 0 across
/// the remaining epochs. Epochs are 0-indexed.
pub fn cosine_warmup_scale(epoch: usize, total_epochs: usize, warmup: usize) -> f64 {
    if total_epochs == 0 {
        return 1.0;
    }
    if warmup > 0 && epoch < warmup {
        return (epoch + 1) as f64 / warmup as f64;
    }
    let span = total_epochs.saturating_sub(warmup).max(1) as f64;
    let progress = (epoch.saturating_sub(warmup)) as f64 / span;
    0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_descends_quadratic() {
        // f(x) = sum x^2, grad = 2x
        let mut params = vec![DenseMatrix::from_vec(1, 3, vec![1.0, -2.0, 3.0]).unwrap()];
        let mut adam = Adam::new(AdamConfig::with_lr(0.05), &[(1, 3)]);
        for _ in 0..500 {
            let grads = vec![params[0].scale(2.0)];
            adam.step(&mut params, &grads, 1.0);
        }
        assert!(params[0].values().iter().all(|x| x.abs() < 1e-3));
    }

    #[test]
    fn clip_caps_norm() {
        let mut grads = vec![DenseMatrix::from_vec(1, 2, vec![3.0, 4.0]).unwrap()];
        let before = clip_global_norm(&mut grads, 0.1);
        assert!((before - 5.0).abs() < 1e-12);
        let after: f64 = grads[0].values().iter().map(|x| x * x).sum::<f64>();
        assert!((after.sqrt() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn warmup_is_increasing_then_cosine() {
        let w0 = cosine_warmup_scale(0, 30, 5);
        let w5 = cosine_warmup_scale(5, 30, 5);
        assert!(w0 < w5);
        assert!((w5 - 1.0).abs() < 1e-12);
        let late = cosine_warmup_scale(29, 30, 5);
        assert!(late < 0.02);
    }
}
