//! SGD with momentum and the inverse-decay schedule used by every run:
//! `lr(progress) = base_lr * (1 + 10 * progress)^(-0.75)` with
//! `progress = step / total_steps` supplied by the training loop.

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("parameter {index} (shape {shape:?}) has no gradient")]
    MissingGrad { index: usize, shape: Vec<usize> },
    #[error("optimizer was created for {expected} parameters, got {got}")]
    ParamCountChanged { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SgdConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Cap on the joint gradient norm of the parameter list passed to one
    /// `step` call; 0 disables clipping.
    pub grad_clip: f64,
}

impl SgdConfig {
    pub fn new(base_lr: f64) -> Self {
        SgdConfig { base_lr, momentum: 0.9, weight_decay: 0.0, grad_clip: 0.0 }
    }
}

/// Per-parameter-group optimizer state. Velocity buffers are allocated on the
/// first step and keyed by parameter position, so the caller must pass the
/// same parameter list (in the same order) on every step.
pub struct SgdState {
    pub config: SgdConfig,
    velocities: Option<Vec<Vec<f64>>>,
    pub steps_taken: u64,
}

impl SgdState {
    pub fn new(config: SgdConfig) -> Self {
        SgdState { config, velocities: None, steps_taken: 0 }
    }

    pub fn lr_at(&self, progress: f64) -> f64 {
        self.config.base_lr * (1.0 + 10.0 * progress).powf(-0.75)
    }

    /// One update: `v <- momentum * v + g` then `p <- p - lr(progress) * v`.
    /// Every parameter must carry a gradient; gradients are left in place for
    /// the caller to clear. With `grad_clip > 0`, gradients are rescaled so
    /// their joint norm over the whole list stays at or below the cap.
    pub fn step(&mut self, params: &[&Tensor], progress: f64) -> Result<(), OptimError> {
        let velocities = self
            .velocities
            .get_or_insert_with(|| params.iter().map(|p| vec![0.0; p.len()]).collect());
        if velocities.len() != params.len() {
            return Err(OptimError::ParamCountChanged {
                expected: velocities.len(),
                got: params.len(),
            });
        }
        let mut grads = Vec::with_capacity(params.len());
        for (index, param) in params.iter().enumerate() {
            let grad = param.grad().ok_or_else(|| OptimError::MissingGrad {
                index,
                shape: param.shape().to_vec(),
            })?;
            grads.push(grad);
        }
        let mut clip_scale = 1.0;
        if self.config.grad_clip > 0.0 {
            let norm_sq: f64 =
                grads.iter().flat_map(|g| g.iter()).map(|g| g * g).sum();
            let norm = norm_sq.sqrt();
            if norm > self.config.grad_clip {
                clip_scale = self.config.grad_clip / norm;
            }
        }
        let lr = self.config.base_lr * (1.0 + 10.0 * progress).powf(-0.75);
        let momentum = self.config.momentum;
        let wd = self.config.weight_decay;
        for ((param, grad), v) in params.iter().zip(&grads).zip(velocities.iter_mut()) {
            let mut values = param.to_vec();
            for i in 0..values.len() {
                let g = clip_scale * grad[i] + wd * values[i];
                v[i] = momentum * v[i] + g;
                values[i] -= lr * v[i];
            }
            param.set_values(&values);
        }
        self.steps_taken += 1;
        Ok(())
    }
}
