//! Adam with bias correction.

use super::tensor::{real, Real, Tensor, TensorError};

/// Hyperparameters. Defaults: lr 0.001, beta1 0.5 (adversarial-training
/// convention), beta2 0.999, epsilon 1e-8.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.5, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl AdamParams {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// Optimizer state for one parameter list: first/second moment buffers kept
/// in parameter order, plus the shared step count.
#[derive(Debug, Clone)]
pub struct AdamState<T: Real = f32> {
    params: AdamParams,
    t: u64,
    moments: Vec<Moments<T>>,
}

#[derive(Debug, Clone)]
pub struct Moments<T> {
    pub m: Vec<T>,
    pub s: Vec<T>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: AdamParams, tensors: &[Tensor<T>]) -> Self {
        let moments = tensors
            .iter()
            .map(|p| Moments { m: vec![T::zero(); p.numel()], s: vec![T::zero(); p.numel()] })
            .collect();
        Self { params, t: 0, moments }
    }

    pub fn params(&self) -> AdamParams {
        self.params
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> &[Moments<T>] {
        &self.moments
    }

    /// Restore from checkpointed buffers. Shapes must line up with the
    /// parameter list this state will be stepped with.
    pub fn restore(params: AdamParams, t: u64, moments: Vec<Moments<T>>) -> Self {
        Self { params, t, moments }
    }

    /// One update over the full parameter list. Every tensor must carry a
    /// gradient; `names` is consulted only for error messages.
    pub fn step(
        &mut self,
        tensors: &[Tensor<T>],
        names: impl Fn(usize) -> String,
    ) -> Result<(), TensorError> {
        assert_eq!(tensors.len(), self.moments.len(), "parameter list changed size");
        self.t += 1;
        let lr = real::<T>(self.params.lr);
        let b1 = real::<T>(self.params.beta1);
        let b2 = real::<T>(self.params.beta2);
        let eps = real::<T>(self.params.epsilon);
        let one = T::one();
        let bias1 = one - b1.powi(self.t as i32);
        let bias2 = one - b2.powi(self.t as i32);
        for (idx, (tensor, mom)) in tensors.iter().zip(&mut self.moments).enumerate() {
            let grad = tensor
                .grad()
                .ok_or_else(|| TensorError::MissingGrad { name: names(idx) })?;
            debug_assert_eq!(grad.len(), mom.m.len());
            tensor.update_data(|data| {
                for i in 0..data.len() {
                    let g = grad[i];
                    mom.m[i] = b1 * mom.m[i] + (one - b1) * g;
                    mom.s[i] = b2 * mom.s[i] + (one - b2) * g * g;
                    let m_hat = mom.m[i] / bias1;
                    let s_hat = mom.s[i] / bias2;
                    data[i] = data[i] - lr * m_hat / (s_hat.sqrt() + eps);
                }
            });
        }
        Ok(())
    }
}
