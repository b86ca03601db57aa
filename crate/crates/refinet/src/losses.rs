//! The loss system: autoencoder reconstruction error as the adversarial
//! signal, the equilibrium-balanced discriminator objective, the
//! reconstruction-weighted generator objective, and the k control update.
//!
//! With D an autoencoder, the per-image signal is the mean absolute
//! reconstruction error. The discriminator minimizes it on real images while
//! un-reconstructing generated ones in proportion to k; the generator blends
//! fooling the discriminator with directly matching the source image,
//! weighted by lambda_r. k follows the imbalance gamma*L(x) - L(G(z)) with
//! gain lambda_k, clamped to [0, 1].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("invalid loss weights: {0}")]
    InvalidWeights(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Target ratio between generated and real reconstruction losses at
    /// equilibrium, in (0, 1].
    pub gamma: f32,
    /// Proportional gain of the k update, positive.
    pub lambda_k: f32,
    /// Reconstruction weight in the generator objective, in [0, 1].
    pub lambda_r: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { gamma: 0.5, lambda_k: 0.001, lambda_r: 0.5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(LossError::InvalidWeights(format!(
                "gamma must be in (0, 1], got {}",
                self.gamma
            )));
        }
        if !self.lambda_k.is_finite() || self.lambda_k <= 0.0 {
            return Err(LossError::InvalidWeights(format!(
                "lambda_k must be positive, got {}",
                self.lambda_k
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda_r) {
            return Err(LossError::InvalidWeights(format!(
                "lambda_r must be in [0, 1], got {}",
                self.lambda_r
            )));
        }
        Ok(())
    }
}

/// Autoencoder loss |v - D(v)| (mean over elements): the adversarial signal.
pub fn loss_gan(v: &Tensor, d_out: &Tensor) -> Result<Tensor, TensorError> {
    v.l1_mean(d_out)
}

/// L_D = L_gan(x) - k_t * L_gan(G(z)).
pub fn discriminator_loss(
    l_gan_x: &Tensor,
    l_gan_gz: &Tensor,
    k_t: f32,
) -> Result<Tensor, TensorError> {
    l_gan_x.sub(&l_gan_gz.scale(k_t))
}

/// |v_hr - G(z)| (mean over elements): how far the refined image strays
/// from its source.
pub fn reconstruction_loss(v_hr: &Tensor, g_out: &Tensor) -> Result<Tensor, TensorError> {
    v_hr.l1_mean(g_out)
}

/// L_G = (1 - lambda_r) * L_gan(G(z)) + lambda_r * L_rcn.
pub fn generator_loss(
    l_gan_gz: &Tensor,
    l_rcn: &Tensor,
    lambda_r: f32,
) -> Result<Tensor, TensorError> {
    l_gan_gz.scale(1.0 - lambda_r).add(&l_rcn.scale(lambda_r))
}

/// k_{t+1} = k_t + lambda_k (gamma * L_gan(x) - L_gan(G(z))), clamped to
/// [0, 1].
pub fn update_k(k_t: f32, weights: &LossWeights, l_gan_x: f32, l_gan_gz: f32) -> f32 {
    (k_t + weights.lambda_k * (weights.gamma * l_gan_x - l_gan_gz)).clamp(0.0, 1.0)
}

/// Convergence scalar logged for monitoring only; drives nothing.
pub fn convergence_measure(gamma: f32, l_gan_x: f32, l_gan_gz: f32) -> f32 {
    l_gan_x + (gamma * l_gan_x - l_gan_gz).abs()
}

/// One training step's scalars, in CSV column order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub step: u64,
    pub l_gan_x: f32,
    pub l_gan_gz: f32,
    pub l_rcn: f32,
    pub l_d: f32,
    pub l_g: f32,
    /// The k used in this step's discriminator loss.
    pub k_t: f32,
    pub m: f32,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,L_gan_x,L_gan_gz,L_rcn,L_D,L_G,k_t,M";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step, self.l_gan_x, self.l_gan_gz, self.l_rcn, self.l_d, self.l_g, self.k_t,
            self.m
        )
    }

    pub fn all_finite(&self) -> bool {
        [self.l_gan_x, self.l_gan_gz, self.l_rcn, self.l_d, self.l_g, self.k_t, self.m]
            .iter()
            .all(|v| v.is_finite())
    }
}
