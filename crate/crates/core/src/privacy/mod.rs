//! Gaussian-mechanism noising of the client head output: per-sample L2
//! clipping followed by i.i.d. Gaussian noise.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, Real, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum PrivacyError {
    #[error("invalid privacy setting: {0}")]
    Validation(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DpConfig {
    pub enabled: bool,
    pub epsilon: f64,
    pub delta: f64,
    pub clip_norm: f64,
}

impl Default for DpConfig {
    fn default() -> Self {
        Self { enabled: false, epsilon: 1.0, delta: 1e-5, clip_norm: 1.0 }
    }
}

impl DpConfig {
    pub fn sigma(&self) -> Result<f64, PrivacyError> {
        sigma_from_epsilon(self.epsilon, self.delta, self.clip_norm)
    }

    pub fn validate(&self) -> Result<(), PrivacyError> {
        let sigma = self.sigma()?;
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(PrivacyError::Validation(format!("derived sigma {sigma} is not positive and finite")));
        }
        Ok(())
    }
}

/// Classical Gaussian-mechanism calibration `sqrt(2 ln(1.25/delta)) * C / epsilon`.
pub fn sigma_from_epsilon(epsilon: f64, delta: f64, clip_norm: f64) -> Result<f64, PrivacyError> {
    if !(epsilon > 0.0) {
        return Err(PrivacyError::Validation(format!("epsilon must be positive, got {epsilon}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(PrivacyError::Validation(format!("delta must lie in (0, 1), got {delta}")));
    }
    if !(clip_norm > 0.0 && clip_norm.is_finite()) {
        return Err(PrivacyError::Validation(format!("clip norm must be positive and finite, got {clip_norm}")));
    }
    Ok((2.0 * (1.25 / delta).ln()).sqrt() * clip_norm / epsilon)
}

/// A tensor of i.i.d. `N(0, sigma^2)` draws.
pub fn gaussian_noise<R: Rng + ?Sized>(shape: &[usize], sigma: f64, rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            (sigma * z) as Real
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("count matches shape")
}

/// Clips each sample (leading axis) to L2 norm `C` and adds noise.
pub fn clip_and_noise<R: Rng + ?Sized>(h: &Tensor, config: &DpConfig, rng: &mut R) -> Result<Tensor, PrivacyError> {
    let sigma = config.sigma()?;
    let rows = h.shape().first().copied().unwrap_or(1);
    let width = if rows == 0 { 0 } else { h.numel() / rows };
    let c = config.clip_norm as Real;
    let mut out = h.data().to_vec();
    for row in out.chunks_mut(width.max(1)) {
        let norm = row.iter().map(|v| v * v).sum::<Real>().sqrt();
        if norm > c {
            let s = c / norm;
            row.iter_mut().for_each(|v| *v *= s);
        }
    }
    let mut out = Tensor::new(h.shape().to_vec(), out)?;
    out.add_assign(&gaussian_noise(h.shape(), sigma, rng));
    Ok(out)
}

/// Graph form of [`clip_and_noise`]: clipping is differentiated exactly and
/// the noise enters as a constant, so gradients reach the head unchanged.
pub fn clip_and_noise_var<R: Rng + ?Sized>(
    g: &mut Graph,
    h: Var,
    config: &DpConfig,
    rng: &mut R,
) -> Result<Var, PrivacyError> {
    let sigma = config.sigma()?;
    let clipped = g.clip_rows(h, config.clip_norm as Real)?;
    let noise = g.constant(gaussian_noise(&g.shape(h).to_vec(), sigma, rng));
    Ok(g.add(clipped, noise)?)
}
