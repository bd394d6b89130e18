use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor};
use super::TensorError;

/// Adam hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TensorError::Validation(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(TensorError::Validation("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) {
            return Err(TensorError::Validation("Adam eps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Slot {
    m: Vec<Real>,
    v: Vec<Real>,
    step: u64,
}

/// First/second moment estimates, one slot per parameter tensor.
///
/// Each slot keeps its own step count, so tensors that are skipped in a step
/// (no gradient) keep an unbiased correction when they resume.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    slots: Vec<Slot>,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let slots = params
            .into_iter()
            .map(|t| Slot { m: vec![0.0; t.numel()], v: vec![0.0; t.numel()], step: 0 })
            .collect();
        Self { slots }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn step_count(&self, slot: usize) -> u64 {
        self.slots[slot].step
    }

    pub fn moments(&self, slot: usize) -> (&[Real], &[Real]) {
        (&self.slots[slot].m, &self.slots[slot].v)
    }
}

/// One bias-corrected Adam update. Entries of `grads` that are `None` leave
/// the matching parameter and its moments untouched.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Option<Tensor>],
    state: &mut AdamState,
    config: &AdamConfig,
) -> Result<(), TensorError> {
    config.validate()?;
    if params.len() != grads.len() || params.len() != state.slots.len() {
        return Err(TensorError::Validation(format!(
            "adam_step: {} params, {} grads, {} state slots",
            params.len(),
            grads.len(),
            state.slots.len()
        )));
    }
    let (b1, b2) = (config.beta1 as Real, config.beta2 as Real);
    let (lr, eps) = (config.lr as Real, config.eps as Real);
    for ((param, grad), slot) in params.iter_mut().zip(grads).zip(&mut state.slots) {
        let Some(grad) = grad else { continue };
        if grad.shape() != param.shape() || slot.m.len() != param.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                left: param.shape().to_vec(),
                right: grad.shape().to_vec(),
            });
        }
        slot.step += 1;
        let t = slot.step as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (((p, &g), m), v) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(&mut slot.m)
            .zip(&mut slot.v)
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64) -> AdamConfig {
        AdamConfig { lr, ..AdamConfig::default() }
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = Tensor::new([3], vec![3.0, -0.5, 1e-2]).unwrap();
        let mut state = AdamState::new([&p]);
        adam_step(&mut [&mut p], &[Some(g.clone())], &mut state, &cfg(1e-3)).unwrap();
        // m_hat = g, v_hat = g^2 after bias correction, so the step is lr * g / (|g| + eps).
        let expect = [1.0 - 1e-3 * 3.0 / (3.0 + 1e-8), -2.0 + 1e-3 * 0.5 / (0.5 + 1e-8), 0.5 - 1e-3 * 1e-2 / (1e-2 + 1e-8)];
        for (a, b) in p.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
        assert_eq!(state.step_count(0), 1);
    }

    #[test]
    fn zero_grad_leaves_param_and_moments() {
        let mut p = Tensor::new([2], vec![0.25, -1.0]).unwrap();
        let before = p.clone();
        let mut state = AdamState::new([&p]);
        adam_step(&mut [&mut p], &[Some(Tensor::zeros([2]))], &mut state, &cfg(1e-2)).unwrap();
        assert_eq!(p, before);
        let (m, v) = state.moments(0);
        assert!(m.iter().chain(v).all(|&x| x == 0.0));
    }

    #[test]
    fn constant_grad_moves_monotonically() {
        let mut p = Tensor::new([1], vec![0.0]).unwrap();
        let mut state = AdamState::new([&p]);
        let g = Tensor::new([1], vec![-0.7]).unwrap();
        let mut last = p.data()[0];
        for _ in 0..2 {
            adam_step(&mut [&mut p], &[Some(g.clone())], &mut state, &cfg(1e-3)).unwrap();
            assert!(p.data()[0] > last);
            last = p.data()[0];
        }
    }

    #[test]
    fn missing_grad_skips_slot() {
        let mut a = Tensor::ones([2]);
        let mut b = Tensor::ones([2]);
        let mut state = AdamState::new([&a, &b]);
        let g = Some(Tensor::ones([2]));
        adam_step(&mut [&mut a, &mut b], &[g, None], &mut state, &cfg(1e-2)).unwrap();
        assert_ne!(a, Tensor::ones([2]));
        assert_eq!(b, Tensor::ones([2]));
        assert_eq!(state.step_count(1), 0);
    }

    #[test]
    fn rejects_non_positive_lr() {
        let mut p = Tensor::ones([1]);
        let mut state = AdamState::new([&p]);
        let err = adam_step(&mut [&mut p], &[Some(Tensor::ones([1]))], &mut state, &cfg(0.0));
        assert!(matches!(err, Err(TensorError::Validation(_))));
    }
}
