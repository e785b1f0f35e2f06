//! Adam with bias correction.

use crate::error::{NumError, Result};
use crate::params::ParameterStore;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Decay applied directly to the update (`true`) or folded into the
    /// gradient as an L2 term (`false`).
    pub decoupled: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            decoupled: true,
        }
    }
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamConfig {
            lr,
            weight_decay,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(NumError::Optimizer(format!("learning rate {} must be positive", self.lr)));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(NumError::Optimizer(format!(
                "weight decay {} must be non-negative",
                self.weight_decay
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(NumError::Optimizer("betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// One Adam update of every trainable parameter, consuming the gradient
/// buffers. Fails before touching any value if a trainable parameter has no
/// gradient.
pub fn adam_step(store: &mut ParameterStore, cfg: &AdamConfig) -> Result<()> {
    cfg.validate()?;
    for id in store.ids().collect::<Vec<_>>() {
        let p = store.get(id);
        if p.trainable && p.grad.is_none() {
            return Err(NumError::MissingGradient(p.name.clone()));
        }
    }
    store.step += 1;
    let t = store.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let precision = store.precision();

    for id in store.ids().collect::<Vec<_>>() {
        if !store.get(id).trainable {
            continue;
        }
        let (param, moments) = store.split_mut(id);
        let grad = param.grad.take().expect("checked above");
        let moments = moments.expect("trainable parameters carry moments");
        let values = param.value.data_mut();
        for (i, (&g0, w)) in grad.data().iter().zip(values.iter_mut()).enumerate() {
            let g = if cfg.decoupled {
                g0
            } else {
                g0 + cfg.weight_decay * *w
            };
            let m = cfg.beta1 * moments.first[i] + (1.0 - cfg.beta1) * g;
            let v = cfg.beta2 * moments.second[i] + (1.0 - cfg.beta2) * g * g;
            moments.first[i] = m;
            moments.second[i] = v;
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            let mut update = m_hat / (v_hat.sqrt() + cfg.eps);
            if cfg.decoupled {
                update += cfg.weight_decay * *w;
            }
            *w = precision.round(*w - cfg.lr * update);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store_with(values: &[f64]) -> (ParameterStore, crate::params::ParamId) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParameterStore::new();
        let t = Tensor::column(values.to_vec()).unwrap();
        let id = s.register("w", values.len(), 1, Init::Value(t), &mut rng).unwrap();
        (s, id)
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let (mut s, id) = store_with(&[0.5, -1.0]);
        s.accumulate_grad(id, &Tensor::zeros(2, 1)).unwrap();
        adam_step(&mut s, &AdamConfig::new(0.1, 0.0)).unwrap();
        assert_eq!(s.value(id).data(), &[0.5, -1.0]);
        assert_eq!(s.step(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let lr = 0.01;
        let (mut s, id) = store_with(&[2.0]);
        s.accumulate_grad(id, &Tensor::scalar(1.0)).unwrap();
        adam_step(&mut s, &AdamConfig::new(lr, 0.0)).unwrap();
        // m_hat = v_hat = 1 on the first step, so the update is lr / (1 + eps).
        let expected = 2.0 - lr / (1.0 + 1e-8);
        assert!((s.value(id).data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn identical_state_updates_identically() {
        let (mut s, id) = store_with(&[0.3, 0.3]);
        for step in 0..5 {
            let g = 0.1 * step as f64 - 0.2;
            s.accumulate_grad(id, &Tensor::column(vec![g, g]).unwrap()).unwrap();
            adam_step(&mut s, &AdamConfig::new(0.05, 1e-3)).unwrap();
            let v = s.value(id).data();
            assert_eq!(v[0].to_bits(), v[1].to_bits());
        }
    }

    #[test]
    fn missing_gradient_is_named() {
        let (mut s, _) = store_with(&[1.0]);
        let err = adam_step(&mut s, &AdamConfig::default()).unwrap_err();
        assert!(matches!(err, NumError::MissingGradient(ref n) if n == "w"));
        assert_eq!(s.step(), 0);
    }

    #[test]
    fn decoupled_versus_coupled_decay() {
        let (mut a, ida) = store_with(&[1.0]);
        let (mut b, idb) = store_with(&[1.0]);
        a.accumulate_grad(ida, &Tensor::scalar(0.0)).unwrap();
        b.accumulate_grad(idb, &Tensor::scalar(0.0)).unwrap();
        let mut cfg = AdamConfig::new(0.1, 0.5);
        adam_step(&mut a, &cfg).unwrap();
        // decoupled: w - lr * wd * w
        assert!((a.value(ida).data()[0] - 0.95).abs() < 1e-15);
        cfg.decoupled = false;
        adam_step(&mut b, &cfg).unwrap();
        // coupled: the L2 term is normalized by Adam, so the first step is ~lr.
        assert!((b.value(idb).data()[0] - (1.0 - 0.1 / (1.0 + 1e-8 / 0.5))).abs() < 1e-12);
    }

    #[test]
    fn frozen_parameters_do_not_need_gradients() {
        let (mut s, id) = store_with(&[1.0]);
        s.set_trainable(id, false);
        adam_step(&mut s, &AdamConfig::default()).unwrap();
        assert_eq!(s.value(id).data(), &[1.0]);
    }
}
