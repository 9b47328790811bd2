use super::{HybridModel, Parameters};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Parameters,
    pub v: Parameters,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &Parameters) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Rejects non-finite gradients before
/// touching the model or the moments.
pub fn adam_step(
    model: &mut HybridModel,
    grads: &Parameters,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    let named = grads.named();
    if let Some((name, _)) = named.iter().find(|(_, m)| !m.is_finite()) {
        return Err(Error::NonFiniteGradient(name.clone()));
    }
    if state.m.len() != grads.len() || model.params.len() != grads.len() {
        return Err(Error::shape("adam_step", model.params.len(), grads.len()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let params = model.params.tensors_mut();
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    for (((p, m), v), (_, g)) in params.into_iter().zip(ms).zip(vs).zip(named) {
        let iter = p
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g.data());
        for (((p, m), v), &g) in iter {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::numerics::RopeConfig;

    fn tiny() -> HybridModel {
        HybridModel::init(ModelConfig {
            n_layers: 1,
            n_heads: 1,
            head_dim: 2,
            ffn_mult: 1,
            vocab_size: 3,
            block_size: 2,
            rope: RopeConfig {
                head_dim: 2,
                base: 10_000.0,
            },
            seed: 3,
            tied_embeddings: true,
        })
        .unwrap()
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut model = tiny();
        let before = model.clone();
        let grads = model.params.zeros_like();
        let mut state = AdamState::new(&model.params);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        adam_step(&mut model, &grads, &mut state, &cfg).unwrap();
        assert_eq!(model, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut model = tiny();
        let before = model.params.to_flat();
        let mut grads = model.params.zeros_like();
        grads.embed.set(0, 0, 1.0);
        let mut state = AdamState::new(&model.params);
        let cfg = AdamConfig {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        adam_step(&mut model, &grads, &mut state, &cfg).unwrap();
        // m̂ = 1, v̂ = 1 → Δ = −lr · 1/(1 + eps)
        let delta = model.params.embed.get(0, 0) - before[0];
        assert!((delta + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
        let after = model.params.to_flat();
        assert_eq!(&after[1..], &before[1..]);
    }

    #[test]
    fn non_finite_gradient_is_rejected_without_side_effects() {
        let mut model = tiny();
        let before = model.clone();
        let mut grads = model.params.zeros_like();
        grads.layers[0].wq.set(0, 1, f64::NAN);
        let mut state = AdamState::new(&model.params);
        let err = adam_step(&mut model, &grads, &mut state, &AdamConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "layers.0.wq"));
        assert_eq!(model, before);
        assert_eq!(state.step, 0);
    }
}
