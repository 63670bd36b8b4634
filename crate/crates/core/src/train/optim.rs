use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, Gradients, ParamStore};

/// Global L2 norm over every gradient buffer.
pub fn global_norm(grads: &Gradients) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the applied factor (1 when already within bounds).
pub fn clip_gradients(params: &ParamStore, grads: &mut Gradients, max_norm: f64) -> Result<f64> {
    for (id, g) in params.ids().zip(grads.iter()) {
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient {
                param: params.name(id).to_string(),
            });
        }
    }
    let norm = global_norm(grads);
    if norm <= max_norm {
        return Ok(1.0);
    }
    let scale = max_norm / norm;
    grads.scale(scale as Float);
    Ok(scale)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the number of completed steps.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<Float>>,
    pub v: Vec<Vec<Float>>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<Float>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update of every parameter.
pub fn adam_step(params: &mut ParamStore, grads: &Gradients, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if state.m.len() != params.len() || grads.len() != params.len() {
        return Err(Error::Config(format!(
            "optimizer state has {} buffers, gradients {}, parameters {}",
            state.m.len(),
            grads.len(),
            params.len()
        )));
    }
    let t = state
        .step
        .checked_add(1)
        .ok_or_else(|| Error::Config("optimizer step counter overflow".into()))?;
    let exp = i32::try_from(t).unwrap_or(i32::MAX);
    let c1 = 1.0 - cfg.beta1.powi(exp);
    let c2 = 1.0 - cfg.beta2.powi(exp);
    let (b1, b2) = (cfg.beta1 as Float, cfg.beta2 as Float);
    for id in params.ids().collect::<Vec<_>>() {
        let g = grads.get(id);
        let (m, v) = (&mut state.m[id.index()], &mut state.v[id.index()]);
        if m.len() != g.len() {
            return Err(Error::Config(format!(
                "optimizer state shape mismatch for {}",
                params.name(id)
            )));
        }
        let p = params.get_mut(id).data_mut();
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] as f64 / c1;
            let v_hat = v[i] as f64 / c2;
            p[i] -= (cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps)) as Float;
        }
    }
    state.step = t;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn one(values: &[Float]) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new([values.len()], values.to_vec()).unwrap());
        s
    }

    fn grads_of(store: &ParamStore, g: &[Float]) -> Gradients {
        let mut grads = Gradients::zeros_like(store);
        grads.get_mut(store.id("w").unwrap()).copy_from_slice(g);
        grads
    }

    #[test]
    fn clip_scales_down_only() {
        let s = one(&[0.0, 0.0]);
        let mut g = grads_of(&s, &[2.0, 0.0]);
        assert_eq!(clip_gradients(&s, &mut g, 1.0).unwrap(), 0.5);
        assert_eq!(g.get(s.id("w").unwrap()), &[1.0, 0.0]);
        let mut g = grads_of(&s, &[0.3, 0.4]);
        assert_eq!(clip_gradients(&s, &mut g, 1.0).unwrap(), 1.0);
        assert_eq!(g.get(s.id("w").unwrap()), &[0.3, 0.4]);
    }

    #[test]
    fn clip_names_nan_parameter() {
        let s = one(&[0.0]);
        let mut g = grads_of(&s, &[Float::NAN]);
        let err = clip_gradients(&s, &mut g, 1.0).unwrap_err();
        assert!(err.to_string().contains('w'));
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = one(&[1.0, 1.0]);
        let g = grads_of(&s, &[3.0, -0.5]);
        let mut st = AdamState::new(&s);
        let cfg = AdamConfig::default();
        adam_step(&mut s, &g, &mut st, &cfg).unwrap();
        let w = s.by_name("w").unwrap().data();
        assert!((w[0] - (1.0 - 5e-4)).abs() < 1e-9);
        assert!((w[1] - (1.0 + 5e-4)).abs() < 1e-9);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut s = one(&[0.25]);
        let g = grads_of(&s, &[0.0]);
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &g, &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(s.by_name("w").unwrap().data(), &[0.25]);
    }

    #[test]
    fn step_overflow_is_an_error() {
        let mut s = one(&[0.0]);
        let g = grads_of(&s, &[1.0]);
        let mut st = AdamState::new(&s);
        st.step = u64::MAX;
        assert!(adam_step(&mut s, &g, &mut st, &AdamConfig::default()).is_err());
    }
}
