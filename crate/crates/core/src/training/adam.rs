use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamMap;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// First and second moment estimates, created lazily per parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: ParamMap,
    pub v: ParamMap,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One Adam update with bias correction for every parameter that has a
/// gradient. Every gradient is checked first; a non-finite entry aborts the
/// step with nothing modified.
pub fn adam_step(
    params: &mut ParamMap,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    for (name, g) in grads {
        let p = params.get(name).ok_or_else(|| Error::param(name.as_str(), "gradient for an unknown parameter"))?;
        if p.shape() != g.shape() {
            return Err(Error::dim("adam_step", format!("{name}: gradient {:?} vs parameter {:?}", g.shape(), p.shape())));
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient { name: name.clone() });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        for (((p, m), v), &g) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
            let g = g as f64;
            let m_new = b1 * *m as f64 + (1.0 - b1) * g;
            let v_new = b2 * *v as f64 + (1.0 - b2) * g * g;
            *m = m_new as f32;
            *v = v_new as f32;
            let step = lr * (m_new / c1) / ((v_new / c2).sqrt() + cfg.epsilon);
            if step != 0.0 {
                *p = (*p as f64 - step) as f32;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(name: &str, v: Vec<f32>) -> BTreeMap<String, Tensor> {
        let n = v.len();
        BTreeMap::from([(name.to_string(), Tensor::new(vec![n], v).unwrap())])
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_state() {
        let mut params = single("w", vec![1.5, -2.0]);
        let before = params.clone();
        let mut state = AdamState::new();
        adam_step(&mut params, &single("w", vec![0.0, 0.0]), &mut state, 0.1, &AdamConfig::default()).unwrap();
        assert_eq!(params, before);

        let mut state = AdamState::new();
        state.m.insert("w".into(), Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
        state.v.insert("w".into(), Tensor::new(vec![2], vec![4.0, 2.0]).unwrap());
        adam_step(&mut params, &single("w", vec![0.0, 0.0]), &mut state, 0.0, &AdamConfig::default()).unwrap();
        assert_eq!(params, before);
        assert_eq!(state.m["w"].data(), &[0.9, -0.9]);
        assert_eq!(state.v["w"].data(), &[(4.0 * 0.999) as f32, (2.0 * 0.999) as f32]);
    }

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let mut params = single("w", vec![0.0, 1.0, -1.0]);
        let mut state = AdamState::new();
        let lr = 1e-3;
        adam_step(&mut params, &single("w", vec![3.0, -0.5, 1e-2]), &mut state, lr, &AdamConfig::default()).unwrap();
        let d = params["w"].data();
        for (moved, (start, sign)) in d.iter().zip([(0.0, -1.0), (1.0, 1.0), (-1.0, -1.0)]) {
            assert!(((moved - start) as f64 - sign * lr).abs() < 1e-6, "{moved}");
        }
    }

    #[test]
    fn converges_on_a_scalar_quadratic() {
        let mut params = single("w", vec![0.0]);
        let mut state = AdamState::new();
        for _ in 0..200 {
            let w = params["w"].data()[0];
            adam_step(&mut params, &single("w", vec![2.0 * (w - 3.0)]), &mut state, 0.1, &AdamConfig::default()).unwrap();
        }
        assert!((params["w"].data()[0] - 3.0).abs() < 0.1, "{}", params["w"].data()[0]);
    }

    #[test]
    fn non_finite_gradient_aborts_and_names_the_parameter() {
        let mut params = single("a", vec![1.0]);
        params.insert("b".into(), Tensor::new(vec![1], vec![2.0]).unwrap());
        let before = params.clone();
        let mut grads = single("a", vec![1.0]);
        grads.insert("b".into(), Tensor::new(vec![1], vec![f32::NAN]).unwrap());
        let mut state = AdamState::new();
        match adam_step(&mut params, &grads, &mut state, 0.1, &AdamConfig::default()) {
            Err(Error::NonFiniteGradient { name }) => assert_eq!(name, "b"),
            other => panic!("{other:?}"),
        }
        assert_eq!(params, before);
        assert_eq!(state, AdamState::new());
    }

    #[test]
    fn zero_learning_rate_never_changes_params() {
        let mut params = single("w", vec![0.25, -0.0, 7.0]);
        let before = params.clone();
        let mut state = AdamState::new();
        for i in 0..5 {
            let g = single("w", vec![i as f32, -3.0, 1e-9]);
            adam_step(&mut params, &g, &mut state, 0.0, &AdamConfig::default()).unwrap();
        }
        assert_eq!(params["w"].data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            before["w"].data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}
