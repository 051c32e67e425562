use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::net::{round_to_f32, ParameterStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

/// First and second moments per parameter, plus the number of steps taken.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

/// Bias-corrected Adam update for one parameter. Moments are updated in
/// place; returns the parameter delta for step number `step` (1-based).
pub fn adam_update(
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    lr: f64,
    cfg: &AdamConfig,
) -> Vec<f64> {
    let c1 = 1.0 - cfg.beta1.powi(step as i32);
    let c2 = 1.0 - cfg.beta2.powi(step as i32);
    grad.iter()
        .zip(m.iter_mut().zip(v.iter_mut()))
        .map(|(&g, (m, v))| {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            -lr * m_hat / (v_hat.sqrt() + cfg.epsilon)
        })
        .collect()
}

/// One Adam step over every parameter.
///
/// Parameters and moments are kept on the `f32` grid so a 32-bit
/// checkpoint captures the training state exactly.
pub fn adam_step(
    params: &mut ParameterStore,
    grads: &BTreeMap<String, Vec<f64>>,
    state: &mut OptimizerState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    for (name, p) in params.iter() {
        match grads.get(name) {
            Some(g) if g.len() == p.numel() => {}
            Some(g) => {
                return Err(Error::contract(format!(
                    "gradient for {name} has {} values, parameter has {}",
                    g.len(),
                    p.numel()
                )))
            }
            None => return Err(Error::contract(format!("missing gradient for {name}"))),
        }
    }
    state.step += 1;
    for (name, p) in params.iter_mut() {
        let n = p.numel();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let delta = adam_update(&grads[name], m, v, state.step, lr, cfg);
        round_to_f32(m);
        round_to_f32(v);
        let data = p.data_mut();
        for (x, d) in data.iter_mut().zip(&delta) {
            *x += d;
        }
        round_to_f32(data);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    const CFG: AdamConfig = AdamConfig {
        beta1: 0.5,
        beta2: 0.99,
        epsilon: 1e-8,
    };

    #[test]
    fn first_step_is_lr_times_sign() {
        let g = [0.3, -2.0, 1e-3];
        let (mut m, mut v) = (vec![0.0; 3], vec![0.0; 3]);
        let d = adam_update(&g, &mut m, &mut v, 1, 1e-4, &CFG);
        for (di, gi) in d.iter().zip(g) {
            // m_hat = g, v_hat = g^2.
            let expect = -1e-4 * gi / (gi.abs() + 1e-8);
            assert!((di - expect).abs() < 1e-18);
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = ParameterStore::new();
        s.insert("w", Tensor::new(&[2], vec![0.5, -0.25]).unwrap()).unwrap();
        let before = s.clone();
        let mut st = OptimizerState::default();
        let grads = BTreeMap::from([("w".to_string(), vec![0.0, 0.0])]);
        adam_step(&mut s, &grads, &mut st, 1e-3, &CFG).unwrap();
        assert_eq!(s, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut s = ParameterStore::new();
        s.insert("w", Tensor::zeros(&[2])).unwrap();
        let mut st = OptimizerState::default();
        assert!(adam_step(&mut s, &BTreeMap::new(), &mut st, 1e-3, &CFG).is_err());
        assert_eq!(st.step, 0);
    }
}
