//! Adam with decoupled weight decay.

use crate::error::{GlatError, Result};
use crate::model::{Gradients, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// First and second moment estimates for one flat tensor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One Adam step on a flat tensor; `t` is the 1-based step count.
///
/// `p ← p - lr·wd·p - lr·m̂/(√v̂ + ε)`
pub fn adam_update(params: &mut [f64], grads: &[f64], moments: &mut Moments, t: u64, cfg: &AdamConfig) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(moments.m.iter_mut())
        .zip(moments.v.iter_mut())
    {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= cfg.lr * cfg.weight_decay * *p;
        *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub moments: Vec<Moments>,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            step: 0,
            moments: params.tensors().iter().map(|(_, t)| Moments::zeros(t.len())).collect(),
        }
    }
}

/// Updates every trainable tensor in place.
pub fn adam_step(params: &mut ModelParams, grads: &Gradients, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    state.step += 1;
    let grad_tensors = grads.tensors();
    for (((name, p), (_, g)), moments) in params
        .tensors_mut()
        .into_iter()
        .zip(grad_tensors.iter())
        .zip(state.moments.iter_mut())
    {
        if p.len() != g.len() || moments.m.len() != p.len() {
            return Err(GlatError::dims(format!("gradient shape for {name} differs from the parameter")));
        }
        adam_update(p, g, moments, state.step, cfg);
        if !p.iter().all(|v| v.is_finite()) {
            return Err(GlatError::NonFiniteUpdate(name.to_string()));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let params = ModelParams::init(&ModelConfig { d: 4, d_k: 2, d_v: 3, m_max: 5, ..Default::default() }, 1).unwrap();
        let mut p = params.clone();
        let g = Gradients::zeros_like(&p);
        let mut state = AdamState::new(&p);
        let cfg = AdamConfig { weight_decay: 0.0, ..Default::default() };
        for _ in 0..3 {
            adam_step(&mut p, &g, &mut state, &cfg).unwrap();
        }
        assert_eq!(p, params);
        assert_eq!(state.step, 3);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut x = [0.0];
        let mut mom = Moments::zeros(1);
        let cfg = AdamConfig { weight_decay: 0.0, ..Default::default() };
        adam_update(&mut x, &[1.0], &mut mom, 1, &cfg);
        assert!((x[0] + cfg.lr).abs() < 1e-12);
        let mut y = [0.0];
        let mut mom = Moments::zeros(1);
        adam_update(&mut y, &[-250.0], &mut mom, 1, &cfg);
        assert!((y[0] - cfg.lr).abs() < 1e-12);
    }

    #[test]
    fn quadratic_descent_matches_scalar_reference() {
        // f(x) = (x - 3)² / 2, gradient x - 3.
        let cfg = AdamConfig { lr: 0.1, weight_decay: 1e-2, ..Default::default() };
        let mut x = [0.0];
        let mut mom = Moments::zeros(1);
        let (mut rx, mut rm, mut rv) = (0.0f64, 0.0f64, 0.0f64);
        let mut prev = f64::INFINITY;
        for t in 1..=10u64 {
            let g = x[0] - 3.0;
            adam_update(&mut x, &[g], &mut mom, t, &cfg);

            let rg = rx - 3.0;
            rm = 0.9 * rm + 0.1 * rg;
            rv = 0.999 * rv + 0.001 * rg * rg;
            let mh = rm / (1.0 - 0.9f64.powi(t as i32));
            let vh = rv / (1.0 - 0.999f64.powi(t as i32));
            rx = rx - 0.1 * 1e-2 * rx - 0.1 * mh / (vh.sqrt() + 1e-8);

            assert!((x[0] - rx).abs() < 1e-15, "step {t}");
            let loss = 0.5 * (x[0] - 3.0) * (x[0] - 3.0);
            assert!(loss < prev);
            prev = loss;
        }
    }

    #[test]
    fn non_finite_update_is_reported() {
        let mut p = ModelParams::init(&ModelConfig { d: 2, d_k: 1, d_v: 1, m_max: 1, ..Default::default() }, 1).unwrap();
        let mut g = Gradients::zeros_like(&p);
        g.cls_b[0] = f64::NAN;
        let mut state = AdamState::new(&p);
        assert!(matches!(
            adam_step(&mut p, &g, &mut state, &AdamConfig::default()),
            Err(GlatError::NonFiniteUpdate(name)) if name == "cls_b"
        ));
    }
}
