use serde::{Deserialize, Serialize};

use super::unet::{Grads, Param};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment accumulators, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[Param]) -> Self {
        AdamState {
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut [Param], grads: &Grads, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::dim("parameter, gradient and moment counts differ"));
    }
    for (i, p) in params.iter().enumerate() {
        let n = p.data.len();
        if grads[i].len() != n || state.m[i].len() != n || state.v[i].len() != n {
            return Err(Error::dim(format!("shape mismatch for {}", p.name)));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.data.iter_mut().enumerate() {
            let g = grads[i][j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            *w -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Vec<Param> {
        vec![Param {
            name: "w".into(),
            dims: vec![1],
            data: vec![v],
        }]
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = scalar(0.7);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &vec![vec![0.0]], &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(p[0].data[0], 0.7);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_is_lr_sized() {
        let cfg = AdamConfig::default();
        let mut p = scalar(0.0);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &vec![vec![1.0]], &mut st, &cfg).unwrap();
        let expected = -cfg.lr / (1.0 + cfg.eps);
        assert!((p[0].data[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn five_step_trajectory_matches_recurrence() {
        let cfg = AdamConfig::default();
        let gs = [1.0, -1.0, 1.0, -1.0, 1.0];
        let mut p = scalar(0.3);
        let mut st = AdamState::new(&p);

        // hand-unrolled recurrence
        let (mut m, mut v, mut w) = (0.0f64, 0.0f64, 0.3f64);
        let mut b1t = 1.0f64;
        let mut b2t = 1.0f64;
        for g in gs {
            adam_step(&mut p, &vec![vec![g]], &mut st, &cfg).unwrap();
            b1t *= 0.9;
            b2t *= 0.999;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            w -= 1e-3 * (m / (1.0 - b1t)) / ((v / (1.0 - b2t)).sqrt() + 1e-8);
            assert!((p[0].data[0] - w).abs() < 1e-12);
        }
        assert_eq!(st.t, 5);
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let mut p = scalar(0.0);
        let mut st = AdamState::new(&p);
        assert!(adam_step(&mut p, &vec![vec![1.0, 2.0]], &mut st, &AdamConfig::default()).is_err());
        assert_eq!(st.t, 0);
    }
}
