use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

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
            lr: 4e-5,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter tensor plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        AdamState {
            step: 0,
            m: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
        }
    }
}

/// One bias-corrected Adam update of every tensor in `params`.
pub fn adam_step<T: Real>(
    params: &mut [Tensor<T>],
    grads: &[Vec<T>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::contract(format!(
            "adam: {} parameters, {} gradients, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || state.m[i].len() != p.len() || state.v[i].len() != p.len() {
            return Err(Error::Dimension {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: vec![g.len()],
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let c1 = T::lit(1.0 - cfg.beta1.powi(t));
    let c2 = T::lit(1.0 - cfg.beta2.powi(t));
    let (lr, eps) = (T::lit(cfg.lr), T::lit(cfg.eps));
    let one = T::one();
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, x) in p.data_mut().iter_mut().enumerate() {
            let g = grads[i][j];
            m[j] = b1 * m[j] + (one - b1) * g;
            v[j] = b2 * v[j] + (one - b2) * g * g;
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            *x -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = vec![Tensor::new([1], vec![1.0f64]).unwrap()];
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &[vec![0.3]], &mut s, &AdamConfig::default()).unwrap();
        let delta = p[0].data()[0] - 1.0;
        let expect = -4e-5 * 0.3 / (0.3 + 1e-8);
        assert!((delta - expect).abs() < 1e-15);
        assert!((delta + 4e-5).abs() < 1e-11);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![Tensor::from_fn([2, 3], |i| i as f32)];
        let before = p.clone();
        let mut s = AdamState::new(&p);
        for _ in 0..3 {
            adam_step(&mut p, &[vec![0.0; 6]], &mut s, &AdamConfig::default()).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let mut p = vec![Tensor::from_fn([2], |_| 0.0f32)];
        let mut s = AdamState::new(&p);
        assert!(adam_step(&mut p, &[vec![0.0; 3]], &mut s, &AdamConfig::default()).is_err());
        assert!(adam_step(&mut p, &[], &mut s, &AdamConfig::default()).is_err());
    }
}
