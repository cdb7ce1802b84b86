//! AdamW (decoupled weight decay) and the linear learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;

/// Optimizer hyperparameters. Defaults follow the training recipe this
/// artifact ships with: AdamW at lr 6e-4 decayed linearly to zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.6,
        }
    }
}

/// First/second moment accumulators for a parameter list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn for_params(params: &[Tensor]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }
}

/// One AdamW update. `grads[i]` of `None` means "no gradient reached this
/// parameter this step"; weight decay still applies to it. Deterministic:
/// plain loops in index order.
pub fn adamw_step(
    params: &mut [Tensor],
    grads: &[Option<&[f64]>],
    state: &mut AdamState,
    lr: f64,
    hyper: &AdamHyper,
) {
    assert_eq!(params.len(), grads.len(), "params/grads length mismatch");
    assert_eq!(params.len(), state.m.len(), "params/state length mismatch");
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    for (i, param) in params.iter_mut().enumerate() {
        let data = param.make_mut();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        match grads[i] {
            Some(g) => {
                assert_eq!(g.len(), data.len(), "grad length mismatch for param {i}");
                for j in 0..data.len() {
                    m[j] = hyper.beta1 * m[j] + (1.0 - hyper.beta1) * g[j];
                    v[j] = hyper.beta2 * v[j] + (1.0 - hyper.beta2) * g[j] * g[j];
                    let mhat = m[j] / bc1;
                    let vhat = v[j] / bc2;
                    data[j] -= lr * (mhat / (vhat.sqrt() + hyper.eps) + hyper.weight_decay * data[j]);
                }
            }
            None => {
                for j in 0..data.len() {
                    m[j] *= hyper.beta1;
                    v[j] *= hyper.beta2;
                    let mhat = m[j] / bc1;
                    let vhat = v[j] / bc2;
                    data[j] -= lr * (mhat / (vhat.sqrt() + hyper.eps) + hyper.weight_decay * data[j]);
                }
            }
        }
    }
}

/// Linear decay from `lr0` at step 0 to exactly zero at `total_steps`.
pub fn linear_lr(step: u64, total_steps: u64, lr0: f64) -> f64 {
    assert!(step <= total_steps, "step {step} beyond total {total_steps}");
    lr0 * (1.0 - step as f64 / total_steps as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn hyper(wd: f64) -> AdamHyper {
        AdamHyper {
            weight_decay: wd,
            ..AdamHyper::default()
        }
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut params = vec![Tensor::from_vec(vec![2], vec![1.5, -2.0])];
        let mut state = AdamState::for_params(&params);
        let g = vec![0.0, 0.0];
        adamw_step(&mut params, &[Some(&g)], &mut state, 1e-3, &hyper(0.0));
        assert_eq!(params[0].data(), &[1.5, -2.0]);
    }

    #[test]
    fn first_step_is_signed_unit_update() {
        let mut params = vec![Tensor::from_vec(vec![2], vec![0.0, 0.0])];
        let mut state = AdamState::for_params(&params);
        let g = vec![0.3, -0.02];
        let lr = 1e-2;
        let h = hyper(0.0);
        adamw_step(&mut params, &[Some(&g)], &mut state, lr, &h);
        for (p, gi) in params[0].data().iter().zip(&g) {
            let expect = -lr * gi / (gi.abs() + h.eps);
            assert_abs_diff_eq!(*p, expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn decay_only_shrinks_by_factor() {
        let mut params = vec![Tensor::from_vec(vec![2], vec![2.0, -4.0])];
        let mut state = AdamState::for_params(&params);
        let g = vec![0.0, 0.0];
        let (lr, wd) = (1e-2, 0.5);
        adamw_step(&mut params, &[Some(&g)], &mut state, lr, &hyper(wd));
        assert_abs_diff_eq!(params[0].data()[0], 2.0 * (1.0 - lr * wd), epsilon = 1e-12);
        assert_abs_diff_eq!(params[0].data()[1], -4.0 * (1.0 - lr * wd), epsilon = 1e-12);
    }

    #[test]
    fn linear_schedule_endpoints_and_midpoint() {
        assert_abs_diff_eq!(linear_lr(0, 100, 6e-4), 6e-4);
        assert_abs_diff_eq!(linear_lr(100, 100, 6e-4), 0.0);
        assert_abs_diff_eq!(linear_lr(50, 100, 6e-4), 3e-4);
    }
}
