//! SGD-with-momentum and Adam, plus global gradient-norm clipping.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimKind {
    Sgd { momentum: f32 },
    Adam { beta1: f32, beta2: f32, eps: f32 },
}

impl OptimKind {
    pub fn adam_default() -> Self {
        OptimKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
enum Slot {
    Sgd { velocity: Tensor },
    Adam { m: Tensor, v: Tensor },
}

/// Optimizer state over an ordered parameter list. The caller passes params
/// and grads in the same order every step.
#[derive(Clone, Debug)]
pub struct OptimState {
    pub kind: OptimKind,
    pub lr: f32,
    pub weight_decay: f32,
    /// Multiplier from milestone decay; effective lr is `lr * lr_scale`.
    pub lr_scale: f32,
    step_count: u64,
    slots: Vec<Slot>,
}

impl OptimState {
    pub fn new(kind: OptimKind, lr: f32, weight_decay: f32, shapes: &[Vec<usize>]) -> Self {
        let slots = shapes
            .iter()
            .map(|s| match kind {
                OptimKind::Sgd { .. } => Slot::Sgd {
                    velocity: Tensor::zeros(s.clone()),
                },
                OptimKind::Adam { .. } => Slot::Adam {
                    m: Tensor::zeros(s.clone()),
                    v: Tensor::zeros(s.clone()),
                },
            })
            .collect();
        OptimState {
            kind,
            lr,
            weight_decay,
            lr_scale: 1.0,
            step_count: 0,
            slots,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One in-place update. `params` and `grads` must align with the shapes
    /// the state was created with.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) {
        assert_eq!(params.len(), self.slots.len(), "param count mismatch");
        assert_eq!(grads.len(), self.slots.len(), "grad count mismatch");
        self.step_count += 1;
        let lr = self.lr * self.lr_scale;
        let wd = self.weight_decay;
        for ((param, grad), slot) in params.iter_mut().zip(grads).zip(&mut self.slots) {
            match (&self.kind, slot) {
                (OptimKind::Sgd { momentum }, Slot::Sgd { velocity }) => {
                    let v = velocity.data_mut();
                    let p = param.data_mut();
                    for i in 0..p.len() {
                        v[i] = momentum * v[i] + grad.data()[i] + wd * p[i];
                        p[i] -= lr * v[i];
                    }
                }
                (OptimKind::Adam { beta1, beta2, eps }, Slot::Adam { m, v }) => {
                    let bc1 = 1.0 - beta1.powi(self.step_count as i32);
                    let bc2 = 1.0 - beta2.powi(self.step_count as i32);
                    let md = m.data_mut();
                    let vd = v.data_mut();
                    let p = param.data_mut();
                    for i in 0..p.len() {
                        let g = grad.data()[i] + wd * p[i];
                        md[i] = beta1 * md[i] + (1.0 - beta1) * g;
                        vd[i] = beta2 * vd[i] + (1.0 - beta2) * g * g;
                        let mhat = md[i] / bc1;
                        let vhat = vd[i] / bc2;
                        p[i] -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
                _ => unreachable!("slot kind matches optimizer kind by construction"),
            }
        }
    }
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the applied scale factor (1.0 when already within the limit).
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f32) -> f32 {
    let mut sq = 0.0f64;
    for g in grads.iter() {
        for &v in g.data() {
            sq += (v as f64) * (v as f64);
        }
    }
    let norm = sq.sqrt() as f32;
    if norm <= max_norm || norm == 0.0 {
        return 1.0;
    }
    let scale = max_norm / norm;
    for g in grads.iter_mut() {
        for v in g.data_mut() {
            *v *= scale;
        }
    }
    scale
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_momentum_two_steps() {
        // lr=1, momentum=0.9, w0=0, g=1 twice: v=1, w=-1; v=1.9, w=-2.9.
        let mut state = OptimState::new(OptimKind::Sgd { momentum: 0.9 }, 1.0, 0.0, &[vec![1]]);
        let mut w = Tensor::scalar(0.0);
        let g = Tensor::scalar(1.0);
        state.step(&mut [&mut w], std::slice::from_ref(&g));
        assert_eq!(w.item(), -1.0);
        state.step(&mut [&mut w], std::slice::from_ref(&g));
        assert!((w.item() - (-2.9)).abs() < 1e-6);
    }

    #[test]
    fn adam_first_step_magnitude() {
        // Bias correction makes the first step ~ -lr * sign(g).
        let mut state = OptimState::new(OptimKind::adam_default(), 1e-3, 0.0, &[vec![1]]);
        let mut w = Tensor::scalar(0.0);
        let g = Tensor::scalar(4.0);
        state.step(&mut [&mut w], std::slice::from_ref(&g));
        assert!((w.item() - (-1e-3)).abs() < 1e-9);
    }

    #[test]
    fn zero_grad_zero_decay_is_noop() {
        for kind in [OptimKind::Sgd { momentum: 0.9 }, OptimKind::adam_default()] {
            let mut state = OptimState::new(kind, 0.1, 0.0, &[vec![2]]);
            let mut w = Tensor::from_vec(vec![1.5, -0.5]);
            let before = w.clone();
            let g = Tensor::zeros(vec![2]);
            state.step(&mut [&mut w], std::slice::from_ref(&g));
            assert_eq!(w, before);
        }
    }

    #[test]
    fn clip_rescales_to_max_norm() {
        let mut grads = vec![Tensor::from_vec(vec![3.0]), Tensor::from_vec(vec![4.0])];
        let scale = clip_grad_norm(&mut grads, 1.0);
        assert!((scale - 0.2).abs() < 1e-7);
        assert!((grads[0].data()[0] - 0.6).abs() < 1e-7);
        assert!((grads[1].data()[0] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn clip_below_threshold_is_identity() {
        let mut grads = vec![Tensor::from_vec(vec![0.3, 0.4])];
        let scale = clip_grad_norm(&mut grads, 8.0);
        assert_eq!(scale, 1.0);
        assert_eq!(grads[0].data(), &[0.3, 0.4]);
    }
}
