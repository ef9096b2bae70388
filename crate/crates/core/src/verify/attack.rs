//! Projected gradient descent inside the perturbation ball. The verifier
//! runs this first: a concrete misclassification settles a query without
//! touching the bounding machinery.

use rand::Rng;

use crate::error::Result;
use crate::network::{Mode, Network, TapedNet};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct AttackConfig {
    pub steps: usize,
    /// Step size as a fraction of eps.
    pub step_frac: f32,
    /// Random restarts after the clean start.
    pub restarts: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig { steps: 20, step_frac: 0.25, restarts: 1 }
    }
}

/// Gradient of the cross-entropy loss at `x` (single sample, batchless)
/// with respect to the input.
pub fn input_grad(net: &Network, x: &Tensor, label: usize) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    let mut tape = Tape::new();
    let tnet = TapedNet::register(&mut tape, net);
    let xv = tape.leaf(x.reshape(shape)?);
    let fwd = tnet.forward(&mut tape, net, xv, Mode::Eval)?;
    let loss = tape.cross_entropy(fwd.output, &[label])?;
    let mut grads = tape.backward(loss)?;
    let g = grads.take_or_zeros(xv, tape.value(xv).shape());
    g.reshape(x.shape().to_vec())
}

fn misclassified(net: &Network, x: &Tensor, label: usize) -> bool {
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    let logits = net
        .forward(&Tensor::new(shape, x.data().to_vec()).expect("batch shape"))
        .expect("forward on valid input");
    logits.argmax_rows()[0] != label
}

pub(crate) fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Search for a misclassified point in the eps-ball around `x` (clipped to
/// `range`). Returns the first adversarial point found, checked against the
/// network's own argmax rule.
pub fn pgd_attack(
    net: &Network,
    x: &Tensor,
    label: usize,
    eps: f32,
    range: (f32, f32),
    cfg: AttackConfig,
    rng: &mut impl Rng,
) -> Result<Option<Tensor>> {
    let lo = x.map(|v| (v - eps).max(range.0));
    let hi = x.map(|v| (v + eps).min(range.1));
    let step = eps * cfg.step_frac;

    for restart in 0..=cfg.restarts {
        let mut cur = if restart == 0 {
            x.clone()
        } else {
            Tensor::new(
                x.shape().to_vec(),
                lo.data()
                    .iter()
                    .zip(hi.data())
                    .map(|(l, u)| if l < u { rng.gen_range(*l..=*u) } else { *l })
                    .collect(),
            )?
        };
        if misclassified(net, &cur, label) {
            return Ok(Some(cur));
        }
        for _ in 0..cfg.steps {
            let g = input_grad(net, &cur, label)?;
            let data: Vec<f32> = cur
                .data()
                .iter()
                .zip(g.data())
                .zip(lo.data().iter().zip(hi.data()))
                .map(|((c, g), (l, u))| (c + step * sign(*g)).clamp(*l, *u))
                .collect();
            cur = Tensor::new(x.shape().to_vec(), data)?;
            if misclassified(net, &cur, label) {
                return Ok(Some(cur));
            }
        }
    }
    Ok(None)
}
