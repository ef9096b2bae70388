//! Independent robustness oracle for low-dimensional inputs. Exhaustive
//! input bisection with its own f64 endpoint-interval arithmetic — shares
//! no code with the production bound engine, so the two can cross-check
//! each other. Dense architectures only, input dimension at most 3 (corner
//! enumeration is exponential).

use crate::arch::LayerKind;
use crate::error::{Error, Result};
use crate::network::{LayerParams, Network, BN_EPS};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum OracleVerdict {
    /// Every sub-box cleared the safety margin.
    Robust,
    /// Concrete misclassified point (validated on the real network).
    NotRobust(Tensor),
    /// Budget or precision exhausted without a conclusion.
    Unknown,
}

#[derive(Clone, Copy, Debug)]
pub struct OracleConfig {
    /// Stop splitting below this box width.
    pub min_width: f64,
    /// Hard cap on processed boxes.
    pub max_boxes: usize,
    /// Margins must clear this slack before a box counts as robust,
    /// absorbing the f32-vs-f64 evaluation gap.
    pub safety: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig { min_width: 1e-3, max_boxes: 200_000, safety: 1e-6 }
    }
}

pub fn oracle_supported(net: &Network) -> bool {
    let dense = net
        .arch
        .layers
        .iter()
        .all(|l| !matches!(l, LayerKind::Conv2d { .. }));
    dense && net.arch.input_shape.iter().product::<usize>() <= 3
}

/// Endpoint-arithmetic interval pass over dense layers, all in f64.
fn interval_logits(net: &Network, lo: &[f64], hi: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut lo = lo.to_vec();
    let mut hi = hi.to_vec();
    for param in &net.params {
        match param {
            LayerParams::Affine { w, b } => {
                let out_f = w.shape()[0];
                let in_f = w.shape()[1];
                let mut nlo = vec![0.0f64; out_f];
                let mut nhi = vec![0.0f64; out_f];
                for o in 0..out_f {
                    let mut a = b.data()[o] as f64;
                    let mut z = a;
                    for i in 0..in_f {
                        let wv = w.data()[o * in_f + i] as f64;
                        if wv >= 0.0 {
                            a += wv * lo[i];
                            z += wv * hi[i];
                        } else {
                            a += wv * hi[i];
                            z += wv * lo[i];
                        }
                    }
                    nlo[o] = a;
                    nhi[o] = z;
                }
                lo = nlo;
                hi = nhi;
            }
            LayerParams::BatchNorm { gamma, beta, running_mean, running_var } => {
                for c in 0..gamma.len() {
                    let s = gamma.data()[c] as f64
                        / ((running_var.data()[c] as f64) + BN_EPS as f64).sqrt();
                    let t = beta.data()[c] as f64 - s * running_mean.data()[c] as f64;
                    let (a, z) = if s >= 0.0 {
                        (s * lo[c] + t, s * hi[c] + t)
                    } else {
                        (s * hi[c] + t, s * lo[c] + t)
                    };
                    lo[c] = a;
                    hi[c] = z;
                }
            }
            LayerParams::Conv { .. } => unreachable!("guarded by oracle_supported"),
            LayerParams::None => {
                // ReLU (flatten is the identity on a flat vector).
                for v in lo.iter_mut().chain(hi.iter_mut()) {
                    *v = v.max(0.0);
                }
            }
        }
    }
    (lo, hi)
}

fn worst_margin(lo: &[f64], hi: &[f64], label: usize) -> f64 {
    let worst_other = hi
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != label)
        .map(|(_, v)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    lo[label] - worst_other
}

fn point_misclassified(net: &Network, p: &[f64], label: usize) -> Option<Tensor> {
    let x = Tensor::new(
        net.arch.input_shape.clone(),
        p.iter().map(|&v| v as f32).collect(),
    )
    .expect("input shape");
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    let logits = net
        .forward(&x.reshape(shape).expect("batch"))
        .expect("forward on valid input");
    if logits.argmax_rows()[0] != label {
        Some(x)
    } else {
        None
    }
}

/// Decide robustness of the eps-ball around `x` by exhaustive bisection.
pub fn oracle_bisect(
    net: &Network,
    x: &Tensor,
    label: usize,
    eps: f32,
    range: (f32, f32),
    cfg: &OracleConfig,
) -> Result<OracleVerdict> {
    if !oracle_supported(net) {
        return Err(Error::InvalidInput(
            "oracle handles dense nets with at most 3 inputs".into(),
        ));
    }
    let d = x.len();
    let lo0: Vec<f64> = x
        .data()
        .iter()
        .map(|&v| ((v - eps).max(range.0)) as f64)
        .collect();
    let hi0: Vec<f64> = x
        .data()
        .iter()
        .map(|&v| ((v + eps).min(range.1)) as f64)
        .collect();

    if let Some(w) = point_misclassified(net, &x.data().iter().map(|&v| v as f64).collect::<Vec<_>>(), label)
    {
        return Ok(OracleVerdict::NotRobust(w));
    }

    let mut stack = vec![(lo0, hi0)];
    let mut boxes = 0usize;
    let mut any_unknown = false;
    while let Some((lo, hi)) = stack.pop() {
        boxes += 1;
        if boxes > cfg.max_boxes {
            return Ok(OracleVerdict::Unknown);
        }
        let (zl, zh) = interval_logits(net, &lo, &hi);
        if worst_margin(&zl, &zh, label) > cfg.safety {
            continue;
        }
        // Corners and center, checked on the real network.
        for mask in 0..(1usize << d) {
            let p: Vec<f64> = (0..d)
                .map(|i| if mask & (1 << i) != 0 { hi[i] } else { lo[i] })
                .collect();
            if let Some(w) = point_misclassified(net, &p, label) {
                return Ok(OracleVerdict::NotRobust(w));
            }
        }
        let center: Vec<f64> = lo.iter().zip(&hi).map(|(l, h)| (l + h) * 0.5).collect();
        if let Some(w) = point_misclassified(net, &center, label) {
            return Ok(OracleVerdict::NotRobust(w));
        }
        let (axis, width) = (0..d)
            .map(|i| (i, hi[i] - lo[i]))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .expect("nonempty input");
        if width < cfg.min_width {
            any_unknown = true;
            continue;
        }
        let mid = (lo[axis] + hi[axis]) * 0.5;
        let mut left_hi = hi.clone();
        left_hi[axis] = mid;
        let mut right_lo = lo.clone();
        right_lo[axis] = mid;
        stack.push((lo, left_hi));
        stack.push((right_lo, hi));
    }
    Ok(if any_unknown { OracleVerdict::Unknown } else { OracleVerdict::Robust })
}
