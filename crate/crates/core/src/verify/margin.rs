//! Margin specifications: robustness of a labeled sample means every margin
//! z_label - z_j (j != label) stays positive over the input box. The rows
//! are folded through the final affine layer, which is exact and lets every
//! bounding method start from the penultimate activation.

use crate::bounds::crown::LinSpec;
use crate::bounds::Bounds;
use crate::network::{LayerParams, Network};
use crate::tensor::{kernels, Tensor};

/// Classes compared against `label`, in ascending order; row `i` of every
/// margin artifact refers to `margin_classes(..)[i]`.
pub fn margin_classes(num_classes: usize, label: usize) -> Vec<usize> {
    (0..num_classes).filter(|&j| j != label).collect()
}

/// Rows e_label - e_j over the logits, shape [k-1, k].
pub fn logit_margin_rows(num_classes: usize, label: usize) -> Tensor {
    let k = num_classes;
    let mut rows = vec![0.0f32; (k - 1) * k];
    for (i, j) in margin_classes(k, label).into_iter().enumerate() {
        rows[i * k + label] = 1.0;
        rows[i * k + j] = -1.0;
    }
    Tensor::new(vec![k - 1, k], rows).expect("margin rows shape")
}

/// Margin rows folded through the final affine layer: linear functions of
/// the penultimate activation, anchored just before the last layer.
pub fn margin_spec(net: &Network, label: usize) -> LinSpec {
    let k = net.num_classes();
    let last = net.arch.layers.len() - 1;
    let (w, b) = match &net.params[last] {
        LayerParams::Affine { w, b } => (w, b),
        _ => unreachable!("validated arch ends in affine"),
    };
    let rows = logit_margin_rows(k, label);
    let n_pen = w.shape()[1];
    let folded = kernels::matmul(rows.data(), w.data(), k - 1, k, n_pen);
    let mut consts = vec![0.0f32; k - 1];
    for i in 0..k - 1 {
        for j in 0..k {
            consts[i] += rows.data()[i * k + j] * b.data()[j];
        }
    }
    LinSpec {
        rows: Tensor::new(vec![k - 1, n_pen], folded).expect("folded margin shape"),
        consts: Tensor::from_vec(consts),
        layer: last,
    }
}

/// Interval lower bounds on the margins from logit bounds alone:
/// l_label - u_j per compared class.
pub fn ibp_margin_lower(logits: &Bounds, label: usize) -> Vec<f32> {
    let k = logits.len();
    margin_classes(k, label)
        .into_iter()
        .map(|j| logits.lower.data()[label] - logits.upper.data()[j])
        .collect()
}
