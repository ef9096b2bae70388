//! Backward linear bound propagation (CROWN). A set of linear rows over some
//! layer's output is substituted backwards through the network — ReLUs are
//! replaced by sign-dependent linear relaxations chosen from interval
//! pre-activation bounds — until the rows act on the input, where they are
//! minimized over the box in closed form.

use super::{Bounds, LayerBounds};
use crate::arch::LayerKind;
use crate::network::{bn_fold, LayerParams, Network};
use crate::tensor::{kernels, Tensor};

/// Linear envelope of one ReLU over pre-activation interval [l, u]:
/// relu(z) <= upper_slope * z + upper_intercept and
/// relu(z) >= lower_slope * z on the interval.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReluRelax {
    pub upper_slope: f32,
    pub upper_intercept: f32,
    pub lower_slope: f32,
}

pub fn relu_relaxation(l: f32, u: f32) -> ReluRelax {
    if l >= 0.0 {
        ReluRelax { upper_slope: 1.0, upper_intercept: 0.0, lower_slope: 1.0 }
    } else if u <= 0.0 {
        ReluRelax { upper_slope: 0.0, upper_intercept: 0.0, lower_slope: 0.0 }
    } else {
        let slope = u / (u - l);
        ReluRelax {
            upper_slope: slope,
            upper_intercept: -l * slope,
            // Adaptive lower line: pick the tighter of z and 0 by interval
            // mass; u >= -l keeps the identity side.
            lower_slope: if u >= -l { 1.0 } else { 0.0 },
        }
    }
}

/// `m` linear functions of the output of arch layer `layer - 1` (the network
/// input when `layer` is 0): row_i . activation + consts_i.
#[derive(Clone, Debug)]
pub struct LinSpec {
    /// Coefficients, shape [m, n] with n the flattened activation size.
    pub rows: Tensor,
    /// Constant offsets, shape [m].
    pub consts: Tensor,
    /// Anchor: rows consume the output of layer `layer - 1`.
    pub layer: usize,
}

impl LinSpec {
    pub fn num_rows(&self) -> usize {
        self.rows.shape()[0]
    }
}

/// Substitute `spec` backwards until its rows act on the network input.
/// ReLU steps lower-bound each row, so the result under-approximates the
/// original rows pointwise on the box described by `lb`.
pub fn backsubstitute(net: &Network, lb: &LayerBounds, mut spec: LinSpec) -> LinSpec {
    let m = spec.num_rows();
    while spec.layer > 0 {
        let li = spec.layer - 1;
        let n = spec.rows.len() / m;
        match (&net.arch.layers[li], &net.params[li]) {
            (LayerKind::Affine { in_features, out_features }, LayerParams::Affine { w, b }) => {
                let rows = kernels::matmul(spec.rows.data(), w.data(), m, *out_features, *in_features);
                let consts = spec.consts.data_mut();
                for i in 0..m {
                    let mut acc = 0.0f32;
                    for k in 0..*out_features {
                        acc += spec.rows.data()[i * out_features + k] * b.data()[k];
                    }
                    consts[i] += acc;
                }
                spec.rows = Tensor::new(vec![m, *in_features], rows).expect("matmul shape");
            }
            (LayerKind::Conv2d { stride, padding, .. }, LayerParams::Conv { w, b }) => {
                // Rows act on the conv output; pulling them back through the
                // convolution is exactly the input-gradient operator, with
                // the m rows as the batch.
                let in_shape = if li == 0 {
                    &net.arch.input_shape[..]
                } else {
                    lb.layers[li - 1].lower.shape()
                };
                let mut g = super::ibp::conv_geom1(in_shape, w.shape(), *stride, *padding);
                g.batch = m;
                let rows = kernels::conv2d_input_grad(spec.rows.data(), w.data(), &g);
                let consts = spec.consts.data_mut();
                let hw = g.out_h * g.out_w;
                for i in 0..m {
                    let mut acc = 0.0f32;
                    for c in 0..g.out_c {
                        let base = (i * g.out_c + c) * hw;
                        let coeff: f32 = spec.rows.data()[base..base + hw].iter().sum();
                        acc += coeff * b.data()[c];
                    }
                    consts[i] += acc;
                }
                let n_in: usize = in_shape.iter().product();
                spec.rows = Tensor::new(vec![m, n_in], rows).expect("conv shape");
            }
            (
                LayerKind::BatchNorm { features },
                LayerParams::BatchNorm { gamma, beta, running_mean, running_var },
            ) => {
                let (s, t) =
                    bn_fold(gamma.data(), beta.data(), running_mean.data(), running_var.data());
                let spatial = n / features;
                let consts = spec.consts.data_mut();
                let rows = spec.rows.data_mut();
                for i in 0..m {
                    for j in 0..n {
                        let c = j / spatial;
                        let coeff = rows[i * n + j];
                        consts[i] += coeff * t[c];
                        rows[i * n + j] = coeff * s[c];
                    }
                }
            }
            (LayerKind::Relu, _) => {
                let pre = lb.preact(li);
                let consts = spec.consts.data_mut();
                let rows = spec.rows.data_mut();
                for i in 0..m {
                    for j in 0..n {
                        let relax = relu_relaxation(pre.lower.data()[j], pre.upper.data()[j]);
                        let coeff = rows[i * n + j];
                        if coeff >= 0.0 {
                            rows[i * n + j] = coeff * relax.lower_slope;
                        } else {
                            rows[i * n + j] = coeff * relax.upper_slope;
                            consts[i] += coeff * relax.upper_intercept;
                        }
                    }
                }
            }
            // Row-major flattening: coefficients already line up.
            (LayerKind::Flatten, _) => {}
            _ => unreachable!("params aligned with arch by construction"),
        }
        spec.layer = li;
    }
    spec
}

/// Closed-form minimum of input-anchored rows over the input box:
/// c . mu - |c| . r + const per row.
pub fn concretize_lower(spec: &LinSpec, input: &Bounds) -> Tensor {
    assert_eq!(spec.layer, 0, "spec must be anchored at the input");
    let m = spec.num_rows();
    let n = input.len();
    let mut out = Vec::with_capacity(m);
    for i in 0..m {
        let mut acc = spec.consts.data()[i] as f64;
        for j in 0..n {
            let c = spec.rows.data()[i * n + j] as f64;
            let l = input.lower.data()[j] as f64;
            let u = input.upper.data()[j] as f64;
            let mu = (l + u) * 0.5;
            let r = (u - l) * 0.5;
            acc += c * mu - c.abs() * r;
        }
        out.push(acc as f32);
    }
    Tensor::from_vec(out)
}

/// Lower-bound each row of `rows . logits + consts` over the input box,
/// using the pre-activation intervals recorded in `lb` for the relaxations.
pub fn crown_lower(net: &Network, lb: &LayerBounds, rows: &Tensor, consts: &Tensor) -> Tensor {
    let spec = LinSpec {
        rows: rows.clone(),
        consts: consts.clone(),
        layer: net.arch.layers.len(),
    };
    crown_lower_spec(net, lb, spec)
}

/// Lower-bound an already-anchored spec over the input box.
pub fn crown_lower_spec(net: &Network, lb: &LayerBounds, spec: LinSpec) -> Tensor {
    let at_input = backsubstitute(net, lb, spec);
    concretize_lower(&at_input, &lb.input)
}

/// `concretize_lower` plus, per row, the box corner attaining the bound
/// (zero coefficients take the lower edge).
pub fn concretize_with_corners(spec: &LinSpec, input: &Bounds) -> (Tensor, Vec<Tensor>) {
    assert_eq!(spec.layer, 0, "spec must be anchored at the input");
    let m = spec.num_rows();
    let n = input.len();
    let mut bounds = Vec::with_capacity(m);
    let mut corners = Vec::with_capacity(m);
    for i in 0..m {
        let mut acc = spec.consts.data()[i] as f64;
        let mut corner = Vec::with_capacity(n);
        for j in 0..n {
            let c = spec.rows.data()[i * n + j];
            let l = input.lower.data()[j];
            let u = input.upper.data()[j];
            let at = if c > 0.0 { l } else { u };
            acc += c as f64 * at as f64;
            corner.push(if c == 0.0 { l } else { at });
        }
        bounds.push(acc as f32);
        corners.push(
            Tensor::new(input.lower.shape().to_vec(), corner).expect("corner shape"),
        );
    }
    (Tensor::from_vec(bounds), corners)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::ArchSpec;
    use crate::bounds::ibp::propagate_ibp;
    use crate::bounds::{input_box, PhaseConstraints};
    use crate::network::{Network, PruneScope};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn relaxation_goldens() {
        let r = relu_relaxation(-1.0, 3.0);
        assert_eq!((r.upper_slope, r.upper_intercept, r.lower_slope), (0.75, 0.75, 1.0));
        let r = relu_relaxation(-3.0, 1.0);
        assert_eq!((r.upper_slope, r.upper_intercept, r.lower_slope), (0.25, 0.75, 0.0));
        let r = relu_relaxation(-1.0, 1.0);
        assert_eq!((r.upper_slope, r.upper_intercept, r.lower_slope), (0.5, 0.5, 1.0));
        let r = relu_relaxation(0.0, 2.0);
        assert_eq!((r.upper_slope, r.upper_intercept, r.lower_slope), (1.0, 0.0, 1.0));
        let r = relu_relaxation(-2.0, 0.0);
        assert_eq!((r.upper_slope, r.upper_intercept, r.lower_slope), (0.0, 0.0, 0.0));
    }

    /// Pure affine net W = [[1,-1],[2,0]], b = [0,1]; rows [2,-1] on logits
    /// give g = -2*x2 - 1, minimized at x2 = 1: exactly -3.
    #[test]
    fn affine_backsubstitution_is_exact() {
        let arch = ArchSpec {
            input_shape: vec![2],
            layers: vec![LayerKind::Affine { in_features: 2, out_features: 2 }],
            num_classes: 2,
        };
        let mut net = Network::build(arch, 0, PruneScope::ConvAndAffine).unwrap();
        match &mut net.params[0] {
            LayerParams::Affine { w, b } => {
                w.data_mut().copy_from_slice(&[1.0, -1.0, 2.0, 0.0]);
                b.data_mut().copy_from_slice(&[0.0, 1.0]);
            }
            _ => unreachable!(),
        }
        let bx = Bounds::new(
            Tensor::from_vec(vec![0.0, -1.0]),
            Tensor::from_vec(vec![1.0, 1.0]),
        );
        let lb = propagate_ibp(&net, &bx, &PhaseConstraints::new()).unwrap();
        let rows = Tensor::new(vec![1, 2], vec![2.0, -1.0]).unwrap();
        let lower = crown_lower(&net, &lb, &rows, &Tensor::from_vec(vec![0.0]));
        assert_eq!(lower.data(), &[-3.0]);
    }

    /// Scalar net y = relu(x). Positive row uses the adaptive lower line,
    /// negative row pays the upper intercept; both frozen by hand.
    fn scalar_relu_net() -> Network {
        let arch = ArchSpec {
            input_shape: vec![1],
            layers: vec![
                LayerKind::Affine { in_features: 1, out_features: 1 },
                LayerKind::Relu,
                LayerKind::Affine { in_features: 1, out_features: 1 },
            ],
            num_classes: 1,
        };
        let mut net = Network::build(arch, 0, PruneScope::ConvAndAffine).unwrap();
        for li in [0, 2] {
            match &mut net.params[li] {
                LayerParams::Affine { w, b } => {
                    w.data_mut()[0] = 1.0;
                    b.data_mut()[0] = 0.0;
                }
                _ => unreachable!(),
            }
        }
        net
    }

    #[test]
    fn relu_lower_bounds_frozen() {
        let net = scalar_relu_net();
        let row = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let neg_row = Tensor::new(vec![1, 1], vec![-1.0]).unwrap();
        let zero = Tensor::from_vec(vec![0.0]);

        // x in [-1, 1]: alpha = 1, so min_c relu(x) >= min x = -1.
        let bx = Bounds::new(Tensor::from_vec(vec![-1.0]), Tensor::from_vec(vec![1.0]));
        let lb = propagate_ibp(&net, &bx, &PhaseConstraints::new()).unwrap();
        assert_eq!(crown_lower(&net, &lb, &row, &zero).data(), &[-1.0]);

        // x in [-3, 1]: alpha = 0 gives the exact minimum 0.
        let bx = Bounds::new(Tensor::from_vec(vec![-3.0]), Tensor::from_vec(vec![1.0]));
        let lb = propagate_ibp(&net, &bx, &PhaseConstraints::new()).unwrap();
        assert_eq!(crown_lower(&net, &lb, &row, &zero).data(), &[0.0]);
        // Negative row uses the upper line 0.25 z + 0.75:
        // (-0.25)(-1) - 0.25*2 - 0.75 = -1, the exact min of -relu(x).
        assert_eq!(crown_lower(&net, &lb, &neg_row, &zero).data(), &[-1.0]);
    }

    /// CROWN must lower-bound sampled network values for random nets: check
    /// rows = logit margins on dense MLP and CNN shapes.
    #[test]
    fn crown_is_sound_on_random_nets() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for (seed, arch) in [
            (1u64, ArchSpec::mlp(3, &[8, 8], 3, false)),
            (2, ArchSpec::mlp(4, &[6], 2, true)),
            (3, ArchSpec::cnn_small(1, 6, 6, 2).unwrap()),
        ] {
            let net = Network::build(arch, seed, PruneScope::ConvAndAffine).unwrap();
            let nin: usize = net.arch.input_shape.iter().product();
            let x = Tensor::new(
                net.arch.input_shape.clone(),
                (0..nin).map(|_| rng.gen_range(0.2..0.8)).collect(),
            )
            .unwrap();
            let bx = input_box(&x, 0.08, (0.0, 1.0));
            let lb = propagate_ibp(&net, &bx, &PhaseConstraints::new()).unwrap();
            let k = net.num_classes();
            // Margin rows e_0 - e_j for j > 0.
            let mut rows = vec![0.0; (k - 1) * k];
            for j in 1..k {
                rows[(j - 1) * k] = 1.0;
                rows[(j - 1) * k + j] = -1.0;
            }
            let rows = Tensor::new(vec![k - 1, k], rows).unwrap();
            let consts = Tensor::zeros(vec![k - 1]);
            let lower = crown_lower(&net, &lb, &rows, &consts);

            for _ in 0..200 {
                let pt: Vec<f32> = bx
                    .lower
                    .data()
                    .iter()
                    .zip(bx.upper.data())
                    .map(|(l, u)| rng.gen_range(*l..=*u))
                    .collect();
                let mut shape = vec![1];
                shape.extend_from_slice(&net.arch.input_shape);
                let logits = net.forward(&Tensor::new(shape, pt).unwrap()).unwrap();
                for j in 1..k {
                    let margin = logits.data()[0] - logits.data()[j];
                    assert!(
                        lower.data()[j - 1] <= margin + 1e-5,
                        "seed {seed} row {j}: {} > {margin}",
                        lower.data()[j - 1]
                    );
                }
            }
        }
    }

    /// Phase constraints turn the relaxation into an exact line, but the
    /// concretization still ranges over the full input box, so the bound is
    /// sound for the subdomain without encoding the sign restriction itself.
    #[test]
    fn phase_constraints_refine_relaxations() {
        let net = scalar_relu_net();
        let relu = net.arch.relu_positions()[0];
        let bx = Bounds::new(Tensor::from_vec(vec![-3.0]), Tensor::from_vec(vec![1.0]));
        let row = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let zero = Tensor::from_vec(vec![0.0]);

        // Active branch: identity relaxation, rows collapse to x over the
        // whole box. Valid (true subdomain min is 0) but loose.
        let act = PhaseConstraints::new().with(relu, 0, super::super::Phase::Active);
        let lb = propagate_ibp(&net, &bx, &act).unwrap();
        assert_eq!(crown_lower(&net, &lb, &row, &zero).data(), &[-3.0]);

        // Inactive branch: zero relaxation is exact.
        let inact = PhaseConstraints::new().with(relu, 0, super::super::Phase::Inactive);
        let lb = propagate_ibp(&net, &bx, &inact).unwrap();
        assert_eq!(crown_lower(&net, &lb, &row, &zero).data(), &[0.0]);
    }
}
