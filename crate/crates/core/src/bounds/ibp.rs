//! Interval bound propagation. Linear layers map the box through its center
//! and radius (|W| acting on the radius); batch norm folds running stats
//! into a per-channel affine whose bound order flips where the scale is
//! negative. Shares the forward kernels, so a zero-radius box reproduces the
//! eval-mode forward pass bit for bit.

use super::{Bounds, Infeasible, LayerBounds, Phase, PhaseConstraints};
use crate::arch::LayerKind;
use crate::network::{bn_fold, LayerParams, Network};
use crate::tensor::{conv_out_dim, kernels, Tensor};

fn center_radius(b: &Bounds) -> (Tensor, Tensor) {
    let mu = b.lower.zip(&b.upper, |l, u| (l + u) * 0.5);
    let r = b.lower.zip(&b.upper, |l, u| (u - l) * 0.5);
    (mu, r)
}

pub(crate) fn ibp_affine(w: &Tensor, b: &Tensor, bounds: &Bounds) -> Bounds {
    let (out_f, in_f) = (w.shape()[0], w.shape()[1]);
    let (mu, r) = center_radius(bounds);
    let abs_w = w.map(f32::abs);
    let mu_out = kernels::affine(mu.data(), w.data(), Some(b.data()), 1, in_f, out_f);
    let r_out = kernels::affine(r.data(), abs_w.data(), None, 1, in_f, out_f);
    Bounds {
        lower: Tensor::from_vec(mu_out.iter().zip(&r_out).map(|(m, r)| m - r).collect()),
        upper: Tensor::from_vec(mu_out.iter().zip(&r_out).map(|(m, r)| m + r).collect()),
    }
}

pub(crate) fn conv_geom1(
    in_shape: &[usize],
    w_shape: &[usize],
    stride: usize,
    padding: usize,
) -> kernels::ConvGeom {
    kernels::ConvGeom {
        batch: 1,
        in_c: in_shape[0],
        in_h: in_shape[1],
        in_w: in_shape[2],
        out_c: w_shape[0],
        kernel: w_shape[2],
        stride,
        padding,
        out_h: conv_out_dim(in_shape[1], w_shape[2], stride, padding)
            .expect("validated by arch"),
        out_w: conv_out_dim(in_shape[2], w_shape[3], stride, padding)
            .expect("validated by arch"),
    }
}

pub(crate) fn ibp_conv(
    w: &Tensor,
    b: &Tensor,
    stride: usize,
    padding: usize,
    bounds: &Bounds,
) -> Bounds {
    let g = conv_geom1(bounds.lower.shape(), w.shape(), stride, padding);
    let (mu, r) = center_radius(bounds);
    let abs_w = w.map(f32::abs);
    let mu_out = kernels::conv2d(mu.data(), w.data(), Some(b.data()), &g);
    let r_out = kernels::conv2d(r.data(), abs_w.data(), None, &g);
    let shape = vec![g.out_c, g.out_h, g.out_w];
    Bounds {
        lower: Tensor::new(shape.clone(), mu_out.iter().zip(&r_out).map(|(m, r)| m - r).collect())
            .expect("conv shape"),
        upper: Tensor::new(shape, mu_out.iter().zip(&r_out).map(|(m, r)| m + r).collect())
            .expect("conv shape"),
    }
}

/// Batch norm with folded running stats: y = s*x + t per channel, bounds
/// swapped where s < 0.
pub(crate) fn ibp_batchnorm(scale: &[f32], shift: &[f32], bounds: &Bounds) -> Bounds {
    let channels = scale.len();
    let spatial = bounds.len() / channels;
    let a = kernels::channel_affine(bounds.lower.data(), channels, spatial, scale, Some(shift));
    let b = kernels::channel_affine(bounds.upper.data(), channels, spatial, scale, Some(shift));
    let shape = bounds.lower.shape().to_vec();
    Bounds {
        lower: Tensor::new(shape.clone(), a.iter().zip(&b).map(|(x, y)| x.min(*y)).collect())
            .expect("bn shape"),
        upper: Tensor::new(shape, a.iter().zip(&b).map(|(x, y)| x.max(*y)).collect())
            .expect("bn shape"),
    }
}

/// Intersect phase constraints into pre-activation bounds in place, or
/// report the subdomain empty.
fn apply_phases(
    layer: usize,
    bounds: &mut Bounds,
    phases: &PhaseConstraints,
) -> Result<(), Infeasible> {
    for &((_, neuron), phase) in phases.for_layer(layer) {
        let l = &mut bounds.lower.data_mut()[neuron];
        match phase {
            Phase::Active => {
                if bounds.upper.data()[neuron] < 0.0 {
                    return Err(Infeasible { layer, neuron });
                }
                *l = l.max(0.0);
            }
            Phase::Inactive => {
                if *l > 0.0 {
                    return Err(Infeasible { layer, neuron });
                }
                let u = &mut bounds.upper.data_mut()[neuron];
                *u = u.min(0.0);
            }
        }
    }
    Ok(())
}

/// Propagate an input box through the network, recording output bounds for
/// every layer. Pre-activation entries are intersected with `phases`;
/// contradictions surface as `Infeasible`.
pub fn propagate_ibp(
    net: &Network,
    input: &Bounds,
    phases: &PhaseConstraints,
) -> Result<LayerBounds, Infeasible> {
    assert_eq!(
        input.lower.shape(),
        &net.arch.input_shape[..],
        "input box shape must match the architecture"
    );
    let mut cur = input.clone();
    let mut layers: Vec<Bounds> = Vec::with_capacity(net.arch.layers.len());
    for (i, (layer, param)) in net.arch.layers.iter().zip(&net.params).enumerate() {
        cur = match (layer, param) {
            (LayerKind::Affine { .. }, LayerParams::Affine { w, b }) => ibp_affine(w, b, &cur),
            (LayerKind::Conv2d { stride, padding, .. }, LayerParams::Conv { w, b }) => {
                ibp_conv(w, b, *stride, *padding, &cur)
            }
            (
                LayerKind::BatchNorm { .. },
                LayerParams::BatchNorm { gamma, beta, running_mean, running_var },
            ) => {
                let (s, t) =
                    bn_fold(gamma.data(), beta.data(), running_mean.data(), running_var.data());
                ibp_batchnorm(&s, &t, &cur)
            }
            (LayerKind::Relu, _) => {
                apply_phases(i, &mut cur, phases)?;
                layers[i - 1] = cur.clone();
                Bounds {
                    lower: cur.lower.map(|v| v.max(0.0)),
                    upper: cur.upper.map(|v| v.max(0.0)),
                }
            }
            (LayerKind::Flatten, _) => Bounds {
                lower: cur.lower.reshape(vec![cur.len()]).expect("flatten"),
                upper: cur.upper.reshape(vec![cur.len()]).expect("flatten"),
            },
            _ => unreachable!("params aligned with arch by construction"),
        };
        layers.push(cur.clone());
    }
    Ok(LayerBounds { input: input.clone(), layers })
}
