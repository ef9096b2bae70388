//! Interval propagation recorded on the autodiff tape, for losses that
//! differentiate through bounds, plus the stability regularizers built on
//! the resulting pre-activation intervals.
//!
//! Train-mode batch norm folds the batch statistics recorded by the clean
//! forward pass; the statistics enter as constants, so gradients flow
//! through gamma and beta but not through the batch moments.

use crate::error::{Error, Result};
use crate::network::{LayerParams, Mode, Network, TapedForward, TapedNet, BN_EPS};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::arch::LayerKind;

/// Pre-activation interval of one ReLU layer, on the tape.
pub struct PreactBounds {
    pub relu_layer: usize,
    pub lower: Var,
    pub upper: Var,
    /// Scale parameter of the batch norm feeding this ReLU, when there is
    /// one; the normalized regularizer divides by its square.
    pub gamma: Option<Var>,
}

/// Interval propagation of a whole batch, recorded on the tape.
pub struct TapedIbp {
    /// Logit bounds, shape [batch, classes].
    pub lower: Var,
    pub upper: Var,
    pub preacts: Vec<PreactBounds>,
}

fn fold_bn_vars(
    tape: &mut Tape,
    gamma: Var,
    beta: Var,
    mean: &Tensor,
    var: &Tensor,
) -> Result<(Var, Var)> {
    let c = tape.constant(var.map(|v| 1.0 / (v + BN_EPS).sqrt()));
    let s = tape.mul(gamma, c)?;
    let m = tape.constant(mean.clone());
    let sm = tape.mul(s, m)?;
    let t = tape.sub(beta, sm)?;
    Ok((s, t))
}

/// Propagate the l-inf ball of radius `eps` around batch `x` (clipped to
/// `range`) through the network on the tape. In train mode, batch norm uses
/// the statistics recorded by `clean`, the accompanying clean forward pass.
pub fn taped_ibp(
    tape: &mut Tape,
    tnet: &TapedNet,
    net: &Network,
    x: Var,
    eps: f32,
    range: (f32, f32),
    mode: Mode,
    clean: Option<&TapedForward>,
) -> Result<TapedIbp> {
    let shape = tape.value(x).shape().to_vec();
    let lo = tape.constant(Tensor::full(shape.clone(), range.0));
    let hi = tape.constant(Tensor::full(shape, range.1));
    let shifted = tape.add_scalar(x, -eps);
    let mut l = tape.max_elem(shifted, lo)?;
    let shifted = tape.add_scalar(x, eps);
    let mut u = tape.min_elem(shifted, hi)?;

    let mut preacts = Vec::new();
    for (i, layer) in net.arch.layers.iter().enumerate() {
        match layer {
            LayerKind::Affine { .. } | LayerKind::Conv2d { .. } => {
                let (w, b) = (tnet.vars[i][0], tnet.vars[i][1]);
                let sum = tape.add(l, u)?;
                let mu = tape.scale(sum, 0.5);
                let diff = tape.sub(u, l)?;
                let r = tape.scale(diff, 0.5);
                let abs_w = tape.abs(w);
                let (mu_out, r_out) = match layer {
                    LayerKind::Affine { .. } => (
                        tape.affine(mu, w, Some(b))?,
                        tape.affine(r, abs_w, None)?,
                    ),
                    LayerKind::Conv2d { stride, padding, .. } => (
                        tape.conv2d(mu, w, Some(b), *stride, *padding)?,
                        tape.conv2d(r, abs_w, None, *stride, *padding)?,
                    ),
                    _ => unreachable!(),
                };
                l = tape.sub(mu_out, r_out)?;
                u = tape.add(mu_out, r_out)?;
            }
            LayerKind::BatchNorm { .. } => {
                let (gamma, beta) = (tnet.vars[i][0], tnet.vars[i][1]);
                let (mean, var) = match mode {
                    Mode::Eval => match &net.params[i] {
                        LayerParams::BatchNorm { running_mean, running_var, .. } => {
                            (running_mean.clone(), running_var.clone())
                        }
                        _ => unreachable!("params aligned with arch"),
                    },
                    Mode::Train => {
                        let fwd = clean.ok_or_else(|| {
                            Error::InvalidInput(
                                "train-mode interval propagation needs the clean forward pass"
                                    .into(),
                            )
                        })?;
                        let (_, node) = fwd
                            .bn_nodes
                            .iter()
                            .find(|(li, _)| *li == i)
                            .ok_or_else(|| {
                                Error::InvalidInput(format!(
                                    "clean forward pass has no batch stats for layer {i}"
                                ))
                            })?;
                        let (m, v) = tape
                            .bn_batch_stats(*node)
                            .expect("bn node records batch stats");
                        (m.clone(), v.clone())
                    }
                };
                let (s, t) = fold_bn_vars(tape, gamma, beta, &mean, &var)?;
                let a = tape.channel_affine(l, s, Some(t))?;
                let b = tape.channel_affine(u, s, Some(t))?;
                l = tape.min_elem(a, b)?;
                u = tape.max_elem(a, b)?;
            }
            LayerKind::Relu => {
                preacts.push(PreactBounds {
                    relu_layer: i,
                    lower: l,
                    upper: u,
                    gamma: net.arch.bn_before_relu(i).map(|bi| tnet.vars[bi][0]),
                });
                l = tape.relu(l);
                u = tape.relu(u);
            }
            LayerKind::Flatten => {
                let n = tape.value(l).shape()[0];
                let feats: usize = tape.value(l).shape()[1..].iter().product();
                l = tape.reshape(l, vec![n, feats])?;
                u = tape.reshape(u, vec![n, feats])?;
            }
        }
    }
    Ok(TapedIbp { lower: l, upper: u, preacts })
}

/// Mean of -tanh(1 + l*u) over every ReLU pre-activation: pushes neurons
/// away from instability (l < 0 < u makes the argument small or negative).
pub fn rs_loss(tape: &mut Tape, preacts: &[PreactBounds]) -> Result<Var> {
    let mut total: Option<Var> = None;
    let mut count = 0usize;
    for p in preacts {
        let lu = tape.mul(p.lower, p.upper)?;
        let arg = tape.add_scalar(lu, 1.0);
        let t = tape.tanh(arg);
        let s = tape.sum(t);
        count += tape.value(lu).len();
        total = Some(match total {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
    }
    match total {
        Some(acc) => Ok(tape.scale(acc, -1.0 / count as f32)),
        None => Ok(tape.constant(Tensor::scalar(0.0))),
    }
}

/// Normalized variant: -tanh(1 + l*u / gamma^2) with the batch-norm scale
/// entering through a stop-gradient (its derivative is exactly zero).
/// Channels whose gamma is zero are excluded from the mean; the second
/// return value counts their neurons. ReLUs without a preceding batch norm
/// use gamma = 1, reducing to the plain term.
pub fn nrs_loss(tape: &mut Tape, preacts: &[PreactBounds]) -> Result<(Var, usize)> {
    let mut total: Option<Var> = None;
    let mut count = 0usize;
    let mut skipped = 0usize;
    for p in preacts {
        let numel = tape.value(p.lower).len();
        let term = match p.gamma {
            None => {
                let lu = tape.mul(p.lower, p.upper)?;
                let arg = tape.add_scalar(lu, 1.0);
                count += numel;
                tape.tanh(arg)
            }
            Some(g) => {
                let shape = tape.value(p.lower).shape().to_vec();
                let channels = shape[1];
                let per_channel = numel / channels;
                let keep: Vec<f32> = tape.value(g).data().iter()
                    .map(|&v| if v == 0.0 { 0.0 } else { 1.0 })
                    .collect();
                let kept = keep.iter().filter(|&&m| m != 0.0).count();
                skipped += (channels - kept) * per_channel;
                if kept == 0 {
                    continue;
                }
                count += kept * per_channel;
                // gamma^2 with zero channels padded to 1 so the masked
                // division stays finite; the mask then zeroes their terms.
                let pad = Tensor::from_vec(keep.iter().map(|m| 1.0 - m).collect());
                let mask = tape.constant(Tensor::from_vec(keep));
                let pad = tape.constant(pad);
                let gs = tape.stop_grad(g);
                let g2 = tape.mul(gs, gs)?;
                let g2_safe = tape.add(g2, pad)?;
                let inv = tape.div(mask, g2_safe)?;
                let lu = tape.mul(p.lower, p.upper)?;
                let scaled = tape.channel_affine(lu, inv, None)?;
                let arg = tape.add_scalar(scaled, 1.0);
                let t = tape.tanh(arg);
                tape.channel_affine(t, mask, None)?
            }
        };
        let s = tape.sum(term);
        total = Some(match total {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
    }
    let loss = match total {
        Some(acc) if count > 0 => tape.scale(acc, -1.0 / count as f32),
        _ => tape.constant(Tensor::scalar(0.0)),
    };
    Ok((loss, skipped))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::ArchSpec;
    use crate::bounds::ibp::propagate_ibp;
    use crate::bounds::{input_box, PhaseConstraints};
    use crate::gradcheck::{grad_check, GradCheckConfig};
    use crate::network::PruneScope;

    fn preact(tape: &mut Tape, l: &[f32], u: &[f32], gamma: Option<&[f32]>) -> PreactBounds {
        let n = l.len();
        let lower = tape.leaf(Tensor::new(vec![1, n], l.to_vec()).unwrap());
        let upper = tape.leaf(Tensor::new(vec![1, n], u.to_vec()).unwrap());
        let gamma = gamma.map(|g| tape.leaf(Tensor::from_vec(g.to_vec())));
        PreactBounds { relu_layer: 0, lower, upper, gamma }
    }

    #[test]
    fn rs_loss_goldens() {
        let mut tape = Tape::new();
        let p = preact(&mut tape, &[-1.0], &[1.0], None);
        let loss = rs_loss(&mut tape, &[p]).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);

        let mut tape = Tape::new();
        let p = preact(&mut tape, &[-2.0], &[2.0], None);
        let loss = rs_loss(&mut tape, &[p]).unwrap();
        assert!((tape.value(loss).item() - 0.99505475).abs() < 1e-6);
    }

    #[test]
    fn nrs_with_unit_gamma_matches_rs() {
        let mut tape = Tape::new();
        let p1 = preact(&mut tape, &[-2.0, 0.5], &[2.0, 1.5], Some(&[1.0, 1.0]));
        let (nrs, skipped) = nrs_loss(&mut tape, &[p1]).unwrap();
        let p2 = preact(&mut tape, &[-2.0, 0.5], &[2.0, 1.5], None);
        let rs = rs_loss(&mut tape, &[p2]).unwrap();
        assert_eq!(skipped, 0);
        assert_eq!(tape.value(nrs).item(), tape.value(rs).item());
    }

    #[test]
    fn nrs_gamma_scaling_golden() {
        // gamma = 2: -tanh(1 + (-1)(1)/4) = -tanh(0.75).
        let mut tape = Tape::new();
        let p = preact(&mut tape, &[-1.0], &[1.0], Some(&[2.0]));
        let (loss, skipped) = nrs_loss(&mut tape, &[p]).unwrap();
        assert_eq!(skipped, 0);
        assert!((tape.value(loss).item() - (-0.75f32.tanh())).abs() < 1e-6);
    }

    #[test]
    fn nrs_skips_zero_gamma_channels() {
        let mut tape = Tape::new();
        let p = preact(&mut tape, &[-1.0, -1.0], &[1.0, 1.0], Some(&[2.0, 0.0]));
        let (loss, skipped) = nrs_loss(&mut tape, &[p]).unwrap();
        assert_eq!(skipped, 1);
        assert!((tape.value(loss).item() - (-0.75f32.tanh())).abs() < 1e-6);
        assert!(tape.value(loss).all_finite());

        // All channels pruned: loss is exactly zero and everything is
        // counted as skipped.
        let mut tape = Tape::new();
        let p = preact(&mut tape, &[-1.0, -1.0], &[1.0, 1.0], Some(&[0.0, 0.0]));
        let (loss, skipped) = nrs_loss(&mut tape, &[p]).unwrap();
        assert_eq!(skipped, 2);
        assert_eq!(tape.value(loss).item(), 0.0);
    }

    #[test]
    fn nrs_gamma_gradient_is_exactly_zero() {
        let mut tape = Tape::new();
        let p = preact(&mut tape, &[-1.0, 0.5], &[1.0, 2.0], Some(&[2.0, 0.5]));
        let g = p.gamma.unwrap();
        let (l, u) = (p.lower, p.upper);
        let (loss, _) = nrs_loss(&mut tape, &[p]).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(g).is_none(), "stop-gradient must block gamma");
        // The bound leaves do receive gradient.
        assert!(grads.get(l).is_some() && grads.get(u).is_some());
    }

    #[test]
    fn nrs_bound_gradients_pass_finite_differences() {
        let mut tape = Tape::new();
        let p = preact(&mut tape, &[-1.2, 0.4], &[0.9, 2.0], Some(&[1.5, 0.7]));
        let inputs = vec![p.lower, p.upper];
        let (loss, _) = nrs_loss(&mut tape, &[p]).unwrap();
        let report = grad_check(&tape, loss, &inputs, GradCheckConfig::default()).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    /// Eval-mode taped propagation must agree exactly with the pure
    /// interval engine, per sample.
    #[test]
    fn taped_ibp_matches_pure_engine_bitwise() {
        let net = Network::build(
            ArchSpec::mlp(2, &[5, 4], 2, true),
            21,
            PruneScope::ConvAndAffine,
        )
        .unwrap();
        let batch = Tensor::new(vec![3, 2], vec![0.1, 0.9, 0.4, 0.3, 0.75, 0.5]).unwrap();
        let eps = 0.07;

        let mut tape = Tape::new();
        let tnet = TapedNet::register(&mut tape, &net);
        let x = tape.constant(batch.clone());
        let ibp = taped_ibp(&mut tape, &tnet, &net, x, eps, (0.0, 1.0), Mode::Eval, None).unwrap();

        for s in 0..3 {
            let xi = Tensor::from_vec(batch.data()[s * 2..s * 2 + 2].to_vec());
            let lb = propagate_ibp(&net, &input_box(&xi, eps, (0.0, 1.0)), &PhaseConstraints::new())
                .unwrap();
            for (j, relu) in net.arch.relu_positions().into_iter().enumerate() {
                let pure = lb.preact(relu);
                let n = pure.len();
                let tl = &tape.value(ibp.preacts[j].lower).data()[s * n..(s + 1) * n];
                let tu = &tape.value(ibp.preacts[j].upper).data()[s * n..(s + 1) * n];
                assert_eq!(tl, pure.lower.data(), "sample {s} relu {relu} lower");
                assert_eq!(tu, pure.upper.data(), "sample {s} relu {relu} upper");
            }
            let k = net.num_classes();
            let tl = &tape.value(ibp.lower).data()[s * k..(s + 1) * k];
            let tu = &tape.value(ibp.upper).data()[s * k..(s + 1) * k];
            assert_eq!(tl, lb.logits().lower.data(), "sample {s} logits lower");
            assert_eq!(tu, lb.logits().upper.data(), "sample {s} logits upper");
        }
    }

    /// Train-mode propagation shares batch statistics with the clean pass,
    /// so the clean activations always lie inside the interval.
    #[test]
    fn train_mode_bounds_contain_clean_forward() {
        let net = Network::build(
            ArchSpec::mlp(2, &[6], 2, true),
            33,
            PruneScope::ConvAndAffine,
        )
        .unwrap();
        let batch = Tensor::new(vec![4, 2], vec![0.1, 0.9, 0.4, 0.3, 0.75, 0.5, 0.2, 0.6]).unwrap();

        let mut tape = Tape::new();
        let tnet = TapedNet::register(&mut tape, &net);
        let x = tape.constant(batch);
        let clean = tnet.forward(&mut tape, &net, x, Mode::Train).unwrap();
        let ibp = taped_ibp(&mut tape, &tnet, &net, x, 0.05, (0.0, 1.0), Mode::Train, Some(&clean))
            .unwrap();

        let logits = tape.value(clean.output).data();
        let lo = tape.value(ibp.lower).data();
        let hi = tape.value(ibp.upper).data();
        for i in 0..logits.len() {
            assert!(lo[i] <= logits[i] && logits[i] <= hi[i], "{} in [{}, {}]", logits[i], lo[i], hi[i]);
        }
        // gamma is attached for the BN-fed ReLU.
        assert!(ibp.preacts[0].gamma.is_some());
        // Train mode without the clean pass is an error.
        let mut tape2 = Tape::new();
        let tnet2 = TapedNet::register(&mut tape2, &net);
        let x2 = tape2.constant(Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap());
        assert!(taped_ibp(&mut tape2, &tnet2, &net, x2, 0.05, (0.0, 1.0), Mode::Train, None)
            .is_err());
    }

    /// Differentiating the robust margin through taped intervals: gradient
    /// check on a small BN net, away from ReLU kinks.
    #[test]
    fn taped_ibp_gradients_pass_finite_differences() {
        let net = Network::build(
            ArchSpec::mlp(2, &[4], 2, true),
            5,
            PruneScope::ConvAndAffine,
        )
        .unwrap();
        let mut tape = Tape::new();
        let tnet = TapedNet::register(&mut tape, &net);
        let x = tape.constant(Tensor::new(vec![2, 2], vec![0.3, 0.7, 0.6, 0.2]).unwrap());
        let ibp = taped_ibp(&mut tape, &tnet, &net, x, 0.03, (0.0, 1.0), Mode::Eval, None).unwrap();
        // rs_loss has no stop-gradient, so every parameter path is
        // finite-difference checkable. (The normalized variant is not: its
        // gamma gradient is deliberately partial.)
        let loss = rs_loss(&mut tape, &ibp.preacts).unwrap();
        let report = grad_check(&tape, loss, &tnet.param_vars(), GradCheckConfig::default())
            .unwrap();
        // A parameter step may push some interval bound across a ReLU kink;
        // those points are excused, actual slope mismatches are not.
        use crate::gradcheck::FailureKind;
        assert!(
            report.failures.iter().all(|f| f.kind == FailureKind::NonDifferentiable),
            "{report:?}"
        );
    }
}
