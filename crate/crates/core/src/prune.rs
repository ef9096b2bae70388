//! Pruning: unstructured mask pruning under several saliency scores with
//! global ranking, structured channel removal (batch-norm scale ranking and
//! surviving-mass ranking with mask refill), and the iterative
//! prune-rewind-retrain driver.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::LayerKind;
use crate::error::{Error, Result};
use crate::network::{LayerParams, Mode, Network, TapedNet};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Per-weight importance score for unstructured pruning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Saliency {
    /// Uniform random scores (seeded); the control baseline.
    Random,
    /// |w|: iterative magnitude pruning.
    Magnitude,
    /// |w * dL/dw| from a single batch.
    Snip,
    /// sum over batch chunks of (w * dL/dw)^2.
    Taylor { chunks: usize },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PruneOutcome {
    /// Weights removed this call.
    pub removed: u64,
    /// floor(ratio * survivors): what the ratio asked for.
    pub requested: u64,
    /// Layers pinned at one surviving weight, where ranking wanted fewer.
    pub floored_layers: Vec<usize>,
    pub remain_ratio: f64,
}

/// Cross-entropy weight gradients per layer (eval-mode forward), for the
/// gradient-based scores.
fn weight_grads(net: &Network, x: &Tensor, labels: &[usize]) -> Result<Vec<Option<Tensor>>> {
    let mut tape = Tape::new();
    let tnet = TapedNet::register(&mut tape, net);
    let xv = tape.constant(x.clone());
    let fwd = tnet.forward(&mut tape, net, xv, Mode::Eval)?;
    let loss = tape.cross_entropy(fwd.output, labels)?;
    let mut grads = tape.backward(loss)?;
    Ok(net
        .params
        .iter()
        .enumerate()
        .map(|(li, p)| match p {
            LayerParams::Affine { w, .. } | LayerParams::Conv { w, .. } => {
                Some(grads.take_or_zeros(tnet.vars[li][0], w.shape()))
            }
            _ => None,
        })
        .collect())
}

fn saliency_scores(
    net: &Network,
    method: Saliency,
    batch: Option<(&Tensor, &[usize])>,
    seed: u64,
) -> Result<Vec<Option<Tensor>>> {
    let layers = net.prunable_layers();
    let need_batch = || {
        batch.ok_or_else(|| {
            Error::InvalidInput("gradient-based saliency needs a scoring batch".into())
        })
    };
    let mut scores: Vec<Option<Tensor>> = vec![None; net.params.len()];
    match method {
        Saliency::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for &li in &layers {
                let w = weight_of(net, li);
                scores[li] = Some(Tensor::new(
                    w.shape().to_vec(),
                    (0..w.len()).map(|_| rng.gen::<f32>()).collect(),
                )?);
            }
        }
        Saliency::Magnitude => {
            for &li in &layers {
                scores[li] = Some(weight_of(net, li).map(f32::abs));
            }
        }
        Saliency::Snip => {
            let (x, y) = need_batch()?;
            let grads = weight_grads(net, x, y)?;
            for &li in &layers {
                let g = grads[li].as_ref().expect("prunable layers have weights");
                scores[li] = Some(weight_of(net, li).zip(g, |w, g| (w * g).abs()));
            }
        }
        Saliency::Taylor { chunks } => {
            let (x, y) = need_batch()?;
            if chunks == 0 {
                return Err(Error::InvalidInput("taylor needs at least one chunk".into()));
            }
            let n = x.shape()[0];
            let stride: usize = x.shape()[1..].iter().product();
            let per = n.div_ceil(chunks);
            for &li in &layers {
                scores[li] = Some(Tensor::zeros(weight_of(net, li).shape().to_vec()));
            }
            for c in 0..chunks {
                let lo = c * per;
                let hi = ((c + 1) * per).min(n);
                if lo >= hi {
                    break;
                }
                let mut shape = vec![hi - lo];
                shape.extend_from_slice(&x.shape()[1..]);
                let xc = Tensor::new(shape, x.data()[lo * stride..hi * stride].to_vec())?;
                let grads = weight_grads(net, &xc, &y[lo..hi])?;
                for &li in &layers {
                    let g = grads[li].as_ref().expect("prunable layers have weights");
                    let term = weight_of(net, li).zip(g, |w, g| (w * g) * (w * g));
                    scores[li] = Some(scores[li].as_ref().unwrap().zip(&term, |a, b| a + b));
                }
            }
        }
    }
    Ok(scores)
}

fn weight_of(net: &Network, li: usize) -> &Tensor {
    match &net.params[li] {
        LayerParams::Affine { w, .. } | LayerParams::Conv { w, .. } => w,
        _ => unreachable!("prunable layers have weights"),
    }
}

/// Remove floor(ratio * survivors) weights with the smallest saliency,
/// ranked globally across the prunable layers (ties: saliency, then layer,
/// then index). Each layer keeps at least one weight; layers that hit the
/// floor are reported. Masks are extended in place and re-applied.
pub fn prune_unstructured(
    net: &mut Network,
    method: Saliency,
    ratio: f64,
    batch: Option<(&Tensor, &[usize])>,
    seed: u64,
) -> Result<PruneOutcome> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::InvalidInput(format!("prune ratio {ratio} outside [0, 1)")));
    }
    let scores = saliency_scores(net, method, batch, seed)?;
    let layers = net.prunable_layers();

    // Surviving weights with their scores.
    let mut candidates: Vec<(f32, usize, usize)> = Vec::new();
    let mut survivors_per_layer: Vec<(usize, u64)> = Vec::new();
    for &li in &layers {
        let mask = net.masks[li].as_ref().expect("prunable layers are masked");
        let s = scores[li].as_ref().unwrap();
        let mut alive = 0u64;
        for (idx, (&m, &sc)) in mask.data().iter().zip(s.data()).enumerate() {
            if m != 0.0 {
                alive += 1;
                candidates.push((sc, li, idx));
            }
        }
        survivors_per_layer.push((li, alive));
    }
    let surviving: u64 = survivors_per_layer.iter().map(|(_, a)| a).sum();
    let requested = (ratio * surviving as f64).floor() as u64;
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut alive: std::collections::HashMap<usize, u64> = survivors_per_layer.into_iter().collect();
    let mut removed = 0u64;
    let mut floored: Vec<usize> = Vec::new();
    for (_, li, idx) in candidates {
        if removed == requested {
            break;
        }
        let a = alive.get_mut(&li).expect("layer tracked");
        if *a <= 1 {
            if !floored.contains(&li) {
                floored.push(li);
            }
            continue;
        }
        net.masks[li].as_mut().unwrap().data_mut()[idx] = 0.0;
        *a -= 1;
        removed += 1;
    }
    net.apply_masks();
    floored.sort_unstable();
    Ok(PruneOutcome {
        removed,
        requested,
        floored_layers: floored,
        remain_ratio: net.remain_ratio(),
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StructuredOutcome {
    pub removed_channels: usize,
    /// (layer, kept channel indices) actually applied.
    pub kept: Vec<(usize, Vec<usize>)>,
    pub floored_layers: Vec<usize>,
}

/// Rank channels globally and shrink the network, keeping at least one
/// channel per layer. `score(layer, channel)` orders channels ascending;
/// the smallest `ratio` fraction is removed.
fn prune_channels(
    net: &mut Network,
    targets: &[(usize, usize)], // (layer, channel count)
    ratio: f64,
    score: impl Fn(&Network, usize, usize) -> f32,
) -> Result<StructuredOutcome> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::InvalidInput(format!("prune ratio {ratio} outside [0, 1)")));
    }
    let mut ranked: Vec<(f32, usize, usize)> = Vec::new();
    for &(li, channels) in targets {
        for c in 0..channels {
            ranked.push((score(net, li, c), li, c));
        }
    }
    let total = ranked.len();
    let to_remove = (ratio * total as f64).floor() as usize;
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut alive: std::collections::HashMap<usize, usize> =
        targets.iter().map(|&(li, ch)| (li, ch)).collect();
    let mut drop: std::collections::HashSet<(usize, usize)> = std::collections::HashSet::new();
    let mut floored: Vec<usize> = Vec::new();
    for &(_, li, c) in ranked.iter() {
        if drop.len() == to_remove {
            break;
        }
        let a = alive.get_mut(&li).expect("layer tracked");
        if *a <= 1 {
            if !floored.contains(&li) {
                floored.push(li);
            }
            continue;
        }
        *a -= 1;
        drop.insert((li, c));
    }

    let mut kept: Vec<(usize, Vec<usize>)> = Vec::new();
    for &(li, channels) in targets {
        let keep: Vec<usize> = (0..channels).filter(|&c| !drop.contains(&(li, c))).collect();
        if keep.len() < channels {
            kept.push((li, keep));
        }
    }
    net.shrink_structured(&kept)?;
    floored.sort_unstable();
    Ok(StructuredOutcome { removed_channels: drop.len(), kept, floored_layers: floored })
}

/// Channel targets: prunable layers except the classifier.
fn channel_targets(net: &Network) -> Vec<(usize, usize)> {
    let last = net.arch.layers.len() - 1;
    net.prunable_layers()
        .into_iter()
        .filter(|&li| li != last)
        .map(|li| {
            let ch = match &net.arch.layers[li] {
                LayerKind::Affine { out_features, .. } => *out_features,
                LayerKind::Conv2d { out_channels, .. } => *out_channels,
                _ => unreachable!("prunable layers are affine or conv"),
            };
            (li, ch)
        })
        .collect()
}

/// Structured pruning by batch-norm scale: channels with the smallest
/// |gamma| are removed. Every target layer must be followed by batch norm.
pub fn prune_slim(net: &mut Network, ratio: f64) -> Result<StructuredOutcome> {
    let targets = channel_targets(net);
    for &(li, _) in &targets {
        if !matches!(net.arch.layers.get(li + 1), Some(LayerKind::BatchNorm { .. })) {
            return Err(Error::InvalidInput(format!(
                "scale-based pruning needs batch norm after layer {li}"
            )));
        }
    }
    prune_channels(net, &targets, ratio, |net, li, c| {
        match &net.params[li + 1] {
            LayerParams::BatchNorm { gamma, .. } => gamma.data()[c].abs(),
            _ => unreachable!("checked above"),
        }
    })
}

/// Structured pruning by surviving weight mass: channels ranked by
/// sum(|w * mask|) over their weights. Kept channels have their masks
/// refilled to ones (the structured ticket retrains dense).
pub fn prune_structured_mass(net: &mut Network, ratio: f64) -> Result<StructuredOutcome> {
    let targets = channel_targets(net);
    let outcome = prune_channels(net, &targets, ratio, |net, li, c| {
        let w = weight_of(net, li);
        let m = net.masks[li].as_ref().expect("prunable layers are masked");
        let group = w.len() / w.shape()[0];
        w.data()[c * group..(c + 1) * group]
            .iter()
            .zip(&m.data()[c * group..(c + 1) * group])
            .map(|(w, m)| (w * m).abs())
            .sum()
    })?;
    for li in net.prunable_layers() {
        if let Some(m) = net.masks[li].as_mut() {
            m.data_mut().fill(1.0);
        }
    }
    net.apply_masks();
    Ok(outcome)
}

/// A per-round pruning step: mask extension under a saliency score, or
/// structured channel removal.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PruneOp {
    Unstructured(Saliency),
    Slim,
    StructuredMass,
}

/// Uniform view of a round's effect, for either flavor of pruning.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepOutcome {
    /// Weights (unstructured) or channels (structured) removed.
    pub removed: u64,
    pub floored_layers: Vec<usize>,
    /// Mask-based survivor fraction of the *current* shapes; structured
    /// rounds shrink the shapes themselves, so callers comparing against a
    /// dense baseline should count surviving weights instead.
    pub remain_ratio: f64,
}

/// Apply one pruning step of the given kind to the trained network.
pub fn prune_step(
    net: &mut Network,
    op: PruneOp,
    ratio: f64,
    batch: Option<(&Tensor, &[usize])>,
    seed: u64,
) -> Result<StepOutcome> {
    match op {
        PruneOp::Unstructured(method) => {
            let out = prune_unstructured(net, method, ratio, batch, seed)?;
            Ok(StepOutcome {
                removed: out.removed,
                floored_layers: out.floored_layers,
                remain_ratio: out.remain_ratio,
            })
        }
        PruneOp::Slim | PruneOp::StructuredMass => {
            let out = if op == PruneOp::Slim {
                prune_slim(net, ratio)?
            } else {
                prune_structured_mass(net, ratio)?
            };
            Ok(StepOutcome {
                removed: out.removed_channels as u64,
                floored_layers: out.floored_layers,
                remain_ratio: net.remain_ratio(),
            })
        }
    }
}

/// One iterative pruning round: prune the trained weights, rewind the
/// survivors to their initial values, then let the caller retrain.
/// Runs `rounds` rounds; for unstructured ops the remain ratio after round k
/// is (1-ratio)^k up to floor rounding. The callback receives the rewound
/// net, the 1-based round index, and the step outcome.
pub fn iterative_prune<R>(
    net: &mut Network,
    rounds: usize,
    ratio: f64,
    op: PruneOp,
    batch: Option<(&Tensor, &[usize])>,
    seed: u64,
    mut retrain: impl FnMut(&mut Network, usize, &StepOutcome) -> Result<R>,
) -> Result<Vec<R>> {
    let mut out = Vec::with_capacity(rounds);
    for round in 1..=rounds {
        let outcome = prune_step(net, op, ratio, batch, seed.wrapping_add(round as u64))?;
        net.rewind();
        out.push(retrain(net, round, &outcome)?);
    }
    Ok(out)
}

/// Rounds whose certified accuracy matches the dense reference within
/// `tolerance` while being genuinely sparse: the certified lottery tickets.
pub fn certified_tickets(
    rounds: &[(usize, f64, f64)], // (round, remain_ratio, certified_accuracy)
    dense_certified: f64,
    tolerance: f64,
) -> Vec<usize> {
    rounds
        .iter()
        .filter(|(_, remain, cert)| *remain < 1.0 && *cert >= dense_certified - tolerance)
        .map(|(round, _, _)| *round)
        .collect()
}
