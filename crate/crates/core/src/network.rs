//! Concrete networks: parameters, pruning masks, and the build-time snapshot
//! used for lottery-ticket rewinding.
//!
//! Eval-mode batch norm is folded to a per-channel affine y = s*x + t with
//! s = gamma / sqrt(running_var + eps), t = beta - s * running_mean. The
//! forward pass and every bound propagation share this form, so a zero-width
//! input box reproduces the forward activations bit for bit.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{ArchSpec, LayerKind};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{kernels, Tensor};

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneScope {
    /// Convolution weights only.
    Conv,
    /// Convolution and affine weights (MLP runs).
    ConvAndAffine,
}

impl PruneScope {
    pub fn covers(self, layer: &LayerKind) -> bool {
        match layer {
            LayerKind::Conv2d { .. } => true,
            LayerKind::Affine { .. } => self == PruneScope::ConvAndAffine,
            _ => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerParams {
    Affine { w: Tensor, b: Tensor },
    Conv { w: Tensor, b: Tensor },
    BatchNorm {
        gamma: Tensor,
        beta: Tensor,
        running_mean: Tensor,
        running_var: Tensor,
    },
    None,
}

impl LayerParams {
    /// Trainable tensors in fixed order (weights before biases, gamma before
    /// beta). Running stats are not trainable.
    fn trainable(&self) -> Vec<&Tensor> {
        match self {
            LayerParams::Affine { w, b } | LayerParams::Conv { w, b } => vec![w, b],
            LayerParams::BatchNorm { gamma, beta, .. } => vec![gamma, beta],
            LayerParams::None => vec![],
        }
    }

    fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            LayerParams::Affine { w, b } | LayerParams::Conv { w, b } => vec![w, b],
            LayerParams::BatchNorm { gamma, beta, .. } => vec![gamma, beta],
            LayerParams::None => vec![],
        }
    }
}

/// Eval-mode batch norm folded to per-channel scale and shift. Computed as
/// gamma * (1/sqrt(var+eps)) so the direct, taped, and interval paths share
/// the exact same float operations.
pub(crate) fn bn_fold(gamma: &[f32], beta: &[f32], mean: &[f32], var: &[f32]) -> (Vec<f32>, Vec<f32>) {
    let mut scale = vec![0.0f32; gamma.len()];
    let mut shift = vec![0.0f32; gamma.len()];
    for c in 0..gamma.len() {
        scale[c] = gamma[c] * (1.0 / (var[c] + BN_EPS).sqrt());
        shift[c] = beta[c] - scale[c] * mean[c];
    }
    (scale, shift)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub arch: ArchSpec,
    pub params: Vec<LayerParams>,
    /// One mask per affine/conv weight tensor, all-ones at build.
    pub masks: Vec<Option<Tensor>>,
    /// All parameters (incl. BN running stats) at build time; rewind target.
    snapshot: Vec<LayerParams>,
    pub prune_scope: PruneScope,
    pub seed: u64,
}

impl Network {
    /// Kaiming-uniform fan-in init for weights, zero biases, identity batch
    /// norm. Weight draws happen in layer order so a seed fixes the net.
    pub fn build(arch: ArchSpec, seed: u64, prune_scope: PruneScope) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(arch.layers.len());
        let mut masks = Vec::with_capacity(arch.layers.len());
        for layer in &arch.layers {
            match layer {
                LayerKind::Affine { in_features, out_features } => {
                    let bound = (6.0 / *in_features as f32).sqrt();
                    let data = (0..out_features * in_features)
                        .map(|_| rng.gen_range(-bound..bound))
                        .collect();
                    let w = Tensor::new(vec![*out_features, *in_features], data)?;
                    masks.push(Some(Tensor::full(w.shape().to_vec(), 1.0)));
                    params.push(LayerParams::Affine {
                        w,
                        b: Tensor::zeros(vec![*out_features]),
                    });
                }
                LayerKind::Conv2d { in_channels, out_channels, kernel, .. } => {
                    let fan_in = in_channels * kernel * kernel;
                    let bound = (6.0 / fan_in as f32).sqrt();
                    let data = (0..out_channels * fan_in)
                        .map(|_| rng.gen_range(-bound..bound))
                        .collect();
                    let w = Tensor::new(
                        vec![*out_channels, *in_channels, *kernel, *kernel],
                        data,
                    )?;
                    masks.push(Some(Tensor::full(w.shape().to_vec(), 1.0)));
                    params.push(LayerParams::Conv {
                        w,
                        b: Tensor::zeros(vec![*out_channels]),
                    });
                }
                LayerKind::BatchNorm { features } => {
                    masks.push(None);
                    params.push(LayerParams::BatchNorm {
                        gamma: Tensor::full(vec![*features], 1.0),
                        beta: Tensor::zeros(vec![*features]),
                        running_mean: Tensor::zeros(vec![*features]),
                        running_var: Tensor::full(vec![*features], 1.0),
                    });
                }
                LayerKind::Relu | LayerKind::Flatten => {
                    masks.push(None);
                    params.push(LayerParams::None);
                }
            }
        }
        let snapshot = params.clone();
        Ok(Network {
            arch,
            params,
            masks,
            snapshot,
            prune_scope,
            seed,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    pub fn snapshot(&self) -> &[LayerParams] {
        &self.snapshot
    }

    pub(crate) fn snapshot_mut(&mut self) -> &mut Vec<LayerParams> {
        &mut self.snapshot
    }

    /// Restore every parameter (incl. BN running stats) to the build-time
    /// snapshot, then re-apply the current masks. Masks are untouched.
    pub fn rewind(&mut self) {
        self.params = self.snapshot.clone();
        self.apply_masks();
    }

    /// Zero out masked weights in place. Idempotent.
    pub fn apply_masks(&mut self) {
        for (param, mask) in self.params.iter_mut().zip(&self.masks) {
            if let (Some(mask), LayerParams::Affine { w, .. } | LayerParams::Conv { w, .. }) =
                (mask, param)
            {
                let wd = w.data_mut();
                for (v, &m) in wd.iter_mut().zip(mask.data()) {
                    *v *= m;
                }
            }
        }
    }

    /// Layer indices whose weight tensor the prune scope covers.
    pub fn prunable_layers(&self) -> Vec<usize> {
        self.arch
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| self.prune_scope.covers(l))
            .map(|(i, _)| i)
            .collect()
    }

    /// Surviving fraction of prunable weights: mask ones / total.
    pub fn remain_ratio(&self) -> f64 {
        let (mut ones, mut total) = (0u64, 0u64);
        for i in self.prunable_layers() {
            let mask = self.masks[i].as_ref().expect("prunable layer has a mask");
            total += mask.len() as u64;
            ones += mask.data().iter().filter(|&&m| m != 0.0).count() as u64;
        }
        if total == 0 {
            return 1.0;
        }
        ones as f64 / total as f64
    }

    pub fn surviving_weights(&self) -> u64 {
        self.prunable_layers()
            .iter()
            .map(|&i| {
                self.masks[i]
                    .as_ref()
                    .unwrap()
                    .data()
                    .iter()
                    .filter(|&&m| m != 0.0)
                    .count() as u64
            })
            .sum()
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.params
            .iter()
            .flat_map(|p| p.trainable().into_iter().map(|t| t.shape().to_vec()))
            .collect()
    }

    pub fn param_tensors(&self) -> Vec<&Tensor> {
        self.params.iter().flat_map(|p| p.trainable()).collect()
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.params
            .iter_mut()
            .flat_map(|p| p.trainable_mut())
            .collect()
    }

    /// Mask tensors aligned with `param_tensors` order (None for biases and
    /// batch-norm parameters).
    pub fn param_masks(&self) -> Vec<Option<&Tensor>> {
        let mut out = Vec::new();
        for (param, mask) in self.params.iter().zip(&self.masks) {
            match param {
                LayerParams::Affine { .. } | LayerParams::Conv { .. } => {
                    out.push(mask.as_ref());
                    out.push(None);
                }
                LayerParams::BatchNorm { .. } => {
                    out.push(None);
                    out.push(None);
                }
                LayerParams::None => {}
            }
        }
        out
    }

    pub fn update_bn_running(&mut self, layer: usize, mean: &Tensor, var_biased: &Tensor, count: usize) {
        if let LayerParams::BatchNorm { running_mean, running_var, .. } = &mut self.params[layer] {
            // Running variance uses the unbiased estimator (standard
            // convention); normalization used the biased one.
            let correction = if count > 1 {
                count as f32 / (count - 1) as f32
            } else {
                1.0
            };
            let rm = running_mean.data_mut();
            let rv = running_var.data_mut();
            for c in 0..rm.len() {
                rm[c] = (1.0 - BN_MOMENTUM) * rm[c] + BN_MOMENTUM * mean.data()[c];
                rv[c] = (1.0 - BN_MOMENTUM) * rv[c] + BN_MOMENTUM * var_biased.data()[c] * correction;
            }
        } else {
            panic!("layer {layer} is not batch norm");
        }
    }

    fn check_batch(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != self.arch.input_shape.len() + 1
            || x.shape()[1..] != *self.arch.input_shape
        {
            return Err(Error::ShapeMismatch {
                context: "forward input",
                expected: self.arch.input_shape.clone(),
                got: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Eval-mode forward pass on a batch `[n, ...]`; returns logits `[n, k]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_batch(x)?;
        let n = x.shape()[0];
        let mut cur = x.clone();
        for (layer, param) in self.arch.layers.iter().zip(&self.params) {
            cur = match (layer, param) {
                (LayerKind::Affine { in_features, out_features }, LayerParams::Affine { w, b }) => {
                    let data = kernels::affine(cur.data(), w.data(), Some(b.data()), n, *in_features, *out_features);
                    Tensor::new(vec![n, *out_features], data)?
                }
                (LayerKind::Conv2d { stride, padding, .. }, LayerParams::Conv { w, b }) => {
                    let g = conv_geom(cur.shape(), w.shape(), *stride, *padding)?;
                    let data = kernels::conv2d(cur.data(), w.data(), Some(b.data()), &g);
                    Tensor::new(vec![g.batch, g.out_c, g.out_h, g.out_w], data)?
                }
                (LayerKind::BatchNorm { .. }, LayerParams::BatchNorm { gamma, beta, running_mean, running_var }) => {
                    let (scale, shift) = bn_fold(gamma.data(), beta.data(), running_mean.data(), running_var.data());
                    let channels = cur.shape()[1];
                    let spatial: usize = cur.shape()[2..].iter().product();
                    let data = kernels::channel_affine(cur.data(), channels, spatial, &scale, Some(&shift));
                    Tensor::new(cur.shape().to_vec(), data)?
                }
                (LayerKind::Relu, _) => cur.map(|v| v.max(0.0)),
                (LayerKind::Flatten, _) => {
                    let feats: usize = cur.shape()[1..].iter().product();
                    cur.reshape(vec![n, feats])?
                }
                _ => unreachable!("params aligned with arch by construction"),
            };
        }
        Ok(cur)
    }

    /// Train-mode forward (batch statistics, running stats updated). The
    /// training loop itself goes through the tape; this mirrors it for tests
    /// and scoring passes that do not need gradients.
    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        self.check_batch(x)?;
        let n = x.shape()[0];
        let mut cur = x.clone();
        for i in 0..self.arch.layers.len() {
            let layer = self.arch.layers[i].clone();
            cur = match (&layer, &self.params[i]) {
                (LayerKind::BatchNorm { .. }, LayerParams::BatchNorm { gamma, beta, .. }) => {
                    let channels = cur.shape()[1];
                    let spatial: usize = cur.shape()[2..].iter().product();
                    let (y, mean, var) = kernels::batchnorm_train(
                        cur.data(), channels, spatial, gamma.data(), beta.data(), BN_EPS,
                    );
                    let count = n * spatial;
                    let (mean, var) = (Tensor::from_vec(mean), Tensor::from_vec(var));
                    let y = Tensor::new(cur.shape().to_vec(), y)?;
                    self.update_bn_running(i, &mean, &var, count);
                    y
                }
                _ => {
                    // Non-BN layers behave identically in both modes; reuse a
                    // single-layer eval step.
                    self.forward_single_eval(i, &cur, n)?
                }
            };
        }
        Ok(cur)
    }

    fn forward_single_eval(&self, i: usize, cur: &Tensor, n: usize) -> Result<Tensor> {
        Ok(match (&self.arch.layers[i], &self.params[i]) {
            (LayerKind::Affine { in_features, out_features }, LayerParams::Affine { w, b }) => {
                let data = kernels::affine(cur.data(), w.data(), Some(b.data()), n, *in_features, *out_features);
                Tensor::new(vec![n, *out_features], data)?
            }
            (LayerKind::Conv2d { stride, padding, .. }, LayerParams::Conv { w, b }) => {
                let g = conv_geom(cur.shape(), w.shape(), *stride, *padding)?;
                let data = kernels::conv2d(cur.data(), w.data(), Some(b.data()), &g);
                Tensor::new(vec![g.batch, g.out_c, g.out_h, g.out_w], data)?
            }
            (LayerKind::BatchNorm { .. }, LayerParams::BatchNorm { gamma, beta, running_mean, running_var }) => {
                let (scale, shift) = bn_fold(gamma.data(), beta.data(), running_mean.data(), running_var.data());
                let channels = cur.shape()[1];
                let spatial: usize = cur.shape()[2..].iter().product();
                let data = kernels::channel_affine(cur.data(), channels, spatial, &scale, Some(&shift));
                Tensor::new(cur.shape().to_vec(), data)?
            }
            (LayerKind::Relu, _) => cur.map(|v| v.max(0.0)),
            (LayerKind::Flatten, _) => {
                let feats: usize = cur.shape()[1..].iter().product();
                cur.reshape(vec![n, feats])?
            }
            _ => unreachable!("params aligned with arch by construction"),
        })
    }

    /// Fraction of `labels` matched by the eval-mode prediction.
    pub fn accuracy(&self, x: &Tensor, labels: &[usize]) -> Result<f64> {
        let logits = self.forward(x)?;
        let preds = logits.argmax_rows();
        let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
        Ok(hits as f64 / labels.len().max(1) as f64)
    }

    /// Remove channels (conv) or hidden units (affine) not listed in `keep`,
    /// slicing parameters, masks, snapshot, any following batch norm, and the
    /// next weight layer's input dimension (flatten-aware). The classifier
    /// layer itself cannot be a target.
    pub fn shrink_structured(&mut self, keep: &[(usize, Vec<usize>)]) -> Result<()> {
        for (target, keep_idx) in keep {
            self.shrink_one(*target, keep_idx)?;
        }
        self.arch.validate()
    }

    fn shrink_one(&mut self, target: usize, keep: &[usize]) -> Result<()> {
        let out_dim = match self.arch.layers.get(target) {
            Some(LayerKind::Conv2d { out_channels, .. }) => *out_channels,
            Some(LayerKind::Affine { out_features, .. }) => *out_features,
            _ => {
                return Err(Error::InvalidInput(format!(
                    "shrink target {target} is not a weight layer"
                )))
            }
        };
        if keep.is_empty() {
            return Err(Error::InvalidInput(format!(
                "shrink target {target} would lose all channels"
            )));
        }
        if keep.windows(2).any(|w| w[0] >= w[1]) || *keep.last().unwrap() >= out_dim {
            return Err(Error::InvalidInput(format!(
                "keep set for layer {target} must be sorted, unique, and < {out_dim}"
            )));
        }
        if target == self.arch.layers.len() - 1 {
            return Err(Error::InvalidInput("cannot shrink the classifier layer".into()));
        }
        let next = (target + 1..self.arch.layers.len())
            .find(|&i| {
                matches!(
                    self.arch.layers[i],
                    LayerKind::Affine { .. } | LayerKind::Conv2d { .. }
                )
            })
            .ok_or_else(|| Error::InvalidInput("no consumer layer after shrink target".into()))?;

        // Geometry needed for flatten-aware column slicing, computed while
        // the arch is still consistent.
        let shapes = self.arch.output_shapes()?;
        let target_shape = shapes[target].clone();
        let flatten_between = (target + 1..next)
            .any(|i| matches!(self.arch.layers[i], LayerKind::Flatten));
        let group = if flatten_between {
            // [c, h, w] -> h*w consecutive columns per channel.
            target_shape[1..].iter().product::<usize>()
        } else {
            1
        };

        // Rows of the target layer: weight rows, bias entries, mask rows.
        let row_slice = |t: &Tensor| -> Vec<f32> {
            let row: usize = t.shape()[1..].iter().product();
            take_axis(t, 1, out_dim, row, keep)
        };
        let new_row_shape = |t: &Tensor| -> Vec<usize> {
            let mut s = t.shape().to_vec();
            s[0] = keep.len();
            s
        };
        for store in [&mut self.params, &mut self.snapshot] {
            if let LayerParams::Affine { w, b } | LayerParams::Conv { w, b } = &mut store[target] {
                *w = Tensor::new(new_row_shape(w), row_slice(w))?;
                *b = Tensor::new(vec![keep.len()], take_axis(b, 1, out_dim, 1, keep))?;
            }
        }
        if let Some(mask) = &mut self.masks[target] {
            *mask = Tensor::new(new_row_shape(mask), row_slice(mask))?;
        }

        match &mut self.arch.layers[target] {
            LayerKind::Conv2d { out_channels, .. } => *out_channels = keep.len(),
            LayerKind::Affine { out_features, .. } => *out_features = keep.len(),
            _ => unreachable!(),
        }

        // Following batch norm, if any.
        if let Some(LayerKind::BatchNorm { features }) = self.arch.layers.get_mut(target + 1) {
            *features = keep.len();
            let slice_bn = |p: &mut LayerParams| {
                if let LayerParams::BatchNorm { gamma, beta, running_mean, running_var } = p {
                    for t in [gamma, beta, running_mean, running_var] {
                        *t = Tensor::from_vec(take_axis(t, 1, out_dim, 1, keep));
                    }
                }
            };
            slice_bn(&mut self.params[target + 1]);
            slice_bn(&mut self.snapshot[target + 1]);
        }

        // Consumer layer input columns: conv in-channels, or affine columns
        // grouped by the flattened spatial extent per channel.
        let col_slice = |t: &Tensor| -> (Vec<usize>, Vec<f32>) {
            match t.shape().len() {
                4 => {
                    let (o, k) = (t.shape()[0], t.shape()[2]);
                    let data = take_axis(t, o, out_dim, k * k, keep);
                    (vec![o, keep.len(), k, k], data)
                }
                2 => {
                    let o = t.shape()[0];
                    debug_assert_eq!(t.shape()[1], out_dim * group, "flatten geometry mismatch");
                    let data = take_axis(t, o, out_dim, group, keep);
                    (vec![o, keep.len() * group], data)
                }
                _ => unreachable!("consumer weight is 2d or 4d"),
            }
        };
        for store in [&mut self.params, &mut self.snapshot] {
            if let LayerParams::Affine { w, .. } | LayerParams::Conv { w, .. } = &mut store[next] {
                let (shape, data) = col_slice(w);
                *w = Tensor::new(shape, data)?;
            }
        }
        if let Some(mask) = &mut self.masks[next] {
            let (shape, data) = col_slice(mask);
            *mask = Tensor::new(shape, data)?;
        }
        match &mut self.arch.layers[next] {
            LayerKind::Conv2d { in_channels, .. } => *in_channels = keep.len(),
            LayerKind::Affine { in_features, .. } => *in_features = keep.len() * group,
            _ => unreachable!(),
        }
        Ok(())
    }
}

/// View `t` as [a, c, b] and keep the listed entries along the middle axis.
fn take_axis(t: &Tensor, a: usize, c: usize, b: usize, keep: &[usize]) -> Vec<f32> {
    debug_assert_eq!(a * c * b, t.len(), "take_axis geometry");
    let mut data = Vec::with_capacity(a * keep.len() * b);
    for i in 0..a {
        for &j in keep {
            let start = (i * c + j) * b;
            data.extend_from_slice(&t.data()[start..start + b]);
        }
    }
    data
}

pub(crate) fn conv_geom(
    x_shape: &[usize],
    w_shape: &[usize],
    stride: usize,
    padding: usize,
) -> Result<kernels::ConvGeom> {
    Ok(kernels::ConvGeom {
        batch: x_shape[0],
        in_c: x_shape[1],
        in_h: x_shape[2],
        in_w: x_shape[3],
        out_c: w_shape[0],
        kernel: w_shape[2],
        stride,
        padding,
        out_h: crate::tensor::conv_out_dim(x_shape[2], w_shape[2], stride, padding)?,
        out_w: crate::tensor::conv_out_dim(x_shape[3], w_shape[3], stride, padding)?,
    })
}

/// Network parameters registered as tape leaves, for training passes.
pub struct TapedNet {
    pub vars: Vec<Vec<Var>>,
}

/// Output of a taped forward pass.
pub struct TapedForward {
    pub output: Var,
    /// (layer index, bn node) pairs for running-stat updates.
    pub bn_nodes: Vec<(usize, Var)>,
}

impl TapedNet {
    /// Register every trainable parameter as a leaf, in `param_tensors` order.
    pub fn register(tape: &mut Tape, net: &Network) -> TapedNet {
        let vars = net
            .params
            .iter()
            .map(|p| p.trainable().into_iter().map(|t| tape.leaf(t.clone())).collect())
            .collect();
        TapedNet { vars }
    }

    /// Flat parameter vars aligned with `Network::param_tensors` order.
    pub fn param_vars(&self) -> Vec<Var> {
        self.vars.iter().flatten().copied().collect()
    }

    /// Forward pass on the tape. Train mode uses batch statistics (recorded
    /// for running-stat updates); eval mode folds running stats.
    pub fn forward(&self, tape: &mut Tape, net: &Network, x: Var, mode: Mode) -> Result<TapedForward> {
        let mut cur = x;
        let mut bn_nodes = Vec::new();
        for (i, layer) in net.arch.layers.iter().enumerate() {
            cur = match layer {
                LayerKind::Affine { .. } => {
                    let (w, b) = (self.vars[i][0], self.vars[i][1]);
                    tape.affine(cur, w, Some(b))?
                }
                LayerKind::Conv2d { stride, padding, .. } => {
                    let (w, b) = (self.vars[i][0], self.vars[i][1]);
                    tape.conv2d(cur, w, Some(b), *stride, *padding)?
                }
                LayerKind::BatchNorm { .. } => {
                    let (gamma, beta) = (self.vars[i][0], self.vars[i][1]);
                    match mode {
                        Mode::Train => {
                            let y = tape.batchnorm_train(cur, gamma, beta, BN_EPS)?;
                            bn_nodes.push((i, y));
                            y
                        }
                        Mode::Eval => {
                            let (rm, rv) = match &net.params[i] {
                                LayerParams::BatchNorm { running_mean, running_var, .. } => {
                                    (running_mean, running_var)
                                }
                                _ => unreachable!(),
                            };
                            // s = gamma * c with c = 1/sqrt(var+eps); t = beta - s*mean.
                            let c = rv.map(|v| 1.0 / (v + BN_EPS).sqrt());
                            let cvar = tape.constant(c);
                            let s = tape.mul(gamma, cvar)?;
                            let mvar = tape.constant(rm.clone());
                            let sm = tape.mul(s, mvar)?;
                            let t = tape.sub(beta, sm)?;
                            tape.channel_affine(cur, s, Some(t))?
                        }
                    }
                }
                LayerKind::Relu => tape.relu(cur),
                LayerKind::Flatten => {
                    let n = tape.value(cur).shape()[0];
                    let feats: usize = tape.value(cur).shape()[1..].iter().product();
                    tape.reshape(cur, vec![n, feats])?
                }
            };
        }
        Ok(TapedForward { output: cur, bn_nodes })
    }
}
