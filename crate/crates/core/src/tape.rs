//! Reverse-mode autodiff over float32 tensors.
//!
//! A `Tape` is an append-only arena of nodes; `Var` indexes into it. Builders
//! run the forward kernel eagerly and record the op, so `backward` is a single
//! reverse sweep with hand-derived vector-Jacobian products. Every node
//! carries a stop-gradient flag: a flagged node receives gradient but
//! propagates zero to its parents.
//!
//! The recorded structure is re-executable at f64 (`replay_f64`), which is
//! what `grad_check` uses for its central-difference oracle; f32 forward
//! differences at h=1e-3 would drown the comparison in round-off.

use crate::error::{Error, Result};
use crate::tensor::kernels::{self, ConvGeom};
use crate::tensor::{conv_out_dim, Tensor};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f32),
    AddScalar(Var, f32),
    MatMul(Var, Var),
    Affine { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize },
    BatchNormTrain { x: Var, gamma: Var, beta: Var, eps: f32 },
    ChannelAffine { x: Var, scale: Var, shift: Option<Var> },
    Relu(Var),
    Tanh(Var),
    Abs(Var),
    MinElem(Var, Var),
    MaxElem(Var, Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    CrossEntropy { logits: Var, labels: Vec<usize> },
    WorstCaseLogits { lower: Var, upper: Var, labels: Vec<usize> },
    StopGrad(Var),
}

struct Node {
    op: Op,
    value: Tensor,
    stop_grad: bool,
    /// Batch statistics saved by train-mode batch norm, for the backward
    /// pass and for updating running stats.
    bn_stats: Option<(Tensor, Tensor)>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar root with respect to every reachable node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient as an owned tensor, zeros when the root does not reach `v`.
    pub fn take_or_zeros(&mut self, v: Var, shape: &[usize]) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Batch statistics (mean, biased variance) recorded by a
    /// `batchnorm_train` node.
    pub fn bn_batch_stats(&self, v: Var) -> Option<(&Tensor, &Tensor)> {
        self.nodes[v.0].bn_stats.as_ref().map(|(m, va)| (m, va))
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node {
            op,
            value,
            stop_grad: false,
            bn_stats: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    /// Leaf whose gradient the caller never reads; identical to `leaf`,
    /// spelled differently for intent.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn require_same_shape(&self, context: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                context,
                expected: self.shape(a).to_vec(),
                got: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn binary_map(
        &mut self,
        context: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f32, f32) -> f32,
        op: Op,
    ) -> Result<Var> {
        self.require_same_shape(context, a, b)?;
        let value = self.nodes[a.0].value.zip(&self.nodes[b.0].value, f);
        Ok(self.push(op, value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_map("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_map("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_map("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_map("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn min_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_map("min_elem", a, b, f32::min, Op::MinElem(a, b))
    }

    pub fn max_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_map("max_elem", a, b, f32::max, Op::MaxElem(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(|x| -x);
        self.push(Op::Neg(a), value)
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let value = self.nodes[a.0].value.map(|x| x * c);
        self.push(Op::Scale(a, c), value)
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Var {
        let value = self.nodes[a.0].value.map(|x| x + c);
        self.push(Op::AddScalar(a, c), value)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(|x| x.max(0.0));
        self.push(Op::Relu(a), value)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(f32::tanh);
        self.push(Op::Tanh(a), value)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(f32::abs);
        self.push(Op::Abs(a), value)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(kernels::sum(self.nodes[a.0].value.data()));
        self.push(Op::Sum(a), value)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len() as f32;
        let value = Tensor::scalar(kernels::sum(self.nodes[a.0].value.data()) / n);
        self.push(Op::Mean(a), value)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.nodes[a.0].value.reshape(shape)?;
        Ok(self.push(Op::Reshape(a), value))
    }

    /// Identity forward; blocks gradient flow to `a` and its ancestors.
    pub fn stop_grad(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.clone();
        let v = self.push(Op::StopGrad(a), value);
        self.nodes[v.0].stop_grad = true;
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                context: "matmul",
                expected: sa,
                got: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            m,
            k,
            n,
        );
        let value = Tensor::new(vec![m, n], data)?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    /// y = x w^T (+ b): x is [n, in], w is [out, in], b is [out].
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(Error::ShapeMismatch {
                context: "affine",
                expected: sx,
                got: sw,
            });
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return Err(Error::ShapeMismatch {
                    context: "affine bias",
                    expected: vec![sw[0]],
                    got: self.shape(b).to_vec(),
                });
            }
        }
        let (rows, in_f, out_f) = (sx[0], sx[1], sw[0]);
        let data = kernels::affine(
            self.nodes[x.0].value.data(),
            self.nodes[w.0].value.data(),
            b.map(|b| self.nodes[b.0].value.data()),
            rows,
            in_f,
            out_f,
        );
        let value = Tensor::new(vec![rows, out_f], data)?;
        Ok(self.push(Op::Affine { x, w, b }, value))
    }

    fn conv_geom(&self, x: Var, w: Var, stride: usize, padding: usize) -> Result<ConvGeom> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sw[2] != sw[3] {
            return Err(Error::ShapeMismatch {
                context: "conv2d",
                expected: sx.to_vec(),
                got: sw.to_vec(),
            });
        }
        Ok(ConvGeom {
            batch: sx[0],
            in_c: sx[1],
            in_h: sx[2],
            in_w: sx[3],
            out_c: sw[0],
            kernel: sw[2],
            stride,
            padding,
            out_h: conv_out_dim(sx[2], sw[2], stride, padding)?,
            out_w: conv_out_dim(sx[3], sw[3], stride, padding)?,
        })
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let g = self.conv_geom(x, w, stride, padding)?;
        if let Some(b) = b {
            if self.shape(b) != [g.out_c] {
                return Err(Error::ShapeMismatch {
                    context: "conv2d bias",
                    expected: vec![g.out_c],
                    got: self.shape(b).to_vec(),
                });
            }
        }
        let data = kernels::conv2d(
            self.nodes[x.0].value.data(),
            self.nodes[w.0].value.data(),
            b.map(|b| self.nodes[b.0].value.data()),
            &g,
        );
        let value = Tensor::new(vec![g.batch, g.out_c, g.out_h, g.out_w], data)?;
        Ok(self.push(Op::Conv2d { x, w, b, stride, padding }, value))
    }

    fn channel_layout(&self, context: &'static str, x: Var) -> Result<(usize, usize)> {
        let s = self.shape(x);
        if s.len() < 2 {
            return Err(Error::ShapeMismatch {
                context,
                expected: vec![0, 0],
                got: s.to_vec(),
            });
        }
        Ok((s[1], s[2..].iter().product()))
    }

    /// Train-mode batch norm over channel dim 1 of x; records batch stats.
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let (channels, spatial) = self.channel_layout("batchnorm_train", x)?;
        if self.shape(gamma) != [channels] || self.shape(beta) != [channels] {
            return Err(Error::ShapeMismatch {
                context: "batchnorm_train params",
                expected: vec![channels],
                got: self.shape(gamma).to_vec(),
            });
        }
        let (y, mean, var) = kernels::batchnorm_train(
            self.nodes[x.0].value.data(),
            channels,
            spatial,
            self.nodes[gamma.0].value.data(),
            self.nodes[beta.0].value.data(),
            eps,
        );
        let value = Tensor::new(self.shape(x).to_vec(), y)?;
        let v = self.push(Op::BatchNormTrain { x, gamma, beta, eps }, value);
        self.nodes[v.0].bn_stats = Some((Tensor::from_vec(mean), Tensor::from_vec(var)));
        Ok(v)
    }

    /// y = x * scale[c] (+ shift[c]); the eval-mode batch norm and the
    /// per-channel broadcasts used by the regularizers.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Option<Var>) -> Result<Var> {
        let (channels, spatial) = self.channel_layout("channel_affine", x)?;
        if self.shape(scale) != [channels] {
            return Err(Error::ShapeMismatch {
                context: "channel_affine scale",
                expected: vec![channels],
                got: self.shape(scale).to_vec(),
            });
        }
        if let Some(t) = shift {
            if self.shape(t) != [channels] {
                return Err(Error::ShapeMismatch {
                    context: "channel_affine shift",
                    expected: vec![channels],
                    got: self.shape(t).to_vec(),
                });
            }
        }
        let data = kernels::channel_affine(
            self.nodes[x.0].value.data(),
            channels,
            spatial,
            self.nodes[scale.0].value.data(),
            shift.map(|t| self.nodes[t.0].value.data()),
        );
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(Op::ChannelAffine { x, scale, shift }, value))
    }

    /// Mean cross-entropy of [n, k] logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::ShapeMismatch {
                context: "cross_entropy",
                expected: vec![labels.len(), 0],
                got: s,
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= s[1]) {
            return Err(Error::InvalidInput(format!(
                "cross_entropy label {bad} out of range for {} classes",
                s[1]
            )));
        }
        let value = Tensor::scalar(kernels::cross_entropy(
            self.nodes[logits.0].value.data(),
            s[0],
            s[1],
            labels,
        ));
        Ok(self.push(
            Op::CrossEntropy { logits, labels: labels.to_vec() },
            value,
        ))
    }

    /// Adversarial logits from output bounds: true class at its lower bound,
    /// all others at their upper bounds.
    pub fn worst_case_logits(&mut self, lower: Var, upper: Var, labels: &[usize]) -> Result<Var> {
        self.require_same_shape("worst_case_logits", lower, upper)?;
        let s = self.shape(lower).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::ShapeMismatch {
                context: "worst_case_logits",
                expected: vec![labels.len(), 0],
                got: s,
            });
        }
        let data = kernels::worst_case_logits(
            self.nodes[lower.0].value.data(),
            self.nodes[upper.0].value.data(),
            s[0],
            s[1],
            labels,
        );
        let value = Tensor::new(s, data)?;
        Ok(self.push(
            Op::WorstCaseLogits { lower, upper, labels: labels.to_vec() },
            value,
        ))
    }

    /// Reverse sweep from a scalar root. Nodes the root does not reach keep a
    /// `None` gradient.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::InvalidInput(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::new(
            self.nodes[root.0].value.shape().to_vec(),
            vec![1.0],
        )?);

        for i in (0..=root.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if self.nodes[i].stop_grad {
                grads[i] = Some(g);
                continue;
            }
            self.accumulate_parents(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, contribution: Tensor) {
        match &mut grads[v.0] {
            Some(g) => {
                let gd = g.data_mut();
                for (dst, src) in gd.iter_mut().zip(contribution.data()) {
                    *dst += *src;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    fn accumulate_parents(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                self.acc(grads, *a, g.zip(val(*b), |g, b| g * b));
                self.acc(grads, *b, g.zip(val(*a), |g, a| g * a));
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                self.acc(grads, *a, g.zip(bv, |g, b| g / b));
                let av = val(*a);
                let mut gb = g.zip(av, |g, a| g * a);
                gb = gb.zip(bv, |n, b| -n / (b * b));
                self.acc(grads, *b, gb);
            }
            Op::Neg(a) => self.acc(grads, *a, g.map(|v| -v)),
            Op::Scale(a, c) => {
                let c = *c;
                self.acc(grads, *a, g.map(|v| v * c));
            }
            Op::AddScalar(a, _) => self.acc(grads, *a, g.clone()),
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                // ga = g * b^T, gb = a^T * g; materialize transposes.
                let bt = transpose(val(*b).data(), k, n);
                let ga = kernels::matmul(g.data(), &bt, m, n, k);
                let at = transpose(val(*a).data(), m, k);
                let gb = kernels::matmul(&at, g.data(), k, m, n);
                self.acc(grads, *a, Tensor::new(vec![m, k], ga).unwrap());
                self.acc(grads, *b, Tensor::new(vec![k, n], gb).unwrap());
            }
            Op::Affine { x, w, b } => {
                let (rows, in_f) = (self.shape(*x)[0], self.shape(*x)[1]);
                let out_f = self.shape(*w)[0];
                // gx = g * w ([n,out]x[out,in]); gw = g^T * x.
                let gx = kernels::matmul(g.data(), val(*w).data(), rows, out_f, in_f);
                let gt = transpose(g.data(), rows, out_f);
                let gw = kernels::matmul(&gt, val(*x).data(), out_f, rows, in_f);
                self.acc(grads, *x, Tensor::new(vec![rows, in_f], gx).unwrap());
                self.acc(grads, *w, Tensor::new(vec![out_f, in_f], gw).unwrap());
                if let Some(b) = b {
                    let mut gb = vec![0.0f32; out_f];
                    for r in 0..rows {
                        for (o, gbo) in gb.iter_mut().enumerate() {
                            *gbo += g.data()[r * out_f + o];
                        }
                    }
                    self.acc(grads, *b, Tensor::from_vec(gb));
                }
            }
            Op::Conv2d { x, w, b, stride, padding } => {
                let geom = self.conv_geom(*x, *w, *stride, *padding).unwrap();
                let gx = kernels::conv2d_input_grad(g.data(), val(*w).data(), &geom);
                let gw = kernels::conv2d_weight_grad(val(*x).data(), g.data(), &geom);
                self.acc(grads, *x, Tensor::new(self.shape(*x).to_vec(), gx).unwrap());
                self.acc(grads, *w, Tensor::new(self.shape(*w).to_vec(), gw).unwrap());
                if let Some(b) = b {
                    let gb = kernels::conv2d_bias_grad(g.data(), &geom);
                    self.acc(grads, *b, Tensor::from_vec(gb));
                }
            }
            Op::BatchNormTrain { x, gamma, beta, eps } => {
                let (channels, spatial) = self.channel_layout("batchnorm_train", *x).unwrap();
                let (mean, var) = self.nodes[i].bn_stats.as_ref().unwrap();
                let xv = val(*x).data();
                let gv = val(*gamma).data();
                let count = (xv.len() / channels) as f32;
                let batch = xv.len() / (channels * spatial);
                let mut gx = vec![0.0f32; xv.len()];
                let mut ggamma = vec![0.0f32; channels];
                let mut gbeta = vec![0.0f32; channels];
                for c in 0..channels {
                    let inv = 1.0 / (var.data()[c] + eps).sqrt();
                    let mu = mean.data()[c];
                    let mut sum_g = 0.0f32;
                    let mut sum_gx = 0.0f32;
                    for n in 0..batch {
                        for s in 0..spatial {
                            let idx = (n * channels + c) * spatial + s;
                            let xhat = (xv[idx] - mu) * inv;
                            sum_g += g.data()[idx];
                            sum_gx += g.data()[idx] * xhat;
                        }
                    }
                    ggamma[c] = sum_gx;
                    gbeta[c] = sum_g;
                    let mg = sum_g / count;
                    let mgx = sum_gx / count;
                    for n in 0..batch {
                        for s in 0..spatial {
                            let idx = (n * channels + c) * spatial + s;
                            let xhat = (xv[idx] - mu) * inv;
                            gx[idx] = gv[c] * inv * (g.data()[idx] - mg - xhat * mgx);
                        }
                    }
                }
                self.acc(grads, *x, Tensor::new(self.shape(*x).to_vec(), gx).unwrap());
                self.acc(grads, *gamma, Tensor::from_vec(ggamma));
                self.acc(grads, *beta, Tensor::from_vec(gbeta));
            }
            Op::ChannelAffine { x, scale, shift } => {
                let (channels, spatial) = self.channel_layout("channel_affine", *x).unwrap();
                let xv = val(*x).data();
                let sv = val(*scale).data();
                let batch = xv.len() / (channels * spatial);
                let mut gx = vec![0.0f32; xv.len()];
                let mut gs = vec![0.0f32; channels];
                let mut gt = vec![0.0f32; channels];
                for n in 0..batch {
                    for c in 0..channels {
                        for s in 0..spatial {
                            let idx = (n * channels + c) * spatial + s;
                            gx[idx] = g.data()[idx] * sv[c];
                            gs[c] += g.data()[idx] * xv[idx];
                            gt[c] += g.data()[idx];
                        }
                    }
                }
                self.acc(grads, *x, Tensor::new(self.shape(*x).to_vec(), gx).unwrap());
                self.acc(grads, *scale, Tensor::from_vec(gs));
                if let Some(t) = shift {
                    self.acc(grads, *t, Tensor::from_vec(gt));
                }
            }
            Op::Relu(a) => {
                // Subgradient 0 at the kink.
                self.acc(grads, *a, g.zip(val(*a), |g, x| if x > 0.0 { g } else { 0.0 }));
            }
            Op::Tanh(a) => {
                let y = &self.nodes[i].value;
                self.acc(grads, *a, g.zip(y, |g, y| g * (1.0 - y * y)));
            }
            Op::Abs(a) => {
                // sign(0) = 0.
                self.acc(grads, *a, g.zip(val(*a), |g, x| g * sign(x)));
            }
            Op::MinElem(a, b) => {
                // Ties route to the first operand.
                let (av, bv) = (val(*a), val(*b));
                self.acc(grads, *a, g.clone().zip(&av.zip(bv, |x, y| if x <= y { 1.0 } else { 0.0 }), |g, m| g * m));
                self.acc(grads, *b, g.clone().zip(&av.zip(bv, |x, y| if x <= y { 0.0 } else { 1.0 }), |g, m| g * m));
            }
            Op::MaxElem(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                self.acc(grads, *a, g.clone().zip(&av.zip(bv, |x, y| if x >= y { 1.0 } else { 0.0 }), |g, m| g * m));
                self.acc(grads, *b, g.clone().zip(&av.zip(bv, |x, y| if x >= y { 0.0 } else { 1.0 }), |g, m| g * m));
            }
            Op::Sum(a) => {
                let gs = g.item();
                self.acc(grads, *a, Tensor::full(self.shape(*a).to_vec(), gs));
            }
            Op::Mean(a) => {
                let gs = g.item() / val(*a).len() as f32;
                self.acc(grads, *a, Tensor::full(self.shape(*a).to_vec(), gs));
            }
            Op::Reshape(a) => {
                let data = g.data().to_vec();
                self.acc(grads, *a, Tensor::new(self.shape(*a).to_vec(), data).unwrap());
            }
            Op::CrossEntropy { logits, labels } => {
                let s = self.shape(*logits);
                let (n, k) = (s[0], s[1]);
                let mut gl = kernels::softmax(val(*logits).data(), n, k);
                for (r, &y) in labels.iter().enumerate() {
                    gl[r * k + y] -= 1.0;
                }
                let gs = g.item() / n as f32;
                for v in gl.iter_mut() {
                    *v *= gs;
                }
                self.acc(grads, *logits, Tensor::new(vec![n, k], gl).unwrap());
            }
            Op::WorstCaseLogits { lower, upper, labels } => {
                let s = self.shape(*lower);
                let (n, k) = (s[0], s[1]);
                let mut gl = vec![0.0f32; n * k];
                let mut gu = vec![0.0f32; n * k];
                for r in 0..n {
                    for j in 0..k {
                        let idx = r * k + j;
                        if j == labels[r] {
                            gl[idx] = g.data()[idx];
                        } else {
                            gu[idx] = g.data()[idx];
                        }
                    }
                }
                self.acc(grads, *lower, Tensor::new(vec![n, k], gl).unwrap());
                self.acc(grads, *upper, Tensor::new(vec![n, k], gu).unwrap());
            }
            Op::StopGrad(_) => unreachable!("stop_grad nodes are skipped in backward"),
        }
    }

    /// Re-execute nodes 0..=root at f64, with per-leaf value overrides.
    /// Branch conditions (relu, min/max, softmax) re-evaluate at f64 rather
    /// than replaying the recorded f32 decisions.
    pub fn replay_f64(&self, root: Var, overrides: &[(Var, Vec<f64>)]) -> f64 {
        let mut vals: Vec<Option<Vec<f64>>> = (0..=root.0).map(|_| None).collect();
        for i in 0..=root.0 {
            let node = &self.nodes[i];
            let get = |v: &Var, vals: &[Option<Vec<f64>>]| -> Vec<f64> {
                vals[v.0].clone().expect("parent evaluated before child")
            };
            let out: Vec<f64> = match &node.op {
                Op::Leaf => {
                    let over = overrides.iter().find(|(v, _)| v.0 == i);
                    match over {
                        Some((_, data)) => data.clone(),
                        None => node.value.data().iter().map(|&x| x as f64).collect(),
                    }
                }
                Op::Add(a, b) => zip2(&get(a, &vals), &get(b, &vals), |x, y| x + y),
                Op::Sub(a, b) => zip2(&get(a, &vals), &get(b, &vals), |x, y| x - y),
                Op::Mul(a, b) => zip2(&get(a, &vals), &get(b, &vals), |x, y| x * y),
                Op::Div(a, b) => zip2(&get(a, &vals), &get(b, &vals), |x, y| x / y),
                Op::Neg(a) => get(a, &vals).iter().map(|x| -x).collect(),
                Op::Scale(a, c) => {
                    let c = *c as f64;
                    get(a, &vals).iter().map(|x| x * c).collect()
                }
                Op::AddScalar(a, c) => {
                    let c = *c as f64;
                    get(a, &vals).iter().map(|x| x + c).collect()
                }
                Op::MatMul(a, b) => {
                    let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let n = self.shape(*b)[1];
                    kernels::matmul(&get(a, &vals), &get(b, &vals), m, k, n)
                }
                Op::Affine { x, w, b } => {
                    let (rows, in_f) = (self.shape(*x)[0], self.shape(*x)[1]);
                    let out_f = self.shape(*w)[0];
                    let bv = b.map(|b| get(&b, &vals));
                    kernels::affine(&get(x, &vals), &get(w, &vals), bv.as_deref(), rows, in_f, out_f)
                }
                Op::Conv2d { x, w, b, stride, padding } => {
                    let geom = self.conv_geom(*x, *w, *stride, *padding).unwrap();
                    let bv = b.map(|b| get(&b, &vals));
                    kernels::conv2d(&get(x, &vals), &get(w, &vals), bv.as_deref(), &geom)
                }
                Op::BatchNormTrain { x, gamma, beta, eps } => {
                    let (channels, spatial) = self.channel_layout("batchnorm_train", *x).unwrap();
                    kernels::batchnorm_train(
                        &get(x, &vals),
                        channels,
                        spatial,
                        &get(gamma, &vals),
                        &get(beta, &vals),
                        *eps as f64,
                    )
                    .0
                }
                Op::ChannelAffine { x, scale, shift } => {
                    let (channels, spatial) = self.channel_layout("channel_affine", *x).unwrap();
                    let tv = shift.map(|t| get(&t, &vals));
                    kernels::channel_affine(&get(x, &vals), channels, spatial, &get(scale, &vals), tv.as_deref())
                }
                Op::Relu(a) => get(a, &vals).iter().map(|&x| x.max(0.0)).collect(),
                Op::Tanh(a) => get(a, &vals).iter().map(|x| x.tanh()).collect(),
                Op::Abs(a) => get(a, &vals).iter().map(|x| x.abs()).collect(),
                Op::MinElem(a, b) => zip2(&get(a, &vals), &get(b, &vals), f64::min),
                Op::MaxElem(a, b) => zip2(&get(a, &vals), &get(b, &vals), f64::max),
                Op::Sum(a) => vec![kernels::sum(&get(a, &vals))],
                Op::Mean(a) => {
                    let av = get(a, &vals);
                    vec![kernels::sum(&av) / av.len() as f64]
                }
                Op::Reshape(a) => get(a, &vals),
                Op::CrossEntropy { logits, labels } => {
                    let s = self.shape(*logits);
                    vec![kernels::cross_entropy(&get(logits, &vals), s[0], s[1], labels)]
                }
                Op::WorstCaseLogits { lower, upper, labels } => {
                    let s = self.shape(*lower);
                    kernels::worst_case_logits(&get(lower, &vals), &get(upper, &vals), s[0], s[1], labels)
                }
                Op::StopGrad(a) => get(a, &vals),
            };
            vals[i] = Some(out);
        }
        let root_val = vals[root.0].as_ref().unwrap();
        assert_eq!(root_val.len(), 1, "replay root must be scalar");
        root_val[0]
    }
}

fn transpose(a: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

fn zip2(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn sign(x: f32) -> f32 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
