//! Training loops: standard, FGSM-adversarial, and interval-certified, with
//! a linear epsilon ramp, milestone learning-rate decay, global gradient
//! clipping, and the stability regularizers.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bounds::{dataset_stability, nrs_loss, rs_loss, taped_ibp};
use crate::error::{Error, Result};
use crate::network::{LayerParams, Mode, Network, TapedNet};
use crate::optim::{clip_grad_norm, OptimKind, OptimState};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::verify::attack::{pgd_attack, sign, AttackConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMethod {
    Standard,
    Fgsm,
    IbpCertified,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularizer {
    None,
    Rs,
    Nrs,
}

/// Exact rational, so schedules over values like 2/255 hit their closed form
/// at every epoch before any float32 rounding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ratio {
    pub num: u32,
    pub den: u32,
}

impl Ratio {
    pub fn new(num: u32, den: u32) -> Self {
        assert!(den != 0, "zero denominator");
        Ratio { num, den }
    }

    pub fn zero() -> Self {
        Ratio { num: 0, den: 1 }
    }

    pub fn value_f32(self) -> f32 {
        (self.num as f64 / self.den as f64) as f32
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: TrainMethod,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimKind,
    pub lr: f32,
    /// Epochs at which the learning rate multiplies by `lr_decay` (effective
    /// from the milestone epoch itself).
    pub lr_milestones: Vec<usize>,
    pub lr_decay: f32,
    pub grad_clip: f32,
    pub eps_target: Ratio,
    /// First epoch (1-based) with nonzero epsilon pressure; the ramp reaches
    /// `eps_target` at `ramp_end`.
    pub ramp_start: usize,
    pub ramp_end: usize,
    pub regularizer: Regularizer,
    pub reg_weight: f32,
    /// L1 weight on batch-norm scales (the channel-sparsity regularizer);
    /// zero disables it.
    pub slim_l1: f32,
    /// Robust-loss mix: loss = (1-kappa) * clean + kappa * worst-case.
    pub kappa: f32,
    /// Start FGSM from a random point in the ball instead of the center.
    pub fgsm_random_init: bool,
    pub input_range: (f32, f32),
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: TrainMethod::Standard,
            epochs: 60,
            batch_size: 128,
            optimizer: OptimKind::adam_default(),
            lr: 1e-3,
            lr_milestones: vec![42, 51],
            lr_decay: 0.1,
            grad_clip: 8.0,
            eps_target: Ratio::zero(),
            ramp_start: 11,
            ramp_end: 48,
            regularizer: Regularizer::None,
            reg_weight: 0.0,
            slim_l1: 0.0,
            kappa: 0.5,
            fgsm_random_init: false,
            input_range: (0.0, 1.0),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |reason: &str| Err(Error::InvalidInput(format!("train config: {reason}")));
        if self.ramp_start < 1 || self.ramp_start > self.ramp_end {
            return fail("need 1 <= ramp_start <= ramp_end");
        }
        if self.ramp_end > self.epochs.max(1) {
            return fail("ramp_end past the last epoch");
        }
        if !(0.0..=1.0).contains(&self.kappa) {
            return fail("kappa outside [0, 1]");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("lr must be positive and finite");
        }
        if self.reg_weight < 0.0 || self.slim_l1 < 0.0 {
            return fail("regularizer weights must be nonnegative");
        }
        Ok(())
    }
}

/// Epsilon at a 1-based epoch: 0 before the ramp, linear across it (exact
/// rational before the final float rounding), the target after.
pub fn eps_schedule(epoch: usize, cfg: &TrainConfig) -> f32 {
    assert!(epoch >= 1, "epochs are 1-based");
    let (start, end) = (cfg.ramp_start, cfg.ramp_end);
    if epoch < start {
        return 0.0;
    }
    if epoch >= end {
        return cfg.eps_target.value_f32();
    }
    let num = (epoch - start) as u64 * cfg.eps_target.num as u64;
    let den = (end - start) as u64 * cfg.eps_target.den as u64;
    (num as f64 / den as f64) as f32
}

/// Natural/robust mix: fully natural before the ramp, the configured kappa
/// once epsilon pressure starts.
pub fn kappa_schedule(epoch: usize, cfg: &TrainConfig) -> f32 {
    if epoch < cfg.ramp_start {
        0.0
    } else {
        cfg.kappa
    }
}

/// Learning-rate multiplier at an epoch: `lr_decay` once per milestone
/// already reached.
pub fn lr_scale_at(epoch: usize, cfg: &TrainConfig) -> f32 {
    let hits = cfg.lr_milestones.iter().filter(|&&m| epoch >= m).count();
    cfg.lr_decay.powi(hits as i32)
}

/// Input gradient of the batch cross-entropy, eval-mode forward.
fn batch_input_grad(net: &Network, x: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let tnet = TapedNet::register(&mut tape, net);
    let xv = tape.leaf(x.clone());
    let fwd = tnet.forward(&mut tape, net, xv, Mode::Eval)?;
    let loss = tape.cross_entropy(fwd.output, labels)?;
    let mut grads = tape.backward(loss)?;
    Ok(grads.take_or_zeros(xv, x.shape()))
}

/// One signed gradient step of size eps from `x` (or from a random point in
/// the ball when `random_init`), clamped to ball(x, eps) and the data range.
pub fn fgsm_batch(
    net: &Network,
    x: &Tensor,
    labels: &[usize],
    eps: f32,
    range: (f32, f32),
    random_init: bool,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let lo = x.map(|v| (v - eps).max(range.0));
    let hi = x.map(|v| (v + eps).min(range.1));
    let start = if random_init && eps > 0.0 {
        Tensor::new(
            x.shape().to_vec(),
            lo.data()
                .iter()
                .zip(hi.data())
                .map(|(l, u)| if l < u { rng.gen_range(*l..=*u) } else { *l })
                .collect(),
        )?
    } else {
        x.clone()
    };
    let g = batch_input_grad(net, &start, labels)?;
    let data = start
        .data()
        .iter()
        .zip(g.data())
        .zip(lo.data().iter().zip(hi.data()))
        .map(|((s, g), (l, u))| (s + eps * sign(*g)).clamp(*l, *u))
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Single-sample FGSM step (the center start); see `fgsm_batch`.
pub fn fgsm_example(
    net: &Network,
    x: &Tensor,
    label: usize,
    eps: f32,
    range: (f32, f32),
) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    let batched = x.reshape(shape)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let adv = fgsm_batch(net, &batched, &[label], eps, range, false, &mut rng)?;
    adv.reshape(x.shape().to_vec())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub eps: f32,
    /// Mean total loss over the epoch (regularizers included).
    pub loss: f64,
    /// Mean regularizer contribution (already weighted).
    pub reg_loss: f64,
    /// Clean accuracy on the training stream.
    pub std_acc: f64,
    /// Adversarial (fgsm) or certified (ibp) accuracy on the training
    /// stream; equals std_acc under standard training.
    pub adv_acc: f64,
    /// Mean -l*u over all ReLU pre-activations on the probe batch at the
    /// epoch's epsilon, measured after the epoch's updates.
    pub instability_mean: f64,
}

struct BatchOutcome {
    loss: f64,
    reg: f64,
    clean_correct: usize,
    robust_correct: usize,
}

fn train_batch(
    net: &mut Network,
    opt: &mut OptimState,
    xb: &Tensor,
    yb: &[usize],
    eps: f32,
    kappa: f32,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<BatchOutcome> {
    let n = xb.shape()[0];
    let mut tape = Tape::new();
    let tnet = TapedNet::register(&mut tape, net);

    // Forward pass that feeds the base loss. FGSM crafts its examples with
    // the current weights first (eval-mode batch norm), then trains on them.
    let (fwd, clean_logits) = match cfg.method {
        TrainMethod::Standard | TrainMethod::IbpCertified => {
            let xv = tape.constant(xb.clone());
            let fwd = tnet.forward(&mut tape, net, xv, Mode::Train)?;
            let clean = tape.value(fwd.output).clone();
            (fwd, clean)
        }
        TrainMethod::Fgsm => {
            let adv = fgsm_batch(
                net,
                xb,
                yb,
                eps,
                cfg.input_range,
                cfg.fgsm_random_init,
                rng,
            )?;
            let av = tape.constant(adv);
            let fwd = tnet.forward(&mut tape, net, av, Mode::Train)?;
            (fwd, net.forward(xb)?)
        }
    };

    // Interval bounds around the clean batch, shared by the certified loss
    // and the regularizers. Batch norm inside the bounds uses the statistics
    // of the forward pass above.
    let need_bounds =
        cfg.method == TrainMethod::IbpCertified || cfg.regularizer != Regularizer::None;
    let ib = if need_bounds {
        let xv = tape.constant(xb.clone());
        Some(taped_ibp(
            &mut tape,
            &tnet,
            net,
            xv,
            eps,
            cfg.input_range,
            Mode::Train,
            Some(&fwd),
        )?)
    } else {
        None
    };

    let ce_clean = tape.cross_entropy(fwd.output, yb)?;
    let (mut loss, robust_correct) = match cfg.method {
        TrainMethod::Standard => {
            let correct = count_correct(&tape.value(fwd.output).argmax_rows(), yb);
            (ce_clean, correct)
        }
        TrainMethod::Fgsm => {
            let correct = count_correct(&tape.value(fwd.output).argmax_rows(), yb);
            (ce_clean, correct)
        }
        TrainMethod::IbpCertified => {
            let ib = ib.as_ref().expect("bounds computed for certified loss");
            let worst = tape.worst_case_logits(ib.lower, ib.upper, yb)?;
            let correct = count_correct(&tape.value(worst).argmax_rows(), yb);
            let ce_worst = tape.cross_entropy(worst, yb)?;
            let a = tape.scale(ce_clean, 1.0 - kappa);
            let b = tape.scale(ce_worst, kappa);
            (tape.add(a, b)?, correct)
        }
    };

    // Regularizers on top of the base loss.
    let mut reg_contrib = 0.0f64;
    if cfg.regularizer != Regularizer::None && cfg.reg_weight != 0.0 {
        let ib = ib.as_ref().expect("bounds computed for regularizer");
        let reg = match cfg.regularizer {
            Regularizer::Rs => rs_loss(&mut tape, &ib.preacts)?,
            Regularizer::Nrs => nrs_loss(&mut tape, &ib.preacts)?.0,
            Regularizer::None => unreachable!(),
        };
        let weighted = tape.scale(reg, cfg.reg_weight);
        reg_contrib += tape.value(weighted).item() as f64;
        loss = tape.add(loss, weighted)?;
    }
    if cfg.slim_l1 > 0.0 {
        let mut l1: Option<crate::tape::Var> = None;
        for (li, p) in net.params.iter().enumerate() {
            if matches!(p, LayerParams::BatchNorm { .. }) {
                let a = tape.abs(tnet.vars[li][0]);
                let s = tape.sum(a);
                l1 = Some(match l1 {
                    None => s,
                    Some(acc) => tape.add(acc, s)?,
                });
            }
        }
        if let Some(l1) = l1 {
            let weighted = tape.scale(l1, cfg.slim_l1);
            reg_contrib += tape.value(weighted).item() as f64;
            loss = tape.add(loss, weighted)?;
        }
    }

    let loss_value = tape.value(loss).item();
    if !loss_value.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }

    let mut grads_store = tape.backward(loss)?;
    let shapes = net.param_shapes();
    let mut grads: Vec<Tensor> = tnet
        .param_vars()
        .iter()
        .zip(&shapes)
        .map(|(&v, s)| grads_store.take_or_zeros(v, s))
        .collect();

    // Batch-norm statistics for the running-average update, pulled off the
    // tape before it goes away.
    let bn_updates: Vec<(usize, Tensor, Tensor, usize)> = fwd
        .bn_nodes
        .iter()
        .map(|&(layer, node)| {
            let (mean, var) = tape.bn_batch_stats(node).expect("bn node carries stats");
            let spatial: usize = tape.value(node).shape()[2..].iter().product();
            (layer, mean.clone(), var.clone(), n * spatial)
        })
        .collect();
    drop(tape);

    // Pruned weights stay pruned: zero their gradients, clip, step, re-mask.
    for (g, m) in grads.iter_mut().zip(net.param_masks()) {
        if let Some(m) = m {
            for (g, &m) in g.data_mut().iter_mut().zip(m.data()) {
                *g *= m;
            }
        }
    }
    clip_grad_norm(&mut grads, cfg.grad_clip);
    opt.step(&mut net.param_tensors_mut(), &grads);
    net.apply_masks();
    for (layer, mean, var, count) in bn_updates {
        net.update_bn_running(layer, &mean, &var, count);
    }

    let clean_correct = count_correct(&clean_logits.argmax_rows(), yb);
    Ok(BatchOutcome {
        loss: loss_value as f64,
        reg: reg_contrib,
        clean_correct,
        robust_correct,
    })
}

fn count_correct(pred: &[usize], labels: &[usize]) -> usize {
    pred.iter().zip(labels).filter(|(p, y)| p == y).count()
}

/// Train in place. One pass per epoch over a seeded shuffle of the data;
/// metrics are recorded per epoch. A non-finite loss aborts, restoring the
/// parameters from the end of the last completed epoch.
pub fn train(
    net: &mut Network,
    x: &Tensor,
    y: &[usize],
    cfg: &TrainConfig,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    let n = x.shape()[0];
    if n == 0 || n != y.len() {
        return Err(Error::InvalidInput(format!(
            "dataset size mismatch: {n} inputs vs {} labels",
            y.len()
        )));
    }
    let mut opt = OptimState::new(cfg.optimizer, cfg.lr, 0.0, &net.param_shapes());
    let probe_rows: Vec<usize> = (0..n.min(cfg.batch_size)).collect();
    let probe = x.select_rows(&probe_rows);

    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut last_good = net.params.clone();
    for epoch in 1..=cfg.epochs {
        let eps = eps_schedule(epoch, cfg);
        let kappa = kappa_schedule(epoch, cfg);
        opt.lr_scale = lr_scale_at(epoch, cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);

        let (mut loss_sum, mut reg_sum) = (0.0f64, 0.0f64);
        let (mut clean, mut robust) = (0usize, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let xb = x.select_rows(chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| y[i]).collect();
            match train_batch(net, &mut opt, &xb, &yb, eps, kappa, cfg, &mut rng) {
                Ok(out) => {
                    loss_sum += out.loss * chunk.len() as f64;
                    reg_sum += out.reg * chunk.len() as f64;
                    clean += out.clean_correct;
                    robust += out.robust_correct;
                }
                Err(e) => {
                    net.params = last_good;
                    return Err(Error::TrainAbort {
                        epoch,
                        reason: e.to_string(),
                    });
                }
            }
        }

        let report = dataset_stability(net, &probe, eps, cfg.input_range)?;
        metrics.push(EpochMetrics {
            epoch,
            eps,
            loss: loss_sum / n as f64,
            reg_loss: reg_sum / n as f64,
            std_acc: clean as f64 / n as f64,
            adv_acc: robust as f64 / n as f64,
            instability_mean: report.mean_instability(),
        });
        last_good = net.params.clone();
    }
    Ok(metrics)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub std_acc: f64,
    pub fgsm_acc: f64,
    pub pgd_acc: f64,
}

/// Clean and adversarial accuracy at a fixed epsilon. FGSM accuracy scores
/// predictions on one signed step per sample; PGD accuracy counts samples
/// the seeded attack cannot flip.
pub fn evaluate(
    net: &Network,
    x: &Tensor,
    y: &[usize],
    eps: f32,
    range: (f32, f32),
    attack: AttackConfig,
    seed: u64,
) -> Result<EvalReport> {
    let n = x.shape()[0];
    if n == 0 || n != y.len() {
        return Err(Error::InvalidInput("empty or mismatched eval set".into()));
    }
    let std_correct = count_correct(&net.forward(x)?.argmax_rows(), y);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let adv = fgsm_batch(net, x, y, eps, range, false, &mut rng)?;
    let fgsm_correct = count_correct(&net.forward(&adv)?.argmax_rows(), y);

    let mut pgd_correct = 0usize;
    for i in 0..n {
        let xi = x.select_rows(&[i]).reshape(x.shape()[1..].to_vec())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        if pgd_attack(net, &xi, y[i], eps, range, attack, &mut rng)?.is_none() {
            pgd_correct += 1;
        }
    }
    Ok(EvalReport {
        std_acc: std_correct as f64 / n as f64,
        fgsm_acc: fgsm_correct as f64 / n as f64,
        pgd_acc: pgd_correct as f64 / n as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{ArchSpec, LayerKind};
    use crate::network::PruneScope;

    fn paper_schedule() -> TrainConfig {
        TrainConfig {
            epochs: 200,
            lr: 0.01,
            lr_milestones: vec![140, 170],
            eps_target: Ratio::new(2, 255),
            ramp_start: 11,
            ramp_end: 80,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn eps_ramp_hits_the_closed_form() {
        let cfg = paper_schedule();
        assert_eq!(eps_schedule(1, &cfg), 0.0);
        assert_eq!(eps_schedule(10, &cfg), 0.0);
        assert_eq!(eps_schedule(11, &cfg), 0.0);
        // Epoch 46: (46-11)/(80-11) * 2/255, computed as one exact rational.
        let expect = ((46 - 11) as f64 * 2.0 / ((80 - 11) as f64 * 255.0)) as f32;
        assert_eq!(eps_schedule(46, &cfg), expect);
        assert_eq!(eps_schedule(80, &cfg), Ratio::new(2, 255).value_f32());
        assert_eq!(eps_schedule(200, &cfg), Ratio::new(2, 255).value_f32());
        // Monotone non-decreasing across the whole run.
        let mut prev = 0.0;
        for e in 1..=200 {
            let v = eps_schedule(e, &cfg);
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn lr_decays_at_milestones() {
        let cfg = paper_schedule();
        assert_eq!(lr_scale_at(139, &cfg), 1.0);
        assert_eq!(lr_scale_at(140, &cfg), 0.1);
        assert_eq!(lr_scale_at(170, &cfg), 0.1 * 0.1);
        // lr at epoch 171 = 0.01 * 0.1 * 0.1.
        let lr = cfg.lr * lr_scale_at(171, &cfg);
        assert!((lr - 0.0001).abs() < 1e-9);
    }

    #[test]
    fn kappa_switches_on_at_ramp_start() {
        let cfg = paper_schedule();
        assert_eq!(kappa_schedule(10, &cfg), 0.0);
        assert_eq!(kappa_schedule(11, &cfg), 0.5);
        assert_eq!(kappa_schedule(200, &cfg), 0.5);
    }

    /// Logits (s, -s) with s = 0.3 x1 - 0.2 x2: under label 1 the CE input
    /// gradient has signs (+, -), so the step moves x to (x1+eps, x2-eps).
    fn gradient_probe_net() -> Network {
        let arch = ArchSpec {
            input_shape: vec![2],
            layers: vec![LayerKind::Affine { in_features: 2, out_features: 2 }],
            num_classes: 2,
        };
        let mut net = Network::build(arch, 0, PruneScope::ConvAndAffine).unwrap();
        if let LayerParams::Affine { w, b } = &mut net.params[0] {
            w.data_mut().copy_from_slice(&[0.3, -0.2, -0.3, 0.2]);
            b.data_mut().fill(0.0);
        }
        net
    }

    #[test]
    fn fgsm_takes_a_signed_step_and_clamps() {
        let net = gradient_probe_net();
        let x = Tensor::from_vec(vec![0.5, 0.5]);
        let adv = fgsm_example(&net, &x, 1, 0.1, (0.0, 1.0)).unwrap();
        assert!((adv.data()[0] - 0.6).abs() < 1e-6);
        assert!((adv.data()[1] - 0.4).abs() < 1e-6);

        // eps = 0 is the identity.
        let same = fgsm_example(&net, &x, 1, 0.0, (0.0, 1.0)).unwrap();
        assert_eq!(same.data(), x.data());

        // At the range maximum a positive-gradient step stays clamped.
        let top = Tensor::from_vec(vec![1.0, 0.0]);
        let adv = fgsm_example(&net, &top, 1, 0.1, (0.0, 1.0)).unwrap();
        assert_eq!(adv.data()[0], 1.0);
        assert_eq!(adv.data()[1], 0.0);
    }

    /// Two separable blobs around (0.25, 0.25) and (0.75, 0.75).
    fn blobs(n: usize, seed: u64) -> (Tensor, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(2 * n);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % 2;
            let center = if c == 0 { 0.25 } else { 0.75 };
            data.push(center + rng.gen_range(-0.15..0.15));
            data.push(center + rng.gen_range(-0.15..0.15));
            labels.push(c);
        }
        (Tensor::new(vec![n, 2], data).unwrap(), labels)
    }

    fn quick_cfg(method: TrainMethod) -> TrainConfig {
        TrainConfig {
            method,
            epochs: 3,
            batch_size: 16,
            lr: 5e-3,
            lr_milestones: vec![],
            eps_target: Ratio::new(1, 50),
            ramp_start: 1,
            ramp_end: 2,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn standard_training_fits_separable_blobs() {
        let (x, y) = blobs(64, 0);
        let mut net =
            Network::build(ArchSpec::mlp(2, &[16], 2, false), 1, PruneScope::ConvAndAffine)
                .unwrap();
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 16,
            lr: 5e-3,
            lr_milestones: vec![],
            ramp_start: 1,
            ramp_end: 1,
            seed: 1,
            ..TrainConfig::default()
        };
        let metrics = train(&mut net, &x, &y, &cfg).unwrap();
        assert_eq!(metrics.len(), 30);
        assert!(metrics.last().unwrap().std_acc >= 0.95, "{:?}", metrics.last());
        // Standard training reports adv == std.
        for m in &metrics {
            assert_eq!(m.std_acc, m.adv_acc);
        }
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let (x, y) = blobs(48, 2);
        for method in [TrainMethod::Standard, TrainMethod::Fgsm, TrainMethod::IbpCertified] {
            let run = || {
                let mut net = Network::build(
                    ArchSpec::mlp(2, &[8], 2, true),
                    5,
                    PruneScope::ConvAndAffine,
                )
                .unwrap();
                let mut cfg = quick_cfg(method);
                cfg.regularizer = Regularizer::Nrs;
                cfg.reg_weight = 0.01;
                train(&mut net, &x, &y, &cfg).unwrap()
            };
            assert_eq!(run(), run(), "{method:?}");
        }
    }

    #[test]
    fn certified_loss_dominates_standard_at_full_kappa() {
        // Same weights, same batch: CE(worst-case logits) >= CE(clean).
        let (x, y) = blobs(32, 4);
        for seed in 0..5 {
            let net = Network::build(
                ArchSpec::mlp(2, &[8, 8], 2, false),
                seed,
                PruneScope::ConvAndAffine,
            )
            .unwrap();
            let mut tape = Tape::new();
            let tnet = TapedNet::register(&mut tape, &net);
            let xv = tape.constant(x.clone());
            let fwd = tnet.forward(&mut tape, &net, xv, Mode::Train).unwrap();
            let ib = taped_ibp(
                &mut tape,
                &tnet,
                &net,
                xv,
                0.05,
                (0.0, 1.0),
                Mode::Train,
                Some(&fwd),
            )
            .unwrap();
            let clean = tape.cross_entropy(fwd.output, &y).unwrap();
            let worst = tape.worst_case_logits(ib.lower, ib.upper, &y).unwrap();
            let robust = tape.cross_entropy(worst, &y).unwrap();
            assert!(tape.value(robust).item() >= tape.value(clean).item());
        }
    }

    #[test]
    fn zero_eps_certified_training_equals_standard() {
        // Without batch norm every bound collapses to the forward value
        // bit-exactly, so the kappa mix reproduces the standard loss.
        let (x, y) = blobs(48, 6);
        let run = |method| {
            let mut net = Network::build(
                ArchSpec::mlp(2, &[8], 2, false),
                7,
                PruneScope::ConvAndAffine,
            )
            .unwrap();
            let mut cfg = quick_cfg(method);
            cfg.eps_target = Ratio::zero();
            train(&mut net, &x, &y, &cfg).unwrap()
        };
        let std = run(TrainMethod::Standard);
        let ibp = run(TrainMethod::IbpCertified);
        for (a, b) in std.iter().zip(&ibp) {
            assert_eq!(a.loss, b.loss, "epoch {}", a.epoch);
            assert_eq!(a.std_acc, b.std_acc);
        }
    }

    #[test]
    fn nrs_term_is_insensitive_to_scale_bumps() {
        // Multiplying every batch-norm scale by (1 + 2^-10) rescales the
        // bounds and the normalizer together: the regularizer term moves by
        // float noise only, while the base loss moves measurably.
        let (x, y) = blobs(32, 8);
        let net = Network::build(
            ArchSpec::mlp(2, &[8, 8], 2, true),
            11,
            PruneScope::ConvAndAffine,
        )
        .unwrap();
        let measure = |net: &Network| -> (f64, f64) {
            let mut tape = Tape::new();
            let tnet = TapedNet::register(&mut tape, net);
            let xv = tape.constant(x.clone());
            let fwd = tnet.forward(&mut tape, net, xv, Mode::Train).unwrap();
            let ib = taped_ibp(
                &mut tape,
                &tnet,
                net,
                xv,
                0.05,
                (0.0, 1.0),
                Mode::Train,
                Some(&fwd),
            )
            .unwrap();
            let reg = nrs_loss(&mut tape, &ib.preacts).unwrap().0;
            let ce = tape.cross_entropy(fwd.output, &y).unwrap();
            (tape.value(reg).item() as f64, tape.value(ce).item() as f64)
        };
        let (reg0, ce0) = measure(&net);
        let mut bumped = net.clone();
        let h = 1.0 + 1.0 / 1024.0;
        for p in bumped.params.iter_mut() {
            if let LayerParams::BatchNorm { gamma, .. } = p {
                for v in gamma.data_mut() {
                    *v *= h;
                }
            }
        }
        let (reg1, ce1) = measure(&bumped);
        let rel = (reg1 - reg0).abs() / reg0.abs().max(1e-12);
        assert!(rel <= 1e-6, "regularizer moved by {rel}");
        assert!((ce1 - ce0).abs() > 1e-7, "base loss should feel the bump");
    }

    #[test]
    fn divergence_aborts_and_restores_last_good_epoch() {
        let (x, y) = blobs(32, 9);
        let mut net =
            Network::build(ArchSpec::mlp(2, &[8], 2, false), 3, PruneScope::ConvAndAffine)
                .unwrap();
        let cfg = TrainConfig {
            optimizer: OptimKind::Sgd { momentum: 0.0 },
            lr: 1e30,
            epochs: 10,
            batch_size: 8,
            lr_milestones: vec![],
            ramp_start: 1,
            ramp_end: 1,
            seed: 0,
            ..TrainConfig::default()
        };
        let err = train(&mut net, &x, &y, &cfg).unwrap_err();
        assert!(matches!(err, Error::TrainAbort { .. }), "{err}");
        for t in net.param_tensors() {
            assert!(t.all_finite(), "restored parameters must be finite");
        }
    }

    #[test]
    fn evaluate_collapses_to_clean_accuracy_at_zero_eps() {
        let (x, y) = blobs(24, 10);
        let net = Network::build(ArchSpec::mlp(2, &[8], 2, false), 2, PruneScope::ConvAndAffine)
            .unwrap();
        let r = evaluate(&net, &x, &y, 0.0, (0.0, 1.0), AttackConfig::default(), 0).unwrap();
        assert_eq!(r.std_acc, r.fgsm_acc);
        assert_eq!(r.std_acc, r.pgd_acc);
        let r2 = evaluate(&net, &x, &y, 0.05, (0.0, 1.0), AttackConfig::default(), 0).unwrap();
        assert!(r2.fgsm_acc <= r.std_acc + 1e-12);
        assert!(r2.pgd_acc <= r2.std_acc + 1e-12);
    }

    #[test]
    fn masked_weights_stay_zero_through_training() {
        let (x, y) = blobs(32, 11);
        let mut net =
            Network::build(ArchSpec::mlp(2, &[8], 2, false), 4, PruneScope::ConvAndAffine)
                .unwrap();
        // Kill half of the first layer.
        {
            let m = net.masks[0].as_mut().unwrap();
            for i in 0..8 {
                m.data_mut()[i] = 0.0;
            }
        }
        net.apply_masks();
        let cfg = quick_cfg(TrainMethod::Standard);
        train(&mut net, &x, &y, &cfg).unwrap();
        if let LayerParams::Affine { w, .. } = &net.params[0] {
            for i in 0..8 {
                assert_eq!(w.data()[i], 0.0, "masked weight {i} resurrected");
            }
        }
    }
}
