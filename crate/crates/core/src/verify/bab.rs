//! Complete verification by ReLU branch and bound. A query asks whether
//! every input in the eps-ball keeps the sample's label. The search is
//! attack-first (PGD), then bounds the margins with IBP and CROWN, then
//! best-first splits the most unstable neuron into sign-constrained
//! subdomains; contradictory subdomains are pruned via interval
//! infeasibility. Fully split subdomains reduce to an exact affine function
//! whose minimizing corner either proves the branch, is a genuine
//! counterexample, or (when it violates the branch's sign constraints) is
//! resolved by bisecting the input box.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::attack::{pgd_attack, AttackConfig};
use super::margin::{ibp_margin_lower, margin_spec};
use crate::bounds::crown::{backsubstitute, concretize_with_corners, crown_lower_spec};
use crate::bounds::ibp::propagate_ibp;
use crate::bounds::{input_box, Bounds, Phase, PhaseConstraints};
use crate::error::{Error, Result};
use crate::network::Network;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    /// Every point in the ball keeps the label.
    Verified,
    /// A concrete misclassified point was found.
    Falsified,
    /// Budget exhausted before a conclusion.
    Timeout,
}

#[derive(Clone, Debug)]
pub struct BabConfig {
    /// Hard cap on evaluated subdomains (including bisection boxes); the
    /// deterministic budget.
    pub max_subdomains: usize,
    pub attack: AttackConfig,
    /// Bisection gives up below this box width.
    pub bisect_min_width: f32,
}

impl Default for BabConfig {
    fn default() -> Self {
        BabConfig {
            max_subdomains: 20_000,
            attack: AttackConfig::default(),
            bisect_min_width: 1e-4,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BabStats {
    /// Subdomains whose bounds were evaluated (root, children, bisections).
    pub explored: usize,
    pub max_depth: usize,
    /// Input-bisection boxes evaluated inside fully split subdomains.
    pub bisected: usize,
    pub pgd_hit: bool,
    pub root_verified: bool,
}

#[derive(Clone, Debug)]
pub struct VerifyOutcome {
    pub verdict: Verdict,
    /// Misclassified point, present exactly when falsified.
    pub witness: Option<Tensor>,
    pub stats: BabStats,
}

/// Priority-queue entry: pops lowest margin bound first, FIFO on ties.
struct Subdomain {
    bound: f32,
    created: u64,
    depth: usize,
    row_bounds: Vec<f32>,
    phases: PhaseConstraints,
    /// Next neuron to split, None when fully split.
    branch: Option<(usize, usize)>,
}

impl PartialEq for Subdomain {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Subdomain {}
impl PartialOrd for Subdomain {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Subdomain {
    // BinaryHeap is a max-heap; invert so the smallest bound pops first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .bound
            .total_cmp(&self.bound)
            .then_with(|| other.created.cmp(&self.created))
    }
}

fn misclassified(net: &Network, x: &Tensor, label: usize) -> bool {
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    let logits = net
        .forward(&Tensor::new(shape, x.data().to_vec()).expect("batch shape"))
        .expect("forward on valid input");
    logits.argmax_rows()[0] != label
}

/// Most unstable unconstrained neuron by -l*u; ties go to the earlier
/// layer, then the lower index.
fn select_branch(
    net: &Network,
    lb: &crate::bounds::LayerBounds,
    phases: &PhaseConstraints,
) -> Option<(usize, usize)> {
    let mut best: Option<((usize, usize), f32)> = None;
    for relu in net.arch.relu_positions() {
        let pre = lb.preact(relu);
        for j in 0..pre.len() {
            let (l, u) = (pre.lower.data()[j], pre.upper.data()[j]);
            if l < 0.0 && u > 0.0 && phases.get(relu, j).is_none() {
                let score = -l * u;
                if best.map_or(true, |(_, s)| score > s) {
                    best = Some(((relu, j), score));
                }
            }
        }
    }
    best.map(|(k, _)| k)
}

enum SubEval {
    /// Phase constraints contradict the bounds: empty region.
    Pruned,
    Bounded { row_bounds: Vec<f32>, branch: Option<(usize, usize)> },
}

/// Bound one subdomain's margins: interval bounds, CROWN, and the parent's
/// bounds (valid on any subset), taking the best per row.
fn eval_subdomain(
    net: &Network,
    bx: &Bounds,
    phases: &PhaseConstraints,
    label: usize,
    parent_rows: Option<&[f32]>,
) -> SubEval {
    let lb = match propagate_ibp(net, bx, phases) {
        Err(_) => return SubEval::Pruned,
        Ok(lb) => lb,
    };
    let ibp_rows = ibp_margin_lower(lb.logits(), label);
    let crown_rows = crown_lower_spec(net, &lb, margin_spec(net, label));
    let row_bounds: Vec<f32> = (0..ibp_rows.len())
        .map(|i| {
            let mut v = ibp_rows[i].max(crown_rows.data()[i]);
            if let Some(p) = parent_rows {
                v = v.max(p[i]);
            }
            v
        })
        .collect();
    let branch = select_branch(net, &lb, phases);
    SubEval::Bounded { row_bounds, branch }
}

enum Resolution {
    Verified,
    Falsified(Tensor),
    Inconclusive,
}

/// Decide a fully split subdomain. The network is affine on the region
/// where the phases hold, so backsubstitution is exact; the minimizing
/// corner of the whole box either proves the bound, misclassifies for real,
/// or lies outside the region — then bisect the box, discarding halves whose
/// intervals contradict the phases.
fn resolve_fully_split(
    net: &Network,
    label: usize,
    phases: &PhaseConstraints,
    bx: &Bounds,
    cfg: &BabConfig,
    stats: &mut BabStats,
) -> Resolution {
    let mut stack = vec![bx.clone()];
    while let Some(b) = stack.pop() {
        if stats.explored >= cfg.max_subdomains {
            return Resolution::Inconclusive;
        }
        stats.explored += 1;
        stats.bisected += 1;
        let lb = match propagate_ibp(net, &b, phases) {
            Err(_) => continue, // empty region
            Ok(lb) => lb,
        };
        let folded = backsubstitute(net, &lb, margin_spec(net, label));
        let (bounds, corners) = concretize_with_corners(&folded, &b);
        let worst = (0..bounds.len())
            .min_by(|&i, &j| bounds.data()[i].total_cmp(&bounds.data()[j]))
            .expect("at least one margin row");
        if bounds.data()[worst] >= 0.0 {
            continue;
        }
        if misclassified(net, &corners[worst], label) {
            return Resolution::Falsified(corners[worst].clone());
        }
        let center = b.center();
        if misclassified(net, &center, label) {
            return Resolution::Falsified(center);
        }
        // The corner violates the branch's sign constraints (else its true
        // margin would be <= the affine bound): shrink the box.
        if b.max_width() < cfg.bisect_min_width {
            return Resolution::Inconclusive;
        }
        let axis = (0..b.len())
            .max_by(|&i, &j| {
                let wi = b.upper.data()[i] - b.lower.data()[i];
                let wj = b.upper.data()[j] - b.lower.data()[j];
                wi.total_cmp(&wj)
            })
            .expect("nonempty box");
        let mid = (b.lower.data()[axis] + b.upper.data()[axis]) * 0.5;
        let mut left = b.clone();
        left.upper.data_mut()[axis] = mid;
        let mut right = b;
        right.lower.data_mut()[axis] = mid;
        stack.push(left);
        stack.push(right);
    }
    Resolution::Verified
}

/// Decide robustness of one labeled sample under l-inf radius `eps`.
pub fn verify_sample(
    net: &Network,
    x: &Tensor,
    label: usize,
    eps: f32,
    range: (f32, f32),
    cfg: &BabConfig,
    seed: u64,
) -> Result<VerifyOutcome> {
    if label >= net.num_classes() {
        return Err(Error::InvalidInput(format!(
            "label {label} out of range for {} classes",
            net.num_classes()
        )));
    }
    let mut stats = BabStats::default();
    let falsified = |stats: BabStats, w: Tensor| VerifyOutcome {
        verdict: Verdict::Falsified,
        witness: Some(w),
        stats,
    };

    if misclassified(net, x, label) {
        return Ok(falsified(stats, x.clone()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if let Some(adv) = pgd_attack(net, x, label, eps, range, cfg.attack, &mut rng)? {
        stats.pgd_hit = true;
        return Ok(falsified(stats, adv));
    }

    let bx = input_box(x, eps, range);
    stats.explored = 1;
    let root = match eval_subdomain(net, &bx, &PhaseConstraints::new(), label, None) {
        SubEval::Pruned => unreachable!("no constraints at the root"),
        SubEval::Bounded { row_bounds, branch } => {
            let bound = row_bounds.iter().copied().fold(f32::INFINITY, f32::min);
            if bound >= 0.0 {
                stats.root_verified = true;
                return Ok(VerifyOutcome { verdict: Verdict::Verified, witness: None, stats });
            }
            Subdomain {
                bound,
                created: 0,
                depth: 0,
                row_bounds,
                phases: PhaseConstraints::new(),
                branch,
            }
        }
    };

    let mut heap = BinaryHeap::new();
    let mut created = 0u64;
    heap.push(root);
    while let Some(dom) = heap.pop() {
        if dom.bound >= 0.0 {
            break; // best-first: everything left is at least as good
        }
        if stats.explored >= cfg.max_subdomains {
            return Ok(VerifyOutcome { verdict: Verdict::Timeout, witness: None, stats });
        }
        let (layer, neuron) = match dom.branch {
            Some(b) => b,
            None => {
                match resolve_fully_split(net, label, &dom.phases, &bx, cfg, &mut stats) {
                    Resolution::Verified => continue,
                    Resolution::Falsified(w) => return Ok(falsified(stats, w)),
                    Resolution::Inconclusive => {
                        return Ok(VerifyOutcome {
                            verdict: Verdict::Timeout,
                            witness: None,
                            stats,
                        })
                    }
                }
            }
        };
        for phase in [Phase::Active, Phase::Inactive] {
            if stats.explored >= cfg.max_subdomains {
                return Ok(VerifyOutcome { verdict: Verdict::Timeout, witness: None, stats });
            }
            stats.explored += 1;
            let phases = dom.phases.with(layer, neuron, phase);
            match eval_subdomain(net, &bx, &phases, label, Some(&dom.row_bounds)) {
                SubEval::Pruned => {}
                SubEval::Bounded { row_bounds, branch } => {
                    let bound = row_bounds.iter().copied().fold(f32::INFINITY, f32::min);
                    if bound >= 0.0 {
                        continue;
                    }
                    created += 1;
                    let depth = dom.depth + 1;
                    stats.max_depth = stats.max_depth.max(depth);
                    heap.push(Subdomain {
                        bound,
                        created,
                        depth,
                        row_bounds,
                        phases,
                        branch,
                    });
                }
            }
        }
    }
    Ok(VerifyOutcome { verdict: Verdict::Verified, witness: None, stats })
}

/// Verify a batch of samples; returns the certified fraction and the
/// per-sample outcomes, in input order. Samples are independent queries and
/// run in parallel; each derives its attack seed from `seed` and its index.
pub fn certified_accuracy(
    net: &Network,
    xs: &Tensor,
    labels: &[usize],
    eps: f32,
    range: (f32, f32),
    cfg: &BabConfig,
    seed: u64,
) -> Result<(f64, Vec<VerifyOutcome>)> {
    let n = xs.shape()[0];
    if labels.len() != n {
        return Err(Error::InvalidInput(format!(
            "{n} samples but {} labels",
            labels.len()
        )));
    }
    let stride: usize = xs.shape()[1..].iter().product();
    let sample_shape = xs.shape()[1..].to_vec();
    let outcomes: Vec<VerifyOutcome> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = Tensor::new(
                sample_shape.clone(),
                xs.data()[i * stride..(i + 1) * stride].to_vec(),
            )?;
            verify_sample(net, &xi, labels[i], eps, range, cfg, seed.wrapping_add(i as u64))
        })
        .collect::<Result<Vec<_>>>()?;
    let verified = outcomes.iter().filter(|o| o.verdict == Verdict::Verified).count();
    Ok((verified as f64 / n as f64, outcomes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{ArchSpec, LayerKind};
    use crate::network::{LayerParams, PruneScope};

    /// Logits (x1, -x1).
    fn signed_net() -> Network {
        let arch = ArchSpec {
            input_shape: vec![2],
            layers: vec![LayerKind::Affine { in_features: 2, out_features: 2 }],
            num_classes: 2,
        };
        let mut net = Network::build(arch, 0, PruneScope::ConvAndAffine).unwrap();
        match &mut net.params[0] {
            LayerParams::Affine { w, b } => {
                w.data_mut().copy_from_slice(&[1.0, 0.0, -1.0, 0.0]);
                b.data_mut().fill(0.0);
            }
            _ => unreachable!(),
        }
        net
    }

    #[test]
    fn robust_linear_sample_verifies_at_root() {
        let net = signed_net();
        let x = Tensor::from_vec(vec![0.5, 0.5]);
        let out = verify_sample(&net, &x, 0, 0.2, (-1.0, 1.0), &BabConfig::default(), 0).unwrap();
        assert_eq!(out.verdict, Verdict::Verified);
        assert!(out.stats.root_verified);
        assert!(out.witness.is_none());
    }

    #[test]
    fn attack_falsifies_before_bounding() {
        let net = signed_net();
        let x = Tensor::from_vec(vec![0.3, 0.5]);
        let out = verify_sample(&net, &x, 0, 0.4, (-1.0, 1.0), &BabConfig::default(), 0).unwrap();
        assert_eq!(out.verdict, Verdict::Falsified);
        assert!(out.stats.pgd_hit);
        let w = out.witness.unwrap();
        assert!(misclassified(&net, &w, 0));
        assert!((w.data()[0] - 0.3).abs() <= 0.4 + 1e-6);
    }

    #[test]
    fn clean_misclassification_short_circuits() {
        let net = signed_net();
        let x = Tensor::from_vec(vec![-0.2, 0.0]);
        let out = verify_sample(&net, &x, 0, 0.05, (-1.0, 1.0), &BabConfig::default(), 0).unwrap();
        assert_eq!(out.verdict, Verdict::Falsified);
        assert_eq!(out.witness.unwrap().data(), x.data());
    }

    /// margin = 0.5 + relu(x) over x in [-1, 1]: always >= 0.5, but the
    /// Active branch's affine bound dips to -0.5 at the corner x = -1,
    /// which violates the branch constraint — the phantom is resolved by
    /// bisection (infeasible half discarded, feasible half verified).
    fn phantom_net() -> Network {
        let arch = ArchSpec {
            input_shape: vec![1],
            layers: vec![
                LayerKind::Affine { in_features: 1, out_features: 1 },
                LayerKind::Relu,
                LayerKind::Affine { in_features: 1, out_features: 2 },
            ],
            num_classes: 2,
        };
        let mut net = Network::build(arch, 0, PruneScope::ConvAndAffine).unwrap();
        match &mut net.params[0] {
            LayerParams::Affine { w, b } => {
                w.data_mut()[0] = 1.0;
                b.data_mut()[0] = 0.0;
            }
            _ => unreachable!(),
        }
        match &mut net.params[2] {
            LayerParams::Affine { w, b } => {
                w.data_mut().copy_from_slice(&[1.0, 0.0]);
                b.data_mut().copy_from_slice(&[0.5, 0.0]);
            }
            _ => unreachable!(),
        }
        net
    }

    #[test]
    fn phantom_corner_resolved_by_bisection() {
        let net = phantom_net();
        let phases = PhaseConstraints::new().with(1, 0, Phase::Active);
        let bx = Bounds::new(Tensor::from_vec(vec![-1.0]), Tensor::from_vec(vec![1.0]));
        let mut stats = BabStats::default();
        let res = resolve_fully_split(&net, 0, &phases, &bx, &BabConfig::default(), &mut stats);
        assert!(matches!(res, Resolution::Verified));
        assert!(stats.bisected >= 2, "must actually bisect: {stats:?}");
    }

    #[test]
    fn phantom_net_verifies_end_to_end() {
        let net = phantom_net();
        let x = Tensor::from_vec(vec![0.0]);
        let out = verify_sample(&net, &x, 0, 1.0, (-1.0, 1.0), &BabConfig::default(), 0).unwrap();
        assert_eq!(out.verdict, Verdict::Verified);
    }

    /// Branching verdicts agree with dense grid sampling on a random net.
    #[test]
    fn verdicts_consistent_with_grid_sampling() {
        let net = Network::build(
            ArchSpec::mlp(2, &[8, 6], 2, false),
            17,
            PruneScope::ConvAndAffine,
        )
        .unwrap();
        let x = Tensor::from_vec(vec![0.52, 0.41]);
        let batch = Tensor::new(vec![1, 2], x.data().to_vec()).unwrap();
        let label = net.forward(&batch).unwrap().argmax_rows()[0];

        for eps in [0.01f32, 0.05, 0.1, 0.2, 0.4] {
            let out =
                verify_sample(&net, &x, label, eps, (0.0, 1.0), &BabConfig::default(), 3).unwrap();
            match out.verdict {
                Verdict::Verified => {
                    // No grid point inside the box may be misclassified.
                    let bx = input_box(&x, eps, (0.0, 1.0));
                    for i in 0..=20 {
                        for j in 0..=20 {
                            let p = Tensor::from_vec(vec![
                                bx.lower.data()[0]
                                    + (bx.upper.data()[0] - bx.lower.data()[0]) * i as f32 / 20.0,
                                bx.lower.data()[1]
                                    + (bx.upper.data()[1] - bx.lower.data()[1]) * j as f32 / 20.0,
                            ]);
                            assert!(!misclassified(&net, &p, label), "eps {eps} grid ({i},{j})");
                        }
                    }
                }
                Verdict::Falsified => {
                    let w = out.witness.expect("witness");
                    assert!(misclassified(&net, &w, label));
                    let bx = input_box(&x, eps, (0.0, 1.0));
                    assert!(bx.contains(&w), "witness inside the box");
                }
                Verdict::Timeout => panic!("desk-scale query must not time out"),
            }
        }
    }

    #[test]
    fn subdomain_cap_yields_timeout() {
        // A net whose root bound is inconclusive, with a budget too small to
        // branch.
        let net = Network::build(
            ArchSpec::mlp(2, &[8, 6], 2, false),
            17,
            PruneScope::ConvAndAffine,
        )
        .unwrap();
        let x = Tensor::from_vec(vec![0.52, 0.41]);
        let batch = Tensor::new(vec![1, 2], x.data().to_vec()).unwrap();
        let label = net.forward(&batch).unwrap().argmax_rows()[0];
        // Find an eps where the root is inconclusive but the full search
        // verifies; then the capped run must report Timeout.
        for eps in [0.05f32, 0.1, 0.2] {
            let full =
                verify_sample(&net, &x, label, eps, (0.0, 1.0), &BabConfig::default(), 3).unwrap();
            if full.verdict == Verdict::Verified && !full.stats.root_verified {
                let capped = BabConfig { max_subdomains: 1, ..BabConfig::default() };
                let out = verify_sample(&net, &x, label, eps, (0.0, 1.0), &capped, 3).unwrap();
                assert_eq!(out.verdict, Verdict::Timeout);
                return;
            }
        }
        panic!("no eps exercised the branching regime");
    }

    #[test]
    fn deterministic_across_runs() {
        let net = Network::build(
            ArchSpec::mlp(2, &[8, 6], 2, false),
            17,
            PruneScope::ConvAndAffine,
        )
        .unwrap();
        let xs = Tensor::new(vec![3, 2], vec![0.52, 0.41, 0.2, 0.8, 0.7, 0.3]).unwrap();
        let labels: Vec<usize> = net.forward(&xs).unwrap().argmax_rows();
        let run = || {
            certified_accuracy(&net, &xs, &labels, 0.08, (0.0, 1.0), &BabConfig::default(), 11)
                .unwrap()
        };
        let (acc1, out1) = run();
        let (acc2, out2) = run();
        assert_eq!(acc1, acc2);
        for (a, b) in out1.iter().zip(&out2) {
            assert_eq!(a.verdict, b.verdict);
            assert_eq!(a.stats, b.stats);
            assert_eq!(
                a.witness.as_ref().map(|t| t.data().to_vec()),
                b.witness.as_ref().map(|t| t.data().to_vec())
            );
        }
    }
}
