//! Neuron stability classification from pre-activation bounds, and the
//! -l*u instability score aggregated over a network.

use super::ibp::propagate_ibp;
use super::{input_box, LayerBounds, PhaseConstraints};
use crate::error::Result;
use crate::network::Network;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NeuronState {
    /// Bounds straddle zero: the ReLU can take either phase.
    Unstable,
    /// Lower bound >= 0: the ReLU is the identity on the whole box.
    StableActive,
    /// Upper bound <= 0: the ReLU outputs zero on the whole box.
    StableInactive,
}

pub fn classify(l: f32, u: f32) -> NeuronState {
    if l < 0.0 && u > 0.0 {
        NeuronState::Unstable
    } else if u <= 0.0 {
        NeuronState::StableInactive
    } else {
        NeuronState::StableActive
    }
}

/// Stability census over every ReLU pre-activation. `instability_sum` is
/// sum(-l*u) over all neurons (positive terms come precisely from unstable
/// ones); `unstable_sum` restricts to the unstable neurons.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StabilityReport {
    pub unstable: usize,
    pub stable_active: usize,
    pub stable_inactive: usize,
    pub instability_sum: f64,
    pub unstable_sum: f64,
}

impl StabilityReport {
    pub fn total(&self) -> usize {
        self.unstable + self.stable_active + self.stable_inactive
    }

    pub fn unstable_ratio(&self) -> f64 {
        if self.total() == 0 {
            0.0
        } else {
            self.unstable as f64 / self.total() as f64
        }
    }

    pub fn mean_instability(&self) -> f64 {
        if self.total() == 0 {
            0.0
        } else {
            self.instability_sum / self.total() as f64
        }
    }

    pub fn accumulate(&mut self, other: &StabilityReport) {
        self.unstable += other.unstable;
        self.stable_active += other.stable_active;
        self.stable_inactive += other.stable_inactive;
        self.instability_sum += other.instability_sum;
        self.unstable_sum += other.unstable_sum;
    }
}

pub fn report_from_preacts<'a>(preacts: impl Iterator<Item = (&'a [f32], &'a [f32])>) -> StabilityReport {
    let mut rep = StabilityReport::default();
    for (lo, hi) in preacts {
        for (&l, &u) in lo.iter().zip(hi) {
            let score = -(l as f64) * (u as f64);
            rep.instability_sum += score;
            match classify(l, u) {
                NeuronState::Unstable => {
                    rep.unstable += 1;
                    rep.unstable_sum += score;
                }
                NeuronState::StableActive => rep.stable_active += 1,
                NeuronState::StableInactive => rep.stable_inactive += 1,
            }
        }
    }
    rep
}

/// Census over all ReLU layers of `net` for one propagated input box.
pub fn stability_report(net: &Network, lb: &LayerBounds) -> StabilityReport {
    report_from_preacts(net.arch.relu_positions().into_iter().map(|pos| {
        let b = lb.preact(pos);
        (b.lower.data(), b.upper.data())
    }))
}

/// Accumulated census over a `[n, ...]` batch, one interval pass per sample.
pub fn dataset_stability(
    net: &Network,
    x: &Tensor,
    eps: f32,
    range: (f32, f32),
) -> Result<StabilityReport> {
    let mut report = StabilityReport::default();
    let phases = PhaseConstraints::default();
    for i in 0..x.shape()[0] {
        let xi = x.select_rows(&[i]).reshape(x.shape()[1..].to_vec())?;
        let lb = propagate_ibp(net, &input_box(&xi, eps, range), &phases)
            .expect("unconstrained interval pass cannot be infeasible");
        report.accumulate(&stability_report(net, &lb));
    }
    Ok(report)
}
