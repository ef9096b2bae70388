//! Bound propagation: interval arithmetic (IBP) and backward linear
//! relaxation (CROWN) over box-perturbed inputs, plus neuron stability
//! accounting and the tape-based variants used inside training losses.

pub mod crown;
pub mod ibp;
pub mod stability;
pub mod taped;

use crate::tensor::Tensor;

/// Elementwise lower/upper bounds on one (batchless) activation tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Bounds {
    pub lower: Tensor,
    pub upper: Tensor,
}

impl Bounds {
    pub fn new(lower: Tensor, upper: Tensor) -> Self {
        assert_eq!(lower.shape(), upper.shape(), "bound shapes must agree");
        Bounds { lower, upper }
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    /// True if every interval is nonempty (lower <= upper, both finite).
    pub fn is_valid(&self) -> bool {
        self.lower.all_finite()
            && self.upper.all_finite()
            && self
                .lower
                .data()
                .iter()
                .zip(self.upper.data())
                .all(|(l, u)| l <= u)
    }

    pub fn contains(&self, point: &Tensor) -> bool {
        point.shape() == self.lower.shape()
            && self
                .lower
                .data()
                .iter()
                .zip(self.upper.data())
                .zip(point.data())
                .all(|((l, u), p)| *l <= *p && *p <= *u)
    }

    pub fn center(&self) -> Tensor {
        self.lower.zip(&self.upper, |l, u| (l + u) * 0.5)
    }

    pub fn max_width(&self) -> f32 {
        self.lower
            .data()
            .iter()
            .zip(self.upper.data())
            .map(|(l, u)| u - l)
            .fold(0.0, f32::max)
    }
}

/// The l-inf ball of radius `eps` around `x`, clipped to the valid input
/// range.
pub fn input_box(x: &Tensor, eps: f32, range: (f32, f32)) -> Bounds {
    Bounds {
        lower: x.map(|v| (v - eps).max(range.0)),
        upper: x.map(|v| (v + eps).min(range.1)),
    }
}

/// Per-layer output bounds for one input box. Entry `i` bounds the output of
/// arch layer `i`; pre-activation entries are already intersected with any
/// phase constraints.
#[derive(Clone, Debug)]
pub struct LayerBounds {
    pub input: Bounds,
    pub layers: Vec<Bounds>,
}

impl LayerBounds {
    /// Bounds on the network output (logits).
    pub fn logits(&self) -> &Bounds {
        self.layers.last().expect("at least one layer")
    }

    /// Constrained pre-activation bounds feeding the ReLU at `relu_layer`.
    pub fn preact(&self, relu_layer: usize) -> &Bounds {
        &self.layers[relu_layer - 1]
    }
}

/// Forced sign of one ReLU pre-activation inside a branch-and-bound
/// subdomain.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Pre-activation constrained to z >= 0 (ReLU acts as identity).
    Active,
    /// Pre-activation constrained to z <= 0 (ReLU output pinned to 0).
    Inactive,
}

/// Sorted set of ReLU phase constraints, keyed by (relu layer index, flat
/// neuron index).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PhaseConstraints {
    items: Vec<((usize, usize), Phase)>,
}

impl PhaseConstraints {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, layer: usize, neuron: usize) -> Option<Phase> {
        self.items
            .binary_search_by_key(&(layer, neuron), |(k, _)| *k)
            .ok()
            .map(|i| self.items[i].1)
    }

    /// A copy with one more constraint. The key must not already be present.
    pub fn with(&self, layer: usize, neuron: usize, phase: Phase) -> Self {
        let mut items = self.items.clone();
        match items.binary_search_by_key(&(layer, neuron), |(k, _)| *k) {
            Ok(_) => panic!("duplicate phase constraint for ({layer}, {neuron})"),
            Err(pos) => items.insert(pos, ((layer, neuron), phase)),
        }
        PhaseConstraints { items }
    }

    /// Constraints on one ReLU layer, sorted by neuron index.
    pub fn for_layer(&self, layer: usize) -> &[((usize, usize), Phase)] {
        let lo = self.items.partition_point(|(k, _)| k.0 < layer);
        let hi = self.items.partition_point(|(k, _)| k.0 <= layer);
        &self.items[lo..hi]
    }

    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize), Phase)> + '_ {
        self.items.iter().copied()
    }
}

/// Signalled when a subdomain's phase constraints contradict its bounds:
/// the region contains no inputs, so the subdomain can be discarded.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Infeasible {
    pub layer: usize,
    pub neuron: usize,
}

pub use crown::{crown_lower, crown_lower_spec, relu_relaxation, LinSpec, ReluRelax};
pub use ibp::propagate_ibp;
pub use stability::{
    classify, dataset_stability, report_from_preacts, stability_report, NeuronState,
    StabilityReport,
};
pub use taped::{nrs_loss, rs_loss, taped_ibp, PreactBounds, TapedIbp};
