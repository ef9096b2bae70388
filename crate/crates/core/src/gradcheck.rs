//! Finite-difference validation of tape gradients.
//!
//! The numeric side re-executes the recorded tape at f64 (`Tape::replay_f64`)
//! so the central-difference quotient carries ~1e-9 error and the comparison
//! measures the f32 backward pass. One-sided quotients double as a kink
//! detector: at a non-differentiable point the forward and backward slopes
//! disagree by O(1) while central differences can silently agree with the
//! subgradient.

use crate::error::Result;
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step, applied at f64.
    pub step: f64,
    /// Max allowed relative error between analytic and numeric gradients.
    pub tolerance: f64,
    /// One-sided slope disagreement beyond this flags a kink.
    pub kink_threshold: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-3,
            tolerance: 1e-4,
            kink_threshold: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FailureKind {
    /// Analytic vs numeric relative error above tolerance.
    Mismatch,
    /// Function or gradient evaluated to a non-finite value.
    NonFinite,
    /// One-sided difference quotients disagree: non-differentiable point.
    NonDifferentiable,
}

#[derive(Clone, Debug)]
pub struct GradCheckFailure {
    pub leaf: Var,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
    pub kind: FailureKind,
}

#[derive(Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub failures: Vec<GradCheckFailure>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Relative error with an absolute floor so near-zero gradients are judged
/// on absolute terms: |a - n| / max(|a|, |n|, 1e-2).
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-2)
}

/// Check the analytic gradients of the scalar `root` with respect to every
/// coordinate of each leaf in `wrt`.
pub fn grad_check(
    tape: &Tape,
    root: Var,
    wrt: &[Var],
    cfg: GradCheckConfig,
) -> Result<GradCheckReport> {
    let grads = tape.backward(root)?;
    let f0 = tape.replay_f64(root, &[]);
    let mut report = GradCheckReport::default();

    for &leaf in wrt {
        let base: Vec<f64> = tape.value(leaf).data().iter().map(|&v| v as f64).collect();
        let analytic = grads.get(leaf);
        for coord in 0..base.len() {
            let a = analytic.map(|g| g.data()[coord] as f64).unwrap_or(0.0);

            let mut plus = base.clone();
            plus[coord] += cfg.step;
            let fp = tape.replay_f64(root, &[(leaf, plus)]);
            let mut minus = base.clone();
            minus[coord] -= cfg.step;
            let fm = tape.replay_f64(root, &[(leaf, minus)]);

            let central = (fp - fm) / (2.0 * cfg.step);
            let fwd = (fp - f0) / cfg.step;
            let bwd = (f0 - fm) / cfg.step;
            report.checked += 1;

            if !fp.is_finite() || !fm.is_finite() || !a.is_finite() {
                report.failures.push(GradCheckFailure {
                    leaf,
                    coord,
                    analytic: a,
                    numeric: central,
                    rel_err: f64::INFINITY,
                    kind: FailureKind::NonFinite,
                });
                continue;
            }
            if (fwd - bwd).abs() > cfg.kink_threshold * central.abs().max(1.0) {
                report.failures.push(GradCheckFailure {
                    leaf,
                    coord,
                    analytic: a,
                    numeric: central,
                    rel_err: f64::INFINITY,
                    kind: FailureKind::NonDifferentiable,
                });
                continue;
            }
            let err = rel_err(a, central);
            report.max_rel_err = report.max_rel_err.max(err);
            if err > cfg.tolerance {
                report.failures.push(GradCheckFailure {
                    leaf,
                    coord,
                    analytic: a,
                    numeric: central,
                    rel_err: err,
                    kind: FailureKind::Mismatch,
                });
            }
        }
    }
    Ok(report)
}
