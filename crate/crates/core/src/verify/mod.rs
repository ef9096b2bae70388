//! Robustness verification: margin specs, PGD falsification, complete
//! branch-and-bound, and an independent low-dimensional oracle.

pub mod attack;
pub mod bab;
pub mod margin;
pub mod oracle;

pub use attack::{input_grad, pgd_attack, AttackConfig};
pub use bab::{certified_accuracy, verify_sample, BabConfig, BabStats, Verdict, VerifyOutcome};
pub use margin::{ibp_margin_lower, logit_margin_rows, margin_classes, margin_spec};
pub use oracle::{oracle_bisect, oracle_supported, OracleConfig, OracleVerdict};
