//! Certified-robustness toolkit for small ReLU networks: float32 autodiff,
//! interval (IBP) and backward linear (CROWN) bound propagation, complete
//! branch-and-bound verification, magnitude/saliency/structured pruning with
//! lottery-ticket rewinding, robust training, and an experiment harness.

pub mod arch;
pub mod bounds;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod network;
pub mod optim;
pub mod prune;
pub mod report;
pub mod tape;
pub mod train;
pub mod tensor;
pub mod verify;

pub use arch::{ArchSpec, LayerKind};
pub use bounds::{input_box, Bounds, LayerBounds, Phase, PhaseConstraints};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use config::{load_config, ArchConfig, DatasetSpec, Preset, PruneMethodCfg, RunConfig};
pub use data::{gen_two_moons, load_idx, Dataset};
pub use error::{Error, Result};
pub use experiment::{resolve_dataset, run_experiment, verify_checkpoint, RoundRow, RunOutput};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use network::{Mode, Network, PruneScope};
pub use optim::{clip_grad_norm, OptimKind, OptimState};
pub use prune::{iterative_prune, prune_slim, prune_step, prune_structured_mass, prune_unstructured, PruneOp, PruneOutcome, Saliency, StepOutcome};
pub use report::{oracle_check, regenerate, write_aggregate, OracleCheckReport};
pub use tape::{Tape, Var};
pub use train::{eps_schedule, evaluate, train, EpochMetrics, EvalReport, Ratio, Regularizer, TrainConfig, TrainMethod};
pub use tensor::Tensor;
pub use verify::{certified_accuracy, verify_sample, BabConfig, Verdict, VerifyOutcome};
