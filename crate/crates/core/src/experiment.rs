//! End-to-end pipeline: train a dense baseline, run the iterative
//! prune-rewind-retrain loop, certify every round, and persist per-seed and
//! aggregated artifacts under a content-addressed run directory.
//!
//! Everything written here is deterministic for a fixed config except
//! `timings.csv`, which carries wall-clock measurements and is excluded from
//! the reproducibility contract.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use crate::config::{ArchConfig, DatasetSpec, PruneMethodCfg, RunConfig};
use crate::data::{gen_two_moons, load_idx, Dataset};
use crate::error::{Error, Result};
use crate::network::{Network, PruneScope};
use crate::prune::{prune_step, PruneOp, Saliency};
use crate::train::{evaluate, train, EpochMetrics};
use crate::bounds::dataset_stability;
use crate::tensor::Tensor;
use crate::verify::{certified_accuracy, AttackConfig, Verdict, VerifyOutcome};

/// One (seed, round) line of the results table. Accuracy columns are
/// measured on the certification subset so that
/// verified_acc <= pgd_acc <= std_acc holds row by row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRow {
    pub seed: u64,
    pub round: usize,
    /// Surviving prunable weights relative to the dense baseline.
    pub remain_ratio: f64,
    pub std_acc: f64,
    pub fgsm_acc: f64,
    pub pgd_acc: f64,
    pub verified_acc: f64,
    pub timeouts: usize,
    pub falsified: usize,
    /// Mean subdomains explored per query: the deterministic effort proxy
    /// for verification cost.
    pub mean_subdomains: f64,
    pub unstable_ratio: f64,
    pub instability_mean: f64,
    pub instability_sum: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct MetricsRow {
    round: usize,
    epoch: usize,
    eps: f32,
    loss: f64,
    reg_loss: f64,
    std_acc: f64,
    adv_acc: f64,
    instability_mean: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct VerdictRow {
    round: usize,
    sample: usize,
    label: usize,
    verdict: String,
    explored: usize,
    max_depth: usize,
    bisected: usize,
    root_verified: bool,
    pgd_hit: bool,
}

#[derive(Clone, Debug, Serialize)]
struct TimingRow {
    round: usize,
    train_ms: u128,
    verify_ms: u128,
}

#[derive(Clone, Debug, Serialize)]
struct Manifest {
    config_digest: String,
    seeds: Vec<u64>,
    crate_version: &'static str,
    checkpoint_format: u32,
    prune_method: PruneMethodCfg,
}

pub struct RunOutput {
    pub dir: PathBuf,
    pub rows: Vec<RoundRow>,
}

/// Reshape `[n, ...]` samples to the architecture's input shape.
fn adapt_inputs(x: &Tensor, input_shape: &[usize]) -> Result<Tensor> {
    let per: usize = x.shape()[1..].iter().product();
    let want: usize = input_shape.iter().product();
    if per != want {
        return Err(Error::InvalidInput(format!(
            "dataset samples have {per} values but the architecture expects {want}"
        )));
    }
    let mut shape = vec![x.shape()[0]];
    shape.extend_from_slice(input_shape);
    x.reshape(shape)
}

/// Materialize the configured dataset, shaped for the configured net.
pub fn resolve_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let arch = cfg.arch.build()?;
    let mut ds = match &cfg.dataset {
        DatasetSpec::TwoMoons { n, noise, seed } => gen_two_moons(*n, *noise, *seed)?,
        DatasetSpec::Idx { images, labels, subset } => {
            // A single IDX pair serves as both streams: the pipeline trains
            // on the subset it will afterwards certify (smoke-scale rig).
            let (x, y) = load_idx(images, labels, *subset)?;
            let classes = match cfg.arch {
                ArchConfig::Mlp { classes, .. } | ArchConfig::CnnSmall { classes, .. } => classes,
            };
            if let Some(&bad) = y.iter().find(|&&l| l >= classes) {
                return Err(Error::InvalidInput(format!(
                    "label {bad} out of range for {classes} classes"
                )));
            }
            Dataset {
                train_x: x.clone(),
                train_y: y.clone(),
                test_x: x,
                test_y: y,
                num_classes: classes,
            }
        }
    };
    ds.train_x = adapt_inputs(&ds.train_x, &arch.input_shape)?;
    ds.test_x = adapt_inputs(&ds.test_x, &arch.input_shape)?;
    Ok(ds)
}

fn prune_op(cfg: &RunConfig) -> PruneOp {
    match cfg.prune.method {
        PruneMethodCfg::Random => PruneOp::Unstructured(Saliency::Random),
        PruneMethodCfg::Magnitude => PruneOp::Unstructured(Saliency::Magnitude),
        PruneMethodCfg::Snip => PruneOp::Unstructured(Saliency::Snip),
        PruneMethodCfg::Taylor => {
            PruneOp::Unstructured(Saliency::Taylor { chunks: cfg.prune.taylor_chunks })
        }
        PruneMethodCfg::Slim => PruneOp::Slim,
        PruneMethodCfg::StructuredMass => PruneOp::StructuredMass,
    }
}

fn verdict_name(v: Verdict) -> &'static str {
    match v {
        Verdict::Verified => "verified",
        Verdict::Falsified => "falsified",
        Verdict::Timeout => "timeout",
    }
}

struct RoundEval {
    row: RoundRow,
    verdicts: Vec<VerdictRow>,
}

fn eval_round(
    cfg: &RunConfig,
    net: &Network,
    ds: &Dataset,
    seed: u64,
    round: usize,
    remain_ratio: f64,
) -> Result<RoundEval> {
    let eps = cfg.verify.eps.value_f32();
    let range = cfg.train.input_range;
    let n = cfg.verify.samples.min(ds.test_len());
    let idx: Vec<usize> = (0..n).collect();
    let sub_x = ds.test_x.select_rows(&idx);
    let sub_y = &ds.test_y[..n];

    let eval = evaluate(net, &sub_x, sub_y, eps, range, AttackConfig::default(), seed)?;
    let (verified_acc, outcomes) =
        certified_accuracy(net, &sub_x, sub_y, eps, range, &cfg.verify.bab(), seed)?;
    // The stability census runs over the whole test set (one interval pass
    // per sample is cheap); only branch-and-bound is capped by the subset.
    let stability = dataset_stability(net, &ds.test_x, eps, range)?;

    let verdicts = outcomes
        .iter()
        .enumerate()
        .map(|(i, o): (usize, &VerifyOutcome)| VerdictRow {
            round,
            sample: i,
            label: sub_y[i],
            verdict: verdict_name(o.verdict).to_string(),
            explored: o.stats.explored,
            max_depth: o.stats.max_depth,
            bisected: o.stats.bisected,
            root_verified: o.stats.root_verified,
            pgd_hit: o.stats.pgd_hit,
        })
        .collect();
    let timeouts = outcomes.iter().filter(|o| o.verdict == Verdict::Timeout).count();
    let falsified = outcomes.iter().filter(|o| o.verdict == Verdict::Falsified).count();
    let mean_subdomains =
        outcomes.iter().map(|o| o.stats.explored as f64).sum::<f64>() / n.max(1) as f64;

    Ok(RoundEval {
        row: RoundRow {
            seed,
            round,
            remain_ratio,
            std_acc: eval.std_acc,
            fgsm_acc: eval.fgsm_acc,
            pgd_acc: eval.pgd_acc,
            verified_acc,
            timeouts,
            falsified,
            mean_subdomains,
            unstable_ratio: stability.unstable_ratio(),
            instability_mean: stability.mean_instability(),
            instability_sum: stability.instability_sum,
        },
        verdicts,
    })
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn push_metrics(rows: &mut Vec<MetricsRow>, round: usize, epochs: &[EpochMetrics]) {
    rows.extend(epochs.iter().map(|m| MetricsRow {
        round,
        epoch: m.epoch,
        eps: m.eps,
        loss: m.loss,
        reg_loss: m.reg_loss,
        std_acc: m.std_acc,
        adv_acc: m.adv_acc,
        instability_mean: m.instability_mean,
    }));
}

fn run_seed(cfg: &RunConfig, ds: &Dataset, seed: u64, run_dir: &Path) -> Result<Vec<RoundRow>> {
    let seed_dir = run_dir.join(format!("seed{seed}"));
    std::fs::create_dir_all(seed_dir.join("checkpoints"))?;

    let arch = cfg.arch.build()?;
    let mut net = Network::build(arch, seed, PruneScope::ConvAndAffine)?;
    let dense_total = net.surviving_weights().max(1);
    let mut tcfg = cfg.train.clone();
    tcfg.seed = seed;
    let digest = cfg.digest();

    // Saliency batch for the gradient-based scores: the first training
    // batch, fixed across rounds.
    let sal_n = tcfg.batch_size.min(ds.train_len());
    let sal_idx: Vec<usize> = (0..sal_n).collect();
    let sal_x = ds.train_x.select_rows(&sal_idx);
    let sal_y: Vec<usize> = ds.train_y[..sal_n].to_vec();
    let op = prune_op(cfg);

    let mut metrics: Vec<MetricsRow> = Vec::new();
    let mut verdicts: Vec<VerdictRow> = Vec::new();
    let mut timings: Vec<TimingRow> = Vec::new();
    let mut rows: Vec<RoundRow> = Vec::new();

    let mut run_round = |net: &mut Network, round: usize| -> Result<(RoundRow, Vec<VerdictRow>, TimingRow)> {
        let t0 = Instant::now();
        let epochs = train(net, &ds.train_x, &ds.train_y, &tcfg)?;
        let train_ms = t0.elapsed().as_millis();
        let t1 = Instant::now();
        let remain = net.surviving_weights() as f64 / dense_total as f64;
        let eval = eval_round(cfg, net, ds, seed, round, remain)?;
        let verify_ms = t1.elapsed().as_millis();
        let meta = CheckpointMeta {
            seed,
            epoch: epochs.last().map(|m| m.epoch).unwrap_or(0),
            prune_round: round,
            config_digest: digest.clone(),
        };
        save_checkpoint(
            net,
            &meta,
            &seed_dir.join(format!("checkpoints/round_{round:02}.json")),
        )?;
        push_metrics(&mut metrics, round, &epochs);
        Ok((eval.row, eval.verdicts, TimingRow { round, train_ms, verify_ms }))
    };

    // Dense baseline, then the iterative loop: prune trained weights,
    // rewind survivors to initialization, retrain.
    let (row, vds, timing) = run_round(&mut net, 0)?;
    rows.push(row);
    verdicts.extend(vds);
    timings.push(timing);
    for round in 1..=cfg.prune.rounds {
        prune_step(
            &mut net,
            op,
            cfg.prune.ratio,
            Some((&sal_x, &sal_y)),
            seed.wrapping_add(round as u64),
        )?;
        net.rewind();
        let (row, vds, timing) = run_round(&mut net, round)?;
        rows.push(row);
        verdicts.extend(vds);
        timings.push(timing);
    }

    write_csv(&seed_dir.join("metrics.csv"), &metrics)?;
    write_csv(&seed_dir.join("verdicts.csv"), &verdicts)?;
    write_csv(&seed_dir.join("rounds.csv"), &rows)?;
    write_csv(&seed_dir.join("timings.csv"), &timings)?;
    Ok(rows)
}

/// Certify a stored checkpoint on the configured verification subset.
/// Returns the results row plus the checkpoint's metadata; when `out` is
/// given, writes `round.csv` and `verdicts.csv` there. The sparsity ratio
/// is measured against a dense build of the configured architecture.
pub fn verify_checkpoint(
    cfg: &RunConfig,
    ckpt: &Path,
    out: Option<&Path>,
) -> Result<(RoundRow, CheckpointMeta)> {
    let (net, meta) = load_checkpoint(ckpt)?;
    let ds = resolve_dataset(cfg)?;
    let dense_total = Network::build(cfg.arch.build()?, meta.seed, PruneScope::ConvAndAffine)?
        .surviving_weights()
        .max(1);
    let remain = net.surviving_weights() as f64 / dense_total as f64;
    let eval = eval_round(cfg, &net, &ds, meta.seed, meta.prune_round, remain)?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        write_csv(&dir.join("round.csv"), std::slice::from_ref(&eval.row))?;
        write_csv(&dir.join("verdicts.csv"), &eval.verdicts)?;
    }
    Ok((eval.row, meta))
}

/// Run the full pipeline for every configured seed (seeds in parallel) and
/// aggregate. Returns the run directory and every (seed, round) row. On
/// failure, partial artifacts stay on disk next to a FAILED marker naming
/// the stage.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunOutput> {
    let run_dir = cfg.out_dir.join(cfg.digest());
    std::fs::create_dir_all(&run_dir)?;
    std::fs::write(run_dir.join("effective-config.json"), cfg.effective_json())?;
    let manifest = Manifest {
        config_digest: cfg.digest(),
        seeds: cfg.seeds.clone(),
        crate_version: env!("CARGO_PKG_VERSION"),
        checkpoint_format: crate::checkpoint::FORMAT_VERSION,
        prune_method: cfg.prune.method,
    };
    std::fs::write(
        run_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;

    let fail = |stage: &str, e: Error| -> Error {
        let _ = std::fs::write(run_dir.join("FAILED"), format!("stage: {stage}\n{e}\n"));
        e
    };

    let dataset = resolve_dataset(cfg).map_err(|e| fail("dataset", e))?;
    let per_seed: Vec<Vec<RoundRow>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| run_seed(cfg, &dataset, seed, &run_dir))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| fail("pipeline", e))?;

    let rows: Vec<RoundRow> = per_seed.into_iter().flatten().collect();
    crate::report::write_aggregate(&run_dir, &rows).map_err(|e| fail("aggregate", e))?;
    Ok(RunOutput { dir: run_dir, rows })
}
