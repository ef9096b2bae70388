//! Command-line front end over the certiprune library.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime
//! failure, 3 verifier/oracle conformance discrepancy.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use certiprune::experiment::{run_experiment, verify_checkpoint};
use certiprune::report::{oracle_check, regenerate, write_oracle_report};
use certiprune::{load_config, Error, LayerKind, Preset, RoundRow, RunConfig};

#[derive(Parser)]
#[command(
    name = "certiprune",
    version,
    about = "Train, prune, and certify the robustness of small ReLU networks",
    after_help = "Exit codes: 0 success, 1 usage or config error, 2 runtime failure, \
                  3 conformance discrepancy."
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PresetArg {
    /// Minutes-scale defaults for a development machine.
    Desk,
    /// Full-scale defaults matching the reference experiments.
    Paper,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; preset defaults fill every omitted field.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides the config's `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace the config's seed list with this single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Baseline defaults merged underneath the config file.
    #[arg(long, value_enum, default_value_t = PresetArg::Desk)]
    preset: PresetArg,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train and evaluate the dense model only (no pruning rounds).
    Train(Common),
    /// Full pipeline: dense baseline, then iterative prune-rewind-retrain
    /// with certification after every round.
    PruneLoop(Common),
    /// Certify robustness on the configured test subset.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to verify; trains a fresh dense model when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Rebuild aggregate tables, tickets, and charts from per-seed CSVs.
    Report {
        #[command(flatten)]
        common: Common,
        /// Run directory; defaults to `<out_dir>/<config digest>`.
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Cross-check the branch-and-bound verifier against the independent
    /// bisection oracle on a grid of small networks.
    OracleCheck {
        #[command(flatten)]
        common: Common,
        /// Number of networks in the grid.
        #[arg(long, default_value_t = 6)]
        nets: usize,
        /// Queries per network.
        #[arg(long, default_value_t = 8)]
        queries: usize,
    },
}

/// Post-parse failures, split by exit code.
enum Failure {
    Config(Error),
    Runtime(Error),
}

fn config_phase(e: Error) -> Failure {
    Failure::Config(e)
}

fn run_phase(e: Error) -> Failure {
    Failure::Runtime(e)
}

fn load(common: &Common) -> Result<RunConfig, Failure> {
    let preset = match common.preset {
        PresetArg::Desk => Preset::Desk,
        PresetArg::Paper => Preset::Paper,
    };
    let mut cfg = load_config(common.config.as_deref(), preset).map_err(config_phase)?;
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    Ok(cfg)
}

fn print_rows(rows: &[RoundRow]) {
    println!(
        "{:>5} {:>5} {:>8} {:>8} {:>8} {:>8} {:>9} {:>9} {:>9}",
        "seed", "round", "remain", "std", "fgsm", "pgd", "verified", "timeouts", "unstable"
    );
    for r in rows {
        println!(
            "{:>5} {:>5} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>9.4} {:>9} {:>9.4}",
            r.seed,
            r.round,
            r.remain_ratio,
            r.std_acc,
            r.fgsm_acc,
            r.pgd_acc,
            r.verified_acc,
            r.timeouts,
            r.unstable_ratio
        );
    }
}

fn dispatch(cli: Cli) -> Result<u8, Failure> {
    match cli.cmd {
        Cmd::Train(common) => {
            let mut cfg = load(&common)?;
            cfg.prune.rounds = 0;
            let out = run_experiment(&cfg).map_err(run_phase)?;
            println!("run directory: {}", out.dir.display());
            print_rows(&out.rows);
            Ok(0)
        }
        Cmd::PruneLoop(common) => {
            let cfg = load(&common)?;
            let out = run_experiment(&cfg).map_err(run_phase)?;
            println!("run directory: {}", out.dir.display());
            print_rows(&out.rows);
            Ok(0)
        }
        Cmd::Verify { common, checkpoint } => {
            let cfg = load(&common)?;
            match checkpoint {
                Some(ckpt) => {
                    let stem = ckpt
                        .file_stem()
                        .and_then(|s| s.to_str())
                        .unwrap_or("checkpoint")
                        .to_string();
                    let out_dir = cfg.out_dir.join("verify").join(stem);
                    let (row, meta) =
                        verify_checkpoint(&cfg, &ckpt, Some(&out_dir)).map_err(run_phase)?;
                    println!(
                        "checkpoint: seed {} round {} (config {})",
                        meta.seed, meta.prune_round, meta.config_digest
                    );
                    println!("results written to {}", out_dir.display());
                    print_rows(std::slice::from_ref(&row));
                    Ok(0)
                }
                None => {
                    let mut cfg = cfg;
                    cfg.prune.rounds = 0;
                    let out = run_experiment(&cfg).map_err(run_phase)?;
                    println!("run directory: {}", out.dir.display());
                    print_rows(&out.rows);
                    Ok(0)
                }
            }
        }
        Cmd::Report { common, run_dir } => {
            let cfg = load(&common)?;
            let dir = run_dir.unwrap_or_else(|| cfg.out_dir.join(cfg.digest()));
            let rows = regenerate(&dir).map_err(run_phase)?;
            println!(
                "aggregated {} rows into {}",
                rows.len(),
                dir.join("aggregate").display()
            );
            print_rows(&rows);
            Ok(0)
        }
        Cmd::OracleCheck { common, nets, queries } => {
            let cfg = load(&common)?;
            // A supplied config contributes its architecture to the grid;
            // the oracle only handles dense nets with at most 3 inputs.
            let extra = if common.config.is_some() {
                let arch = cfg.arch.build().map_err(config_phase)?;
                let d: usize = arch.input_shape.iter().product();
                let conv = arch
                    .layers
                    .iter()
                    .any(|l| matches!(l, LayerKind::Conv2d { .. }));
                if d > 3 || conv {
                    return Err(Failure::Config(Error::InvalidInput(format!(
                        "oracle conformance needs a dense architecture with at most 3 inputs; \
                         the configured one has {d} inputs{}",
                        if conv { " and convolutions" } else { "" }
                    ))));
                }
                vec![arch]
            } else {
                Vec::new()
            };
            let seed = common.seed.or_else(|| cfg.seeds.first().copied()).unwrap_or(0);
            let report = oracle_check(nets, queries, seed, &extra).map_err(run_phase)?;
            let path = cfg.out_dir.join("oracle-check.json");
            write_oracle_report(&path, &report).map_err(run_phase)?;
            println!(
                "nets {} queries {} conclusive {} agreements {} inconclusive {}",
                report.nets, report.queries, report.conclusive, report.agreements,
                report.inconclusive
            );
            println!("report written to {}", path.display());
            if !report.discrepancies.is_empty() {
                eprintln!(
                    "{} verdict discrepancies between verifier and oracle:",
                    report.discrepancies.len()
                );
                for d in &report.discrepancies {
                    eprintln!(
                        "  net {} query {} label {} eps {}: verifier={} oracle={}",
                        d.net, d.query, d.label, d.eps, d.bab, d.oracle
                    );
                }
                return Ok(3);
            }
            if report.conclusive == 0 {
                return Err(Failure::Runtime(Error::InvalidInput(
                    "every conformance query was inconclusive".into(),
                )));
            }
            println!("verifier and oracle agree on all conclusive queries");
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
