//! Cross-seed aggregation over a finished run directory: concatenated and
//! per-round mean tables, a dense-vs-best summary, sparsity tickets whose
//! certified accuracy matches the dense baseline, and self-contained SVG
//! charts. Also hosts the verifier-vs-oracle conformance check.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::arch::ArchSpec;
use crate::error::{Error, Result};
use crate::experiment::RoundRow;
use crate::network::{Network, PruneScope};
use crate::prune::certified_tickets;
use crate::tensor::Tensor;
use crate::verify::{
    oracle_bisect, verify_sample, BabConfig, OracleConfig, OracleVerdict, Verdict,
};

/// Per-round means across seeds.
#[derive(Clone, Debug, Serialize)]
pub struct AggRow {
    pub round: usize,
    pub seeds: usize,
    pub remain_ratio: f64,
    pub std_acc: f64,
    pub fgsm_acc: f64,
    pub pgd_acc: f64,
    pub verified_acc: f64,
    pub timeouts: f64,
    pub falsified: f64,
    pub mean_subdomains: f64,
    pub unstable_ratio: f64,
    pub instability_mean: f64,
    pub instability_sum: f64,
}

#[derive(Clone, Debug, Serialize)]
struct SummaryRow {
    entry: &'static str,
    round: usize,
    remain_ratio: f64,
    verified_acc: f64,
    pgd_acc: f64,
    std_acc: f64,
    unstable_ratio: f64,
    instability_mean: f64,
}

#[derive(Serialize)]
struct SeedTickets {
    seed: u64,
    dense_verified: f64,
    rounds: Vec<usize>,
}

#[derive(Serialize)]
struct TicketsFile {
    tolerance: f64,
    mean_dense_verified: f64,
    /// Rounds whose cross-seed mean certified accuracy matches the dense
    /// baseline at sparsity < 1.
    mean_rounds: Vec<usize>,
    per_seed: Vec<SeedTickets>,
}

fn mean<I: IntoIterator<Item = f64>>(it: I) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in it {
        sum += v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Group rows by round and average every column across seeds.
pub fn aggregate_rounds(rows: &[RoundRow]) -> Vec<AggRow> {
    let mut by_round: BTreeMap<usize, Vec<&RoundRow>> = BTreeMap::new();
    for r in rows {
        by_round.entry(r.round).or_default().push(r);
    }
    by_round
        .into_iter()
        .map(|(round, rs)| AggRow {
            round,
            seeds: rs.len(),
            remain_ratio: mean(rs.iter().map(|r| r.remain_ratio)),
            std_acc: mean(rs.iter().map(|r| r.std_acc)),
            fgsm_acc: mean(rs.iter().map(|r| r.fgsm_acc)),
            pgd_acc: mean(rs.iter().map(|r| r.pgd_acc)),
            verified_acc: mean(rs.iter().map(|r| r.verified_acc)),
            timeouts: mean(rs.iter().map(|r| r.timeouts as f64)),
            falsified: mean(rs.iter().map(|r| r.falsified as f64)),
            mean_subdomains: mean(rs.iter().map(|r| r.mean_subdomains)),
            unstable_ratio: mean(rs.iter().map(|r| r.unstable_ratio)),
            instability_mean: mean(rs.iter().map(|r| r.instability_mean)),
            instability_sum: mean(rs.iter().map(|r| r.instability_sum)),
        })
        .collect()
}

/// Load every `seed*/rounds.csv` under a run directory.
pub fn read_rows(run_dir: &Path) -> Result<Vec<RoundRow>> {
    let mut rows: Vec<RoundRow> = Vec::new();
    let mut dirs: Vec<_> = std::fs::read_dir(run_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_dir()
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("seed"))
        })
        .collect();
    dirs.sort();
    for dir in dirs {
        let csv_path = dir.join("rounds.csv");
        if !csv_path.exists() {
            continue;
        }
        let mut reader = csv::Reader::from_path(&csv_path)?;
        for rec in reader.deserialize() {
            rows.push(rec?);
        }
    }
    if rows.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no seed*/rounds.csv results under {}",
            run_dir.display()
        )));
    }
    rows.sort_by(|a, b| (a.seed, a.round).cmp(&(b.seed, b.round)));
    Ok(rows)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn summary_from(agg: &[AggRow]) -> Vec<SummaryRow> {
    let to_row = |entry: &'static str, a: &AggRow| SummaryRow {
        entry,
        round: a.round,
        remain_ratio: a.remain_ratio,
        verified_acc: a.verified_acc,
        pgd_acc: a.pgd_acc,
        std_acc: a.std_acc,
        unstable_ratio: a.unstable_ratio,
        instability_mean: a.instability_mean,
    };
    let mut out = Vec::new();
    if let Some(dense) = agg.iter().find(|a| a.round == 0) {
        out.push(to_row("dense", dense));
    }
    // Best mean certified accuracy; ties resolve to the earlier round.
    if let Some(best) = agg.iter().max_by(|a, b| {
        a.verified_acc
            .total_cmp(&b.verified_acc)
            .then(b.round.cmp(&a.round))
    }) {
        out.push(to_row("best_verified", best));
    }
    out
}

fn tickets_from(rows: &[RoundRow], agg: &[AggRow]) -> TicketsFile {
    let tolerance = 0.0;
    let mean_dense = agg
        .iter()
        .find(|a| a.round == 0)
        .map(|a| a.verified_acc)
        .unwrap_or(0.0);
    let mean_triples: Vec<(usize, f64, f64)> = agg
        .iter()
        .map(|a| (a.round, a.remain_ratio, a.verified_acc))
        .collect();
    let mean_rounds = certified_tickets(&mean_triples, mean_dense, tolerance);

    let mut by_seed: BTreeMap<u64, Vec<&RoundRow>> = BTreeMap::new();
    for r in rows {
        by_seed.entry(r.seed).or_default().push(r);
    }
    let per_seed = by_seed
        .into_iter()
        .map(|(seed, rs)| {
            let dense = rs
                .iter()
                .find(|r| r.round == 0)
                .map(|r| r.verified_acc)
                .unwrap_or(0.0);
            let triples: Vec<(usize, f64, f64)> = rs
                .iter()
                .map(|r| (r.round, r.remain_ratio, r.verified_acc))
                .collect();
            SeedTickets {
                seed,
                dense_verified: dense,
                rounds: certified_tickets(&triples, dense, tolerance),
            }
        })
        .collect();
    TicketsFile {
        tolerance,
        mean_dense_verified: mean_dense,
        mean_rounds,
        per_seed,
    }
}

// ---------------------------------------------------------------------------
// SVG charts

struct Series {
    label: String,
    color: String,
    width: f64,
    points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf",
];

fn fmt_tick(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e6 {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

/// Hand-rolled line chart: axes, ticks, grid, legend, one polyline per
/// series. No external assets, so the file renders anywhere.
fn svg_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h) = (640.0, 420.0);
    let (ml, mr, mt, mb) = (72.0, 24.0, 44.0, 56.0);
    let (pw, ph) = (w - ml - mr, h - mt - mb);

    let all = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 > x1 {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    let pad = ((y1 - y0) * 0.08).max(1e-12);
    y0 -= pad;
    y1 += pad;
    let sx = |x: f64| ml + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| mt + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"12\">"
    );
    let _ = writeln!(s, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{title}</text>",
        ml + pw / 2.0
    );

    let ticks = 5usize;
    for i in 0..=ticks {
        let t = i as f64 / ticks as f64;
        let xv = x0 + t * (x1 - x0);
        let yv = y0 + t * (y1 - y0);
        let gx = sx(xv);
        let gy = sy(yv);
        let _ = writeln!(
            s,
            "<line x1=\"{gx:.1}\" y1=\"{mt}\" x2=\"{gx:.1}\" y2=\"{:.1}\" stroke=\"#e0e0e0\"/>",
            mt + ph
        );
        let _ = writeln!(
            s,
            "<line x1=\"{ml}\" y1=\"{gy:.1}\" x2=\"{:.1}\" y2=\"{gy:.1}\" stroke=\"#e0e0e0\"/>",
            ml + pw
        );
        let _ = writeln!(
            s,
            "<text x=\"{gx:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
            mt + ph + 18.0,
            fmt_tick(xv)
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>",
            ml - 8.0,
            gy + 4.0,
            fmt_tick(yv)
        );
    }
    let _ = writeln!(
        s,
        "<rect x=\"{ml}\" y=\"{mt}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"#444\"/>"
    );
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"middle\">{x_label}</text>",
        ml + pw / 2.0,
        h - 12.0
    );
    let _ = writeln!(
        s,
        "<text x=\"18\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 18 {:.1})\">{y_label}</text>",
        mt + ph / 2.0,
        mt + ph / 2.0
    );

    for ser in series {
        if ser.points.is_empty() {
            continue;
        }
        let pts: Vec<String> = ser
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"{}\" points=\"{}\"/>",
            ser.color,
            ser.width,
            pts.join(" ")
        );
    }
    // Legend in the upper-right corner of the plot area.
    for (i, ser) in series.iter().enumerate() {
        let ly = mt + 14.0 + i as f64 * 16.0;
        let lx = ml + pw - 130.0;
        let _ = writeln!(
            s,
            "<line x1=\"{lx:.1}\" y1=\"{ly:.1}\" x2=\"{:.1}\" y2=\"{ly:.1}\" stroke=\"{}\" stroke-width=\"{}\"/>",
            lx + 22.0,
            ser.color,
            ser.width
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\">{}</text>",
            lx + 28.0,
            ly + 4.0,
            ser.label
        );
    }
    s.push_str("</svg>\n");
    s
}

fn chart_series(
    rows: &[RoundRow],
    agg: &[AggRow],
    col: impl Fn(&RoundRow) -> f64,
    agg_col: impl Fn(&AggRow) -> f64,
) -> Vec<Series> {
    let mut by_seed: BTreeMap<u64, Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows {
        by_seed
            .entry(r.seed)
            .or_default()
            .push((r.round as f64, col(r)));
    }
    let mut out: Vec<Series> = by_seed
        .into_iter()
        .enumerate()
        .map(|(i, (seed, mut pts))| {
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            Series {
                label: format!("seed {seed}"),
                color: PALETTE[i % PALETTE.len()].to_string(),
                width: 1.2,
                points: pts,
            }
        })
        .collect();
    out.push(Series {
        label: "mean".to_string(),
        color: "#000000".to_string(),
        width: 2.5,
        points: agg.iter().map(|a| (a.round as f64, agg_col(a))).collect(),
    });
    out
}

/// Write `aggregate/` under the run directory from in-memory rows:
/// table.csv (all rows), rounds.csv (per-round means), summary.csv,
/// tickets.json, and four SVG charts.
pub fn write_aggregate(run_dir: &Path, rows: &[RoundRow]) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::InvalidInput("no result rows to aggregate".into()));
    }
    let dir = run_dir.join("aggregate");
    std::fs::create_dir_all(&dir)?;

    let mut sorted = rows.to_vec();
    sorted.sort_by(|a, b| (a.seed, a.round).cmp(&(b.seed, b.round)));
    write_csv(&dir.join("table.csv"), &sorted)?;

    let agg = aggregate_rounds(&sorted);
    write_csv(&dir.join("rounds.csv"), &agg)?;
    write_csv(&dir.join("summary.csv"), &summary_from(&agg))?;

    let tickets = tickets_from(&sorted, &agg);
    std::fs::write(
        dir.join("tickets.json"),
        serde_json::to_string_pretty(&tickets)?,
    )?;

    let charts: [(&str, &str, fn(&RoundRow) -> f64, fn(&AggRow) -> f64); 4] = [
        (
            "verified_acc.svg",
            "certified accuracy",
            |r| r.verified_acc,
            |a| a.verified_acc,
        ),
        (
            "unstable_ratio.svg",
            "unstable neuron ratio",
            |r| r.unstable_ratio,
            |a| a.unstable_ratio,
        ),
        (
            "instability.svg",
            "mean instability",
            |r| r.instability_mean,
            |a| a.instability_mean,
        ),
        (
            "effort.svg",
            "mean subdomains per query",
            |r| r.mean_subdomains,
            |a| a.mean_subdomains,
        ),
    ];
    for (file, label, col, agg_col) in charts {
        let svg = svg_chart(
            label,
            "prune round",
            label,
            &chart_series(&sorted, &agg, col, agg_col),
        );
        std::fs::write(dir.join(file), svg)?;
    }
    Ok(())
}

/// Rebuild `aggregate/` from the per-seed CSVs already on disk.
pub fn regenerate(run_dir: &Path) -> Result<Vec<RoundRow>> {
    let rows = read_rows(run_dir)?;
    write_aggregate(run_dir, &rows)?;
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Verifier-vs-oracle conformance

#[derive(Clone, Debug, Serialize)]
pub struct DiscrepancyTrace {
    pub net: usize,
    pub query: usize,
    pub label: usize,
    pub eps: f32,
    pub x: Vec<f32>,
    pub bab: String,
    pub oracle: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct OracleCheckReport {
    pub nets: usize,
    pub queries: usize,
    /// Queries where both sides reached a conclusion.
    pub conclusive: usize,
    pub agreements: usize,
    /// Oracle `Unknown` or verifier `Timeout`: excluded from the matrix.
    pub inconclusive: usize,
    /// verified x falsified counts: [both-robust, oracle-only-robust,
    /// bab-only-robust, both-not-robust].
    pub matrix: [usize; 4],
    pub discrepancies: Vec<DiscrepancyTrace>,
}

impl OracleCheckReport {
    pub fn passed(&self) -> bool {
        self.discrepancies.is_empty() && self.conclusive > 0
    }
}

fn grid_archs() -> Vec<ArchSpec> {
    vec![
        ArchSpec::mlp(1, &[3], 2, false),
        ArchSpec::mlp(2, &[4], 2, false),
        ArchSpec::mlp(2, &[4, 4], 3, false),
        ArchSpec::mlp(3, &[5], 2, false),
        ArchSpec::mlp(2, &[6], 2, true),
        ArchSpec::mlp(3, &[4, 3], 3, false),
    ]
}

fn verdict_str(v: Verdict) -> &'static str {
    match v {
        Verdict::Verified => "verified",
        Verdict::Falsified => "falsified",
        Verdict::Timeout => "timeout",
    }
}

fn oracle_str(v: &OracleVerdict) -> &'static str {
    match v {
        OracleVerdict::Robust => "robust",
        OracleVerdict::NotRobust(_) => "not_robust",
        OracleVerdict::Unknown => "unknown",
    }
}

/// Run the branch-and-bound verifier and the independent f64 bisection
/// oracle over a grid of small random networks and compare verdicts.
/// `extra` prepends caller-supplied architectures (each must be
/// oracle-supported: dense, at most 3 inputs).
pub fn oracle_check(
    nets: usize,
    queries_per_net: usize,
    seed: u64,
    extra: &[ArchSpec],
) -> Result<OracleCheckReport> {
    let grid = grid_archs();
    let mut archs: Vec<ArchSpec> = extra.to_vec();
    for i in 0..nets.saturating_sub(extra.len()) {
        archs.push(grid[i % grid.len()].clone());
    }
    let range = (0.0f32, 1.0f32);
    let eps_grid = [0.01f32, 0.03, 0.08, 0.15];
    let bcfg = BabConfig {
        max_subdomains: 50_000,
        ..BabConfig::default()
    };
    let ocfg = OracleConfig::default();

    let mut report = OracleCheckReport {
        nets: archs.len(),
        queries: 0,
        conclusive: 0,
        agreements: 0,
        inconclusive: 0,
        matrix: [0; 4],
        discrepancies: Vec::new(),
    };

    for (ni, arch) in archs.into_iter().enumerate() {
        let d: usize = arch.input_shape.iter().product();
        if d > 3 {
            return Err(Error::InvalidInput(format!(
                "oracle conformance needs at most 3 inputs, architecture has {d}"
            )));
        }
        let classes = arch.num_classes;
        let net = Network::build(arch, seed.wrapping_add(ni as u64), PruneScope::ConvAndAffine)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (ni as u64) << 16);
        for qi in 0..queries_per_net {
            let data: Vec<f32> = (0..d).map(|_| rng.gen_range(0.2f32..0.8)).collect();
            let x = Tensor::new(vec![d], data.clone())?;
            let eps = eps_grid[qi % eps_grid.len()];
            let label = if qi % 2 == 0 {
                let batched = x.reshape(net.arch.input_shape.iter().fold(vec![1], |mut v, &s| {
                    v.push(s);
                    v
                }))?;
                net.forward(&batched)?.argmax_rows()[0]
            } else {
                rng.gen_range(0..classes)
            };
            report.queries += 1;

            let bab = verify_sample(&net, &x, label, eps, range, &bcfg, seed)?;
            let oracle = oracle_bisect(&net, &x, label, eps, range, &ocfg)?;

            let agree = match (bab.verdict, &oracle) {
                (Verdict::Timeout, _) | (_, OracleVerdict::Unknown) => {
                    report.inconclusive += 1;
                    continue;
                }
                (Verdict::Verified, OracleVerdict::Robust) => {
                    report.matrix[0] += 1;
                    true
                }
                (Verdict::Falsified, OracleVerdict::Robust) => {
                    report.matrix[1] += 1;
                    false
                }
                (Verdict::Verified, OracleVerdict::NotRobust(_)) => {
                    report.matrix[2] += 1;
                    false
                }
                (Verdict::Falsified, OracleVerdict::NotRobust(_)) => {
                    report.matrix[3] += 1;
                    true
                }
            };
            report.conclusive += 1;
            if agree {
                report.agreements += 1;
            } else {
                report.discrepancies.push(DiscrepancyTrace {
                    net: ni,
                    query: qi,
                    label,
                    eps,
                    x: data,
                    bab: verdict_str(bab.verdict).to_string(),
                    oracle: oracle_str(&oracle).to_string(),
                });
            }
        }
    }
    Ok(report)
}

pub fn write_oracle_report(path: &Path, report: &OracleCheckReport) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(report)?)?;
    Ok(())
}
