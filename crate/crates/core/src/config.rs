//! Run configuration: fail-closed JSON parsing, desk/paper presets, exact
//! rational epsilon literals, and the content digest that names run
//! directories.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arch::ArchSpec;
use crate::error::{Error, Result};
use crate::optim::OptimKind;
use crate::train::{Ratio, Regularizer, TrainConfig, TrainMethod};
use crate::verify::BabConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// CPU-scale defaults: short schedule, small epsilon ramp.
    Desk,
    /// The published schedule: 200 epochs, decay at 140/170, eps 2/255
    /// ramped over epochs 11..80.
    Paper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    TwoMoons { n: usize, noise: f64, seed: u64 },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        subset: Option<usize>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum ArchConfig {
    Mlp {
        inputs: usize,
        hidden: Vec<usize>,
        classes: usize,
        batch_norm: bool,
    },
    CnnSmall {
        channels: usize,
        height: usize,
        width: usize,
        classes: usize,
    },
}

impl ArchConfig {
    pub fn build(&self) -> Result<ArchSpec> {
        let spec = match self {
            ArchConfig::Mlp { inputs, hidden, classes, batch_norm } => {
                ArchSpec::mlp(*inputs, hidden, *classes, *batch_norm)
            }
            ArchConfig::CnnSmall { channels, height, width, classes } => {
                ArchSpec::cnn_small(*channels, *height, *width, *classes)?
            }
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneMethodCfg {
    Random,
    Magnitude,
    Snip,
    Taylor,
    Slim,
    StructuredMass,
}

impl PruneMethodCfg {
    pub fn is_structured(self) -> bool {
        matches!(self, PruneMethodCfg::Slim | PruneMethodCfg::StructuredMass)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub method: PruneMethodCfg,
    /// Fraction of survivors removed per round.
    pub ratio: f64,
    pub rounds: usize,
    pub taylor_chunks: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyConfig {
    pub eps: Ratio,
    /// Test samples certified per round.
    pub samples: usize,
    pub max_subdomains: usize,
}

impl VerifyConfig {
    pub fn bab(&self) -> BabConfig {
        BabConfig {
            max_subdomains: self.max_subdomains,
            ..BabConfig::default()
        }
    }
}

/// Fully resolved run description; everything the pipeline reads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: Preset,
    pub dataset: DatasetSpec,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub prune: PruneConfig,
    pub verify: VerifyConfig,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

/// Epsilon literal: a rational string ("2/255"), a decimal string ("0.05"),
/// or a plain JSON number with a short decimal expansion.
#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
pub enum EpsSpec {
    Text(String),
    Num(f64),
}

pub fn parse_ratio(spec: &EpsSpec) -> Result<Ratio> {
    let text = match spec {
        EpsSpec::Text(s) => s.trim().to_string(),
        EpsSpec::Num(v) => {
            if !v.is_finite() || *v < 0.0 {
                return Err(Error::config("eps", format!("invalid epsilon {v}")));
            }
            format!("{v}")
        }
    };
    let bad = |reason: String| Error::config("eps", reason);
    if let Some((num, den)) = text.split_once('/') {
        let num: u32 = num
            .trim()
            .parse()
            .map_err(|_| bad(format!("bad numerator in `{text}`")))?;
        let den: u32 = den
            .trim()
            .parse()
            .map_err(|_| bad(format!("bad denominator in `{text}`")))?;
        if den == 0 {
            return Err(bad(format!("zero denominator in `{text}`")));
        }
        return Ok(reduce(num, den));
    }
    if text.contains(['e', 'E']) {
        return Err(bad(format!(
            "`{text}` has no short decimal form; use a rational string like \"2/255\""
        )));
    }
    let (int_part, frac_part) = match text.split_once('.') {
        Some((i, f)) => (i, f),
        None => (text.as_str(), ""),
    };
    if frac_part.len() > 9 {
        return Err(bad(format!(
            "`{text}` has more than 9 decimal digits; use a rational string"
        )));
    }
    if !int_part.chars().all(|c| c.is_ascii_digit())
        || !frac_part.chars().all(|c| c.is_ascii_digit())
        || int_part.is_empty() && frac_part.is_empty()
    {
        return Err(bad(format!("cannot parse `{text}` as an epsilon")));
    }
    let den = 10u64.pow(frac_part.len() as u32);
    let whole: u64 = if int_part.is_empty() { 0 } else { int_part.parse().map_err(|_| bad(format!("`{text}` out of range")))? };
    let frac: u64 = if frac_part.is_empty() { 0 } else { frac_part.parse().map_err(|_| bad(format!("`{text}` out of range")))? };
    let num = whole
        .checked_mul(den)
        .and_then(|w| w.checked_add(frac))
        .ok_or_else(|| bad(format!("`{text}` out of range")))?;
    if num > u32::MAX as u64 || den > u32::MAX as u64 {
        return Err(bad(format!("`{text}` out of range")));
    }
    Ok(reduce(num as u32, den as u32))
}

fn reduce(num: u32, den: u32) -> Ratio {
    fn gcd(a: u32, b: u32) -> u32 {
        if b == 0 {
            a.max(1)
        } else {
            gcd(b, a % b)
        }
    }
    let g = gcd(num, den);
    Ratio::new(num / g, den / g)
}

// Raw (user-facing) layers: every field optional, unknown fields rejected.

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    dataset: Option<DatasetSpec>,
    arch: Option<ArchConfig>,
    train: Option<RawTrain>,
    prune: Option<RawPrune>,
    verify: Option<RawVerify>,
    seeds: Option<Vec<u64>>,
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTrain {
    method: Option<TrainMethod>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    optimizer: Option<String>,
    lr: Option<f32>,
    lr_milestones: Option<Vec<usize>>,
    lr_decay: Option<f32>,
    grad_clip: Option<f32>,
    eps: Option<EpsSpec>,
    ramp_start: Option<usize>,
    ramp_end: Option<usize>,
    regularizer: Option<Regularizer>,
    reg_weight: Option<f32>,
    slim_l1: Option<f32>,
    kappa: Option<f32>,
    fgsm_random_init: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPrune {
    method: Option<PruneMethodCfg>,
    ratio: Option<f64>,
    rounds: Option<usize>,
    taylor_chunks: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawVerify {
    eps: Option<EpsSpec>,
    samples: Option<usize>,
    max_subdomains: Option<usize>,
}

fn preset_train(preset: Preset) -> TrainConfig {
    match preset {
        Preset::Desk => TrainConfig {
            method: TrainMethod::IbpCertified,
            epochs: 60,
            batch_size: 128,
            optimizer: OptimKind::adam_default(),
            lr: 5e-3,
            lr_milestones: vec![42, 51],
            lr_decay: 0.1,
            grad_clip: 8.0,
            eps_target: Ratio::new(1, 20),
            ramp_start: 11,
            ramp_end: 48,
            regularizer: Regularizer::None,
            reg_weight: 0.01,
            slim_l1: 0.0,
            kappa: 0.5,
            fgsm_random_init: false,
            input_range: (0.0, 1.0),
            seed: 0,
        },
        Preset::Paper => TrainConfig {
            epochs: 200,
            lr: 0.01,
            lr_milestones: vec![140, 170],
            eps_target: Ratio::new(2, 255),
            ramp_start: 11,
            ramp_end: 80,
            ..preset_train(Preset::Desk)
        },
    }
}

fn preset_run(preset: Preset) -> RunConfig {
    let train = preset_train(preset);
    RunConfig {
        preset,
        dataset: DatasetSpec::TwoMoons { n: 1000, noise: 0.08, seed: 0 },
        arch: ArchConfig::Mlp {
            inputs: 2,
            hidden: vec![32, 32, 32],
            classes: 2,
            batch_norm: true,
        },
        verify: VerifyConfig {
            eps: train.eps_target,
            samples: 100,
            max_subdomains: match preset {
                Preset::Desk => 2_000,
                Preset::Paper => 20_000,
            },
        },
        prune: PruneConfig {
            method: PruneMethodCfg::Magnitude,
            ratio: 0.2,
            rounds: match preset {
                Preset::Desk => 8,
                Preset::Paper => 16,
            },
            taylor_chunks: 4,
        },
        train,
        seeds: vec![0, 1, 2, 3, 4],
        out_dir: PathBuf::from("runs"),
    }
}

fn parse_optimizer(name: &str) -> Result<OptimKind> {
    match name {
        "adam" => Ok(OptimKind::adam_default()),
        "sgd" => Ok(OptimKind::Sgd { momentum: 0.9 }),
        other => Err(Error::config(
            "train.optimizer",
            format!("unknown optimizer `{other}` (adam | sgd)"),
        )),
    }
}

fn resolve(raw: RawConfig, preset: Preset) -> Result<RunConfig> {
    let mut cfg = preset_run(preset);
    if let Some(d) = raw.dataset {
        cfg.dataset = d;
    }
    if let Some(a) = raw.arch {
        cfg.arch = a;
    }
    if let Some(t) = raw.train {
        let c = &mut cfg.train;
        macro_rules! take {
            ($field:ident, $target:ident) => {
                if let Some(v) = t.$field {
                    c.$target = v;
                }
            };
        }
        take!(method, method);
        take!(epochs, epochs);
        take!(batch_size, batch_size);
        take!(lr, lr);
        take!(lr_milestones, lr_milestones);
        take!(lr_decay, lr_decay);
        take!(grad_clip, grad_clip);
        take!(ramp_start, ramp_start);
        take!(ramp_end, ramp_end);
        take!(regularizer, regularizer);
        take!(reg_weight, reg_weight);
        take!(slim_l1, slim_l1);
        take!(kappa, kappa);
        take!(fgsm_random_init, fgsm_random_init);
        if let Some(o) = t.optimizer {
            c.optimizer = parse_optimizer(&o)?;
        }
        if let Some(e) = t.eps {
            c.eps_target = parse_ratio(&e)?;
            // The verify epsilon follows the train target unless set below.
            cfg.verify.eps = c.eps_target;
        }
    }
    if let Some(p) = raw.prune {
        if let Some(m) = p.method {
            cfg.prune.method = m;
        }
        if let Some(r) = p.ratio {
            cfg.prune.ratio = r;
        }
        if let Some(r) = p.rounds {
            cfg.prune.rounds = r;
        }
        if let Some(c) = p.taylor_chunks {
            cfg.prune.taylor_chunks = c;
        }
    }
    if let Some(v) = raw.verify {
        if let Some(e) = v.eps {
            cfg.verify.eps = parse_ratio(&e)?;
        }
        if let Some(s) = v.samples {
            cfg.verify.samples = s;
        }
        if let Some(m) = v.max_subdomains {
            cfg.verify.max_subdomains = m;
        }
    }
    if let Some(s) = raw.seeds {
        cfg.seeds = s;
    }
    if let Some(o) = raw.out_dir {
        cfg.out_dir = o;
    }
    validate(&cfg)?;
    Ok(cfg)
}

fn validate(cfg: &RunConfig) -> Result<()> {
    cfg.train.validate()?;
    cfg.arch.build()?;
    if cfg.seeds.is_empty() {
        return Err(Error::config("seeds", "at least one seed required"));
    }
    if !(0.0..1.0).contains(&cfg.prune.ratio) {
        return Err(Error::config("prune.ratio", "must lie in [0, 1)"));
    }
    if cfg.prune.rounds == 0 {
        return Err(Error::config("prune.rounds", "must be positive"));
    }
    if cfg.prune.method == PruneMethodCfg::Taylor && cfg.prune.taylor_chunks == 0 {
        return Err(Error::config("prune.taylor_chunks", "must be positive"));
    }
    if cfg.verify.samples == 0 || cfg.verify.max_subdomains == 0 {
        return Err(Error::config("verify", "samples and max_subdomains must be positive"));
    }
    match &cfg.dataset {
        DatasetSpec::TwoMoons { n, noise, .. } => {
            if *n < 10 {
                return Err(Error::config("dataset.n", "need at least 10 points"));
            }
            if !(*noise >= 0.0) {
                return Err(Error::config("dataset.noise", "must be nonnegative"));
            }
        }
        DatasetSpec::Idx { images, labels, .. } => {
            for (key, path) in [("dataset.images", images), ("dataset.labels", labels)] {
                if !path.exists() {
                    return Err(Error::config(
                        key,
                        format!("file not found: {}", path.display()),
                    ));
                }
            }
        }
    }
    if let (ArchConfig::Mlp { inputs, .. }, DatasetSpec::TwoMoons { .. }) =
        (&cfg.arch, &cfg.dataset)
    {
        if *inputs != 2 {
            return Err(Error::config("arch.inputs", "two-moons inputs are 2-dimensional"));
        }
    }
    Ok(())
}

/// Parse a config file against a preset; with no file, the preset's own
/// defaults. Unknown keys and invalid values fail with the key named.
pub fn load_config(path: Option<&Path>, preset: Preset) -> Result<RunConfig> {
    let raw = match path {
        None => RawConfig::default(),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| {
                Error::config(p.display().to_string(), format!("cannot read: {e}"))
            })?;
            serde_json::from_str(&text)
                .map_err(|e| Error::config(p.display().to_string(), e.to_string()))?
        }
    };
    resolve(raw, preset)
}

impl RunConfig {
    /// Canonical JSON of every resolved field; what the run directory
    /// records as the effective config.
    pub fn effective_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// First 12 hex chars of the SHA-256 of the effective config; names the
    /// run directory.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.effective_json().as_bytes());
        let out = h.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect::<String>()[..12].to_string()
    }
}
