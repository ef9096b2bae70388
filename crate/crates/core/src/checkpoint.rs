//! Checkpoint serialization: a single JSON document holding the architecture,
//! parameters, masks, rewind snapshot, batch-norm running stats, and run
//! metadata.
//!
//! Float buffers are little-endian f32 bytes in base64. Masks pack one bit
//! per weight in row-major order, LSB first within each byte, zero-padded;
//! padding bits must decode to zero. Serialization is deterministic, so
//! save(load(x)) reproduces x byte for byte.

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::arch::{ArchSpec, LayerKind};
use crate::error::{Error, Result};
use crate::network::{LayerParams, Network, PruneScope};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epoch: usize,
    pub prune_round: usize,
    pub config_digest: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format_version: u32,
    arch: ArchSpec,
    params: Vec<Option<ParamBlob>>,
    masks: Vec<Option<String>>,
    snapshot: SnapshotBlob,
    bn_running: Vec<Option<BnRunningBlob>>,
    meta: CheckpointMeta,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ParamBlob {
    Weight { w: String, b: String },
    Norm { gamma: String, beta: String },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SnapshotBlob {
    params: Vec<Option<ParamBlob>>,
    bn_running: Vec<Option<BnRunningBlob>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BnRunningBlob {
    mean: String,
    var: String,
}

fn encode_f32(t: &Tensor) -> String {
    let mut bytes = Vec::with_capacity(t.len() * 4);
    for v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    B64.encode(bytes)
}

fn decode_f32(field: &str, s: &str, expect: usize) -> Result<Vec<f32>> {
    let bytes = B64
        .decode(s)
        .map_err(|e| Error::checkpoint(field, format!("bad base64: {e}")))?;
    if bytes.len() != expect * 4 {
        return Err(Error::checkpoint(
            field,
            format!("expected {} bytes, got {}", expect * 4, bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn encode_mask(t: &Tensor) -> String {
    let mut bytes = vec![0u8; t.len().div_ceil(8)];
    for (i, &v) in t.data().iter().enumerate() {
        if v != 0.0 {
            bytes[i / 8] |= 1 << (i % 8);
        }
    }
    B64.encode(bytes)
}

fn decode_mask(field: &str, s: &str, expect: usize) -> Result<Vec<f32>> {
    let bytes = B64
        .decode(s)
        .map_err(|e| Error::checkpoint(field, format!("bad base64: {e}")))?;
    if bytes.len() != expect.div_ceil(8) {
        return Err(Error::checkpoint(
            field,
            format!("expected {} mask bytes, got {}", expect.div_ceil(8), bytes.len()),
        ));
    }
    for i in expect..bytes.len() * 8 {
        if bytes[i / 8] & (1 << (i % 8)) != 0 {
            return Err(Error::checkpoint(field, "nonzero padding bits".to_string()));
        }
    }
    Ok((0..expect)
        .map(|i| {
            if bytes[i / 8] & (1 << (i % 8)) != 0 {
                1.0
            } else {
                0.0
            }
        })
        .collect())
}

fn params_to_blobs(params: &[LayerParams]) -> Vec<Option<ParamBlob>> {
    params
        .iter()
        .map(|p| match p {
            LayerParams::Affine { w, b } | LayerParams::Conv { w, b } => Some(ParamBlob::Weight {
                w: encode_f32(w),
                b: encode_f32(b),
            }),
            LayerParams::BatchNorm { gamma, beta, .. } => Some(ParamBlob::Norm {
                gamma: encode_f32(gamma),
                beta: encode_f32(beta),
            }),
            LayerParams::None => None,
        })
        .collect()
}

fn bn_running_to_blobs(params: &[LayerParams]) -> Vec<Option<BnRunningBlob>> {
    params
        .iter()
        .map(|p| match p {
            LayerParams::BatchNorm { running_mean, running_var, .. } => Some(BnRunningBlob {
                mean: encode_f32(running_mean),
                var: encode_f32(running_var),
            }),
            _ => None,
        })
        .collect()
}

/// Reassemble layer params from blobs, validating shapes against the arch.
fn blobs_to_params(
    arch: &ArchSpec,
    section: &str,
    blobs: &[Option<ParamBlob>],
    running: &[Option<BnRunningBlob>],
) -> Result<Vec<LayerParams>> {
    if blobs.len() != arch.layers.len() || running.len() != arch.layers.len() {
        return Err(Error::checkpoint(
            section,
            format!(
                "expected {} layer entries, got {}/{}",
                arch.layers.len(),
                blobs.len(),
                running.len()
            ),
        ));
    }
    let mut out = Vec::with_capacity(blobs.len());
    for (i, layer) in arch.layers.iter().enumerate() {
        let field = |name: &str| format!("{section}[{i}].{name}");
        let param = match (layer, &blobs[i]) {
            (LayerKind::Affine { in_features, out_features }, Some(ParamBlob::Weight { w, b })) => {
                LayerParams::Affine {
                    w: Tensor::new(
                        vec![*out_features, *in_features],
                        decode_f32(&field("w"), w, out_features * in_features)?,
                    )?,
                    b: Tensor::from_vec(decode_f32(&field("b"), b, *out_features)?),
                }
            }
            (
                LayerKind::Conv2d { in_channels, out_channels, kernel, .. },
                Some(ParamBlob::Weight { w, b }),
            ) => {
                let n = out_channels * in_channels * kernel * kernel;
                LayerParams::Conv {
                    w: Tensor::new(
                        vec![*out_channels, *in_channels, *kernel, *kernel],
                        decode_f32(&field("w"), w, n)?,
                    )?,
                    b: Tensor::from_vec(decode_f32(&field("b"), b, *out_channels)?),
                }
            }
            (LayerKind::BatchNorm { features }, Some(ParamBlob::Norm { gamma, beta })) => {
                let run = running[i].as_ref().ok_or_else(|| {
                    Error::checkpoint(field("running"), "missing running stats".to_string())
                })?;
                LayerParams::BatchNorm {
                    gamma: Tensor::from_vec(decode_f32(&field("gamma"), gamma, *features)?),
                    beta: Tensor::from_vec(decode_f32(&field("beta"), beta, *features)?),
                    running_mean: Tensor::from_vec(decode_f32(&field("mean"), &run.mean, *features)?),
                    running_var: Tensor::from_vec(decode_f32(&field("var"), &run.var, *features)?),
                }
            }
            (LayerKind::Relu | LayerKind::Flatten, None) => LayerParams::None,
            _ => {
                return Err(Error::checkpoint(
                    field("kind"),
                    "blob does not match the layer kind".to_string(),
                ))
            }
        };
        out.push(param);
    }
    Ok(out)
}

pub fn checkpoint_bytes(net: &Network, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let masks = net
        .masks
        .iter()
        .map(|m| m.as_ref().map(encode_mask))
        .collect();
    let file = CheckpointFile {
        format_version: FORMAT_VERSION,
        arch: net.arch.clone(),
        params: params_to_blobs(&net.params),
        masks,
        snapshot: SnapshotBlob {
            params: params_to_blobs(net.snapshot()),
            bn_running: bn_running_to_blobs(net.snapshot()),
        },
        bn_running: bn_running_to_blobs(&net.params),
        meta: meta.clone(),
    };
    Ok(serde_json::to_vec(&file)?)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(Network, CheckpointMeta)> {
    let file: CheckpointFile = serde_json::from_slice(bytes)?;
    if file.format_version != FORMAT_VERSION {
        return Err(Error::checkpoint(
            "format_version",
            format!("expected {FORMAT_VERSION}, got {}", file.format_version),
        ));
    }
    file.arch.validate()?;
    let params = blobs_to_params(&file.arch, "params", &file.params, &file.bn_running)?;
    let snapshot = blobs_to_params(
        &file.arch,
        "snapshot.params",
        &file.snapshot.params,
        &file.snapshot.bn_running,
    )?;
    if file.masks.len() != file.arch.layers.len() {
        return Err(Error::checkpoint(
            "masks",
            format!(
                "expected {} entries, got {}",
                file.arch.layers.len(),
                file.masks.len()
            ),
        ));
    }
    let mut masks = Vec::with_capacity(file.masks.len());
    for (i, (blob, param)) in file.masks.iter().zip(&params).enumerate() {
        let mask = match (blob, param) {
            (Some(s), LayerParams::Affine { w, .. } | LayerParams::Conv { w, .. }) => Some(
                Tensor::new(
                    w.shape().to_vec(),
                    decode_mask(&format!("masks[{i}]"), s, w.len())?,
                )?,
            ),
            (None, LayerParams::BatchNorm { .. } | LayerParams::None) => None,
            _ => {
                return Err(Error::checkpoint(
                    format!("masks[{i}]"),
                    "mask presence does not match the layer kind".to_string(),
                ))
            }
        };
        masks.push(mask);
    }
    // The file stores a mask for every weight tensor, so the widest scope
    // is the one that matches what was saved.
    let mut net = Network::build(file.arch, file.meta.seed, PruneScope::ConvAndAffine)?;
    net.params = params;
    net.masks = masks;
    *net.snapshot_mut() = snapshot;
    Ok((net, file.meta))
}

pub fn save_checkpoint(net: &Network, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, checkpoint_bytes(net, meta)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Network, CheckpointMeta)> {
    let bytes = fs::read(path)?;
    checkpoint_from_bytes(&bytes)
}
