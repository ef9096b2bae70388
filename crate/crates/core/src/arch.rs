//! Architecture descriptions: ordered layer descriptors plus input shape and
//! class count. Validation walks the layer list once and rejects any
//! composition whose shapes do not chain.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::conv_out_dim;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Affine {
        in_features: usize,
        out_features: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    /// Per-channel norm; `features` is the channel count after a conv or the
    /// feature count after an affine.
    BatchNorm { features: usize },
    Relu,
    Flatten,
}

impl LayerKind {
    pub fn is_relu(&self) -> bool {
        matches!(self, LayerKind::Relu)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    /// Shape of one sample, no batch dim: `[features]` or `[c, h, w]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerKind>,
    pub num_classes: usize,
}

impl ArchSpec {
    /// Output shape of every layer, starting after layer 0. Errors name the
    /// offending layer.
    pub fn output_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = self.input_shape.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        let bad = |layer: usize, reason: String| Error::InvalidArch { layer, reason };
        for (i, layer) in self.layers.iter().enumerate() {
            shape = match layer {
                LayerKind::Affine { in_features, out_features } => {
                    if shape.len() != 1 || shape[0] != *in_features {
                        return Err(bad(i, format!(
                            "affine expects [{in_features}], got {shape:?}"
                        )));
                    }
                    vec![*out_features]
                }
                LayerKind::Conv2d { in_channels, out_channels, kernel, stride, padding } => {
                    if shape.len() != 3 || shape[0] != *in_channels {
                        return Err(bad(i, format!(
                            "conv2d expects [{in_channels}, h, w], got {shape:?}"
                        )));
                    }
                    let oh = conv_out_dim(shape[1], *kernel, *stride, *padding)
                        .map_err(|e| bad(i, e.to_string()))?;
                    let ow = conv_out_dim(shape[2], *kernel, *stride, *padding)
                        .map_err(|e| bad(i, e.to_string()))?;
                    vec![*out_channels, oh, ow]
                }
                LayerKind::BatchNorm { features } => {
                    if shape[0] != *features {
                        return Err(bad(i, format!(
                            "batch norm over {features} features, input {shape:?}"
                        )));
                    }
                    shape
                }
                LayerKind::Relu => {
                    let ok = i > 0
                        && matches!(
                            self.layers[i - 1],
                            LayerKind::Affine { .. }
                                | LayerKind::Conv2d { .. }
                                | LayerKind::BatchNorm { .. }
                        );
                    if !ok {
                        return Err(bad(i, "relu must follow affine, conv, or batch norm".into()));
                    }
                    shape
                }
                LayerKind::Flatten => {
                    vec![shape.iter().product()]
                }
            };
            out.push(shape.clone());
        }
        match out.last() {
            Some(last) if last == &[self.num_classes] => Ok(out),
            _ => Err(bad(
                self.layers.len().saturating_sub(1),
                format!(
                    "network must end in an affine with {} outputs",
                    self.num_classes
                ),
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.layers.last(), Some(LayerKind::Affine { .. })) {
            return Err(Error::InvalidArch {
                layer: self.layers.len().saturating_sub(1),
                reason: "final layer must be affine".into(),
            });
        }
        self.output_shapes().map(|_| ())
    }

    /// Positions of ReLU layers, in network order.
    pub fn relu_positions(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_relu())
            .map(|(i, _)| i)
            .collect()
    }

    /// The batch-norm layer directly before a ReLU position, if any.
    pub fn bn_before_relu(&self, relu_pos: usize) -> Option<usize> {
        if relu_pos >= 1 && matches!(self.layers[relu_pos - 1], LayerKind::BatchNorm { .. }) {
            Some(relu_pos - 1)
        } else {
            None
        }
    }

    /// MLP: affine (+ optional BN) + ReLU per hidden width, final affine.
    pub fn mlp(input_features: usize, hidden: &[usize], num_classes: usize, batch_norm: bool) -> Self {
        let mut layers = Vec::new();
        let mut prev = input_features;
        for &width in hidden {
            layers.push(LayerKind::Affine { in_features: prev, out_features: width });
            if batch_norm {
                layers.push(LayerKind::BatchNorm { features: width });
            }
            layers.push(LayerKind::Relu);
            prev = width;
        }
        layers.push(LayerKind::Affine { in_features: prev, out_features: num_classes });
        ArchSpec {
            input_shape: vec![input_features],
            layers,
            num_classes,
        }
    }

    fn conv_block(
        layers: &mut Vec<LayerKind>,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    ) {
        layers.push(LayerKind::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: 1,
        });
        layers.push(LayerKind::BatchNorm { features: out_channels });
        layers.push(LayerKind::Relu);
    }

    /// Two conv blocks and two fully connected layers; the desk-scale conv net.
    pub fn cnn_small(in_channels: usize, height: usize, width: usize, num_classes: usize) -> Result<Self> {
        let mut layers = Vec::new();
        Self::conv_block(&mut layers, in_channels, 8, 4, 2);
        Self::conv_block(&mut layers, 8, 16, 4, 2);
        let oh = conv_out_dim(conv_out_dim(height, 4, 2, 1)?, 4, 2, 1)?;
        let ow = conv_out_dim(conv_out_dim(width, 4, 2, 1)?, 4, 2, 1)?;
        let feats = 16 * oh * ow;
        layers.push(LayerKind::Flatten);
        layers.push(LayerKind::Affine { in_features: feats, out_features: 100 });
        layers.push(LayerKind::Relu);
        layers.push(LayerKind::Affine { in_features: 100, out_features: num_classes });
        let spec = ArchSpec {
            input_shape: vec![in_channels, height, width],
            layers,
            num_classes,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Seven-layer benchmark net: five conv blocks then FC(100) and the
    /// classifier. All convs use padding 1.
    pub fn cnn7(in_channels: usize, height: usize, width: usize, num_classes: usize) -> Result<Self> {
        let mut layers = Vec::new();
        Self::conv_block(&mut layers, in_channels, 32, 3, 1);
        Self::conv_block(&mut layers, 32, 64, 4, 2);
        Self::conv_block(&mut layers, 64, 64, 3, 1);
        Self::conv_block(&mut layers, 64, 128, 4, 2);
        Self::conv_block(&mut layers, 128, 128, 4, 2);
        let mut h = height;
        let mut w = width;
        for (k, s) in [(3, 1), (4, 2), (3, 1), (4, 2), (4, 2)] {
            h = conv_out_dim(h, k, s, 1)?;
            w = conv_out_dim(w, k, s, 1)?;
        }
        let feats = 128 * h * w;
        layers.push(LayerKind::Flatten);
        layers.push(LayerKind::Affine { in_features: feats, out_features: 100 });
        layers.push(LayerKind::Relu);
        layers.push(LayerKind::Affine { in_features: 100, out_features: num_classes });
        let spec = ArchSpec {
            input_shape: vec![in_channels, height, width],
            layers,
            num_classes,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cnn7_flatten_widths() {
        let rgb = ArchSpec::cnn7(3, 32, 32, 10).unwrap();
        let feats = rgb.layers.iter().find_map(|l| match l {
            LayerKind::Affine { in_features, out_features: 100 } => Some(*in_features),
            _ => None,
        });
        assert_eq!(feats, Some(2048));

        let gray = ArchSpec::cnn7(1, 28, 28, 10).unwrap();
        let feats = gray.layers.iter().find_map(|l| match l {
            LayerKind::Affine { in_features, out_features: 100 } => Some(*in_features),
            _ => None,
        });
        assert_eq!(feats, Some(1152));
    }

    #[test]
    fn mlp_shapes_chain() {
        let spec = ArchSpec::mlp(2, &[32, 32, 32], 2, true);
        assert!(spec.validate().is_ok());
        assert_eq!(spec.relu_positions().len(), 3);
        for pos in spec.relu_positions() {
            assert!(spec.bn_before_relu(pos).is_some());
        }
    }

    #[test]
    fn relu_without_preceding_linear_rejected() {
        let spec = ArchSpec {
            input_shape: vec![4],
            layers: vec![LayerKind::Relu, LayerKind::Affine { in_features: 4, out_features: 2 }],
            num_classes: 2,
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn class_count_mismatch_rejected() {
        let spec = ArchSpec {
            input_shape: vec![4],
            layers: vec![LayerKind::Affine { in_features: 4, out_features: 3 }],
            num_classes: 2,
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn arch_spec_json_roundtrip() {
        let spec = ArchSpec::mlp(2, &[8], 2, true);
        let json = serde_json::to_string(&spec).unwrap();
        let back: ArchSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(spec, back);
    }
}
