use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "layer", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv { kernel: [usize; 2], filters: usize, padding: usize },
    Relu,
    MaxPool { window: [usize; 2] },
    Flatten,
    FullyConnected { units: usize },
    Dropout { rate: f64 },
    SigmoidOutput,
    SoftmaxOutput,
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::Flatten => "flatten",
            LayerSpec::FullyConnected { .. } => "fully_connected",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::SigmoidOutput => "sigmoid_output",
            LayerSpec::SoftmaxOutput => "softmax_output",
        }
    }

    pub fn is_output(&self) -> bool {
        matches!(self, LayerSpec::SigmoidOutput | LayerSpec::SoftmaxOutput)
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. } | LayerSpec::FullyConnected { .. })
    }

    /// Per-sample output shape given the per-sample input shape.
    pub fn output_shape(&self, index: usize, input: &[usize]) -> Result<Vec<usize>> {
        let err = |detail: String| Error::Layer { layer: index, kind: self.kind(), detail };
        match self {
            LayerSpec::Conv { kernel: [kh, kw], filters, padding } => {
                let &[h, w, _c] = input else {
                    return Err(err(format!("expects an HxWxC input, got {input:?}")));
                };
                let (ph, pw) = (h + 2 * padding, w + 2 * padding);
                if *kh == 0 || *kw == 0 || *filters == 0 {
                    return Err(err("kernel size and filter count must be positive".into()));
                }
                if *kh > ph || *kw > pw {
                    return Err(err(format!("{kh}x{kw} filter larger than padded input {ph}x{pw}")));
                }
                Ok(vec![ph - kh + 1, pw - kw + 1, *filters])
            }
            LayerSpec::MaxPool { window: [ph, pw] } => {
                let &[h, w, c] = input else {
                    return Err(err(format!("expects an HxWxC input, got {input:?}")));
                };
                if *ph == 0 || *pw == 0 || h % ph != 0 || w % pw != 0 {
                    return Err(err(format!("window {ph}x{pw} does not divide {h}x{w}")));
                }
                Ok(vec![h / ph, w / pw, c])
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::FullyConnected { units } => {
                if input.len() != 1 {
                    return Err(err(format!("expects a flat input, got {input:?}")));
                }
                if *units == 0 {
                    return Err(err("unit count must be positive".into()));
                }
                Ok(vec![*units])
            }
            LayerSpec::Dropout { rate } => {
                if !(0.0..1.0).contains(rate) {
                    return Err(err(format!("rate {rate} outside [0, 1)")));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::SigmoidOutput => match input {
                [1] => Ok(vec![1]),
                _ => Err(err(format!("needs exactly one input unit, got {input:?}"))),
            },
            LayerSpec::SoftmaxOutput => match input {
                [k] if *k >= 2 => Ok(vec![*k]),
                _ => Err(err(format!("needs a flat input of at least 2 units, got {input:?}"))),
            },
        }
    }
}

/// Per-sample shapes after each layer of `layers`, starting from `input`.
/// `offset` is the global index of `layers[0]`, used in error messages.
pub fn infer_shapes(layers: &[LayerSpec], offset: usize, input: &[usize]) -> Result<Vec<Vec<usize>>> {
    let mut shapes = Vec::with_capacity(layers.len());
    let mut current = input.to_vec();
    for (i, layer) in layers.iter().enumerate() {
        current = layer.output_shape(offset + i, &current)?;
        shapes.push(current.clone());
    }
    Ok(shapes)
}

/// A layer stack with a marker splitting it into a convolutional part
/// (`layers[..split]`) and a fully connected part (`layers[split..]`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Per-sample input shape, `H x W x C`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub split: usize,
}

impl NetworkSpec {
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>, split: usize) -> Result<Self> {
        let spec = Self { input_shape, layers, split };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_shape.len() != 3 || self.input_shape.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("input shape {:?} is not HxWxC", self.input_shape)));
        }
        let outputs: Vec<usize> =
            self.layers.iter().enumerate().filter(|(_, l)| l.is_output()).map(|(i, _)| i).collect();
        if outputs.len() != 1 || outputs[0] + 1 != self.layers.len() {
            return Err(Error::Config("network needs exactly one output layer, at the end".into()));
        }
        if self.split > self.layers.len() {
            return Err(Error::Config(format!("split {} beyond {} layers", self.split, self.layers.len())));
        }
        if let Some(first_fc) =
            self.layers.iter().position(|l| matches!(l, LayerSpec::FullyConnected { .. }))
        {
            if self.split > first_fc {
                return Err(Error::Config(format!(
                    "conv/fc split {} must precede the first fully_connected layer ({first_fc})",
                    self.split
                )));
            }
        }
        infer_shapes(&self.layers, 0, &self.input_shape)?;
        Ok(())
    }

    pub fn conv_layers(&self) -> &[LayerSpec] {
        &self.layers[..self.split]
    }

    pub fn fc_layers(&self) -> &[LayerSpec] {
        &self.layers[self.split..]
    }

    /// Per-sample shape leaving the convolutional part.
    pub fn conv_output_shape(&self) -> Result<Vec<usize>> {
        Ok(infer_shapes(self.conv_layers(), 0, &self.input_shape)?
            .pop()
            .unwrap_or_else(|| self.input_shape.clone()))
    }

    pub fn output_units(&self) -> usize {
        infer_shapes(&self.layers, 0, &self.input_shape)
            .ok()
            .and_then(|s| s.last().map(|v| v[0]))
            .unwrap_or(0)
    }

    pub fn output_layer(&self) -> &LayerSpec {
        self.layers.last().expect("validated spec has an output layer")
    }

    /// Stable 64-bit digest of the spec, used to match caches to networks.
    pub fn fingerprint(&self) -> u64 {
        fnv1a(serde_json::to_string(self).expect("spec serializes").as_bytes())
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3))
}

/// Convolutional stack of the NIST column: three 3x3 conv layers with 32, 64
/// and 128 filters, each followed by ReLU, 2x2 max pooling and dropout, then
/// flatten. Padding 1 keeps 32x32 inputs divisible by every pooling stage.
pub fn nist_conv_part(conv_dropout: f64) -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    for filters in [32, 64, 128] {
        layers.push(LayerSpec::Conv { kernel: [3, 3], filters, padding: 1 });
        layers.push(LayerSpec::Relu);
        layers.push(LayerSpec::MaxPool { window: [2, 2] });
        layers.push(LayerSpec::Dropout { rate: conv_dropout });
    }
    layers.push(LayerSpec::Flatten);
    layers
}

/// Hidden FC block of the NIST column (800 units), without the output head.
pub fn nist_fc_hidden(fc_dropout: f64) -> Vec<LayerSpec> {
    vec![
        LayerSpec::FullyConnected { units: 800 },
        LayerSpec::Relu,
        LayerSpec::Dropout { rate: fc_dropout },
    ]
}

pub const DEFAULT_CONV_DROPOUT: f64 = 0.15;
pub const DEFAULT_FC_DROPOUT: f64 = 0.5;

/// Classification CNN over `classes` classes on 32x32x1 inputs.
pub fn nist_classifier(classes: usize) -> Result<NetworkSpec> {
    let mut layers = nist_conv_part(DEFAULT_CONV_DROPOUT);
    let split = layers.len();
    layers.extend(nist_fc_hidden(DEFAULT_FC_DROPOUT));
    layers.push(LayerSpec::FullyConnected { units: classes });
    layers.push(LayerSpec::SoftmaxOutput);
    NetworkSpec::new(vec![32, 32, 1], layers, split)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nist_shapes() {
        let spec = nist_classifier(5).unwrap();
        assert_eq!(spec.conv_output_shape().unwrap(), vec![2048]);
        assert_eq!(spec.output_units(), 5);
        assert!(spec.fc_layers().iter().any(|l| *l == LayerSpec::FullyConnected { units: 800 }));
    }

    #[test]
    fn output_must_be_last_and_unique() {
        let layers = vec![
            LayerSpec::Flatten,
            LayerSpec::FullyConnected { units: 1 },
            LayerSpec::SigmoidOutput,
            LayerSpec::Relu,
        ];
        assert!(NetworkSpec::new(vec![2, 2, 1], layers, 1).is_err());
        let two = vec![
            LayerSpec::Flatten,
            LayerSpec::FullyConnected { units: 1 },
            LayerSpec::SigmoidOutput,
            LayerSpec::SigmoidOutput,
        ];
        assert!(NetworkSpec::new(vec![2, 2, 1], two, 1).is_err());
    }

    #[test]
    fn split_must_precede_first_fc() {
        let layers =
            vec![LayerSpec::Flatten, LayerSpec::FullyConnected { units: 1 }, LayerSpec::SigmoidOutput];
        assert!(NetworkSpec::new(vec![2, 2, 1], layers.clone(), 1).is_ok());
        assert!(NetworkSpec::new(vec![2, 2, 1], layers, 2).is_err());
    }

    #[test]
    fn dropout_rate_range() {
        let mk = |rate| {
            NetworkSpec::new(
                vec![2, 2, 1],
                vec![
                    LayerSpec::Flatten,
                    LayerSpec::Dropout { rate },
                    LayerSpec::FullyConnected { units: 1 },
                    LayerSpec::SigmoidOutput,
                ],
                1,
            )
        };
        assert!(mk(0.0).is_ok());
        assert!(mk(0.99).is_ok());
        assert!(mk(1.0).is_err());
        assert!(mk(-0.1).is_err());
    }

    #[test]
    fn layer_errors_name_index() {
        let layers = vec![
            LayerSpec::Conv { kernel: [3, 3], filters: 2, padding: 0 },
            LayerSpec::MaxPool { window: [2, 2] },
            LayerSpec::Flatten,
            LayerSpec::FullyConnected { units: 1 },
            LayerSpec::SigmoidOutput,
        ];
        let err = NetworkSpec::new(vec![7, 7, 1], layers, 3).unwrap_err().to_string();
        assert!(err.contains("layer 1"), "{err}");
    }

    #[test]
    fn serde_round_trip() {
        let spec = nist_classifier(10).unwrap();
        let text = serde_json::to_string(&spec).unwrap();
        let back: NetworkSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, spec);
        assert_eq!(back.fingerprint(), spec.fingerprint());
    }
}
