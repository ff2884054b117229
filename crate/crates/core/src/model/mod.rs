//! Architecture descriptions, parameters and forward passes.
//!
//! Every forward pass returns both the logits and the penultimate feature
//! map, the activation that feeds the final dense classifier.

pub mod checkpoint;
mod params;

pub use params::{
    forward, forward_tape, init, ClassifierView, ForwardOutput, ForwardVars, ParamInfo, ParamRole,
    ParamVars, Parameters,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    Spec(String),
    #[error("unknown preset `{0}` (expected mlp-tiny, mlp-small, mlp-teacher or cnn-small)")]
    UnknownPreset(String),
    #[error("input batch has {got} features per sample, model expects {expected}")]
    InputWidth { expected: usize, got: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Layer {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    AvgPool {
        size: usize,
    },
    GlobalAvgPool,
    Flatten,
}

impl Layer {
    pub fn has_params(&self) -> bool {
        matches!(self, Layer::Dense { .. } | Layer::Conv { .. })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InputShape {
    Flat { dim: usize },
    Image { channels: usize, height: usize, width: usize },
}

impl InputShape {
    pub fn width(&self) -> usize {
        match *self {
            InputShape::Flat { dim } => dim,
            InputShape::Image {
                channels,
                height,
                width,
            } => channels * height * width,
        }
    }
}

/// A validated layer stack ending in a dense classifier.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: String,
    pub input: InputShape,
    pub layers: Vec<Layer>,
    pub classes: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Shape {
    Flat(usize),
    Image(usize, usize, usize),
}

impl ModelSpec {
    pub fn new(name: impl Into<String>, input: InputShape, layers: Vec<Layer>, classes: usize) -> Result<Self> {
        let spec = ModelSpec {
            name: name.into(),
            input,
            layers,
            classes,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Checks that layer shapes chain and that the stack ends in a dense
    /// `M -> classes` layer.
    pub fn validate(&self) -> Result<()> {
        let err = |i: usize, msg: String| ModelError::Spec(format!("layer {i}: {msg}"));
        if self.classes == 0 {
            return Err(ModelError::Spec("class count must be positive".into()));
        }
        let mut shape = match self.input {
            InputShape::Flat { dim } if dim > 0 => Shape::Flat(dim),
            InputShape::Image {
                channels,
                height,
                width,
            } if channels * height * width > 0 => Shape::Image(channels, height, width),
            _ => return Err(ModelError::Spec("input shape must be nonempty".into())),
        };
        for (i, layer) in self.layers.iter().enumerate() {
            shape = match (*layer, shape) {
                (Layer::Dense { inputs, outputs }, Shape::Flat(d)) => {
                    if inputs != d || outputs == 0 {
                        return Err(err(i, format!("dense expects {inputs} inputs, receives {d}")));
                    }
                    Shape::Flat(outputs)
                }
                (
                    Layer::Conv {
                        in_ch,
                        out_ch,
                        kernel,
                        stride,
                        pad,
                    },
                    Shape::Image(c, h, w),
                ) => {
                    if in_ch != c || out_ch == 0 || kernel == 0 || stride == 0 {
                        return Err(err(i, format!("conv expects {in_ch} channels, receives {c}")));
                    }
                    if h + 2 * pad < kernel || w + 2 * pad < kernel {
                        return Err(err(i, "kernel larger than padded input".into()));
                    }
                    Shape::Image(
                        out_ch,
                        (h + 2 * pad - kernel) / stride + 1,
                        (w + 2 * pad - kernel) / stride + 1,
                    )
                }
                (Layer::Relu, s) => s,
                (Layer::AvgPool { size }, Shape::Image(c, h, w)) => {
                    if size == 0 || h % size != 0 || w % size != 0 {
                        return Err(err(i, format!("pool size {size} does not divide {h}x{w}")));
                    }
                    Shape::Image(c, h / size, w / size)
                }
                (Layer::GlobalAvgPool, Shape::Image(c, _, _)) => Shape::Flat(c),
                (Layer::Flatten, Shape::Image(c, h, w)) => Shape::Flat(c * h * w),
                (Layer::Flatten, s @ Shape::Flat(_)) => s,
                (l, s) => return Err(err(i, format!("{l:?} cannot follow shape {s:?}"))),
            };
        }
        match self.layers.last() {
            Some(&Layer::Dense { outputs, .. }) if outputs == self.classes => Ok(()),
            _ => Err(ModelError::Spec(format!(
                "last layer must be dense with {} outputs",
                self.classes
            ))),
        }
    }

    /// Width `M` of the feature map feeding the classifier.
    pub fn feature_dim(&self) -> usize {
        match self.layers.last() {
            Some(&Layer::Dense { inputs, .. }) => inputs,
            _ => 0,
        }
    }

    pub fn classifier_layer(&self) -> usize {
        self.layers.len() - 1
    }
}

pub const PRESETS: [&str; 4] = ["mlp-tiny", "mlp-small", "mlp-teacher", "cnn-small"];

fn mlp(name: &str, input: InputShape, hidden: &[usize], classes: usize) -> Result<ModelSpec> {
    let mut layers = Vec::new();
    let mut width = input.width();
    if matches!(input, InputShape::Image { .. }) {
        layers.push(Layer::Flatten);
    }
    for &h in hidden {
        layers.push(Layer::Dense {
            inputs: width,
            outputs: h,
        });
        layers.push(Layer::Relu);
        width = h;
    }
    layers.push(Layer::Dense {
        inputs: width,
        outputs: classes,
    });
    ModelSpec::new(name, input, layers, classes)
}

/// Built-in architectures. `mlp-small`, `mlp-teacher` and `cnn-small` share
/// a 100-wide feature map so any of them can distil into any other.
pub fn preset(name: &str, input: InputShape, classes: usize) -> Result<ModelSpec> {
    match name {
        "mlp-tiny" => mlp(name, input, &[16, 8], classes),
        "mlp-small" => mlp(name, input, &[300, 100], classes),
        "mlp-teacher" => mlp(name, input, &[800, 300, 100], classes),
        "cnn-small" => {
            let InputShape::Image {
                channels,
                height,
                width,
            } = input
            else {
                return Err(ModelError::Spec("cnn-small needs an image input shape".into()));
            };
            if height % 4 != 0 || width % 4 != 0 {
                return Err(ModelError::Spec("cnn-small needs height and width divisible by 4".into()));
            }
            let flat = 16 * (height / 4) * (width / 4);
            let layers = vec![
                Layer::Conv {
                    in_ch: channels,
                    out_ch: 8,
                    kernel: 3,
                    stride: 1,
                    pad: 1,
                },
                Layer::Relu,
                Layer::AvgPool { size: 2 },
                Layer::Conv {
                    in_ch: 8,
                    out_ch: 16,
                    kernel: 3,
                    stride: 1,
                    pad: 1,
                },
                Layer::Relu,
                Layer::AvgPool { size: 2 },
                Layer::Flatten,
                Layer::Dense {
                    inputs: flat,
                    outputs: 100,
                },
                Layer::Relu,
                Layer::Dense {
                    inputs: 100,
                    outputs: classes,
                },
            ];
            ModelSpec::new(name, input, layers, classes)
        }
        other => Err(ModelError::UnknownPreset(other.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_share_feature_width() {
        let flat = InputShape::Flat { dim: 784 };
        let img = InputShape::Image {
            channels: 1,
            height: 28,
            width: 28,
        };
        let small = preset("mlp-small", flat, 10).unwrap();
        let teacher = preset("mlp-teacher", flat, 10).unwrap();
        let cnn = preset("cnn-small", img, 10).unwrap();
        assert_eq!(small.feature_dim(), 100);
        assert_eq!(teacher.feature_dim(), 100);
        assert_eq!(cnn.feature_dim(), 100);
        assert!(preset("cnn-small", flat, 10).is_err());
        assert!(matches!(preset("vgg19", flat, 10), Err(ModelError::UnknownPreset(_))));
    }

    #[test]
    fn rejects_broken_chains() {
        let flat = InputShape::Flat { dim: 4 };
        let bad = ModelSpec::new(
            "x",
            flat,
            vec![
                Layer::Dense { inputs: 4, outputs: 3 },
                Layer::Dense { inputs: 2, outputs: 2 },
            ],
            2,
        );
        assert!(bad.is_err());
        let no_classifier = ModelSpec::new("x", flat, vec![Layer::Dense { inputs: 4, outputs: 3 }, Layer::Relu], 3);
        assert!(no_classifier.is_err());
        let wrong_k = ModelSpec::new("x", flat, vec![Layer::Dense { inputs: 4, outputs: 3 }], 2);
        assert!(wrong_k.is_err());
    }

    #[test]
    fn spec_serializes_round_trip() {
        let spec = preset(
            "cnn-small",
            InputShape::Image {
                channels: 3,
                height: 8,
                width: 8,
            },
            4,
        )
        .unwrap();
        let json = serde_json::to_string(&spec).unwrap();
        let back: ModelSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(spec, back);
    }
}
