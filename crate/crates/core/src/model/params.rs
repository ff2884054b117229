use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{InputShape, Layer, ModelError, ModelSpec, Result};
use crate::tensor::{Gradients, Tape, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
}

/// Location of one parameter tensor inside the flat vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
    /// Index into `ModelSpec::layers`.
    pub layer: usize,
    pub role: ParamRole,
    /// Part of the final classifier.
    pub classifier: bool,
}

impl ParamInfo {
    /// Weights outside the classifier; biases and the classifier are never pruned.
    pub fn prunable(&self) -> bool {
        self.role == ParamRole::Weight && !self.classifier
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }

    /// Output channels (rows) of a weight tensor.
    pub fn channels(&self) -> usize {
        self.shape[0]
    }
}

/// Flat parameter vector θ with per-tensor views into it.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters {
    layout: Vec<ParamInfo>,
    flat: Vec<f64>,
}

impl Parameters {
    pub fn zeros(spec: &ModelSpec) -> Self {
        let mut layout = Vec::new();
        let mut offset = 0;
        let last = spec.classifier_layer();
        for (i, layer) in spec.layers.iter().enumerate() {
            let (wshape, bshape) = match *layer {
                Layer::Dense { inputs, outputs } => (vec![outputs, inputs], vec![outputs]),
                Layer::Conv {
                    in_ch,
                    out_ch,
                    kernel,
                    ..
                } => (vec![out_ch, in_ch, kernel, kernel], vec![out_ch]),
                _ => continue,
            };
            for (role, shape, suffix) in [(ParamRole::Weight, wshape, "weight"), (ParamRole::Bias, bshape, "bias")] {
                let len = shape.iter().product();
                layout.push(ParamInfo {
                    name: format!("layer{i}.{suffix}"),
                    shape,
                    offset,
                    len,
                    layer: i,
                    role,
                    classifier: i == last,
                });
                offset += len;
            }
        }
        Parameters {
            layout,
            flat: vec![0.0; offset],
        }
    }

    /// Replaces the values, keeping the layout.
    pub fn with_flat(&self, flat: Vec<f64>) -> Result<Self> {
        if flat.len() != self.flat.len() {
            return Err(ModelError::Spec(format!(
                "parameter vector has {} entries, layout needs {}",
                flat.len(),
                self.flat.len()
            )));
        }
        Ok(Parameters {
            layout: self.layout.clone(),
            flat,
        })
    }

    pub fn layout(&self) -> &[ParamInfo] {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    pub fn flat(&self) -> &[f64] {
        &self.flat
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.flat
    }

    pub fn view(&self, i: usize) -> &[f64] {
        &self.flat[self.layout[i].range()]
    }

    pub fn view_mut(&mut self, i: usize) -> &mut [f64] {
        let r = self.layout[i].range();
        &mut self.flat[r]
    }

    pub fn tensor(&self, i: usize) -> Tensor {
        Tensor::new(self.layout[i].shape.clone(), self.view(i).to_vec()).expect("layout shape")
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.layout.iter().position(|p| p.name == name)
    }

    /// Final-layer `(W, b)` with `W` stored `K x M`.
    pub fn classifier(&self) -> ClassifierView {
        let w = self.layout.iter().position(|p| p.classifier && p.role == ParamRole::Weight);
        let w = w.expect("spec always ends in a dense layer");
        let (k, m) = (self.layout[w].shape[0], self.layout[w].shape[1]);
        ClassifierView {
            classes: k,
            features: m,
            weight: self.view(w).to_vec(),
            bias: self.view(w + 1).to_vec(),
        }
    }

    /// Registers every tensor as a tape leaf.
    pub fn register(&self, tape: &mut Tape, requires_grad: bool) -> ParamVars {
        let vars = (0..self.layout.len())
            .map(|i| tape.leaf(self.tensor(i), requires_grad))
            .collect();
        ParamVars {
            vars,
            total: self.flat.len(),
            offsets: self.layout.iter().map(|p| p.offset).collect(),
        }
    }
}

/// Tape handles for the tensors of a [`Parameters`], in layout order.
#[derive(Clone, Debug)]
pub struct ParamVars {
    vars: Vec<Var>,
    total: usize,
    offsets: Vec<usize>,
}

impl ParamVars {
    pub fn var(&self, i: usize) -> Var {
        self.vars[i]
    }

    /// Accumulated leaf gradients as a flat vector (zeros where absent).
    pub fn flat_grad(&self, tape: &Tape) -> Vec<f64> {
        self.collect(|v| tape.grad(v))
    }

    pub fn flat_from(&self, grads: &Gradients) -> Vec<f64> {
        self.collect(|v| grads.get(v))
    }

    fn collect<'a>(&self, get: impl Fn(Var) -> Option<&'a Tensor>) -> Vec<f64> {
        let mut out = vec![0.0; self.total];
        for (&v, &off) in self.vars.iter().zip(&self.offsets) {
            if let Some(g) = get(v) {
                out[off..off + g.numel()].copy_from_slice(g.data());
            }
        }
        out
    }
}

/// Kaiming-normal (fan-in, ReLU gain) weights and zero biases.
pub fn init(spec: &ModelSpec, seed: u64) -> Parameters {
    let mut params = Parameters::zeros(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..params.layout.len() {
        let info = &params.layout[i];
        if info.role != ParamRole::Weight {
            continue;
        }
        let fan_in: usize = info.shape[1..].iter().product();
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        for w in params.view_mut(i) {
            *w = normal.sample(&mut rng);
        }
    }
    params
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub logits: Var,
    pub features: Var,
}

/// Logits `N x K` and penultimate feature map `N x M` of one pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub logits: Tensor,
    pub features: Tensor,
}

/// Records a forward pass of `input` (`[N, width]`) on `tape`.
pub fn forward_tape(spec: &ModelSpec, tape: &mut Tape, params: &ParamVars, input: Var) -> Result<ForwardVars> {
    let in_shape = tape.value(input).shape().to_vec();
    let width = spec.input.width();
    let (n, got) = match in_shape.as_slice() {
        [n, d] => (*n, *d),
        _ => return Err(TensorError::Shape { op: "forward", shapes: vec![in_shape] }.into()),
    };
    if got != width {
        return Err(ModelError::InputWidth { expected: width, got });
    }
    let mut x = match spec.input {
        InputShape::Flat { .. } => input,
        InputShape::Image {
            channels,
            height,
            width,
        } => tape.reshape(input, vec![n, channels, height, width])?,
    };
    let last = spec.classifier_layer();
    let mut slot = 0;
    let mut features = x;
    for (i, layer) in spec.layers.iter().enumerate() {
        if i == last {
            features = x;
        }
        x = match *layer {
            Layer::Dense { .. } => {
                let (w, b) = (params.var(slot), params.var(slot + 1));
                slot += 2;
                let y = tape.matmul_t(x, w)?;
                tape.add_bias(y, b)?
            }
            Layer::Conv { stride, pad, .. } => {
                let (w, b) = (params.var(slot), params.var(slot + 1));
                slot += 2;
                tape.conv2d(x, w, b, stride, pad)?
            }
            Layer::Relu => tape.relu(x)?,
            Layer::AvgPool { size } => tape.avg_pool2d(x, size)?,
            Layer::GlobalAvgPool => tape.global_avg_pool(x)?,
            Layer::Flatten => tape.flatten(x)?,
        };
    }
    Ok(ForwardVars { logits: x, features })
}

/// Gradient-free forward pass of a `[N, width]` batch.
pub fn forward(spec: &ModelSpec, params: &Parameters, batch: &Tensor) -> Result<ForwardOutput> {
    let mut tape = Tape::new();
    let pv = params.register(&mut tape, false);
    let x = tape.constant(batch.clone());
    let out = forward_tape(spec, &mut tape, &pv, x)?;
    Ok(ForwardOutput {
        logits: tape.value(out.logits).clone(),
        features: tape.value(out.features).clone(),
    })
}

/// The final dense layer `f = W m + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierView {
    pub classes: usize,
    pub features: usize,
    /// Row-major `K x M`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ClassifierView {
    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.classes, self.features, &self.weight)
    }

    /// Moore–Penrose pseudoinverse `W⁺` (`M x K`).
    pub fn pseudoinverse(&self) -> DMatrix<f64> {
        let w = self.matrix();
        let scale = w.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
        w.pseudo_inverse(1e-12 * scale).expect("non-negative epsilon")
    }

    /// `features · Wᵀ + b` for an `N x M` feature map.
    pub fn logits(&self, features: &Tensor) -> Result<Tensor> {
        let (n, m) = features.dims2("classifier")?;
        if m != self.features {
            return Err(TensorError::Shape {
                op: "classifier",
                shapes: vec![features.shape().to_vec(), vec![self.classes, self.features]],
            }
            .into());
        }
        let mut out = crate::tensor::matmul_nt(features.data(), &self.weight, n, m, self.classes);
        for row in out.chunks_mut(self.classes) {
            row.iter_mut().zip(&self.bias).for_each(|(x, b)| *x += b);
        }
        Ok(Tensor::matrix(n, self.classes, out)?)
    }
}
