//! Label-free network pruning and training.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`tensor`]),
//! model presets with logits plus penultimate feature maps ([`model`]),
//! saliency-based one-shot pruning ([`pruning`]), feature-map distillation
//! training ([`distill`]), generalization diagnostics ([`diagnostics`]),
//! dataset loaders ([`data`]) and the experiment pipeline ([`harness`]).

pub mod tensor;
pub mod data;
pub mod model;
pub mod pruning;
pub mod diagnostics;
pub mod distill;
pub mod harness;

/// Six significant digits in scientific notation, the CSV float format.
pub fn sig6(x: f64) -> String {
    format!("{x:.5e}")
}
