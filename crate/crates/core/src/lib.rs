//! Receptive-field analysis and regularization toolkit for convolutional
//! architecture graphs.
//!
//! The crate is organized around an [`ArchGraph`](arch_graph::ArchGraph):
//!
//! - [`arch_graph`]: graph types, validation, the architecture file format.
//! - [`rf_analysis`]: analytic maximum receptive fields, input windows and
//!   parameter counts.
//! - [`family_gen`]: the ρ-parameterized CP_ResNet / CP_DenseNet generators.
//! - [`damping`]: damping matrices and the weight transform that applies them.
//! - [`tensor_engine`]: a small f64 forward/backward engine used to measure
//!   input gradients.
//! - [`erf_probe`]: gradient maps, effective receptive field statistics and
//!   heatmap export.
//! - [`tensor_io`]: the `RFSW` binary tensor container and CSV helpers.
//! - [`cli`]: the `rfscope` command-line front end.
//!
//! Spatial quantities are always ordered (frequency, time).

pub mod arch_graph;
pub mod cli;
pub mod damping;
pub mod erf_probe;
pub mod family_gen;
pub mod rf_analysis;
pub mod tensor_engine;
pub mod tensor_io;

pub use arch_graph::{ArchGraph, Dim2, GraphError, InputShape, NodeKind, NodeSpec, Padding};
pub use damping::{DampingMatrix, DampingMode, DampingSpec};
pub use erf_probe::{ErfStats, GradientMap, ProbeSpec};
pub use family_gen::{Family, FamilyConfig, RhoSpec};
pub use rf_analysis::{Interval, RfReport, RfWindow};
pub use tensor_engine::{EvalOptions, Nonlinearity, Tensor, WeightSet};
