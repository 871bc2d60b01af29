//! Core library for sparse cross-layer attention networks.
//!
//! A small tape-based autodiff engine ([`tensor`]) carries convolutional
//! backbones whose blocks can attend over every previously computed block
//! output across multiple forward passes ([`attention`], [`network`]), plus
//! the stacked-digit data pipeline used to probe out-of-distribution
//! generalization ([`dataset`]).

pub mod attention;
pub mod dataset;
pub mod init;
pub mod network;
pub mod tensor;

pub use attention::{NFMConfig, NfmError};
pub use dataset::{DataError, DigitPool, Sample, StackedConfig};
pub use network::{BackboneSpec, ModelKind, NFMNetwork, NetworkError};
pub use tensor::{Element, Graph, TensorError, TensorId};
