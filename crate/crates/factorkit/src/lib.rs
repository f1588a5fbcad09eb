//! factorkit: a toolkit for factorized convolutional networks.
//!
//! The crate models CNN architectures as DAGs of layers with optional
//! independent *factors* (sub-networks sharing only the graph input or a
//! common stem), statically analyzes weights, multiply-accumulate counts and
//! feature counts, executes forward/backward passes at desk scale with a
//! verified convolution engine, and runs factors concurrently with bitwise
//! equivalence to sequential execution.

pub mod cost;
pub mod exec;
pub mod gradcheck;
pub mod graph;
pub mod ops;
pub mod parallel;
pub mod params;
pub mod ppm;
pub mod tensor;
pub mod textfmt;
pub mod zoo;

pub use graph::{validate, topo_order, Factor, GraphSpec, LayerInput, LayerKind, LayerSpec, Shape, Violation};
pub use tensor::Tensor;
