//! Layer-wise post-training weight quantization by coordinate descent.
//!
//! Given a layer weight `W` (m×n) and calibration inputs `X` (N×m), the
//! solvers search integer codes `Q` and scales minimizing the reconstruction
//! error `||X W_q - X W||^2`. Each step minimizes over a single code (a
//! clipped rounding of a dot-product ratio) or a scale (a closed-form least
//! squares fit), so the objective never increases within a fixed code set.
//!
//! - [`layer`]: one scale for the whole matrix, symmetric codes.
//! - [`channel`]: one scale and zero-point per column, affine codes, greedy
//!   update order.
//! - [`oracle`]: exhaustive references used to certify solver steps.
//! - [`tensor_io`], [`manifest`]: on-disk formats.
//! - [`cli`]: the command implementations behind the `comq` binary.

pub mod channel;
pub mod cli;
pub mod config;
pub mod error;
pub mod grid;
pub mod layer;
pub mod manifest;
pub mod oracle;
pub mod problem;
pub mod quantized;
pub mod synth;
pub mod tensor_io;

pub use config::{Granularity, Order, QuantConfig, TieRule};
pub use error::{ComqError, FormatError, Result};
pub use grid::{affine_codes, dequantize, project_to_codes, symmetric_codes, CodeSet, ScaleFactor};
pub use problem::{LayerProblem, StepKind, Trace, TraceEvent};
pub use quantized::{quantize_layer, quantize_layer_traced, QuantizedLayer};

/// Recorded in every artifact.
pub const SOLVER_VERSION: &str = concat!("comq ", env!("CARGO_PKG_VERSION"));
