//! Groupwise weight quantization engine with activation-aware scaling.
//!
//! The crate is organized around the pipeline used by test-time quantization
//! of linear layers:
//!
//! * [`tensor`] — dense row-major matrices, truncated SVD, synthetic data.
//! * [`quantizer`] — groupwise quantize/dequantize (QDQ) in three scale
//!   formats, plus bit-exact code packing.
//! * [`calibration`] — activation statistics: shrunk correlation, per-channel
//!   diagonal scales, and the activation-aware losses.
//! * [`awq`] — offline activation-aware quantization, a projected-gradient
//!   reference solver, a brute-force code oracle, and hyperparameter search.
//! * [`lowrank`] — low-rank factor initialization and residual quantization.
//! * [`ttq`] — the online test-time quantization layer and its cost model.
//! * [`io`] — binary tensor and quantized-container file formats.
//! * [`harness`] — seeded self-test checks shared by the CLI and the
//!   acceptance suite.

pub mod awq;
pub mod calibration;
pub mod error;
pub mod harness;
pub mod io;
pub mod lowrank;
pub mod quantizer;
pub mod tensor;
pub mod ttq;

pub use error::{Result, TtqError};
