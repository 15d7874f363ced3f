//! Post-training weight quantization: symmetric linear quantization, analytic
//! clipping (ACIQ) and outlier channel splitting, with cost accounting, a
//! binary tensor archive format and a synthetic evaluation harness.

pub mod aciq;
pub mod cli;
pub mod cost;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod ocs;
pub mod pipeline;
pub mod quant;
pub mod store;

pub use error::{PtqError, Result};
pub use pipeline::{dequantize_archive, quantize_archive, QuantPolicy, Report};
pub use quant::{Bits, Method, QuantizedTensor, Tensor};
pub use store::{read_archive, write_archive, Archive, DType, TensorData, TensorRecord};
