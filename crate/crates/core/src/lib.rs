//! Bit-accurate functional simulator and analytical performance model of a
//! fully weight-stationary hybrid transformer accelerator.
//!
//! The simulated machine pairs an analog compute-in-memory datapath for the
//! static (weight) GEMMs with a digital MXFP4 systolic datapath for the
//! dynamic attention GEMMs. Everything numeric is emulated bit-exactly:
//! MXFP4 block floating point, BF16 arithmetic with round-to-nearest-even,
//! INT5 bit-plane dot products, exponent alignment with a bounded shift
//! window, and ADC quantization. On top of the functional model sits a
//! closed-form throughput / power / I-O model of the full system.
//!
//! The crate is organized as:
//!
//! * [`bf16`], [`fp4`], [`block`], [`int5`], [`tensor`]: number formats and
//!   block-quantized tensors.
//! * [`dyadic`]: exact binary fixed-point sums used by the analog path.
//! * [`analog`]: the analog macro datapath (bit planes, alignment, ADC).
//! * [`calib`]: exponent-target calibration and saturation statistics.
//! * [`attention`]: the digital systolic GEMM and deferred-softmax pipeline.
//! * [`vector_ops`]: BF16 LayerNorm / GELU / residual units.
//! * [`model`]: the five-stage encoder pipeline and execution modes.
//! * [`perf`], [`tables`]: the analytical performance model and the
//!   reference design-point tables.

pub mod analog;
pub mod attention;
pub mod bf16;
pub mod block;
pub mod calib;
pub mod dyadic;
pub mod error;
pub mod fp4;
pub mod int5;
pub mod io;
pub mod model;
pub mod perf;
pub mod real;
pub mod tables;
pub mod tensor;
pub mod vector_ops;

pub use bf16::Bf16;
pub use block::MxBlock;
pub use error::Error;
pub use fp4::{E8m0Scale, Fp4Code};
pub use tensor::{Mat, MxTensor, Orientation};

/// Concrete scalar used by the reference (real-valued) arithmetic paths.
pub type Real = f64;

/// Dense matrix over the default real scalar.
pub type RealMat = Mat<Real>;

/// Crate-wide result type.
pub type Result<T> = std::result::Result<T, Error>;
