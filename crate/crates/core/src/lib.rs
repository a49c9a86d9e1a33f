//! Precision-progressive refactoring of floating-point arrays.
//!
//! Data is split into hierarchical levels ([`decomposer`]), each level is
//! aligned to fixed point and transposed into MSB-first bitplanes
//! ([`bitplane`]), groups of planes are losslessly coded ([`lossless`]) and
//! written to a seekable stream ([`container`]). Retrieval reads the fewest
//! leading groups that meet an L-infinity tolerance, or, through [`qoi`], a
//! tolerance on a quantity derived from several variables.

pub mod bitplane;
pub mod container;
pub mod decomposer;
pub mod error;
pub mod lossless;
pub mod pipeline;
pub mod qoi;
pub mod refactor;
pub mod scalar;
pub mod synth;

pub use error::{Error, Result};
pub use scalar::{DType, Real};
pub use container::{FileSource, MemorySource, ProgressiveReader, RetrievalState};
pub use pipeline::Scheduler;
pub use refactor::{refactor, RefactorConfig};

pub type Decomposition32 = decomposer::LevelDecomposition<f32>;
pub type Decomposition64 = decomposer::LevelDecomposition<f64>;
