//! The neural radiance transfer field and its building blocks.

pub mod checkpoint;
pub mod field;
pub mod hash;
pub mod mlp;
mod real;
pub mod sh;

pub use field::{FieldGrads, NrtfField, Sample, INPUT_DIM};
pub use hash::{EncodePlan, HashConfig, HashGrid};
pub use mlp::{Mlp, MlpShape};
pub use real::Real;
pub use sh::{sh_encode, SH_DIM};
