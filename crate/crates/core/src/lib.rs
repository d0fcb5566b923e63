//! HiT generator building blocks: blocked multi-axis attention, cross-attention
//! self-modulation, the staged generator, and GAN training at toy scale.

pub mod attention;
pub mod blocking;
pub mod error;
pub mod generator;
pub mod numerics;
pub mod reference;
pub mod training;

pub use error::{Error, Result};
pub use numerics::{Eager, Ops, Tape, Tensor, Var};
