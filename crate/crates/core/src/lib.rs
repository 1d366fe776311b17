//! Training-free hallucination mitigation for vision-language decoding, over a
//! procedurally built toy model whose failure modes can be injected one at a
//! time.

pub mod diagnostics;
pub mod evalkit;
pub mod numerics;
pub mod seed;
pub mod shield;
pub mod toymodel;

pub use numerics::{NumericsError, Tensor};
pub use shield::{Shield, ShieldConfig, ShieldError};
pub use toymodel::{Image, ModelConfig, ModelError, ObjectClass, Prompt, Scene, Token, ToyModel};
