//! Hierarchical LoRA-then-LoReFT fine-tuning on a from-scratch mini
//! decoder-only transformer.

pub mod autodiff;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod lora;
pub mod model;
pub mod reft;
pub mod synth;
pub mod tasks;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
