pub mod bench;
pub mod checkpoint;
pub mod compress;
pub mod config;
pub mod data;
pub mod error;
pub mod finetune;
pub mod flops;
pub mod scoring;
pub mod tape;
pub mod tensor;
pub mod visualize;
pub mod vit;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
