pub mod commands;
pub mod config;
pub mod decode;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod ppo;
pub mod pretrain;
pub mod reward;
pub mod synthdata;
pub mod tokenizer;

pub use error::{Error, Result};
