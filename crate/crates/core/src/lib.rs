pub mod cli;
pub mod distill;
pub mod error;
pub mod evalkit;
pub mod featviz;
pub mod geometry;
pub mod imageio;
pub mod losscheck;
pub mod models;
pub mod gradcheck;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod photometric;
pub mod retinex;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
