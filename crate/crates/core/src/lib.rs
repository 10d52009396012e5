pub mod adapter;
pub mod alignment;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod gradsuite;
pub mod llm;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod report;
pub mod stages;
pub mod store;
pub mod tensor;
pub mod text;

pub use error::{Error, Result};
pub use tensor::{AttnSpec, Graph, Tensor, Var};
