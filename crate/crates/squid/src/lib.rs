pub mod checkpoint;
pub mod config;
pub mod data;
pub mod digitanatomy;
pub mod error;
pub mod eval;
pub mod inpaint;
pub mod memory;
pub mod model;
pub mod networks;
pub mod pipeline;
pub mod training;

pub use error::{Result, SquidError};
pub use model::{Squid, SquidConfig, Variant};

/// Whether a forward pass may mutate memory and sample shortcut masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}
