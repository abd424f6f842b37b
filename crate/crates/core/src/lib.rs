//! Simulation of soft errors in a prefix-cached BF16 KV cache and of a
//! checksum countermeasure.

pub mod bf16;
pub mod block_pool;
pub mod engine;
pub mod faultlab;
pub mod harness;
pub mod integrity;
pub mod kvstore;
pub mod num;
pub mod stats;

pub use bf16::{Bf16Pattern, BitPosition};
pub use num::Scalar;

pub type Engine32 = engine::Engine<f32>;
pub type Engine64 = engine::Engine<f64>;
pub type ToyModel = engine::Model<f32>;
pub type ToyModel64 = engine::Model<f64>;
