//! Relative positional self-attention with memory-efficient skewing, a
//! small autoregressive Transformer decoder for symbolic music, and the
//! grid and performance-event token codecs it trains on.

pub mod attention;
pub mod codec;
pub mod corpus;
pub mod error;
pub mod gradcheck;
pub mod membench;
pub mod meter;
pub mod model;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use meter::{AllocationMeter, Category, MemoryReport};
pub use tensor::{matmul, softmax_rows, Element, Mask, Tensor};
