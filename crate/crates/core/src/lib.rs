//! ASBU-Net: a segmentation network built from atrous space bender layers.

pub mod asb;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod kv;
pub mod layers;
pub mod network;
pub mod ops;
pub mod quant;
pub mod rf;
pub mod segeval;
pub mod spec;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use network::Network;
pub use spec::{NetworkSpec, Scaling, Stage};
pub use tensor::{Shape, Tensor};
