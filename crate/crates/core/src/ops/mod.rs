//! Raw numeric kernels over flat buffers. The autodiff graph wraps these.

pub mod conv;
pub mod pool;

pub use conv::{ConvAlgo, ConvGeom, ConvSpec, Padding};
