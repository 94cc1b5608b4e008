//! Recurrent residual 3-D U-Net for volumetric lung segmentation.
//!
//! The crate is self-contained: a five-axis [`Tensor`] with a tape-based
//! reverse-mode [`Graph`], the network's composite blocks, the full model
//! in its default and dynamic configurations, Dice-family losses, Adam,
//! CT volume I/O and preprocessing, and the pool-sampling trainer.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod model;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod parallel;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{Gradients, Graph, OpKind, Var};
pub use ops::{ConvAlgo, ConvSpec, Padding};
pub use tensor::{Element, Shape, Tensor};
