//! Dense `f64` tensors with a dynamic reverse-mode differentiation tape.
//!
//! The crate provides exactly the primitives a small convolutional
//! image-restoration network needs: convolution, pooling, activations,
//! group normalization, elementwise arithmetic, channel concatenation and
//! slicing, bilinear resampling, an Adam optimizer and a central-difference
//! gradient checker.
//!
//! ```
//! use dehaze_tensor::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.leaf(Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap());
//! let sq = g.square(x);
//! let loss = g.sum(sq);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
//! ```

mod adam;
mod error;
pub mod gradcheck;
mod graph;
mod ops;
mod params;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use error::{Result, TensorError};
pub use gradcheck::{gradcheck, gradcheck_at, gradcheck_params, GradcheckReport, Mismatch};
pub use graph::{Activation, Graph, PoolKind, Var};
pub use ops::elementwise::Elementwise;
pub use params::{conv_kernel, kaiming_uniform, normal, Bound, ModelParams, Param, ParamId};
pub use tensor::Tensor;
