//! Minimal f64 tensors with a reverse-mode tape.
//!
//! The operation set is exactly what a small periodic 1D U-Net needs:
//! elementwise arithmetic (equal shapes or scalar broadcast only), circular
//! convolution, group normalization, exact-erf GELU, dense layers, channel
//! concatenation, nearest upsampling and index selection.
//!
//! ```
//! use dsk_tensor::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::vector(vec![3.0]));
//! let loss = tape.sum_sq(x).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap(), &[6.0]);
//! ```

pub mod checkpoint;
mod error;
mod kernels;
mod tape;
mod tensor;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, ParamMap};
pub use error::{Result, TensorError};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// Group-norm epsilon used throughout the network.
pub const GROUP_NORM_EPS: f64 = 1e-5;
