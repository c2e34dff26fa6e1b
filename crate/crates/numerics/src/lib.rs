//! Dense `f64` tensors, a reverse-mode differentiation tape, attention and
//! MLP building blocks, AdamW, and a finite-difference gradient oracle.
//!
//! ```
//! use dst_numerics::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::row(vec![1.0, 2.0]).unwrap(), true);
//! let y = tape.mul(x, x).unwrap();
//! let s = tape.sum(y).unwrap();
//! tape.backward(s).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
//! ```

pub mod error;
pub mod gradcheck;
mod linalg;
pub mod nn;
pub mod optim;
pub mod param;
pub mod tape;
pub mod tensor;

pub use error::{NumericsError, Result};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use nn::{mlp_forward, scaled_dot_attention, Activation, LayerNorm, Linear, Mlp, MultiHeadAttention};
pub use optim::AdamW;
pub use param::{Ctx, Grads, Init, ParamId, ParamStore, Parameter};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
