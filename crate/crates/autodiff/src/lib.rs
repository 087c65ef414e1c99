//! Tape-based reverse-mode automatic differentiation over dense 2-d `f64`
//! matrices.
//!
//! Every value on the tape is an [`ndarray::Array2<f64>`]. Row vectors are
//! `1 x n` matrices and scalars are `1 x 1`. A forward pass records nodes
//! on a [`Tape`]; [`Tape::backward`] walks the tape in reverse from a scalar
//! root and returns [`Gradients`] for every node that depends on a
//! trainable leaf.
//!
//! Parameters are borrowed onto the tape with [`Tape::param`], so binding a
//! large embedding table costs nothing. Values that never need a gradient
//! go in through [`Tape::constant`].
//!
//! ```
//! use ndarray::array;
//! use sgalign_autodiff::Tape;
//!
//! let w = array![[2.0], [3.0]];
//! let mut tape = Tape::new();
//! let x = tape.constant(array![[1.0, 4.0]]);
//! let w_var = tape.param(&w);
//! let y = tape.matmul(x, w_var);
//! let loss = tape.sum(y);
//! let grads = tape.backward(loss);
//! assert_eq!(tape.scalar(loss), 14.0);
//! assert_eq!(grads.get(w_var).unwrap(), &array![[1.0], [4.0]]);
//! ```

mod tape;

pub use tape::{Gradients, Mat, Tape, Var};
