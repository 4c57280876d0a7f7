//! Minimal reverse-mode automatic differentiation over `f64` tensors.
//!
//! The engine supports exactly what the encoder and the training objectives
//! need: dense and batched matrix products, elementwise arithmetic, row-wise
//! softmax / log-softmax / layer norm / L2 normalization, GELU and tanh,
//! reductions, row gathers and a few shape permutations.
//!
//! ```
//! use lealla_core::autodiff::{Graph, ParamStore, Tensor};
//!
//! let mut store = ParamStore::new();
//! let w = store.add("w", Tensor::scalar(3.0)).unwrap();
//! let grads = {
//!     let mut g = Graph::new();
//!     let x = g.param(&store, w);
//!     let y = g.mul(x, x).unwrap();
//!     g.backward(y).unwrap()
//! };
//! store.accumulate(&grads).unwrap();
//! assert_eq!(store.get(w).grad().unwrap(), &[6.0]);
//! ```

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{finite_diff_check, relative_error, GradCheckReport, RELATIVE_ERROR_FLOOR};
pub use graph::{Graph, NodeId};
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::Tensor;
