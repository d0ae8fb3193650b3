//! Dense tensors with reverse-mode differentiation.
//!
//! A [`Graph`] records eagerly evaluated operations; [`Graph::backward`]
//! returns gradients that can be accumulated into a [`ParamStore`]. Calling
//! `accumulate_into` twice without [`ParamStore::zero_grad`] adds the two
//! gradients together.

mod gradcheck;
mod graph;
mod layers;
mod params;
mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, ParamCheck};
pub use graph::{Gradients, Graph, Var};
pub use layers::{affine_layer_norm, linear, trunc_normal};
pub use params::{ParamStore, BUFFER_MARKER};
pub use tensor::{Scalar, Tensor};

pub(crate) use params::Cursor;
