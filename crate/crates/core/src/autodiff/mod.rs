//! Dense arrays and a small reverse-mode tape.
//!
//! Nodes are appended in evaluation order, so the node index is already a
//! topological order and [`Tape::backward`] simply walks it in reverse.

mod array;
pub mod kernels;
mod tape;

pub use array::DenseArray;
pub use tape::{ConvGeometry, Gradients, Tape, Var};
