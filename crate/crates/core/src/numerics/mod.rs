//! Dense arrays and the reverse-mode gradient engine.

mod array;
mod check;
mod graph;

pub use array::NumArray;
pub use check::{finite_difference_check, finite_difference_check_coords};
pub use graph::{Gradients, Graph, NodeId};
