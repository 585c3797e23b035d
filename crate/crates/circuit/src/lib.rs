//! Arithmetic-circuit export.
//!
//! A BatchNorm model is folded into plain tensors whose inference pass uses
//! only additions and multiplications, then unrolled into a circuit of
//! INPUT, CONST, ADD and MUL nodes.

pub mod error;
pub mod folded;
pub mod graph;
pub mod lower;
pub mod text;

pub use error::{CircuitError, Result};
pub use folded::{fold_inference, fold_sigmoid_scale, FoldedModel};
pub use graph::{verify_polynomial, ArithmeticCircuit, Certificate, Node, NodeId};
pub use lower::{count_nodes, export_circuit, CircuitBuilder, Wires, DEFAULT_MAX_NODES};
pub use text::{read_circuit, read_from, write_circuit, write_to};
