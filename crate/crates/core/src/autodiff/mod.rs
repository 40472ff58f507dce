mod check;
mod tape;

pub use check::finite_difference_check;
pub use tape::{sigmoid, softplus, BinKind, GradTable, Node, NodeId, Op, Tape, UnaryKind};
