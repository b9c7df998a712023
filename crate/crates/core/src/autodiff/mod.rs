//! Reverse-mode automatic differentiation over dense tensors.

pub mod gradcheck;
pub mod kernels;
pub mod tape;

pub use gradcheck::{away_from_kinks, check_gradients, finite_difference_check, relative_error, CheckOutcome};
pub use kernels::{ConvGeometry, Padding, PoolGeometry};
pub use tape::{BinaryOp, Gradients, OpKind, Tape, UnaryOp, Var};
