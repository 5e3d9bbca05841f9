//! Dense tensors with a dynamic reverse-mode tape.
//!
//! Forward ops on [`Var`] evaluate eagerly and append a record to the
//! [`Tape`] they were created on; [`Tape::backward`] sweeps the records in
//! reverse once, accumulating adjoints into the leaves that asked for them.

mod attention;
mod gradcheck;
mod ops;
mod precision;
mod tape;
mod tensor;

pub use attention::RelativeBias;
pub use gradcheck::{grad_check, CoordFailure, GradCheckConfig, GradCheckReport, InputCheck};
pub use ops::{Pad2d, PadMode};
pub use precision::{default_precision, precision, set_default_precision, Precision, PrecisionGuard};
pub use tape::{BackwardStats, Tape, Var};
pub use tensor::{Tensor, MAX_RANK};
