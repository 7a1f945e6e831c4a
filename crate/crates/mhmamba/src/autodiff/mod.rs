//! Reverse-mode automatic differentiation over `Volume5` values.
//!
//! A `Tape` records one forward pass as a flat arena of nodes; `backward`
//! walks the arena in reverse, accumulating gradients into lazily allocated
//! buffers. There is no graph compilation step and no implicit caching: one
//! training step is one tape.

mod gradcheck;
mod tape;

pub use gradcheck::{central_diff, check_store_gradients, rel_err, CheckOutcome, CoordPlan};
pub use tape::{Gradients, Tape, VarId, DICE_EPS};
