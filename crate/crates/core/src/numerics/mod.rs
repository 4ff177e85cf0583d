//! Dense matrices, reverse-mode differentiation and a finite-difference
//! gradient checker.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, GradCheckReport, ParamCheck, REL_ERR_FLOOR};
pub use tape::{concat_cols, sum_vars, Grads, Tape, Var};
pub use tensor::{cosine, dot, l2_norm, Tensor, NORM_EPS};
