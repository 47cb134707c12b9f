//! Dense `f64` tensors, a reverse-mode tape and a finite-difference oracle.

mod gemm;
pub mod gradcheck;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_with, relative_error, GradCheckOptions, GradCheckReport};
pub use tape::{top_k_ids, Gradients, Selection, SeqLayout, Tape, Var};
pub use tensor::Tensor;
