// `!(x > 0.0)` is deliberate throughout: it rejects NaN along with the
// out-of-range values. Index loops mirror the maths in the numeric kernels.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod arm;
pub mod benchmarks;
pub mod error;
pub mod gssm;
pub mod harness;
pub mod nn;
pub mod sac;
pub mod transitions;

pub use error::{Error, Result};
