//! Minimal dense f64 kernel with tape-based reverse-mode gradients and the
//! Adam optimizer. Every learned component in this crate is built on it.

mod adam;
mod fdcheck;
mod params;
mod tape;

pub use adam::{adam_step, AdamState};
pub use fdcheck::{finite_difference_check, rel_err, FD_EPS};
pub use params::{ParamId, ParameterSet, Tensor};
pub use tape::{sigmoid_stable, softplus_stable, Tape, Val, PROB_FLOOR};
