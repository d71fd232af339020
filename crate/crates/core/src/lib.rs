// `!(x > 0.0)` style checks are deliberate: NaN must fail validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod autograd;
pub mod backbone;
pub mod bbox;
pub mod bench;
pub mod config;
pub mod counter;
pub mod error;
pub mod eval;
pub mod head;
pub mod image;
pub mod loss;
pub mod model;
pub mod ops;
pub mod optim;
pub mod params;
pub mod selftest;
pub mod serialize;
pub mod synth;
pub mod tensor;
pub mod tpn;
pub mod tracker;
pub mod train;

pub use autograd::{Ctx, Gradients, Tape, Var};
pub use counter::{Category, OpCount, OpCounter};
pub use error::{Error, Result, WeightsError};
pub use params::{Init, ParamId, ParamStore};
pub use tensor::Tensor;
