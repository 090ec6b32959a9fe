//! Dense arrays, a reverse-mode tape, batch normalization state and SGD.

mod batchnorm;
mod optim;
mod tape;
mod tensor;

pub use batchnorm::{BnState, Mode};
pub use optim::SgdMomentum;
pub use tape::{BatchMoments, Tape, Var};
pub use tensor::Tensor;

#[allow(unused_imports)]
pub(crate) use tape::{log_softmax_row, sigmoid, softmax_row};
