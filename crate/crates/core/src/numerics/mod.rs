//! Dense tensors, a reverse-mode tape, and momentum SGD with cosine decay.
//!
//! Just enough machinery to train the accuracy predictors and the toy
//! SuperNet/HyperNet. Everything is `f64`.

pub mod gradcheck;
mod layers;
mod optim;
mod params;
pub mod rng;
mod tape;
mod tensor;

pub use layers::{Linear, Mlp};
pub use optim::{sgd_step, Sgd, SgdCosineSchedule};
pub use params::{NamedTensor, ParamSet};
pub use tape::{log_sum_exp, softmax, Gradients, Tape, Var};
pub use tensor::Tensor;
