//! Dense float64 numerics: matrices, parameter sets, MLPs, optimizers and a
//! finite-difference gradient oracle. Gradients are derived by hand per layer.

pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod matrix;
pub mod mlp;
pub mod optim;
pub mod params;
pub mod rng;

pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use loss::{softmax_rows, softmax_xent, softmax_xent_per_example};
pub use matrix::{argmax, Matrix};
pub use mlp::{init_mlp, mlp_forward, mlp_forward_backward, MlpConfig};
pub use optim::{adadelta_step, sgd_momentum_step, AdadeltaState, OptState, OptimizerConfig, SgdState};
pub use params::{ParamSet, Tensor};
pub use rng::SeedStream;
