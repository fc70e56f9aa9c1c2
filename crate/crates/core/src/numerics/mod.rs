//! Dense tensors, reverse-mode gradients, optimizers, seeding and gradient
//! checking. Every model in the crate is built on this module.

pub mod gradcheck;
pub mod init;
pub mod ops;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use ops::{activation, affine, concat, dropout, loss, Activation, ConvGeometry, LossTarget, Mode};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use params::{Gradients, ParamId, ParamStore};
pub use rng::{Rng64, SeedStream};
pub use tape::{Adjoints, Tape, TapeEntry, Var};
pub use tensor::Tensor;
