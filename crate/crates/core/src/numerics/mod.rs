//! Dense `f64` tensors, a reverse-mode tape, trainable layers, AdamW with a
//! one-cycle schedule and a finite-difference gradient checker.

pub mod gradcheck;
pub mod kernels;
pub mod layers;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use gradcheck::{
    check_gradients, check_module_gradients, gradient_report, module_gradient_report, GradReport,
};
pub use layers::{Activation, BatchNorm, ConvKind, ConvUnit, Linear, Mlp, MlpLayer, Mode, Module};
pub use optim::{AdamW, OneCycleSchedule};
pub use tape::{BatchStats, Gradients, Normalization, Tape, Var};
pub use tensor::Tensor;
