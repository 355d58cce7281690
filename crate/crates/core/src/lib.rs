pub mod attention;
pub mod bitserial;
pub mod error;
pub mod fxp;
pub mod learner;
pub mod scalar;
pub mod simulator;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type AttentionInputF32 = attention::AttentionInput<f32>;
pub type AttentionInputF64 = attention::AttentionInput<f64>;
pub type HyperParamsF32 = learner::HyperParams<f32>;
pub type HyperParamsF64 = learner::HyperParams<f64>;
pub type ToyModelF32 = learner::ToyModel<f32>;
pub type ToyModelF64 = learner::ToyModel<f64>;
