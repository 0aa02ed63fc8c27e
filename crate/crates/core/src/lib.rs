pub mod autodiff;
pub mod cell;
pub mod data;
pub mod diagnostics;
pub mod model;
pub mod ops;
pub mod rng;
pub mod search;
pub mod tensor;

pub use tensor::Tensor;
