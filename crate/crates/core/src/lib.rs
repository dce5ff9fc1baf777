pub mod autodiff;
pub mod conv;
pub mod darcy;
pub mod error;
pub mod experiment;
pub mod flow;
pub mod grf;
pub mod grid;
pub mod inference;
pub mod io;
pub mod nn;
pub mod optim;
pub mod random;
pub mod surrogate;
pub mod tensor;
pub mod training;
pub mod vae;

pub use error::{Error, Result};
pub use grid::Grid;
pub use tensor::{ParamStore, Tensor};
