pub mod dataio;
pub mod dgp;
pub mod error;
pub mod interpret;
pub mod eval;
pub mod mat;
pub mod net;
pub mod optim;
pub mod particle;
pub mod ssm;
pub mod stats;
pub mod train;

pub use error::{Error, Result};
