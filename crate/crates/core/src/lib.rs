pub mod checkpoint;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod gradsuite;
pub mod model;
pub mod numerics;
pub mod run;
pub mod training;

pub use error::{Error, Result};
pub use model::{NuNet, Prediction};
pub use run::RunConfig;
