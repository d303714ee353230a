pub mod error;
pub mod bgg;
pub mod cli;
pub mod cone;
pub mod curves;
pub mod expr;
pub mod geometry;
pub mod jet;
pub mod model;
pub mod normal_frame;
pub mod ode;
pub mod strat;
pub mod tractor;

pub use error::{Error, Result};
