//! Parameters, reverse-mode differentiation and optimisation.

mod adam;
mod params;
mod tape;

pub use adam::{Adam, AdamConfig};
pub use params::{Gradients, Param, ParamId, ParamStore};
pub use tape::{Tape, Var};
