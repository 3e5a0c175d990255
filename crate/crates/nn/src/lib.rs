//! Minimal differentiable-programming toolkit used by the acoustic, duration,
//! voice-conversion and discriminator networks.
//!
//! Everything is `f64` so that analytic gradients can be compared against
//! central finite differences at tight tolerances.

pub mod graph;
pub mod layers;
pub mod params;

pub use graph::{Backward, Graph, Var};
pub use params::{Grads, ParamId, ParamStore};

pub type Mat = ndarray::Array2<f64>;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed parameter data: {0}")]
    Format(String),
}
