//! Dale-constrained excitatory-inhibitory recurrent classifier with a
//! synchronisation latent, lateral inhibition, surprise-gated memory and a
//! center-surround backbone, plus analysis tools, data loading and training.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dale;
pub mod diagnose;
pub mod dynamics;
pub mod error;
pub mod memory;
pub mod model;
pub mod nlm;
pub mod objective;
pub mod optim;
pub mod params;
pub mod readout;
pub mod spectral;
pub mod sync;
pub mod trainer;
pub mod wta;

pub use config::RunConfig;
pub use error::{Result, TideError};
pub use model::Tide;
pub use tide_autograd as autograd;
