//! Mutual-information guided score diffusion for unpaired virtual staining.
//!
//! The pipeline has two stages. An unconditional score network is trained on
//! target-stain (IHC-like) tiles alone. A source tile is then translated by
//! stripping its colour, noising it to an intermediate timestep and running the
//! reverse VP-SDE with an energy that trades unique (stain) information against
//! mutual (structure) information with the source, plus a late-phase
//! patch-contrastive refinement of the score network.

pub mod contrastive;
pub mod data;
pub mod error;
pub mod guidance;
pub mod image;
pub mod metrics;
pub mod mi;
pub mod nn;
pub mod rng;
pub mod score;
pub mod sde;

pub use error::{Error, Result};
pub use image::Image;
pub use sde::NoiseSchedule;
