//! Multi-view variational autoencoder for cold-start item recommendation.
//!
//! Items are described by an ID embedding (warm items only), a categorical
//! attribute set, and an image feature vector. Each content view gets its own
//! Gaussian encoder; a product of experts extracts the view-common latent and
//! a user-conditioned gate mixes the view-unique latents. A decoder turns the
//! fused latent into an item embedding, so items with no interactions can
//! still be scored against users.

pub mod autodiff;
pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod model;
pub mod params;
pub mod theory;
pub mod training;

pub use error::{Error, Result};
