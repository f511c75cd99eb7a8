//! Swin masked autoencoder.

pub mod decoder;
pub mod encoder;
pub mod layers;
pub mod mae;
pub mod recon;
pub mod spec;
pub mod vit_mae;

pub use mae::{check_same_layout, Forward, SwinMae};
pub use recon::{flatten, reconstruct, upscale_nearest};
pub use spec::{token_dim, DecoderVariant, EncoderVariant, Geometry, ModelSpec, ReconSpec};
