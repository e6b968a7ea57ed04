//! Synthetic stand-in for a latent video generator and its geometry model.

pub mod decoder;
pub mod policy;
pub mod pretrain;

pub use decoder::{ScenePreset, ToyDecoder, COND_DIM, LATENT_DIM};
pub use policy::{Architecture, ForwardCache, PolicyNetwork};
pub use pretrain::{evaluation_loss, pretrain_flow, LatentPrior, PretrainConfig, PretrainLog};
