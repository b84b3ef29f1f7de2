//! Token boosting for masked-autoencoder vision transformers, at desk scale.
//!
//! Layout:
//! - [`tensor`]: 64-bit tensors, reverse-mode tape, PRNG, AdamW, checkpoints
//! - [`data`]: procedural images and toy corruptions
//! - [`tbm`]: the token boosting module
//! - [`vt`]: toy ViT encoder, masking and the reconstruction decoder
//! - [`train`]: pre-training, linear probe, supervised training, ablations
//! - [`theory`]: Monte-Carlo checks of the closed-form results
//! - [`exec`]: sequential / rayon execution switch

pub mod data;
pub mod exec;
pub mod tbm;
pub mod tensor;
pub mod theory;
pub mod train;
pub mod vt;
