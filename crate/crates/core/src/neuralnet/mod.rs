//! Minimal CPU neural-network engine and the U-net built on it.

pub mod checkpoint;
pub mod layers;
pub mod tensor;
pub mod unet;

pub use layers::Mode;
pub use tensor::{Real, Tensor};
pub use unet::{build_unet, count_parameters, Forward, Param, Unet, UnetSpec};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CheckpointManifest};
