pub mod analysis;
pub mod autoencoder;
pub mod checkpoint;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod scene;
pub mod tensor;

pub use error::{Error, Result};
pub use scene::{compose_image, gen_albedo, gen_scene, gen_shading, SceneSample};
pub use tensor::{ImageTensor, LatentTensor, ShadingField};
