#![allow(dead_code)]

use albedo_core::autoencoder::{train_autoencoder, AutoencoderConfig, AutoencoderParams};
use albedo_core::diffusion::{train_diffusion, DenoiserConfig, DiffusionModel, TrainConfig};
use albedo_core::scene::gen_scenes;
use albedo_core::{LatentTensor, SceneSample};
use ndarray::Array3;

/// Latent of shape (1, n, 1) holding `values`.
pub fn lat(values: &[f64]) -> LatentTensor {
    LatentTensor::from_vec_unchecked(1, values.len(), 1, values.to_vec())
}

pub fn lat_from(h: usize, w: usize, c: usize, f: impl Fn(usize, usize, usize) -> f64) -> LatentTensor {
    LatentTensor::new(Array3::from_shape_fn((h, w, c), |(y, x, ch)| f(y, x, ch))).unwrap()
}

pub fn tiny_ae_config() -> AutoencoderConfig {
    AutoencoderConfig {
        base_width: 8,
        epochs: 1,
        batch_size: 4,
        ..Default::default()
    }
}

pub fn tiny_denoiser() -> DenoiserConfig {
    DenoiserConfig {
        widths: vec![8, 8, 8],
        time_embedding_dim: 8,
        ..Default::default()
    }
}

pub fn tiny_train(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 2,
        timesteps: 20,
        ..Default::default()
    }
}

pub struct Tiny {
    pub scenes: Vec<SceneSample>,
    pub ae: AutoencoderParams,
    pub model: DiffusionModel,
}

/// Four 32×32 scenes, a one-epoch autoencoder and a denoiser trained for `steps`.
pub fn tiny_pipeline(steps: usize) -> Tiny {
    let scenes = gen_scenes(5, 4, 3, 32, 32).unwrap();
    let ae = train_autoencoder(&scenes, &tiny_ae_config()).unwrap();
    let model = train_diffusion(&scenes, &ae, &tiny_denoiser(), &tiny_train(steps), None)
        .unwrap()
        .model;
    Tiny { scenes, ae, model }
}
