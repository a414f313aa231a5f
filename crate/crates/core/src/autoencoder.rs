//! Convolutional VAE providing the frozen latent space.
//!
//! The encoder predicts a diagonal Gaussian posterior; `encode` returns its mean. During
//! training latents are sampled with the reparameterisation trick and a small KL term.

use std::path::Path;

use log::{info, warn};
use ndarray::{s, Array4, Axis};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::nn::{
    depth_to_space2, sigmoid, sigmoid_backward, silu, space_to_depth2, silu_backward, upsample_nearest2, upsample_nearest2_backward,
    Adam, AdamConfig, Conv2d, ConvCache, ParamStore, ResBlock, ResBlockCache,
};
use crate::rng::{rng_from_seed, Rng};
use crate::scene::SceneSample;
use crate::tensor::{ImageTensor, LatentTensor};

pub const CHECKPOINT_KIND: &str = "autoencoder";
pub const PARAMS_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AutoencoderConfig {
    pub downsample_factor: usize,
    pub latent_channels: usize,
    pub base_width: usize,
    pub kl_weight: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        AutoencoderConfig {
            downsample_factor: 4,
            latent_channels: 4,
            base_width: 32,
            kl_weight: 1e-6,
            epochs: 8,
            learning_rate: 2e-3,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl AutoencoderConfig {
    pub fn validate(&self) -> Result<()> {
        let f = self.downsample_factor;
        if f == 0 || !f.is_power_of_two() {
            return Err(Error::param(format!("downsample_factor {f} must be a power of two")));
        }
        if self.latent_channels == 0 {
            return Err(Error::param("latent_channels must be at least 1"));
        }
        if self.base_width < 2 {
            return Err(Error::param("base_width must be at least 2"));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::param("batch_size and epochs must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.kl_weight >= 0.0) {
            return Err(Error::param("learning_rate must be positive and kl_weight non-negative"));
        }
        Ok(())
    }

    fn levels(&self) -> usize {
        self.downsample_factor.trailing_zeros() as usize
    }

    /// Channel width per resolution stage, finest first. The first 2× reduction is a
    /// lossless space-to-depth fold, so stage 0 already runs at half resolution.
    fn widths(&self) -> Vec<usize> {
        let stages = self.levels().max(1);
        (0..stages).map(|j| self.base_width << j).collect()
    }

    fn folds(&self) -> bool {
        self.levels() >= 1
    }
}

#[derive(Debug, Clone)]
struct Network {
    folds: bool,
    enc_in: Conv2d,
    enc_res: Vec<ResBlock>,
    enc_down: Vec<Conv2d>,
    enc_mid: ResBlock,
    enc_out: Conv2d,
    dec_in: Conv2d,
    dec_mid: ResBlock,
    dec_up: Vec<Conv2d>,
    dec_res: Vec<ResBlock>,
    dec_out: Conv2d,
}

impl Network {
    fn build(cfg: &AutoencoderConfig, store: &mut ParamStore<f32>, rng: &mut Rng) -> Self {
        let ch = cfg.widths();
        let last = ch.len() - 1;
        let c = cfg.latent_channels;
        let pixel_ch = if cfg.folds() { 12 } else { 3 };
        let enc_in = Conv2d::new(store, "enc.in", pixel_ch, ch[0], 3, 1, 1.0, rng);
        let mut enc_res = Vec::new();
        let mut enc_down = Vec::new();
        for j in 0..ch.len() {
            enc_res.push(ResBlock::new(store, &format!("enc.res{j}"), ch[j], None, rng));
            if j < last {
                enc_down.push(Conv2d::new(store, &format!("enc.down{j}"), ch[j], ch[j + 1], 3, 2, 1.0, rng));
            }
        }
        let enc_mid = ResBlock::new(store, "enc.mid", ch[last], None, rng);
        let enc_out = Conv2d::new(store, "enc.out", ch[last], 2 * c, 3, 1, 0.5, rng);
        // Start with a narrow posterior so early reconstructions are not swamped by noise.
        for (i, v) in store.value_mut(enc_out.bias).iter_mut().enumerate() {
            if i >= c {
                *v = -6.0;
            }
        }
        let dec_in = Conv2d::new(store, "dec.in", c, ch[last], 3, 1, 1.0, rng);
        let dec_mid = ResBlock::new(store, "dec.mid", ch[last], None, rng);
        let mut dec_up = Vec::new();
        let mut dec_res = Vec::new();
        for j in (0..last).rev() {
            dec_up.push(Conv2d::new(store, &format!("dec.up{j}"), ch[j + 1], ch[j], 3, 1, 1.0, rng));
            dec_res.push(ResBlock::new(store, &format!("dec.res{j}"), ch[j], None, rng));
        }
        let dec_out = Conv2d::new(store, "dec.out", ch[0], pixel_ch, 3, 1, 0.5, rng);
        Network {
            folds: cfg.folds(),
            enc_in,
            enc_res,
            enc_down,
            enc_mid,
            enc_out,
            dec_in,
            dec_mid,
            dec_up,
            dec_res,
            dec_out,
        }
    }
}

struct EncoderCache {
    c_in: ConvCache<f32>,
    res: Vec<ResBlockCache<f32>>,
    down: Vec<ConvCache<f32>>,
    mid: ResBlockCache<f32>,
    pre_out: Array4<f32>,
    c_out: ConvCache<f32>,
}

struct DecoderCache {
    c_in: ConvCache<f32>,
    mid: ResBlockCache<f32>,
    up: Vec<ConvCache<f32>>,
    res: Vec<ResBlockCache<f32>>,
    pre_out: Array4<f32>,
    c_out: ConvCache<f32>,
    out: Array4<f32>,
}

impl Network {
    /// Returns the raw `(mean, logvar)` stacked along channels.
    fn encode(&self, store: &ParamStore<f32>, x: &Array4<f32>) -> (Array4<f32>, EncoderCache) {
        let (mut h, c_in) = if self.folds {
            self.enc_in.forward(store, &space_to_depth2(x))
        } else {
            self.enc_in.forward(store, x)
        };
        let mut res = Vec::new();
        let mut down = Vec::new();
        for (j, r) in self.enc_res.iter().enumerate() {
            let (h1, rc) = r.forward(store, &h, None);
            res.push(rc);
            h = h1;
            if let Some(d) = self.enc_down.get(j) {
                let (h2, dc) = d.forward(store, &h);
                down.push(dc);
                h = h2;
            }
        }
        let (h, mid) = self.enc_mid.forward(store, &h, None);
        let (out, c_out) = self.enc_out.forward(store, &silu(&h));
        (
            out,
            EncoderCache {
                c_in,
                res,
                down,
                mid,
                pre_out: h,
                c_out,
            },
        )
    }

    fn encode_backward(&self, store: &mut ParamStore<f32>, cache: EncoderCache, g: &Array4<f32>) {
        let g = self.enc_out.backward(store, cache.c_out, g, true).unwrap();
        let g = silu_backward(&cache.pre_out, &g);
        let (mut g, _) = self.enc_mid.backward(store, cache.mid, &g);
        let mut down = cache.down;
        for (j, rc) in cache.res.into_iter().enumerate().rev() {
            if let Some(d) = self.enc_down.get(j) {
                let dc = down.pop().expect("one cache per down conv");
                g = d.backward(store, dc, &g, true).unwrap();
            }
            g = self.enc_res[j].backward(store, rc, &g).0;
        }
        self.enc_in.backward(store, cache.c_in, &g, false);
    }

    fn decode(&self, store: &ParamStore<f32>, z: &Array4<f32>) -> (Array4<f32>, DecoderCache) {
        let (h, c_in) = self.dec_in.forward(store, z);
        let (mut h, mid) = self.dec_mid.forward(store, &h, None);
        let mut up = Vec::new();
        let mut res = Vec::new();
        for (u, r) in self.dec_up.iter().zip(&self.dec_res) {
            let (h1, uc) = u.forward(store, &upsample_nearest2(&h));
            let (h2, rc) = r.forward(store, &h1, None);
            up.push(uc);
            res.push(rc);
            h = h2;
        }
        let (logits, c_out) = self.dec_out.forward(store, &silu(&h));
        let logits = if self.folds {
            depth_to_space2(&logits)
        } else {
            logits
        };
        let out = sigmoid(&logits);
        (
            out.clone(),
            DecoderCache {
                c_in,
                mid,
                up,
                res,
                pre_out: h,
                c_out,
                out,
            },
        )
    }

    /// Returns the gradient w.r.t. the latent input.
    fn decode_backward(
        &self,
        store: &mut ParamStore<f32>,
        cache: DecoderCache,
        g_out: &Array4<f32>,
    ) -> Array4<f32> {
        let g = sigmoid_backward(&cache.out, g_out);
        let g = if self.folds { space_to_depth2(&g) } else { g };
        let g = self.dec_out.backward(store, cache.c_out, &g, true).unwrap();
        let mut g = silu_backward(&cache.pre_out, &g);
        for ((u, r), (uc, rc)) in self
            .dec_up
            .iter()
            .zip(&self.dec_res)
            .zip(cache.up.into_iter().zip(cache.res))
            .rev()
        {
            let g1 = r.backward(store, rc, &g).0;
            let g2 = u.backward(store, uc, &g1, true).unwrap();
            g = upsample_nearest2_backward(&g2);
        }
        let (g, _) = self.dec_mid.backward(store, cache.mid, &g);
        self.dec_in.backward(store, cache.c_in, &g, true).unwrap()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderMeta {
    pub version: u32,
    pub config: AutoencoderConfig,
    /// Mean reconstruction MSE per epoch.
    pub epoch_losses: Vec<f64>,
    pub train_images: usize,
}

/// Encoder/decoder weights plus the frozen flag that gates all training entry points.
#[derive(Debug, Clone)]
pub struct AutoencoderParams {
    meta: AutoencoderMeta,
    store: ParamStore<f32>,
    net: Network,
    frozen: bool,
}

pub(crate) fn images_to_batch(images: &[&ImageTensor]) -> Array4<f32> {
    let (h, w) = images[0].dims();
    let mut batch = Array4::<f32>::zeros((images.len(), h, w, 3));
    for (mut dst, im) in batch.outer_iter_mut().zip(images) {
        dst.assign(&im.data().mapv(|v| v as f32));
    }
    batch
}

impl AutoencoderParams {
    /// Freshly initialised, unfrozen parameters.
    pub fn init(config: AutoencoderConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = rng_from_seed(config.seed);
        let net = Network::build(&config, &mut store, &mut rng);
        Ok(AutoencoderParams {
            meta: AutoencoderMeta {
                version: PARAMS_VERSION,
                config,
                epoch_losses: Vec::new(),
                train_images: 0,
            },
            store,
            net,
            frozen: false,
        })
    }

    pub fn config(&self) -> &AutoencoderConfig {
        &self.meta.config
    }

    pub fn meta(&self) -> &AutoencoderMeta {
        &self.meta
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn store(&self) -> &ParamStore<f32> {
        &self.store
    }

    pub fn epoch_losses(&self) -> &[f64] {
        &self.meta.epoch_losses
    }

    /// FNV-1a hash over the raw parameter bits; used to detect mutation.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.store.entries().iter().flat_map(|e| e.value.iter()) {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    fn check_image_dims(&self, h: usize, w: usize) -> Result<()> {
        let f = self.meta.config.downsample_factor;
        if h % f != 0 || w % f != 0 || h / f < 2 || w / f < 2 {
            return Err(Error::dim(format!(
                "image {h}x{w} not divisible into a latent by factor {f}"
            )));
        }
        Ok(())
    }

    fn warn_unfrozen(&self) {
        if !self.frozen {
            warn!("autoencoder used for inference before being frozen");
        }
    }

    /// Posterior means for a batch of equally sized images.
    pub fn encode_batch(&self, images: &[&ImageTensor]) -> Result<Vec<LatentTensor>> {
        let Some(first) = images.first() else {
            return Ok(Vec::new());
        };
        let (h, w) = first.dims();
        self.check_image_dims(h, w)?;
        if images.iter().any(|im| im.dims() != (h, w)) {
            return Err(Error::dim("images in a batch must share dimensions"));
        }
        self.warn_unfrozen();
        let c = self.meta.config.latent_channels;
        let (out, _) = self.net.encode(&self.store, &images_to_batch(images));
        out.outer_iter()
            .map(|o| LatentTensor::new(o.slice(s![.., .., ..c]).mapv(|v| v as f64)))
            .collect()
    }

    pub fn encode(&self, image: &ImageTensor) -> Result<LatentTensor> {
        Ok(self.encode_batch(&[image])?.remove(0))
    }

    pub fn decode_batch(&self, latents: &[&LatentTensor]) -> Result<Vec<ImageTensor>> {
        let Some(first) = latents.first() else {
            return Ok(Vec::new());
        };
        let shape = first.shape();
        if shape.2 != self.meta.config.latent_channels {
            return Err(Error::dim(format!(
                "latent has {} channels, autoencoder expects {}",
                shape.2, self.meta.config.latent_channels
            )));
        }
        if latents.iter().any(|z| z.shape() != shape) {
            return Err(Error::dim("latents in a batch must share a shape"));
        }
        self.warn_unfrozen();
        let mut batch = Array4::<f32>::zeros((latents.len(), shape.0, shape.1, shape.2));
        for (mut dst, z) in batch.outer_iter_mut().zip(latents) {
            dst.assign(&z.data().mapv(|v| v as f32));
        }
        let (out, _) = self.net.decode(&self.store, &batch);
        out.outer_iter()
            .map(|o| ImageTensor::from_clamped(o.mapv(|v| v as f64)))
            .collect()
    }

    pub fn decode(&self, latent: &LatentTensor) -> Result<ImageTensor> {
        Ok(self.decode_batch(&[latent])?.remove(0))
    }

    /// One optimisation step on a batch; returns the reconstruction MSE.
    fn train_batch(&mut self, opt: &mut Adam<f32>, x: &Array4<f32>, rng: &mut Rng) -> f64 {
        let c = self.meta.config.latent_channels;
        let kl_w = self.meta.config.kl_weight as f32;
        let (stats, enc_cache) = self.net.encode(&self.store, x);
        let mean = stats.slice(s![.., .., .., ..c]).to_owned();
        let logvar = stats.slice(s![.., .., .., c..]).mapv(|v| v.clamp(-30.0, 20.0));
        let eps = Array4::<f32>::from_shape_simple_fn(mean.raw_dim(), || StandardNormal.sample(rng));
        let std = logvar.mapv(|v| (0.5 * v).exp());
        let z = &mean + &(&std * &eps);

        let (recon, dec_cache) = self.net.decode(&self.store, &z);
        let n = recon.len() as f32;
        let diff = &recon - x;
        let mse = diff.iter().map(|d| (*d as f64).powi(2)).sum::<f64>() / n as f64;
        let g_recon = diff.mapv(|d| 2.0 * d / n);
        let g_z = self.net.decode_backward(&mut self.store, dec_cache, &g_recon);

        let nz = mean.len() as f32;
        let g_mean = &g_z + &mean.mapv(|m| kl_w * m / nz);
        let mut g_logvar = &g_z * &eps * &std.mapv(|s| 0.5 * s);
        g_logvar.zip_mut_with(&logvar, |g, &lv| *g += kl_w * 0.5 * (lv.exp() - 1.0) / nz);
        let g_stats = ndarray::concatenate(Axis(3), &[g_mean.view(), g_logvar.view()])
            .unwrap()
            .as_standard_layout()
            .to_owned();
        self.net.encode_backward(&mut self.store, enc_cache, &g_stats);
        opt.step(&mut self.store);
        mse
    }

    /// Runs `epochs` passes over `images`. Rejected once the parameters are frozen.
    pub fn train_epochs(&mut self, images: &[&ImageTensor], epochs: usize) -> Result<Vec<f64>> {
        if self.frozen {
            return Err(Error::State("autoencoder parameters are frozen".into()));
        }
        if images.is_empty() {
            return Err(Error::param("autoencoder training needs at least one image"));
        }
        let (h, w) = images[0].dims();
        self.check_image_dims(h, w)?;
        let cfg = self.meta.config.clone();
        let mut rng = rng_from_seed(cfg.seed ^ 0x5eed_ae00 ^ self.meta.epoch_losses.len() as u64);
        let mut opt = Adam::new(
            AdamConfig {
                lr: cfg.learning_rate,
                ..Default::default()
            },
            &self.store,
        );
        let total_steps = epochs * images.len().div_ceil(cfg.batch_size);
        let mut order: Vec<usize> = (0..images.len()).collect();
        let mut losses = Vec::with_capacity(epochs);
        let mut step = 0;
        for epoch in 0..epochs {
            order.shuffle(&mut rng);
            let mut sum = 0.0;
            let mut count = 0;
            for chunk in order.chunks(cfg.batch_size) {
                // Cosine decay to 10% of the base rate.
                let progress = step as f64 / total_steps.max(1) as f64;
                opt.set_lr(cfg.learning_rate * (0.1 + 0.45 * (1.0 + (std::f64::consts::PI * progress).cos())));
                let batch: Vec<&ImageTensor> = chunk.iter().map(|&i| images[i]).collect();
                let x = images_to_batch(&batch);
                sum += self.train_batch(&mut opt, &x, &mut rng) * chunk.len() as f64;
                count += chunk.len();
                step += 1;
            }
            let mean = sum / count as f64;
            if !mean.is_finite() {
                return Err(Error::Numeric {
                    term: "autoencoder reconstruction".into(),
                    detail: format!("loss became {mean} in epoch {epoch}"),
                });
            }
            info!("autoencoder epoch {epoch}: mse {mean:.6}");
            losses.push(mean);
        }
        self.meta.epoch_losses.extend_from_slice(&losses);
        self.meta.train_images = images.len();
        Ok(losses)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, CHECKPOINT_KIND, self.frozen, &self.store, &self.meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (store, side) = checkpoint::load::<AutoencoderMeta>(path, CHECKPOINT_KIND)?;
        if side.meta.version != PARAMS_VERSION {
            return Err(Error::Version {
                path: checkpoint::sidecar_path(path),
                expected: PARAMS_VERSION,
                found: side.meta.version,
            });
        }
        let mut params = AutoencoderParams::init(side.meta.config.clone())?;
        params.store.load_from(&store)?;
        params.meta = side.meta;
        params.frozen = side.frozen;
        Ok(params)
    }
}

/// All light images and albedos of the dataset, in scene order.
pub fn training_images(dataset: &[SceneSample]) -> Vec<&ImageTensor> {
    dataset
        .iter()
        .flat_map(|s| s.images.iter().chain(std::iter::once(&s.albedo)))
        .collect()
}

/// Trains a fresh autoencoder on every image of `dataset` and returns it frozen.
pub fn train_autoencoder(
    dataset: &[SceneSample],
    config: &AutoencoderConfig,
) -> Result<AutoencoderParams> {
    if dataset.is_empty() {
        return Err(Error::param("autoencoder training needs a non-empty dataset"));
    }
    let mut params = AutoencoderParams::init(config.clone())?;
    params.train_epochs(&training_images(dataset), config.epochs)?;
    params.freeze();
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::gen_scenes;

    fn tiny_config() -> AutoencoderConfig {
        AutoencoderConfig {
            base_width: 8,
            epochs: 2,
            batch_size: 4,
            ..Default::default()
        }
    }

    #[test]
    fn shapes_and_determinism() {
        let params = AutoencoderParams::init(tiny_config()).unwrap();
        let img = ImageTensor::filled(64, 64, 0.3).unwrap();
        let z = params.encode(&img).unwrap();
        assert_eq!(z.shape(), (16, 16, 4));
        assert_eq!(z, params.encode(&img).unwrap());
        let back = params.decode(&z).unwrap();
        assert_eq!(back.dims(), (64, 64));
        assert!(back.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn rejects_indivisible_dimensions() {
        let params = AutoencoderParams::init(tiny_config()).unwrap();
        let img = ImageTensor::filled(10, 12, 0.3).unwrap();
        assert!(matches!(params.encode(&img), Err(Error::Dimension(_))));
        let z = LatentTensor::zeros(4, 4, 3);
        assert!(matches!(params.decode(&z), Err(Error::Dimension(_))));
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_config();
        c.downsample_factor = 3;
        assert!(AutoencoderParams::init(c).is_err());
        let mut c = tiny_config();
        c.latent_channels = 0;
        assert!(AutoencoderParams::init(c).is_err());
    }

    #[test]
    fn training_freezes_and_frozen_rejects_training() {
        let data = gen_scenes(5, 2, 2, 32, 32).unwrap();
        assert!(matches!(
            train_autoencoder(&[], &tiny_config()),
            Err(Error::Parameter(_))
        ));
        let mut params = train_autoencoder(&data, &tiny_config()).unwrap();
        assert!(params.is_frozen());
        assert_eq!(params.epoch_losses().len(), 2);
        let imgs = training_images(&data);
        assert!(matches!(params.train_epochs(&imgs, 1), Err(Error::State(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ae.ckpt");
        let mut params = AutoencoderParams::init(tiny_config()).unwrap();
        params.freeze();
        params.save(&path).unwrap();
        let back = AutoencoderParams::load(&path).unwrap();
        assert!(back.is_frozen());
        assert_eq!(back.fingerprint(), params.fingerprint());
        assert_eq!(back.config(), params.config());
    }
}
