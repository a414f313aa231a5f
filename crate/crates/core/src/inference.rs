//! Albedo generation: guided DDIM sampling of the dual-head denoiser, averaged over
//! several samples in latent space.

use ndarray::{Array3, Array4, Axis};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autoencoder::AutoencoderParams;
use crate::diffusion::{DiffusionModel, LatentDecomposition, NoiseSchedule};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed, Rng};
use crate::tensor::{ImageTensor, LatentTensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceConfig {
    pub ddim_steps: usize,
    pub guidance_scale: f64,
    pub n_samples: usize,
    pub eta: f64,
    pub seed: u64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            ddim_steps: 50,
            guidance_scale: 1.5,
            n_samples: 10,
            eta: 0.0,
            seed: 0,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self, timesteps: usize) -> Result<()> {
        if self.ddim_steps < 1 || self.ddim_steps > timesteps {
            return Err(Error::param(format!(
                "ddim_steps {} outside [1, {timesteps}]",
                self.ddim_steps
            )));
        }
        if self.n_samples < 1 {
            return Err(Error::param("n_samples must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::param("eta must lie in [0, 1]"));
        }
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return Err(Error::param("guidance_scale must be non-negative"));
        }
        Ok(())
    }
}

/// Uniform-stride subsequence of `[T, ..., 1]` with `n` entries; always starts at `T`
/// and ends at 1 (a single step uses `T` alone).
pub fn ddim_timesteps(timesteps: usize, n: usize) -> Result<Vec<usize>> {
    if n < 1 || n > timesteps {
        return Err(Error::param(format!("cannot take {n} of {timesteps} timesteps")));
    }
    if n == 1 {
        return Ok(vec![timesteps]);
    }
    Ok((0..n)
        .map(|k| timesteps - k * (timesteps - 1) / (n - 1))
        .collect())
}

/// DDIM update in terms of the two cumulative coefficients. `noise` is required when
/// `eta > 0` and ignored otherwise.
pub fn ddim_update(
    z_t: &LatentTensor,
    x0_pred: &LatentTensor,
    alpha_bar_t: f64,
    alpha_bar_prev: f64,
    eta: f64,
    noise: Option<&LatentTensor>,
) -> Result<LatentTensor> {
    if z_t.shape() != x0_pred.shape() {
        return Err(Error::dim("z_t and x0_pred shapes differ"));
    }
    let mut out = z_t.data().clone();
    let coef = DdimCoefficients::new(alpha_bar_t, alpha_bar_prev, eta);
    match (coef.sigma > 0.0, noise) {
        (true, None) => return Err(Error::param("eta > 0 needs a noise sample")),
        (true, Some(n)) if n.shape() != z_t.shape() => {
            return Err(Error::dim("noise shape differs from z_t"))
        }
        _ => {}
    }
    ndarray::Zip::from(&mut out)
        .and(x0_pred.data())
        .for_each(|z, &x0| *z = coef.apply(*z, x0));
    if coef.sigma > 0.0 {
        out.zip_mut_with(noise.unwrap().data(), |o, n| *o += coef.sigma * n);
    }
    LatentTensor::new(out)
}

/// One DDIM reverse step from `t` to `t_prev` (`t_prev = 0` lands on the clean sample).
pub fn ddim_step(
    z_t: &LatentTensor,
    x0_pred: &LatentTensor,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
    eta: f64,
    noise: Option<&LatentTensor>,
) -> Result<LatentTensor> {
    if t <= t_prev {
        return Err(Error::param(format!("t = {t} must exceed t_prev = {t_prev}")));
    }
    sched.check_t(t)?;
    ddim_update(z_t, x0_pred, sched.alpha_bar(t), sched.alpha_bar(t_prev), eta, noise)
}

#[derive(Debug, Clone, Copy)]
struct DdimCoefficients {
    sqrt_ab_t: f64,
    inv_sqrt_one_minus_ab_t: f64,
    sqrt_ab_prev: f64,
    dir: f64,
    sigma: f64,
}

impl DdimCoefficients {
    fn new(ab_t: f64, ab_prev: f64, eta: f64) -> Self {
        let sigma = if eta > 0.0 {
            eta * ((1.0 - ab_prev) / (1.0 - ab_t)).sqrt() * (1.0 - ab_t / ab_prev).max(0.0).sqrt()
        } else {
            0.0
        };
        DdimCoefficients {
            sqrt_ab_t: ab_t.sqrt(),
            inv_sqrt_one_minus_ab_t: 1.0 / (1.0 - ab_t).sqrt(),
            sqrt_ab_prev: ab_prev.sqrt(),
            dir: (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt(),
            sigma,
        }
    }

    /// Deterministic part of the update: re-noise `x0` with the implied noise.
    fn apply(&self, z: f64, x0: f64) -> f64 {
        let eps = (z - self.sqrt_ab_t * x0) * self.inv_sqrt_one_minus_ab_t;
        self.sqrt_ab_prev * x0 + self.dir * eps
    }
}

/// Classifier-free guidance of one head: `uncond + scale (cond - uncond)`.
pub fn guide(uncond: &LatentTensor, cond: &LatentTensor, scale: f64) -> Result<LatentTensor> {
    if uncond.shape() != cond.shape() {
        return Err(Error::dim("guidance heads differ in shape"));
    }
    let mut out = uncond.data().clone();
    out.zip_mut_with(cond.data(), |u, &c| *u += scale * (c - *u));
    LatentTensor::new(out)
}

/// Runs the denoiser with and without the condition and guides both heads.
pub fn guided_decompose(
    model: &DiffusionModel,
    z_t: &LatentTensor,
    t: usize,
    cond: &LatentTensor,
    scale: f64,
) -> Result<LatentDecomposition> {
    if !(scale >= 0.0) {
        return Err(Error::param("guidance scale must be non-negative"));
    }
    let c = model.denoise_decompose(z_t, t, Some(cond))?;
    let u = model.denoise_decompose(z_t, t, None)?;
    LatentDecomposition::new(guide(&u.albedo, &c.albedo, scale)?, guide(&u.lighting, &c.lighting, scale)?)
}

fn normal(shape: (usize, usize, usize), rng: &mut Rng) -> Array3<f64> {
    Array3::from_shape_simple_fn(shape, || StandardNormal.sample(rng))
}

/// Guided DDIM sampling for a batch of rows, row `r` conditioned on `conds[r]` (model
/// space) with initial noise from `seeds[r]`. Returns the decomposition predicted at
/// the final iteration for each row. Does not check whether the model was trained.
pub fn run_sampler(
    model: &DiffusionModel,
    conds: &[&LatentTensor],
    seeds: &[u64],
    cfg: &InferenceConfig,
) -> Result<Vec<LatentDecomposition>> {
    let sched = model.schedule();
    cfg.validate(sched.steps())?;
    if conds.len() != seeds.len() {
        return Err(Error::param("one seed per conditioning latent"));
    }
    if conds.is_empty() {
        return Ok(Vec::new());
    }
    let shape = model.meta().latent_shape;
    if let Some(c) = conds.iter().find(|c| c.shape() != shape) {
        return Err(Error::dim(format!(
            "conditioning latent {:?} does not match the model's {shape:?}",
            c.shape()
        )));
    }
    let n = conds.len();
    let (h, w, ch) = shape;
    let mut rngs: Vec<Rng> = seeds.iter().map(|&s| rng_from_seed(s)).collect();
    let mut z = Array4::<f64>::zeros((n, h, w, ch));
    for (mut row, rng) in z.outer_iter_mut().zip(&mut rngs) {
        row.assign(&normal(shape, rng));
    }
    // Conditional rows first, then the same rows with the null condition.
    let mut cond_batch = Array4::<f32>::zeros((2 * n, h, w, ch));
    for (r, c) in conds.iter().enumerate() {
        cond_batch
            .index_axis_mut(Axis(0), r)
            .assign(&c.data().mapv(|v| v as f32));
    }

    let ts = ddim_timesteps(sched.steps(), cfg.ddim_steps)?;
    let s = cfg.guidance_scale;
    let mut last = None;
    for (k, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(k + 1).copied().unwrap_or(0);
        let zf = z.mapv(|v| v as f32);
        let noisy = ndarray::concatenate(Axis(0), &[zf.view(), zf.view()]).expect("same shapes");
        let (a, e) = model.forward_batch(&noisy, &vec![t; 2 * n], &cond_batch);
        let guided = |x: &Array4<f32>| -> Array4<f64> {
            let mut out = x.slice(ndarray::s![n.., .., .., ..]).mapv(|v| v as f64);
            out.zip_mut_with(&x.slice(ndarray::s![..n, .., .., ..]), |u, &c| *u += s * (c as f64 - *u));
            out
        };
        let albedo = guided(&a);
        let lighting = guided(&e);
        let x0 = &albedo + &lighting;
        let coef = DdimCoefficients::new(sched.alpha_bar(t), sched.alpha_bar(t_prev), cfg.eta);
        ndarray::Zip::from(&mut z).and(&x0).for_each(|z, &x| *z = coef.apply(*z, x));
        if coef.sigma > 0.0 {
            for (mut row, rng) in z.outer_iter_mut().zip(&mut rngs) {
                row.scaled_add(coef.sigma, &normal(shape, rng));
            }
        }
        if !z.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric {
                term: "sampler".into(),
                detail: format!("non-finite latent at t = {t}"),
            });
        }
        last = Some((albedo, lighting));
    }
    let (albedo, lighting) = last.expect("at least one step");
    albedo
        .outer_iter()
        .zip(lighting.outer_iter())
        .map(|(a, e)| {
            LatentDecomposition::new(LatentTensor::new(a.to_owned())?, LatentTensor::new(e.to_owned())?)
        })
        .collect()
}

/// One albedo latent (model space) for the conditioning latent `cond`, seeded from
/// `cfg.seed`.
pub fn sample_albedo_latent(
    cond: &LatentTensor,
    cfg: &InferenceConfig,
    model: &DiffusionModel,
) -> Result<LatentTensor> {
    require_trained(model)?;
    Ok(run_sampler(model, &[cond], &[sample_seed(cfg.seed, 0)], cfg)?
        .remove(0)
        .albedo)
}

/// Seed of the `k`-th sample for one image.
pub fn sample_seed(seed: u64, k: usize) -> u64 {
    derive_seed(seed, k as u64)
}

fn require_trained(model: &DiffusionModel) -> Result<()> {
    if !model.is_trained() {
        return Err(Error::State("denoiser has not been trained".into()));
    }
    Ok(())
}

/// Mean of the `n_samples` albedo latents (model space) for each conditioning latent,
/// together with the final-step lighting latents of every sample.
pub fn mean_albedo_latents(
    model: &DiffusionModel,
    conds: &[&LatentTensor],
    cfg: &InferenceConfig,
) -> Result<Vec<(LatentTensor, Vec<LatentTensor>)>> {
    let k = cfg.n_samples;
    let rows: Vec<&LatentTensor> = conds.iter().flat_map(|c| std::iter::repeat_n(*c, k)).collect();
    let seeds: Vec<u64> = (0..conds.len())
        .flat_map(|_| (0..k).map(|j| sample_seed(cfg.seed, j)))
        .collect();
    let out = run_sampler(model, &rows, &seeds, cfg)?;
    out.chunks(k)
        .map(|group| {
            let mut mean = group[0].albedo.data().clone();
            for d in &group[1..] {
                mean += d.albedo.data();
            }
            mean /= k as f64;
            Ok((
                LatentTensor::new(mean)?,
                group.iter().map(|d| d.lighting.clone()).collect(),
            ))
        })
        .collect()
}

/// Albedo estimates for a set of equally sized images: encode, sample `n_samples`
/// albedo latents each, average in latent space, decode once.
pub fn predict_albedos(
    images: &[&ImageTensor],
    cfg: &InferenceConfig,
    ae: &AutoencoderParams,
    model: &DiffusionModel,
) -> Result<Vec<ImageTensor>> {
    require_trained(model)?;
    let latents: Vec<LatentTensor> = ae
        .encode_batch(images)?
        .iter()
        .map(|z| model.normalize(z))
        .collect();
    let refs: Vec<&LatentTensor> = latents.iter().collect();
    let means: Vec<LatentTensor> = mean_albedo_latents(model, &refs, cfg)?
        .into_iter()
        .map(|(m, _)| model.denormalize(&m))
        .collect();
    ae.decode_batch(&means.iter().collect::<Vec<_>>())
}

pub fn predict_albedo(
    image: &ImageTensor,
    cfg: &InferenceConfig,
    ae: &AutoencoderParams,
    model: &DiffusionModel,
) -> Result<ImageTensor> {
    Ok(predict_albedos(&[image], cfg, ae, model)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subsequence_runs_from_t_to_one() {
        let ts = ddim_timesteps(1000, 50).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!((ts[0], ts[49]), (1000, 1));
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(ddim_timesteps(1000, 1).unwrap(), vec![1000]);
        assert_eq!(ddim_timesteps(5, 5).unwrap(), vec![5, 4, 3, 2, 1]);
        assert!(ddim_timesteps(5, 6).is_err());
    }

    #[test]
    fn eta_needs_noise() {
        let z = LatentTensor::zeros(2, 2, 1);
        assert!(ddim_update(&z, &z, 0.5, 0.9, 0.5, None).is_err());
        assert!(ddim_update(&z, &z, 0.5, 0.9, 0.0, None).is_ok());
    }
}
