//! Conditional dual-head latent diffusion: forward noising, the decomposition losses,
//! the denoiser networks and the training loop.

mod blur;
mod denoiser;
mod losses;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::LatentTensor;

pub use blur::{blur_lighting, gaussian_kernel};
pub(crate) use blur::{blur_batch, blur_batch_adjoint};
pub use denoiser::{Denoiser, DenoiserConfig, LinearStandIn, UNet};
pub use losses::{
    hinge_grad, loss_albedo, loss_consistency, loss_invariant, loss_reg, loss_relight, mse_grad, total_loss,
    LossParts,
};
pub use train::{
    encode_scene_latents, step_objective, train_diffusion, train_step, DiffusionModel, DiffusionMeta,
    PairBatch, StepDraws, StepReport, TrainConfig, TrainOutcome, CHECKPOINT_KIND, LOG_HEADER,
};

pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 2e-2;

/// Variance-preserving schedule with linearly spaced betas. Timesteps are 1-based;
/// `alpha_bar(0)` is defined as exactly 1 so the last sampler step lands on the clean
/// prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// `alpha_bar(t)` for `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::param(format!(
                "timestep {t} outside [1, {}]",
                self.steps()
            )));
        }
        Ok(())
    }
}

pub fn make_schedule(steps: usize) -> Result<NoiseSchedule> {
    if steps < 1 {
        return Err(Error::param("schedule needs at least one timestep"));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                BETA_START
            } else {
                BETA_START + (BETA_END - BETA_START) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let alpha_bars = betas
        .iter()
        .scan(1.0, |acc, b| {
            *acc *= 1.0 - b;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule { betas, alpha_bars })
}

/// `sqrt(alpha_bar_t) z + sqrt(1 - alpha_bar_t) eps`.
pub fn add_noise(
    z: &LatentTensor,
    eps: &LatentTensor,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<LatentTensor> {
    if z.shape() != eps.shape() {
        return Err(Error::dim("latent and noise shapes differ"));
    }
    sched.check_t(t)?;
    let a = sched.alpha_bar(t);
    let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
    let mut out = z.data() * sa;
    out.zip_mut_with(eps.data(), |o, e| *o += sn * e);
    LatentTensor::new(out)
}

/// Lighting-invariant and lighting-dependent parts of a latent.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentDecomposition {
    pub albedo: LatentTensor,
    pub lighting: LatentTensor,
}

impl LatentDecomposition {
    pub fn new(albedo: LatentTensor, lighting: LatentTensor) -> Result<Self> {
        if albedo.shape() != lighting.shape() {
            return Err(Error::dim("decomposition heads must share a shape"));
        }
        Ok(LatentDecomposition { albedo, lighting })
    }

    /// `z_A + z_E`.
    pub fn recompose(&self) -> LatentTensor {
        &self.albedo + &self.lighting
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn schedule_endpoints() {
        let s = make_schedule(1000).unwrap();
        assert_eq!(s.steps(), 1000);
        assert!(s.alpha_bar(1000) < 0.05);
        assert!((s.alpha_bar(1) - 1.0).abs() < 1e-3);
        assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
        let one = make_schedule(1).unwrap();
        assert_eq!(one.alpha_bar(1), 1.0 - one.beta(1));
        assert!(make_schedule(0).is_err());
    }

    #[test]
    fn add_noise_with_zero_eps_scales() {
        let s = make_schedule(100).unwrap();
        let z = LatentTensor::new(Array3::from_elem((2, 2, 1), 3.0)).unwrap();
        let e = LatentTensor::zeros(2, 2, 1);
        let out = add_noise(&z, &e, 40, &s).unwrap();
        let expect = 3.0 * s.alpha_bar(40).sqrt();
        assert!(out.data().iter().all(|v| *v == expect));
        assert!(add_noise(&z, &e, 0, &s).is_err());
        assert!(add_noise(&z, &e, 101, &s).is_err());
    }
}
