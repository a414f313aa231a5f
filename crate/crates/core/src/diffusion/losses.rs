//! Decomposition losses. All squared-error terms are means over elements; the
//! positivity penalty is a mean hinge.

use ndarray::{Array, Dimension};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Elem;
use crate::tensor::LatentTensor;

use super::LatentDecomposition;

fn same_shape(a: &LatentTensor, b: &LatentTensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn mse_f64<'a>(target: &LatentTensor, parts: impl IntoIterator<Item = &'a LatentTensor>) -> f64 {
    let mut pred = ndarray::Array3::<f64>::zeros(target.data().raw_dim());
    for p in parts {
        pred += p.data();
    }
    let n = target.len() as f64;
    pred.iter()
        .zip(target.data().iter())
        .map(|(p, t)| (t - p) * (t - p))
        .sum::<f64>()
        / n
}

/// `mean((z_j - (z_A + z_E))^2)`.
pub fn loss_relight(z_j: &LatentTensor, dec: &LatentDecomposition) -> Result<f64> {
    same_shape(z_j, &dec.albedo, "relight")?;
    same_shape(z_j, &dec.lighting, "relight")?;
    Ok(mse_f64(z_j, [&dec.albedo, &dec.lighting]))
}

/// Mean over unordered pairs of the mean squared difference between albedo latents.
pub fn loss_albedo(albedos: &[LatentTensor]) -> Result<f64> {
    if albedos.len() < 2 {
        return Err(Error::param("albedo loss needs at least two latents"));
    }
    for a in &albedos[1..] {
        same_shape(&albedos[0], a, "albedo")?;
    }
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..albedos.len() {
        for j in i + 1..albedos.len() {
            sum += mse_f64(&albedos[i], [&albedos[j]]);
            pairs += 1;
        }
    }
    Ok(sum / pairs as f64)
}

/// `mean((z_i - (z_A_i + z_E_i_cross))^2)`, where the lighting part was predicted
/// under a different conditioning latent.
pub fn loss_consistency(
    z_i: &LatentTensor,
    z_a_i: &LatentTensor,
    z_e_i_cross: &LatentTensor,
) -> Result<f64> {
    same_shape(z_i, z_a_i, "consistency")?;
    same_shape(z_i, z_e_i_cross, "consistency")?;
    Ok(mse_f64(z_i, [z_a_i, z_e_i_cross]))
}

/// `mean((z_j - z_A_i)^2)`.
pub fn loss_invariant(z_j: &LatentTensor, z_a_i: &LatentTensor) -> Result<f64> {
    same_shape(z_j, z_a_i, "invariant")?;
    Ok(mse_f64(z_j, [z_a_i]))
}

/// `mean(max(0, z_E))`.
pub fn loss_reg(z_e: &LatentTensor) -> f64 {
    z_e.data().iter().map(|v| v.max(0.0)).sum::<f64>() / z_e.len() as f64
}

/// The five named loss terms of one step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub relight: f64,
    pub albedo: f64,
    pub consistency: f64,
    pub invariant: f64,
    pub reg: f64,
}

impl LossParts {
    pub fn named(&self) -> [(&'static str, f64); 5] {
        [
            ("relight", self.relight),
            ("albedo", self.albedo),
            ("consistency", self.consistency),
            ("invariant", self.invariant),
            ("reg", self.reg),
        ]
    }
}

/// `relight + albedo + consistency + lambda (invariant + reg)`.
pub fn total_loss(parts: &LossParts, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::param(format!("lambda {lambda} must be non-negative")));
    }
    if let Some((name, v)) = parts.named().into_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::Numeric {
            term: name.into(),
            detail: format!("value {v}"),
        });
    }
    Ok(parts.relight + parts.albedo + parts.consistency + lambda * (parts.invariant + parts.reg))
}

/// Mean squared error of `pred` against `target` and its gradient with respect to
/// `pred`, each scaled by `weight`.
pub fn mse_grad<F: Elem, D: Dimension>(
    pred: &Array<F, D>,
    target: &Array<F, D>,
    weight: f64,
) -> (f64, Array<F, D>) {
    let n = pred.len() as f64;
    let diff = pred - target;
    let value = diff.iter().map(|d| d.as_f64().powi(2)).sum::<f64>() / n;
    let scale = F::of(2.0 * weight / n);
    (value, diff.mapv(|d| d * scale))
}

/// Mean hinge `mean(max(0, x))` and its (sub)gradient scaled by `weight`; the kink at
/// zero takes gradient 0.
pub fn hinge_grad<F: Elem, D: Dimension>(x: &Array<F, D>, weight: f64) -> (f64, Array<F, D>) {
    let n = x.len() as f64;
    let value = x.iter().map(|v| v.as_f64().max(0.0)).sum::<f64>() / n;
    let g = F::of(weight / n);
    (value, x.mapv(|v| if v > F::zero() { g } else { F::zero() }))
}
