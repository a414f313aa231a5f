//! Separable Gaussian blur with half-sample symmetric ("reflect") borders, plus its
//! adjoint for backpropagation.

use ndarray::{Array1, Array3, Array4, ArrayViewMut1, Axis};

use crate::error::{Error, Result};
use crate::nn::Elem;
use crate::tensor::LatentTensor;

const TRUNCATE: f64 = 4.0;

/// Normalized 1-D Gaussian taps, radius `round(4 sigma)`. Index `r` is the centre.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (TRUNCATE * sigma + 0.5) as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|x| (-0.5 * (x as f64 / sigma).powi(2)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|w| w / sum).collect()
}

/// Maps any integer index into `0..n` by mirroring about the half-sample edges
/// (`d c b a | a b c d | d c b a`).
fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period) as usize;
    if m < n {
        m
    } else {
        2 * n - 1 - m
    }
}

fn conv_lane<F: Elem>(mut lane: ArrayViewMut1<F>, kernel: &[F], scratch: &mut Array1<F>, adjoint: bool) {
    let n = lane.len();
    let r = (kernel.len() / 2) as isize;
    scratch.fill(F::zero());
    for x in 0..n {
        for (k, &w) in kernel.iter().enumerate() {
            let src = reflect(x as isize + k as isize - r, n);
            if adjoint {
                scratch[src] += w * lane[x];
            } else {
                scratch[x] += w * lane[src];
            }
        }
    }
    lane.assign(scratch);
}

fn blur_sample<F: Elem>(x: &mut Array3<F>, sigma: f64, adjoint: bool) {
    if sigma == 0.0 {
        return;
    }
    let kernel: Vec<F> = gaussian_kernel(sigma).into_iter().map(F::of).collect();
    // Blurring rows then columns; the adjoint reverses the order, though the two
    // passes commute anyway.
    let axes = if adjoint { [1, 0] } else { [0, 1] };
    for axis in axes {
        let mut scratch = Array1::zeros(x.len_of(Axis(axis)));
        for lane in x.lanes_mut(Axis(axis)) {
            conv_lane(lane, &kernel, &mut scratch, adjoint);
        }
    }
}

/// Blurs each batch sample with its own sigma (0 leaves the sample untouched).
pub(crate) fn blur_batch<F: Elem>(x: &Array4<F>, sigmas: &[f64]) -> Array4<F> {
    apply(x, sigmas, false)
}

/// Transpose of [`blur_batch`] for the same sigmas.
pub(crate) fn blur_batch_adjoint<F: Elem>(g: &Array4<F>, sigmas: &[f64]) -> Array4<F> {
    apply(g, sigmas, true)
}

fn apply<F: Elem>(x: &Array4<F>, sigmas: &[f64], adjoint: bool) -> Array4<F> {
    assert_eq!(x.len_of(Axis(0)), sigmas.len(), "one sigma per sample");
    let mut out = x.to_owned();
    for (mut sample, &sigma) in out.outer_iter_mut().zip(sigmas) {
        let mut owned = sample.to_owned();
        blur_sample(&mut owned, sigma, adjoint);
        sample.assign(&owned);
    }
    out
}

/// Channelwise 2-D Gaussian blur of a lighting latent. `sigma = 0` returns the input
/// unchanged.
pub fn blur_lighting(z: &LatentTensor, sigma: f64) -> Result<LatentTensor> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::param(format!("blur sigma {sigma} must be non-negative")));
    }
    let mut data = z.data().clone();
    blur_sample(&mut data, sigma, false);
    LatentTensor::new(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng as _;

    #[test]
    fn reflect_is_half_sample_symmetric() {
        let n = 4;
        let got: Vec<usize> = (-5..9).map(|i| reflect(i, n)).collect();
        assert_eq!(got, vec![3, 3, 2, 1, 0, 0, 1, 2, 3, 3, 2, 1, 0, 0]);
    }

    #[test]
    fn kernel_is_normalized_and_symmetric() {
        let k = gaussian_kernel(1.3);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(k.len() % 2, 1);
        for i in 0..k.len() / 2 {
            assert_eq!(k[i], k[k.len() - 1 - i]);
        }
    }

    #[test]
    fn adjoint_matches_inner_product() {
        let mut rng = rng_from_seed(5);
        let shape = (2, 6, 5, 3);
        let x = Array4::from_shape_simple_fn(shape, || rng.random_range(-1.0..1.0f64));
        let y = Array4::from_shape_simple_fn(shape, || rng.random_range(-1.0..1.0f64));
        let sig = [0.7, 2.0];
        let lhs = (&blur_batch(&x, &sig) * &y).sum();
        let rhs = (&x * &blur_batch_adjoint(&y, &sig)).sum();
        assert!((lhs - rhs).abs() < 1e-12, "{lhs} vs {rhs}");
    }

    #[test]
    fn negative_sigma_rejected() {
        assert!(blur_lighting(&LatentTensor::zeros(2, 2, 1), -0.1).is_err());
    }
}
