//! Image, shading and latent containers.
//!
//! All three are thin wrappers over `ndarray` arrays in row-major `(row, col, channel)`
//! order, which is also the NHWC layout used by the network engine, so a batch is just
//! a stack of these along a leading axis.

use ndarray::{Array2, Array3, ArrayView3, Axis};

use crate::error::{Error, Result};

pub const MIN_IMAGE_SIDE: usize = 8;
pub const MIN_LATENT_SIDE: usize = 2;

/// H×W×3 image with every value in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor(Array3<f64>);

impl ImageTensor {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (h, w, c) = data.dim();
        if c != 3 {
            return Err(Error::dim(format!("image must have 3 channels, got {c}")));
        }
        if h < MIN_IMAGE_SIDE || w < MIN_IMAGE_SIDE {
            return Err(Error::dim(format!(
                "image must be at least {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}, got {h}x{w}"
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::param(format!("image value {v} outside [0, 1]")));
        }
        Ok(ImageTensor(data))
    }

    /// Clamps into `[0, 1]` before validating shape.
    pub fn from_clamped(mut data: Array3<f64>) -> Result<Self> {
        data.mapv_inplace(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
        Self::new(data)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(Array3::from_elem((height, width, 3), value))
    }

    pub fn height(&self) -> usize {
        self.0.dim().0
    }

    pub fn width(&self) -> usize {
        self.0.dim().1
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.0
    }

    pub fn view(&self) -> ArrayView3<'_, f64> {
        self.0.view()
    }

    pub fn into_inner(self) -> Array3<f64> {
        self.0
    }

    /// Per-pixel luminance as the mean of the three channels.
    pub fn luminance(&self) -> Array2<f64> {
        self.0.mean_axis(Axis(2)).expect("three channels")
    }
}

/// Single-channel multiplicative illumination field.
#[derive(Debug, Clone, PartialEq)]
pub struct ShadingField(Array2<f64>);

impl ShadingField {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        let (h, w) = data.dim();
        if h < MIN_IMAGE_SIDE || w < MIN_IMAGE_SIDE {
            return Err(Error::dim(format!("shading field too small: {h}x{w}")));
        }
        if let Some(v) = data.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::param(format!("shading value {v} must be positive")));
        }
        Ok(ShadingField(data))
    }

    pub fn uniform(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(Array2::from_elem((height, width), value))
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.0
    }

    /// Largest absolute difference between 4-adjacent values.
    pub fn max_adjacent_delta(&self) -> f64 {
        max_adjacent_delta(&self.0)
    }
}

pub(crate) fn max_adjacent_delta(a: &Array2<f64>) -> f64 {
    let (h, w) = a.dim();
    let mut best = 0.0f64;
    for y in 0..h {
        for x in 0..w {
            if x + 1 < w {
                best = best.max((a[[y, x]] - a[[y, x + 1]]).abs());
            }
            if y + 1 < h {
                best = best.max((a[[y, x]] - a[[y + 1, x]]).abs());
            }
        }
    }
    best
}

/// h×w×c latent in autoencoder space. Values must be finite.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor(Array3<f64>);

impl LatentTensor {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (h, w, c) = data.dim();
        if h < MIN_LATENT_SIDE || w < MIN_LATENT_SIDE || c == 0 {
            return Err(Error::dim(format!("latent shape {h}x{w}x{c} too small")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                term: "latent".into(),
                detail: "non-finite value".into(),
            });
        }
        Ok(LatentTensor(data))
    }

    /// Builds a latent without the minimum-size check, for scalar fixtures.
    pub fn from_vec_unchecked(h: usize, w: usize, c: usize, values: Vec<f64>) -> Self {
        LatentTensor(Array3::from_shape_vec((h, w, c), values).expect("shape matches length"))
    }

    /// Wraps an array without validation; the caller guarantees finite values.
    pub(crate) fn from_array_unchecked(data: Array3<f64>) -> Self {
        LatentTensor(data)
    }

    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        LatentTensor(Array3::zeros((h, w, c)))
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.0.dim()
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.0
    }

    pub fn data_mut(&mut self) -> &mut Array3<f64> {
        &mut self.0
    }

    pub fn into_inner(self) -> Array3<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn l2_distance(&self, other: &LatentTensor) -> f64 {
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl std::ops::Add for &LatentTensor {
    type Output = LatentTensor;

    fn add(self, rhs: &LatentTensor) -> LatentTensor {
        LatentTensor(&self.0 + &rhs.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_rejects_out_of_range_values() {
        let mut a = Array3::from_elem((8, 8, 3), 0.5);
        a[[1, 1, 1]] = 1.2;
        assert!(matches!(ImageTensor::new(a), Err(Error::Parameter(_))));
    }

    #[test]
    fn image_rejects_small_or_wrong_channels() {
        assert!(matches!(
            ImageTensor::new(Array3::zeros((4, 8, 3))),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            ImageTensor::new(Array3::zeros((8, 8, 1))),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn latent_rejects_nan() {
        let mut a = Array3::zeros((2, 2, 1));
        a[[0, 0, 0]] = f64::NAN;
        assert!(LatentTensor::new(a).is_err());
    }

    #[test]
    fn adjacent_delta_scans_both_axes() {
        let mut a = Array2::from_elem((8, 8), 1.0);
        a[[7, 3]] = 1.3;
        let s = ShadingField::new(a).unwrap();
        assert!((s.max_adjacent_delta() - 0.3).abs() < 1e-12);
    }
}
