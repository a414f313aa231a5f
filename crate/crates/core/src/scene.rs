//! Procedural multi-illumination scenes.
//!
//! Every image is formed as `clamp(albedo * shading, 0, 1)` with a piecewise-constant
//! albedo and a smooth grayscale shading field, so the ground-truth albedo of each scene
//! is known exactly.

use std::collections::VecDeque;

use ndarray::{Array2, Array3};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};
use crate::tensor::{max_adjacent_delta, ImageTensor, ShadingField, MIN_IMAGE_SIDE};

pub const GENERATOR_VERSION: u32 = 1;

pub const ALBEDO_MIN: f64 = 0.05;
pub const ALBEDO_MAX: f64 = 0.95;
pub const MIN_REGIONS: usize = 4;
pub const MAX_REGIONS: usize = 12;
pub const TEXTURE_AMPLITUDE: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShadingConfig {
    pub s_min: f64,
    pub s_max: f64,
    pub smooth_bound: f64,
}

impl Default for ShadingConfig {
    fn default() -> Self {
        ShadingConfig {
            s_min: 0.2,
            s_max: 1.5,
            smooth_bound: 0.05,
        }
    }
}

/// One scene: a shared albedo and `K >= 2` images under different lights.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub albedo_seed: u64,
    pub albedo: ImageTensor,
    pub images: Vec<ImageTensor>,
    pub light_seeds: Vec<u64>,
}

impl SceneSample {
    pub fn k(&self) -> usize {
        self.images.len()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.albedo.dims()
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.len() < 2 {
            return Err(Error::param(format!(
                "scene needs at least 2 images, got {}",
                self.images.len()
            )));
        }
        if self.images.len() != self.light_seeds.len() {
            return Err(Error::param("one light seed per image required"));
        }
        if self.images.iter().any(|im| im.dims() != self.albedo.dims()) {
            return Err(Error::dim("scene images must share the albedo dimensions"));
        }
        Ok(())
    }
}

fn check_dims(height: usize, width: usize) -> Result<()> {
    if height < MIN_IMAGE_SIDE || width < MIN_IMAGE_SIDE {
        return Err(Error::dim(format!(
            "image dimensions {height}x{width} below minimum {MIN_IMAGE_SIDE}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64 },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
            Shape::Ellipse { cy, cx, ry, rx } => {
                let dy = (y - cy) / ry;
                let dx = (x - cx) / rx;
                dy * dy + dx * dx <= 1.0
            }
        }
    }
}

/// Number of 4-connected components of equal label.
pub(crate) fn count_regions(labels: &Array2<u32>) -> usize {
    let (h, w) = labels.dim();
    let mut seen = Array2::from_elem((h, w), false);
    let mut count = 0;
    let mut queue = VecDeque::new();
    for sy in 0..h {
        for sx in 0..w {
            if seen[[sy, sx]] {
                continue;
            }
            count += 1;
            let label = labels[[sy, sx]];
            seen[[sy, sx]] = true;
            queue.push_back((sy, sx));
            while let Some((y, x)) = queue.pop_front() {
                let mut visit = |ny: usize, nx: usize| {
                    if !seen[[ny, nx]] && labels[[ny, nx]] == label {
                        seen[[ny, nx]] = true;
                        queue.push_back((ny, nx));
                    }
                };
                if y > 0 {
                    visit(y - 1, x);
                }
                if y + 1 < h {
                    visit(y + 1, x);
                }
                if x > 0 {
                    visit(y, x - 1);
                }
                if x + 1 < w {
                    visit(y, x + 1);
                }
            }
        }
    }
    count
}

/// Albedo plus the label map it was painted from (before texture noise).
pub fn gen_albedo_with_labels(
    seed: u64,
    height: usize,
    width: usize,
) -> Result<(ImageTensor, Array2<u32>)> {
    check_dims(height, width)?;
    let mut rng = rng_from_seed(seed);
    let (hf, wf) = (height as f64, width as f64);

    // Redraw layouts until the painted map has an admissible number of regions.
    let labels = loop {
        let n_shapes = rng.random_range(MIN_REGIONS - 1..MAX_REGIONS);
        let mut labels = Array2::<u32>::zeros((height, width));
        for label in 1..=n_shapes as u32 {
            let shape = if rng.random_bool(0.5) {
                let sh = rng.random_range(0.2..0.6) * hf;
                let sw = rng.random_range(0.2..0.6) * wf;
                let y0 = rng.random_range(-0.1..0.9) * hf;
                let x0 = rng.random_range(-0.1..0.9) * wf;
                Shape::Rect {
                    y0,
                    x0,
                    y1: y0 + sh,
                    x1: x0 + sw,
                }
            } else {
                Shape::Ellipse {
                    cy: rng.random_range(0.1..0.9) * hf,
                    cx: rng.random_range(0.1..0.9) * wf,
                    ry: rng.random_range(0.1..0.3) * hf,
                    rx: rng.random_range(0.1..0.3) * wf,
                }
            };
            for y in 0..height {
                for x in 0..width {
                    if shape.contains(y as f64 + 0.5, x as f64 + 0.5) {
                        labels[[y, x]] = label;
                    }
                }
            }
        }
        let regions = count_regions(&labels);
        if (MIN_REGIONS..=MAX_REGIONS).contains(&regions) {
            break labels;
        }
    };

    let n_labels = *labels.iter().max().unwrap_or(&0) as usize + 1;
    let palette: Vec<[f64; 3]> = (0..n_labels)
        .map(|_| {
            [
                rng.random_range(0.1..0.9),
                rng.random_range(0.1..0.9),
                rng.random_range(0.1..0.9),
            ]
        })
        .collect();

    let texture = value_noise(&mut rng, height, width, 8);
    let mut data = Array3::zeros((height, width, 3));
    for y in 0..height {
        for x in 0..width {
            let color = palette[labels[[y, x]] as usize];
            let n = TEXTURE_AMPLITUDE * texture[[y, x]];
            for ch in 0..3 {
                data[[y, x, ch]] = (color[ch] + n).clamp(ALBEDO_MIN, ALBEDO_MAX);
            }
        }
    }
    Ok((ImageTensor::new(data)?, labels))
}

/// Bilinearly interpolated lattice noise in `[-1, 1]` with the given cell size.
fn value_noise(rng: &mut crate::rng::Rng, height: usize, width: usize, cell: usize) -> Array2<f64> {
    let gh = height / cell + 2;
    let gw = width / cell + 2;
    let grid = Array2::from_shape_fn((gh, gw), |_| rng.random_range(-1.0..1.0));
    Array2::from_shape_fn((height, width), |(y, x)| {
        let fy = y as f64 / cell as f64;
        let fx = x as f64 / cell as f64;
        let (iy, ix) = (fy.floor() as usize, fx.floor() as usize);
        let (ty, tx) = (fy - iy as f64, fx - ix as f64);
        let a = grid[[iy, ix]] * (1.0 - tx) + grid[[iy, ix + 1]] * tx;
        let b = grid[[iy + 1, ix]] * (1.0 - tx) + grid[[iy + 1, ix + 1]] * tx;
        a * (1.0 - ty) + b * ty
    })
}

pub fn gen_albedo(seed: u64, height: usize, width: usize) -> Result<ImageTensor> {
    gen_albedo_with_labels(seed, height, width).map(|(a, _)| a)
}

pub fn gen_shading(seed: u64, height: usize, width: usize) -> Result<ShadingField> {
    gen_shading_with(seed, height, width, &ShadingConfig::default())
}

/// Planar gradient plus 1–3 Gaussian spotlights, mapped into `[s_min, s_max]`.
///
/// The output span is narrowed when needed so that no 4-adjacent pair differs by more
/// than `smooth_bound`; at 64×64 the full span is normally reachable.
pub fn gen_shading_with(
    seed: u64,
    height: usize,
    width: usize,
    cfg: &ShadingConfig,
) -> Result<ShadingField> {
    check_dims(height, width)?;
    if !(cfg.s_min > 0.0 && cfg.s_max > cfg.s_min && cfg.smooth_bound > 0.0) {
        return Err(Error::param(format!("invalid shading config {cfg:?}")));
    }
    let mut rng = rng_from_seed(seed);
    let (hf, wf) = (height as f64, width as f64);
    let side = hf.min(wf);

    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let slope = rng.random_range(0.3..1.0);
    let (dy, dx) = (angle.sin(), angle.cos());
    let n_spots = rng.random_range(1..=3);
    let spots: Vec<(f64, f64, f64, f64)> = (0..n_spots)
        .map(|_| {
            (
                rng.random_range(-0.2..1.2) * hf,
                rng.random_range(-0.2..1.2) * wf,
                rng.random_range(0.25..0.5) * side,
                rng.random_range(0.5..1.5),
            )
        })
        .collect();

    let raw = Array2::from_shape_fn((height, width), |(y, x)| {
        let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
        let mut v = slope * ((py / hf - 0.5) * dy + (px / wf - 0.5) * dx);
        for &(cy, cx, sigma, amp) in &spots {
            let r2 = (py - cy).powi(2) + (px - cx).powi(2);
            v += amp * (-r2 / (2.0 * sigma * sigma)).exp();
        }
        v
    });

    let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let unit = if hi - lo > 1e-12 {
        raw.mapv(|v| (v - lo) / (hi - lo))
    } else {
        Array2::from_elem((height, width), 0.5)
    };
    let full_span = cfg.s_max - cfg.s_min;
    let delta = max_adjacent_delta(&unit);
    // Stay strictly below the bound so rounding never tips a pair over it.
    let span = if delta > 0.0 {
        full_span.min(cfg.smooth_bound * (1.0 - 1e-9) / delta)
    } else {
        full_span
    };
    let center = 0.5 * (cfg.s_min + cfg.s_max);
    ShadingField::new(unit.mapv(|u| (center + span * (u - 0.5)).clamp(cfg.s_min, cfg.s_max)))
}

pub fn compose_image(albedo: &ImageTensor, shading: &ShadingField) -> Result<ImageTensor> {
    if albedo.dims() != shading.dims() {
        return Err(Error::dim(format!(
            "albedo {:?} and shading {:?} differ in size",
            albedo.dims(),
            shading.dims()
        )));
    }
    let s = shading.data();
    let mut out = albedo.data().clone();
    for ((y, x, _), v) in out.indexed_iter_mut() {
        *v = (*v * s[[y, x]]).clamp(0.0, 1.0);
    }
    ImageTensor::new(out)
}

pub fn gen_scene(seed: u64, k: usize, height: usize, width: usize) -> Result<SceneSample> {
    if k < 2 {
        return Err(Error::param(format!("need at least 2 lights per scene, got {k}")));
    }
    let albedo_seed = derive_seed(seed, 0);
    let albedo = gen_albedo(albedo_seed, height, width)?;
    let light_seeds: Vec<u64> = (0..k as u64).map(|i| derive_seed(seed, 1 + i)).collect();
    let images = light_seeds
        .iter()
        .map(|&ls| compose_image(&albedo, &gen_shading(ls, height, width)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(SceneSample {
        albedo_seed,
        albedo,
        images,
        light_seeds,
    })
}

/// `count` scenes with seeds derived from `seed`.
pub fn gen_scenes(
    seed: u64,
    count: usize,
    k: usize,
    height: usize,
    width: usize,
) -> Result<Vec<SceneSample>> {
    (0..count as u64)
        .map(|i| gen_scene(derive_seed(seed, i), k, height, width))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn albedo_is_deterministic_and_bounded() {
        let a = gen_albedo(7, 64, 64).unwrap();
        let b = gen_albedo(7, 64, 64).unwrap();
        assert_eq!(a, b);
        for seed in 0..20 {
            let a = gen_albedo(seed, 32, 48).unwrap();
            let lo = a.data().iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = a.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(lo >= ALBEDO_MIN && hi <= ALBEDO_MAX, "seed {seed}: {lo}..{hi}");
        }
    }

    #[test]
    fn invalid_dimensions_rejected() {
        assert!(matches!(gen_albedo(1, 4, 64), Err(Error::Dimension(_))));
        assert!(matches!(gen_shading(1, 64, 7), Err(Error::Dimension(_))));
    }

    #[test]
    fn shading_range_and_determinism() {
        assert_eq!(gen_shading(3, 64, 64).unwrap(), gen_shading(3, 64, 64).unwrap());
        for seed in 0..30 {
            let s = gen_shading(seed, 64, 64).unwrap();
            assert!(s.data().iter().all(|v| (0.2..=1.5).contains(v)));
        }
    }

    #[test]
    fn small_fields_still_respect_smoothness() {
        for seed in 0..10 {
            let s = gen_shading(seed, 8, 8).unwrap();
            assert!(s.max_adjacent_delta() <= 0.05);
        }
    }

    #[test]
    fn compose_examples() {
        let albedo = ImageTensor::filled(8, 8, 0.5).unwrap();
        let ones = ShadingField::uniform(8, 8, 1.0).unwrap();
        assert_eq!(compose_image(&albedo, &ones).unwrap(), albedo);

        let black = ImageTensor::filled(8, 8, 0.0).unwrap();
        let s = gen_shading(1, 8, 8).unwrap();
        assert!(compose_image(&black, &s).unwrap().data().iter().all(|v| *v == 0.0));

        let dim = ShadingField::uniform(8, 8, 0.8).unwrap();
        let out = compose_image(&albedo, &dim).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.4).abs() < 1e-15));

        let bright = ShadingField::uniform(8, 8, 3.0).unwrap();
        assert!(compose_image(&albedo, &bright).unwrap().data().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn compose_shape_mismatch() {
        let albedo = ImageTensor::filled(8, 8, 0.5).unwrap();
        let s = ShadingField::uniform(8, 16, 1.0).unwrap();
        assert!(matches!(compose_image(&albedo, &s), Err(Error::Dimension(_))));
    }

    #[test]
    fn scene_contract() {
        assert!(matches!(gen_scene(1, 1, 64, 64), Err(Error::Parameter(_))));
        let s = gen_scene(11, 5, 64, 64).unwrap();
        assert_eq!(s.images.len(), 5);
        assert_eq!(s.light_seeds.len(), 5);
        s.validate().unwrap();
        let s2 = gen_scene(11, 2, 64, 64).unwrap();
        assert_ne!(s2.images[0], s2.images[1]);
    }
}
