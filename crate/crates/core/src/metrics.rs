//! Image-quality and ordinal-reflectance metrics.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::tensor::ImageTensor;

pub const PSNR_CAP_DB: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const WHDR_DELTA: f64 = 0.10;
/// Luminance floor used when a judged point is black.
pub const LUMINANCE_FLOOR: f64 = 1e-6;

fn same_dims(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::dim(format!(
            "images differ in size: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio with peak 1.0, capped at 99 dB.
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    same_dims(a, b)?;
    let n = a.data().len() as f64;
    let mse = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

fn ssim_taps() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let taps: Vec<f64> = (-r..=r)
        .map(|x| (-0.5 * (x as f64 / SSIM_SIGMA).powi(2)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Separable "valid" filtering: output is `(h - k + 1) x (w - k + 1)`.
fn filter_valid(x: &Array2<f64>, taps: &[f64]) -> Array2<f64> {
    let k = taps.len();
    let (h, w) = x.dim();
    let rows: Array2<f64> = Array2::from_shape_fn((h, w - k + 1), |(y, c)| {
        taps.iter().enumerate().map(|(i, t)| t * x[[y, c + i]]).sum::<f64>()
    });
    Array2::from_shape_fn((h - k + 1, w - k + 1), |(y, c)| {
        taps.iter().enumerate().map(|(i, t)| t * rows[[y + i, c]]).sum::<f64>()
    })
}

/// Mean structural similarity over channels and all fully-contained 11×11 Gaussian
/// windows (sigma 1.5).
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    same_dims(a, b)?;
    let (h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::param(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let taps = ssim_taps();
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        let x = a.data().index_axis(ndarray::Axis(2), c).to_owned();
        let y = b.data().index_axis(ndarray::Axis(2), c).to_owned();
        let mx = filter_valid(&x, &taps);
        let my = filter_valid(&y, &taps);
        let sxx = filter_valid(&(&x * &x), &taps);
        let syy = filter_valid(&(&y * &y), &taps);
        let sxy = filter_valid(&(&x * &y), &taps);
        ndarray::Zip::from(&mx)
            .and(&my)
            .and(&sxx)
            .and(&syy)
            .and(&sxy)
            .for_each(|&mx, &my, &sxx, &syy, &sxy| {
                let vx = sxx - mx * mx;
                let vy = syy - my * my;
                let cov = sxy - mx * my;
                total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
                count += 1;
            });
    }
    Ok(total / count as f64)
}

/// Mean PSNR over all unordered pairs of `images`.
pub fn pairwise_psnr(images: &[&ImageTensor]) -> Result<f64> {
    if images.len() < 2 {
        return Err(Error::param("pairwise PSNR needs at least two images"));
    }
    let mut sum = 0.0;
    let mut n = 0;
    for i in 0..images.len() {
        for j in i + 1..images.len() {
            sum += psnr(images[i], images[j])?;
            n += 1;
        }
    }
    Ok(sum / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneScore {
    pub scene: usize,
    pub predictions: usize,
    pub psnr: f64,
    pub ssim: f64,
}

/// Per-scene mean PSNR/SSIM of predictions against ground truth, and their means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub scenes: Vec<SceneScore>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

impl ConsistencyReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scene,predictions,psnr,ssim\n");
        for s in &self.scenes {
            writeln!(out, "{},{},{},{}", s.scene, s.predictions, s.psnr, s.ssim).unwrap();
        }
        writeln!(out, "mean,,{},{}", self.mean_psnr, self.mean_ssim).unwrap();
        out
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        let csv = dir.join(format!("{stem}.csv"));
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join(format!("{stem}.json"));
        let text = serde_json::to_string_pretty(self).expect("serializable report");
        fs::write(&json, text).map_err(|e| Error::io(&json, e))
    }
}

/// Scores every scene's predictions against its ground-truth albedo.
pub fn consistency_eval(predictions: &[Vec<ImageTensor>], gts: &[ImageTensor]) -> Result<ConsistencyReport> {
    if predictions.len() != gts.len() {
        return Err(Error::param(format!(
            "{} scenes of predictions but {} ground truths",
            predictions.len(),
            gts.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::param("no scenes to evaluate"));
    }
    let mut scenes = Vec::with_capacity(gts.len());
    for (idx, (preds, gt)) in predictions.iter().zip(gts).enumerate() {
        if preds.is_empty() {
            return Err(Error::param(format!("scene {idx} has no predictions")));
        }
        let mut p = 0.0;
        let mut s = 0.0;
        for pred in preds {
            p += psnr(pred, gt)?;
            s += ssim(pred, gt)?;
        }
        let k = preds.len() as f64;
        scenes.push(SceneScore {
            scene: idx,
            predictions: preds.len(),
            psnr: p / k,
            ssim: s / k,
        });
    }
    let n = scenes.len() as f64;
    Ok(ConsistencyReport {
        mean_psnr: scenes.iter().map(|s| s.psnr).sum::<f64>() / n,
        mean_ssim: scenes.iter().map(|s| s.ssim).sum::<f64>() / n,
        scenes,
    })
}

/// Which point of a pair is darker in reflectance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Darker {
    #[serde(rename = "1")]
    First,
    #[serde(rename = "2")]
    Second,
    #[serde(rename = "E")]
    Equal,
}

/// A relative-reflectance judgment between two pixels given as `[x, y]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Judgment {
    pub p1: [usize; 2],
    pub p2: [usize; 2],
    pub darker: Darker,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JudgmentSet(pub Vec<Judgment>);

impl JudgmentSet {
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::param("judgment set is empty"));
        }
        for (i, j) in self.0.iter().enumerate() {
            for p in [j.p1, j.p2] {
                if p[0] >= width || p[1] >= height {
                    return Err(Error::param(format!(
                        "judgment {i}: point {p:?} outside {width}x{height}"
                    )));
                }
            }
            if !(j.weight.is_finite() && j.weight >= 0.0) {
                return Err(Error::param(format!("judgment {i}: weight {} invalid", j.weight)));
            }
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("serializable judgments");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// The relation a luminance pair implies under threshold `delta`.
pub fn classify(l1: f64, l2: f64, delta: f64) -> Darker {
    let l1 = l1.max(LUMINANCE_FLOOR);
    let l2 = l2.max(LUMINANCE_FLOOR);
    let r = l1 / l2;
    if r >= 1.0 / (1.0 + delta) && r <= 1.0 + delta {
        Darker::Equal
    } else if l1 < l2 {
        Darker::First
    } else {
        Darker::Second
    }
}

/// Weighted human disagreement rate of `albedo` against `judgments`.
pub fn whdr(albedo: &ImageTensor, judgments: &JudgmentSet, delta: f64) -> Result<f64> {
    let (h, w) = albedo.dims();
    judgments.validate(h, w)?;
    let lum = albedo.luminance();
    let mut wrong = 0.0;
    let mut total = 0.0;
    for j in &judgments.0 {
        let pred = classify(lum[[j.p1[1], j.p1[0]]], lum[[j.p2[1], j.p2[0]]], delta);
        if pred != j.darker {
            wrong += j.weight;
        }
        total += j.weight;
    }
    if total == 0.0 {
        return Err(Error::param("judgment weights sum to zero"));
    }
    Ok(wrong / total)
}

/// `n` uniformly drawn point pairs labelled from `gt_albedo` by the same rule as
/// [`whdr`], each with weight 1.
pub fn synth_judgments(gt_albedo: &ImageTensor, n: usize, delta: f64, seed: u64) -> JudgmentSet {
    let (h, w) = gt_albedo.dims();
    let lum = gt_albedo.luminance();
    let mut rng = rng_from_seed(seed);
    let judgments = (0..n)
        .map(|_| {
            let p1 = [rng.random_range(0..w), rng.random_range(0..h)];
            let p2 = [rng.random_range(0..w), rng.random_range(0..h)];
            Judgment {
                p1,
                p2,
                darker: classify(lum[[p1[1], p1[0]]], lum[[p2[1], p2[0]]], delta),
                weight: 1.0,
            }
        })
        .collect();
    JudgmentSet(judgments)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_caps_identical_images() {
        let a = ImageTensor::filled(8, 8, 0.3).unwrap();
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = ImageTensor::filled(8, 8, 0.3).unwrap();
        assert!(matches!(ssim(&a, &a), Err(Error::Parameter(_))));
    }

    #[test]
    fn judgments_json_uses_string_labels() {
        let set = JudgmentSet(vec![Judgment {
            p1: [1, 2],
            p2: [3, 4],
            darker: Darker::Equal,
            weight: 0.5,
        }]);
        let text = serde_json::to_string(&set).unwrap();
        assert_eq!(text, r#"[{"p1":[1,2],"p2":[3,4],"darker":"E","weight":0.5}]"#);
        assert_eq!(serde_json::from_str::<JudgmentSet>(&text).unwrap(), set);
    }

    #[test]
    fn zero_weight_total_rejected() {
        let a = ImageTensor::filled(8, 8, 0.3).unwrap();
        let set = JudgmentSet(vec![Judgment {
            p1: [0, 0],
            p2: [1, 1],
            darker: Darker::Equal,
            weight: 0.0,
        }]);
        assert!(whdr(&a, &set, WHDR_DELTA).is_err());
    }
}
