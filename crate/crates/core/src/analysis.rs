//! Distribution statistics of lighting latents.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autoencoder::AutoencoderParams;
use crate::dataset::write_png;
use crate::error::{Error, Result};
use crate::scene::SceneSample;
use crate::tensor::LatentTensor;

pub const HISTOGRAM_BINS: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub channel: usize,
    pub count: u64,
    pub mean: f64,
    pub std: f64,
    pub positive_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionReport {
    pub count: u64,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub min: f64,
    pub max: f64,
    /// Fraction of strictly positive entries.
    pub positive_fraction: f64,
    pub bins: Vec<HistogramBin>,
    pub per_channel: Vec<ChannelStats>,
}

/// Single-pass mean and variance (Welford).
#[derive(Debug, Clone, Copy, Default)]
struct Running {
    n: u64,
    mean: f64,
    m2: f64,
    positive: u64,
}

impl Running {
    fn push(&mut self, v: f64) {
        self.n += 1;
        let d = v - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (v - self.mean);
        if v > 0.0 {
            self.positive += 1;
        }
    }

    fn std(&self) -> f64 {
        (self.m2 / self.n as f64).sqrt()
    }

    fn positive_fraction(&self) -> f64 {
        self.positive as f64 / self.n as f64
    }
}

/// Mean and population standard deviation by the textbook two-pass formula.
pub fn two_pass_stats(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl DistributionReport {
    /// Statistics over every entry of `latents`, which must share a channel count.
    pub fn from_latents(latents: &[&LatentTensor]) -> Result<Self> {
        let Some(first) = latents.first() else {
            return Err(Error::param("no latents to analyse"));
        };
        let channels = first.shape().2;
        if latents.iter().any(|z| z.shape().2 != channels) {
            return Err(Error::dim("latents differ in channel count"));
        }
        let mut all = Running::default();
        let mut per = vec![Running::default(); channels];
        let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
        for z in latents {
            for (i, &v) in z.data().iter().enumerate() {
                all.push(v);
                per[i % channels].push(v);
                min = min.min(v);
                max = max.max(v);
            }
        }
        let (lo, hi) = if max > min { (min, max) } else { (min - 0.5, min + 0.5) };
        let width = (hi - lo) / HISTOGRAM_BINS as f64;
        let mut counts = vec![0u64; HISTOGRAM_BINS];
        for v in latents.iter().flat_map(|z| z.data().iter()) {
            let b = (((v - lo) / width) as usize).min(HISTOGRAM_BINS - 1);
            counts[b] += 1;
        }
        let bins = counts
            .into_iter()
            .enumerate()
            .map(|(b, count)| HistogramBin {
                lo: lo + b as f64 * width,
                hi: if b + 1 == HISTOGRAM_BINS { hi } else { lo + (b + 1) as f64 * width },
                count,
            })
            .collect();
        Ok(DistributionReport {
            count: all.n,
            mean: all.mean,
            std: all.std(),
            min,
            max,
            positive_fraction: all.positive_fraction(),
            bins,
            per_channel: per
                .iter()
                .enumerate()
                .map(|(channel, r)| ChannelStats {
                    channel,
                    count: r.n,
                    mean: r.mean,
                    std: r.std(),
                    positive_fraction: r.positive_fraction(),
                })
                .collect(),
        })
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("serializable report");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Bar chart of the histogram; the bin containing zero is drawn in red.
    pub fn write_histogram_png(&self, path: &Path) -> Result<()> {
        const BAR: usize = 4;
        const HEIGHT: usize = 128;
        let width = BAR * self.bins.len();
        let peak = self.bins.iter().map(|b| b.count).max().unwrap_or(1).max(1);
        let mut rgb = vec![255u8; width * HEIGHT * 3];
        for (i, bin) in self.bins.iter().enumerate() {
            let bar = (bin.count as f64 / peak as f64 * (HEIGHT - 1) as f64).round() as usize;
            let colour = if bin.lo <= 0.0 && 0.0 < bin.hi { [200, 40, 40] } else { [60, 60, 60] };
            for y in HEIGHT - bar..HEIGHT {
                for x in i * BAR..i * BAR + BAR - 1 {
                    let p = (y * width + x) * 3;
                    rgb[p..p + 3].copy_from_slice(&colour);
                }
            }
        }
        write_png(path, &rgb, width, HEIGHT)
    }
}

/// Lighting latents `encode(I_k) - encode(A)` over every scene and light.
pub fn lighting_latents(dataset: &[SceneSample], ae: &AutoencoderParams) -> Result<Vec<LatentTensor>> {
    let mut out = Vec::new();
    for scene in dataset {
        let z_a = ae.encode(&scene.albedo)?;
        for z in ae.encode_batch(&scene.images.iter().collect::<Vec<_>>())? {
            out.push(LatentTensor::new(z.data() - z_a.data())?);
        }
    }
    Ok(out)
}

/// Distribution of `encode(I_k) - encode(A)` over the dataset.
pub fn analyze_lighting_latents(dataset: &[SceneSample], ae: &AutoencoderParams) -> Result<DistributionReport> {
    if dataset.is_empty() {
        return Err(Error::param("analysis needs a non-empty dataset"));
    }
    let latents = lighting_latents(dataset, ae)?;
    DistributionReport::from_latents(&latents.iter().collect::<Vec<_>>())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_input_rejected() {
        assert!(matches!(DistributionReport::from_latents(&[]), Err(Error::Parameter(_))));
    }

    #[test]
    fn constant_latents_fill_one_bin() {
        let z = LatentTensor::zeros(2, 2, 2);
        let r = DistributionReport::from_latents(&[&z]).unwrap();
        assert_eq!(r.bins.iter().filter(|b| b.count > 0).count(), 1);
        assert_eq!(r.positive_fraction, 0.0);
        assert_eq!(r.per_channel.len(), 2);
    }
}
