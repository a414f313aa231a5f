//! On-disk dataset layout:
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/scene_0000/albedo.png
//! <dir>/scene_0000/light_0.png ... light_<K-1>.png
//! <dir>/scene_0000/meta.json
//! ```
//!
//! PNGs are 8-bit RGB without alpha.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{SceneSample, GENERATOR_VERSION};
use crate::tensor::ImageTensor;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub generator_version: u32,
    pub scenes: usize,
    pub lights: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub albedo_seed: u64,
    pub light_seeds: Vec<u64>,
}

pub fn scene_dir_name(idx: usize) -> String {
    format!("scene_{idx:04}")
}

pub fn write_png(path: &Path, rgb: &[u8], width: usize, height: usize) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::format(path, e.to_string()))?;
    writer
        .write_image_data(rgb)
        .map_err(|e| Error::format(path, e.to_string()))?;
    writer.finish().map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_image_png(path: &Path, image: &ImageTensor) -> Result<()> {
    let (h, w) = image.dims();
    let bytes: Vec<u8> = image
        .data()
        .iter()
        .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    write_png(path, &bytes, w, h)
}

pub fn read_image_png(path: &Path) -> Result<ImageTensor> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::format(path, e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(path, e.to_string()))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format(
            path,
            format!("expected 8-bit RGB, got {:?}/{:?}", info.color_type, info.bit_depth),
        ));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let data = Array3::from_shape_vec(
        (h, w, 3),
        buf[..h * w * 3].iter().map(|&b| b as f64 / 255.0).collect(),
    )
    .map_err(|e| Error::format(path, e.to_string()))?;
    ImageTensor::new(data).map_err(|e| Error::format(path, e.to_string()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_dataset(samples: &[SceneSample], dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (lights, (height, width)) = match samples.first() {
        Some(s) => (s.k(), s.dims()),
        None => (0, (0, 0)),
    };
    for (idx, s) in samples.iter().enumerate() {
        s.validate()?;
        if s.k() != lights || s.dims() != (height, width) {
            return Err(Error::param(format!(
                "scene {idx} differs in light count or size from scene 0"
            )));
        }
        let sdir = dir.join(scene_dir_name(idx));
        fs::create_dir_all(&sdir).map_err(|e| Error::io(&sdir, e))?;
        write_image_png(&sdir.join("albedo.png"), &s.albedo)?;
        for (k, im) in s.images.iter().enumerate() {
            write_image_png(&sdir.join(format!("light_{k}.png")), im)?;
        }
        write_json(
            &sdir.join("meta.json"),
            &SceneMeta {
                albedo_seed: s.albedo_seed,
                light_seeds: s.light_seeds.clone(),
            },
        )?;
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        generator_version: GENERATOR_VERSION,
        scenes: samples.len(),
        lights,
        height,
        width,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let manifest: Manifest = read_json(&path)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Version {
            path,
            expected: MANIFEST_VERSION,
            found: manifest.version,
        });
    }
    Ok(manifest)
}

pub fn read_dataset(dir: &Path) -> Result<Vec<SceneSample>> {
    let manifest = read_manifest(dir)?;
    let mut out = Vec::with_capacity(manifest.scenes);
    for idx in 0..manifest.scenes {
        let sdir: PathBuf = dir.join(scene_dir_name(idx));
        if !sdir.is_dir() {
            return Err(Error::format(&sdir, "scene directory listed in manifest is missing"));
        }
        let meta: SceneMeta = read_json(&sdir.join("meta.json"))?;
        if meta.light_seeds.len() != manifest.lights {
            return Err(Error::format(
                sdir.join("meta.json"),
                format!("expected {} light seeds", manifest.lights),
            ));
        }
        let albedo = read_image_png(&sdir.join("albedo.png"))?;
        let images = (0..manifest.lights)
            .map(|k| read_image_png(&sdir.join(format!("light_{k}.png"))))
            .collect::<Result<Vec<_>>>()?;
        for (path, im) in std::iter::once(("albedo.png".to_string(), &albedo))
            .chain(images.iter().enumerate().map(|(k, im)| (format!("light_{k}.png"), im)))
        {
            if im.dims() != (manifest.height, manifest.width) {
                return Err(Error::format(sdir.join(path), "image size disagrees with manifest"));
            }
        }
        out.push(SceneSample {
            albedo_seed: meta.albedo_seed,
            albedo,
            images,
            light_seeds: meta.light_seeds,
        });
    }
    Ok(out)
}
