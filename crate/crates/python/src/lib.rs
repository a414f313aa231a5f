//! Python bindings. Tensors cross the boundary as nested lists (`[row][col][channel]`).

use std::path::PathBuf;

use albedo_core::analysis::analyze_lighting_latents;
use albedo_core::autoencoder::{train_autoencoder, AutoencoderConfig, AutoencoderParams};
use albedo_core::dataset::{read_dataset, write_dataset};
use albedo_core::diffusion::{train_diffusion, DenoiserConfig, DiffusionModel, TrainConfig};
use albedo_core::inference::{predict_albedos, InferenceConfig};
use albedo_core::metrics::{self, Darker, Judgment, JudgmentSet};
use albedo_core::{Error, ImageTensor, LatentTensor, SceneSample};
use ndarray::Array3;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde_json::Value;

type Nested = Vec<Vec<Vec<f64>>>;
type PyJudgment = ((usize, usize), (usize, usize), String, f64);

fn to_py(err: Error) -> PyErr {
    match err {
        Error::Parameter(_) | Error::Dimension(_) | Error::Numeric { .. } => PyValueError::new_err(err.to_string()),
        Error::Io { .. } | Error::Format { .. } | Error::Version { .. } => PyIOError::new_err(err.to_string()),
        _ => PyRuntimeError::new_err(err.to_string()),
    }
}

fn from_nested(data: Nested) -> PyResult<Array3<f64>> {
    let h = data.len();
    let w = data.first().map_or(0, Vec::len);
    let c = data.first().and_then(|r| r.first()).map_or(0, Vec::len);
    if data.iter().any(|r| r.len() != w || r.iter().any(|p| p.len() != c)) {
        return Err(PyValueError::new_err("ragged nested list"));
    }
    let flat: Vec<f64> = data.into_iter().flatten().flatten().collect();
    Array3::from_shape_vec((h, w, c), flat).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn to_nested(a: &Array3<f64>) -> Nested {
    a.outer_iter()
        .map(|row| row.outer_iter().map(|px| px.to_vec()).collect())
        .collect()
}

/// Builds a config from its defaults, overriding the fields named in `overrides`
/// (a JSON object string).
fn config<T>(overrides: Option<&str>) -> PyResult<T>
where
    T: Default + serde::Serialize + serde::de::DeserializeOwned,
{
    let mut base = serde_json::to_value(T::default()).expect("serializable config");
    if let Some(text) = overrides {
        let patch: Value = serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        let Value::Object(patch) = patch else {
            return Err(PyValueError::new_err("config overrides must be a JSON object"));
        };
        let obj = base.as_object_mut().expect("configs serialize to objects");
        for (k, v) in patch {
            if !obj.contains_key(&k) {
                return Err(PyValueError::new_err(format!("unknown config field `{k}`")));
            }
            obj.insert(k, v);
        }
    }
    serde_json::from_value(base).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// RGB image with values in [0, 1].
#[pyclass(name = "Image", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyImage(ImageTensor);

#[pymethods]
impl PyImage {
    #[new]
    fn new(data: Nested) -> PyResult<Self> {
        Ok(PyImage(ImageTensor::new(from_nested(data)?).map_err(to_py)?))
    }

    #[staticmethod]
    fn filled(height: usize, width: usize, value: f64) -> PyResult<Self> {
        Ok(PyImage(ImageTensor::filled(height, width, value).map_err(to_py)?))
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        let (h, w) = self.0.dims();
        (h, w, 3)
    }

    fn to_list(&self) -> Nested {
        to_nested(self.0.data())
    }

    fn __repr__(&self) -> String {
        let (h, w) = self.0.dims();
        format!("Image({h}x{w})")
    }
}

/// Autoencoder latent, `[row][col][channel]`.
#[pyclass(name = "Latent", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyLatent(LatentTensor);

#[pymethods]
impl PyLatent {
    #[new]
    fn new(data: Nested) -> PyResult<Self> {
        Ok(PyLatent(LatentTensor::new(from_nested(data)?).map_err(to_py)?))
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        self.0.shape()
    }

    fn to_list(&self) -> Nested {
        to_nested(self.0.data())
    }

    fn l2_distance(&self, other: &PyLatent) -> f64 {
        self.0.l2_distance(&other.0)
    }
}

/// One albedo seen under several lights.
#[pyclass(name = "Scene", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyScene(SceneSample);

#[pymethods]
impl PyScene {
    #[getter]
    fn albedo(&self) -> PyImage {
        PyImage(self.0.albedo.clone())
    }

    #[getter]
    fn images(&self) -> Vec<PyImage> {
        self.0.images.iter().cloned().map(PyImage).collect()
    }

    #[getter]
    fn albedo_seed(&self) -> u64 {
        self.0.albedo_seed
    }

    #[getter]
    fn light_seeds(&self) -> Vec<u64> {
        self.0.light_seeds.clone()
    }

    fn __len__(&self) -> usize {
        self.0.k()
    }
}

fn scenes_of(scenes: &[PyRef<'_, PyScene>]) -> Vec<SceneSample> {
    scenes.iter().map(|s| s.0.clone()).collect()
}

#[pyclass(name = "Autoencoder")]
struct PyAutoencoder(AutoencoderParams);

#[pymethods]
impl PyAutoencoder {
    /// Trains on every image of `scenes` and returns the frozen result.
    #[staticmethod]
    #[pyo3(signature = (scenes, config=None))]
    fn train(scenes: Vec<PyRef<'_, PyScene>>, config: Option<&str>) -> PyResult<Self> {
        let cfg: AutoencoderConfig = self::config(config)?;
        Ok(PyAutoencoder(train_autoencoder(&scenes_of(&scenes), &cfg).map_err(to_py)?))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyAutoencoder(AutoencoderParams::load(&path).map_err(to_py)?))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(to_py)
    }

    fn encode(&self, image: &PyImage) -> PyResult<PyLatent> {
        Ok(PyLatent(self.0.encode(&image.0).map_err(to_py)?))
    }

    fn decode(&self, latent: &PyLatent) -> PyResult<PyImage> {
        Ok(PyImage(self.0.decode(&latent.0).map_err(to_py)?))
    }

    #[getter]
    fn frozen(&self) -> bool {
        self.0.is_frozen()
    }

    #[getter]
    fn fingerprint(&self) -> u64 {
        self.0.fingerprint()
    }
}

#[pyclass(name = "Denoiser")]
struct PyDenoiser(DiffusionModel);

#[pymethods]
impl PyDenoiser {
    /// Trains a denoiser in the latent space of the frozen `autoencoder`.
    /// `denoiser` and `train` are JSON objects overriding individual defaults.
    #[staticmethod]
    #[pyo3(signature = (scenes, autoencoder, denoiser=None, train=None))]
    fn train(
        scenes: Vec<PyRef<'_, PyScene>>,
        autoencoder: &PyAutoencoder,
        denoiser: Option<&str>,
        train: Option<&str>,
    ) -> PyResult<Self> {
        let dcfg: DenoiserConfig = config(denoiser)?;
        let tcfg: TrainConfig = config(train)?;
        let out = train_diffusion(&scenes_of(&scenes), &autoencoder.0, &dcfg, &tcfg, None).map_err(to_py)?;
        Ok(PyDenoiser(out.model))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyDenoiser(DiffusionModel::load(&path).map_err(to_py)?))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(to_py)
    }

    #[getter]
    fn steps_done(&self) -> usize {
        self.0.meta().steps_done
    }

    /// Albedo estimates for equally sized images. `config` overrides inference
    /// defaults, e.g. `{"n_samples": 4}`.
    #[pyo3(signature = (images, autoencoder, config=None))]
    fn predict(&self, images: Vec<PyRef<'_, PyImage>>, autoencoder: &PyAutoencoder, config: Option<&str>) -> PyResult<Vec<PyImage>> {
        let cfg: InferenceConfig = self::config(config)?;
        let refs: Vec<&ImageTensor> = images.iter().map(|i| &i.0).collect();
        let out = predict_albedos(&refs, &cfg, &autoencoder.0, &self.0).map_err(to_py)?;
        Ok(out.into_iter().map(PyImage).collect())
    }
}

#[pyfunction]
fn gen_scenes(seed: u64, n: usize, lights: usize, height: usize, width: usize) -> PyResult<Vec<PyScene>> {
    let scenes = albedo_core::scene::gen_scenes(seed, n, lights, height, width).map_err(to_py)?;
    Ok(scenes.into_iter().map(PyScene).collect())
}

#[pyfunction(name = "read_dataset")]
fn py_read_dataset(dir: PathBuf) -> PyResult<Vec<PyScene>> {
    Ok(read_dataset(&dir).map_err(to_py)?.into_iter().map(PyScene).collect())
}

#[pyfunction(name = "write_dataset")]
fn py_write_dataset(scenes: Vec<PyRef<'_, PyScene>>, dir: PathBuf) -> PyResult<()> {
    write_dataset(&scenes_of(&scenes), &dir).map_err(to_py).map(|_| ())
}

#[pyfunction]
fn psnr(a: &PyImage, b: &PyImage) -> PyResult<f64> {
    metrics::psnr(&a.0, &b.0).map_err(to_py)
}

#[pyfunction]
fn ssim(a: &PyImage, b: &PyImage) -> PyResult<f64> {
    metrics::ssim(&a.0, &b.0).map_err(to_py)
}

fn darker_of(label: &str) -> PyResult<Darker> {
    match label {
        "1" => Ok(Darker::First),
        "2" => Ok(Darker::Second),
        "E" => Ok(Darker::Equal),
        other => Err(PyValueError::new_err(format!("darker label must be 1, 2 or E, got `{other}`"))),
    }
}

fn label_of(d: Darker) -> &'static str {
    match d {
        Darker::First => "1",
        Darker::Second => "2",
        Darker::Equal => "E",
    }
}

/// Weighted human disagreement rate. Judgments are `((x1, y1), (x2, y2), darker, weight)`
/// with `darker` one of "1", "2" or "E".
#[pyfunction]
#[pyo3(signature = (albedo, judgments, delta=metrics::WHDR_DELTA))]
fn whdr(albedo: &PyImage, judgments: Vec<PyJudgment>, delta: f64) -> PyResult<f64> {
    let set = judgments
        .into_iter()
        .map(|(p1, p2, d, weight)| {
            Ok(Judgment {
                p1: [p1.0, p1.1],
                p2: [p2.0, p2.1],
                darker: darker_of(&d)?,
                weight,
            })
        })
        .collect::<PyResult<Vec<_>>>()?;
    metrics::whdr(&albedo.0, &JudgmentSet(set), delta).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (albedo, n, seed, delta=metrics::WHDR_DELTA))]
fn synth_judgments(albedo: &PyImage, n: usize, seed: u64, delta: f64) -> Vec<PyJudgment> {
    metrics::synth_judgments(&albedo.0, n, delta, seed)
        .0
        .into_iter()
        .map(|j| ((j.p1[0], j.p1[1]), (j.p2[0], j.p2[1]), label_of(j.darker).to_string(), j.weight))
        .collect()
}

/// Lighting-latent statistics as a dict: count, mean, std, min, max,
/// positive_fraction and the histogram as (lo, hi, count) triples.
#[pyfunction]
fn analyze_lighting(py: Python<'_>, scenes: Vec<PyRef<'_, PyScene>>, autoencoder: &PyAutoencoder) -> PyResult<Py<PyAny>> {
    let r = analyze_lighting_latents(&scenes_of(&scenes), &autoencoder.0).map_err(to_py)?;
    let d = pyo3::types::PyDict::new(py);
    d.set_item("count", r.count)?;
    d.set_item("mean", r.mean)?;
    d.set_item("std", r.std)?;
    d.set_item("min", r.min)?;
    d.set_item("max", r.max)?;
    d.set_item("positive_fraction", r.positive_fraction)?;
    let bins: Vec<(f64, f64, u64)> = r.bins.iter().map(|b| (b.lo, b.hi, b.count)).collect();
    d.set_item("bins", bins)?;
    Ok(d.into_any().unbind())
}

#[pymodule]
fn albedo(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyImage>()?;
    m.add_class::<PyLatent>()?;
    m.add_class::<PyScene>()?;
    m.add_class::<PyAutoencoder>()?;
    m.add_class::<PyDenoiser>()?;
    m.add_function(wrap_pyfunction!(gen_scenes, m)?)?;
    m.add_function(wrap_pyfunction!(py_read_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(py_write_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(whdr, m)?)?;
    m.add_function(wrap_pyfunction!(synth_judgments, m)?)?;
    m.add_function(wrap_pyfunction!(analyze_lighting, m)?)?;
    Ok(())
}
