//! Two-pass cross-conditioned training of the dual-head denoiser.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use log::info;
use ndarray::{Array3, Array4, Axis};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::losses::{hinge_grad, mse_grad};
use super::{blur_batch, blur_batch_adjoint, make_schedule, total_loss, Denoiser, DenoiserConfig, LatentDecomposition, LossParts, NoiseSchedule, UNet};
use crate::autoencoder::AutoencoderParams;
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, Elem, ParamStore};
use crate::rng::{derive_seed, rng_from_seed, Rng};
use crate::scene::SceneSample;
use crate::tensor::LatentTensor;

pub const CHECKPOINT_KIND: &str = "diffusion";
pub const MODEL_VERSION: u32 = 1;
pub const LOG_HEADER: &str = "step,L_relight,L_albedo,L_consistency,L_invariant,L_reg,total";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the invariant and positivity terms.
    pub lambda: f64,
    pub blur_prob: f64,
    pub blur_sigma_range: [f64; 2],
    /// Include the cross-consistency term in the objective.
    pub consistency: bool,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub timesteps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.5,
            blur_prob: 0.5,
            blur_sigma_range: [0.5, 2.0],
            consistency: true,
            steps: 20_000,
            batch_size: 16,
            learning_rate: 1e-4,
            timesteps: 1000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::param("lambda must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.blur_prob) {
            return Err(Error::param("blur_prob must lie in [0, 1]"));
        }
        let [lo, hi] = self.blur_sigma_range;
        if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::param("blur_sigma_range must be 0 <= lo <= hi"));
        }
        if self.batch_size == 0 || self.timesteps == 0 {
            return Err(Error::param("batch_size and timesteps must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::param("learning_rate must be positive"));
        }
        Ok(())
    }
}

/// A batch of latent pairs `(z_i, z_j)`, each row from one scene under two distinct
/// lights.
#[derive(Debug, Clone)]
pub struct PairBatch<F> {
    pub z_i: Array4<F>,
    pub z_j: Array4<F>,
    /// Light indices `(i, j)` per row.
    pub lights: Vec<(usize, usize)>,
}

impl<F: Elem> PairBatch<F> {
    pub fn new(z_i: Array4<F>, z_j: Array4<F>, lights: Vec<(usize, usize)>) -> Result<Self> {
        if z_i.dim() != z_j.dim() || lights.len() != z_i.len_of(Axis(0)) {
            return Err(Error::dim("pair batch shapes disagree"));
        }
        if let Some((i, _)) = lights.iter().find(|(i, j)| i == j) {
            return Err(Error::param(format!(
                "training pair uses light {i} twice; i and j must differ"
            )));
        }
        Ok(PairBatch { z_i, z_j, lights })
    }

    pub fn len(&self) -> usize {
        self.lights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lights.is_empty()
    }
}

/// Every random quantity of one step, drawn up front so the objective is a
/// deterministic function of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDraws {
    pub t_i: Vec<usize>,
    pub t_j: Vec<usize>,
    pub eps_i: Array4<f64>,
    pub eps_j: Array4<f64>,
    /// Conditioning dropped in pass A (conditioned on `z_i`) / pass B (on `z_j`).
    pub drop_a: Vec<bool>,
    pub drop_b: Vec<bool>,
    /// Blur sigma for the lighting head of pass A (`z_E^(j)`) and pass B (`z_E^(i)`);
    /// zero means no blur.
    pub sigma_a: Vec<f64>,
    pub sigma_b: Vec<f64>,
}

impl StepDraws {
    pub fn sample(
        rng: &mut Rng,
        shape: (usize, usize, usize, usize),
        timesteps: usize,
        cfg: &TrainConfig,
        cond_dropout_prob: f64,
    ) -> Self {
        let b = shape.0;
        let ts = |rng: &mut Rng| -> Vec<usize> { (0..b).map(|_| rng.random_range(1..=timesteps)).collect() };
        let t_i = ts(rng);
        let t_j = ts(rng);
        let noise = |rng: &mut Rng| Array4::from_shape_simple_fn(shape, || StandardNormal.sample(rng));
        let eps_i = noise(rng);
        let eps_j = noise(rng);
        let drops = |rng: &mut Rng| -> Vec<bool> { (0..b).map(|_| rng.random_bool(cond_dropout_prob)).collect() };
        let drop_a = drops(rng);
        let drop_b = drops(rng);
        let [lo, hi] = cfg.blur_sigma_range;
        let sigmas = |rng: &mut Rng| -> Vec<f64> {
            (0..b)
                .map(|_| {
                    let blur = rng.random_bool(cfg.blur_prob);
                    let s = if hi > lo { rng.random_range(lo..hi) } else { lo };
                    if blur {
                        s
                    } else {
                        0.0
                    }
                })
                .collect()
        };
        let sigma_a = sigmas(rng);
        let sigma_b = sigmas(rng);
        StepDraws {
            t_i,
            t_j,
            eps_i,
            eps_j,
            drop_a,
            drop_b,
            sigma_a,
            sigma_b,
        }
    }
}

fn noised<F: Elem>(z: &Array4<F>, eps: &Array4<f64>, t: &[usize], sched: &NoiseSchedule) -> Array4<F> {
    let mut out = z.clone();
    for ((mut o, e), &t) in out.outer_iter_mut().zip(eps.outer_iter()).zip(t) {
        let a = sched.alpha_bar(t);
        let (sa, sn) = (F::of(a.sqrt()), F::of((1.0 - a).sqrt()));
        o.zip_mut_with(&e, |o, &e| *o = sa * *o + sn * F::of(e));
    }
    out
}

fn dropped<F: Elem>(cond: &Array4<F>, drop: &[bool]) -> Array4<F> {
    let mut out = cond.clone();
    for (mut row, &d) in out.outer_iter_mut().zip(drop) {
        if d {
            row.fill(F::zero());
        }
    }
    out
}

/// Loss terms of one step and the weighted total actually optimised.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub parts: LossParts,
    pub total: f64,
}

/// Evaluates the two-pass objective and accumulates its parameter gradient into
/// `store` (gradients are added, not reset).
///
/// Pass A denoises `z_j` conditioned on `z_i`, giving `(z_A^(i), z_E^(j))`; pass B
/// swaps the roles, giving `(z_A^(j), z_E^(i))`. Terms computed on both passes are
/// averaged over the two passes.
pub fn step_objective<F: Elem, D: Denoiser<F>>(
    den: &D,
    store: &mut ParamStore<F>,
    sched: &NoiseSchedule,
    batch: &PairBatch<F>,
    draws: &StepDraws,
    cfg: &TrainConfig,
) -> Result<StepReport> {
    for &t in draws.t_i.iter().chain(&draws.t_j) {
        sched.check_t(t)?;
    }
    let noisy_j = noised(&batch.z_j, &draws.eps_j, &draws.t_j, sched);
    let noisy_i = noised(&batch.z_i, &draws.eps_i, &draws.t_i, sched);
    let (a_i, e_j_raw, cache_a) = den.forward(store, &noisy_j, &draws.t_j, &dropped(&batch.z_i, &draws.drop_a));
    let (a_j, e_i_raw, cache_b) = den.forward(store, &noisy_i, &draws.t_i, &dropped(&batch.z_j, &draws.drop_b));
    let e_j = blur_batch(&e_j_raw, &draws.sigma_a);
    let e_i = blur_batch(&e_i_raw, &draws.sigma_b);

    let lambda = cfg.lambda;
    let w_con = if cfg.consistency { 1.0 } else { 0.0 };
    let mut g_ai = Array4::<F>::zeros(a_i.raw_dim());
    let mut g_aj = Array4::<F>::zeros(a_i.raw_dim());
    let mut g_ei = Array4::<F>::zeros(a_i.raw_dim());
    let mut g_ej = Array4::<F>::zeros(a_i.raw_dim());

    let (r1, g) = mse_grad(&(&a_i + &e_j), &batch.z_j, 0.5);
    g_ai += &g;
    g_ej += &g;
    let (r2, g) = mse_grad(&(&a_j + &e_i), &batch.z_i, 0.5);
    g_aj += &g;
    g_ei += &g;

    let (albedo, g) = mse_grad(&a_i, &a_j, 1.0);
    g_ai += &g;
    g_aj -= &g;

    let (c1, g) = mse_grad(&(&a_i + &e_i), &batch.z_i, 0.5 * w_con);
    g_ai += &g;
    g_ei += &g;
    let (c2, g) = mse_grad(&(&a_j + &e_j), &batch.z_j, 0.5 * w_con);
    g_aj += &g;
    g_ej += &g;

    let (v1, g) = mse_grad(&a_i, &batch.z_j, 0.5 * lambda);
    g_ai += &g;
    let (v2, g) = mse_grad(&a_j, &batch.z_i, 0.5 * lambda);
    g_aj += &g;

    let (p1, g) = hinge_grad(&e_j, 0.5 * lambda);
    g_ej += &g;
    let (p2, g) = hinge_grad(&e_i, 0.5 * lambda);
    g_ei += &g;

    let parts = LossParts {
        relight: 0.5 * (r1 + r2),
        albedo,
        consistency: 0.5 * (c1 + c2),
        invariant: 0.5 * (v1 + v2),
        reg: 0.5 * (p1 + p2),
    };
    let optimised = LossParts {
        consistency: parts.consistency * w_con,
        ..parts
    };
    let total = total_loss(&optimised, lambda)?;

    den.backward(store, cache_a, &g_ai, &blur_batch_adjoint(&g_ej, &draws.sigma_a));
    den.backward(store, cache_b, &g_aj, &blur_batch_adjoint(&g_ei, &draws.sigma_b));
    Ok(StepReport { parts, total })
}

/// One optimiser update on the denoiser parameters. When `frozen` is given, its
/// fingerprint is compared before and after the update.
#[allow(clippy::too_many_arguments)]
pub fn train_step<F: Elem, D: Denoiser<F>>(
    den: &D,
    store: &mut ParamStore<F>,
    opt: &mut Adam<F>,
    sched: &NoiseSchedule,
    batch: &PairBatch<F>,
    draws: &StepDraws,
    cfg: &TrainConfig,
    frozen: Option<&AutoencoderParams>,
) -> Result<StepReport> {
    let before = frozen.map(|ae| ae.fingerprint());
    store.zero_grad();
    let report = step_objective(den, store, sched, batch, draws, cfg)?;
    opt.step(store);
    if let (Some(ae), Some(before)) = (frozen, before) {
        if ae.fingerprint() != before {
            return Err(Error::Invariant(
                "autoencoder parameters changed during a denoiser update".into(),
            ));
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionMeta {
    pub version: u32,
    pub denoiser: DenoiserConfig,
    pub train: TrainConfig,
    pub schedule: NoiseSchedule,
    /// Raw latents are divided by this before entering the denoiser.
    pub latent_scale: f64,
    /// `(h, w, c)` of the latents the model was trained on.
    pub latent_shape: (usize, usize, usize),
    pub steps_done: usize,
    /// Fingerprint of the autoencoder whose latent space this model lives in.
    pub autoencoder_fingerprint: u64,
}

/// Trained (or freshly initialised) denoiser with everything needed to sample from it.
#[derive(Debug, Clone)]
pub struct DiffusionModel {
    meta: DiffusionMeta,
    store: ParamStore<f32>,
    net: UNet,
}

impl DiffusionModel {
    pub fn init(
        denoiser: DenoiserConfig,
        train: TrainConfig,
        latent_scale: f64,
        latent_shape: (usize, usize, usize),
        autoencoder_fingerprint: u64,
    ) -> Result<Self> {
        denoiser.validate()?;
        train.validate()?;
        let (h, w, c) = latent_shape;
        let m = denoiser.spatial_multiple();
        if c != denoiser.latent_channels || h % m != 0 || w % m != 0 {
            return Err(Error::dim(format!(
                "latent shape {h}x{w}x{c} incompatible with {} channels and a spatial multiple of {m}",
                denoiser.latent_channels
            )));
        }
        if !(latent_scale > 0.0 && latent_scale.is_finite()) {
            return Err(Error::Numeric {
                term: "latent_scale".into(),
                detail: format!("{latent_scale} is not a positive finite scale"),
            });
        }
        let mut store = ParamStore::new();
        let net = UNet::new(&denoiser, &mut store, &mut rng_from_seed(denoiser.seed));
        Ok(DiffusionModel {
            meta: DiffusionMeta {
                version: MODEL_VERSION,
                schedule: make_schedule(train.timesteps)?,
                denoiser,
                train,
                latent_scale,
                latent_shape,
                steps_done: 0,
                autoencoder_fingerprint,
            },
            store,
            net,
        })
    }

    pub fn meta(&self) -> &DiffusionMeta {
        &self.meta
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.meta.schedule
    }

    pub fn store(&self) -> &ParamStore<f32> {
        &self.store
    }

    pub fn is_trained(&self) -> bool {
        self.meta.steps_done > 0
    }

    /// Raw autoencoder latent to model space.
    pub fn normalize(&self, z: &LatentTensor) -> LatentTensor {
        LatentTensor::from_array_unchecked(z.data() / self.meta.latent_scale)
    }

    /// Model-space latent back to the autoencoder's scale.
    pub fn denormalize(&self, z: &LatentTensor) -> LatentTensor {
        LatentTensor::from_array_unchecked(z.data() * self.meta.latent_scale)
    }

    fn check_latent(&self, z: &LatentTensor) -> Result<()> {
        if z.shape() != self.meta.latent_shape {
            return Err(Error::dim(format!(
                "latent shape {:?} does not match the model's {:?}",
                z.shape(),
                self.meta.latent_shape
            )));
        }
        Ok(())
    }

    /// Batched forward pass in model space. `cond` rows of zeros act as the null
    /// condition.
    pub(crate) fn forward_batch(&self, noisy: &Array4<f32>, t: &[usize], cond: &Array4<f32>) -> (Array4<f32>, Array4<f32>) {
        let (a, e, _) = self.net.forward(&self.store, noisy, t, cond);
        (a, e)
    }

    /// Both heads for one model-space latent; `cond = None` is the unconditional
    /// branch.
    pub fn denoise_decompose(
        &self,
        noisy: &LatentTensor,
        t: usize,
        cond: Option<&LatentTensor>,
    ) -> Result<LatentDecomposition> {
        self.check_latent(noisy)?;
        self.meta.schedule.check_t(t)?;
        let x = to_batch(&[noisy]);
        let c = match cond {
            Some(c) => {
                self.check_latent(c)?;
                to_batch(&[c])
            }
            None => Array4::zeros(x.raw_dim()),
        };
        let (a, e) = self.forward_batch(&x, &[t], &c);
        LatentDecomposition::new(from_batch(&a, 0)?, from_batch(&e, 0)?)
    }

    pub fn train_step(
        &mut self,
        opt: &mut Adam<f32>,
        batch: &PairBatch<f32>,
        draws: &StepDraws,
        frozen: &AutoencoderParams,
    ) -> Result<StepReport> {
        let report = train_step(
            &self.net,
            &mut self.store,
            opt,
            &self.meta.schedule,
            batch,
            draws,
            &self.meta.train,
            Some(frozen),
        )?;
        self.meta.steps_done += 1;
        Ok(report)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, CHECKPOINT_KIND, false, &self.store, &self.meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (store, side) = checkpoint::load::<DiffusionMeta>(path, CHECKPOINT_KIND)?;
        let meta = side.meta;
        if meta.version != MODEL_VERSION {
            return Err(Error::Version {
                path: checkpoint::sidecar_path(path),
                expected: MODEL_VERSION,
                found: meta.version,
            });
        }
        let mut model = DiffusionModel::init(
            meta.denoiser.clone(),
            meta.train.clone(),
            meta.latent_scale,
            meta.latent_shape,
            meta.autoencoder_fingerprint,
        )?;
        model.store.load_from(&store)?;
        model.meta = meta;
        Ok(model)
    }
}

pub(crate) fn to_batch(latents: &[&LatentTensor]) -> Array4<f32> {
    let (h, w, c) = latents[0].shape();
    let mut out = Array4::<f32>::zeros((latents.len(), h, w, c));
    for (mut row, z) in out.outer_iter_mut().zip(latents) {
        row.assign(&z.data().mapv(|v| v as f32));
    }
    out
}

pub(crate) fn from_batch(x: &Array4<f32>, row: usize) -> Result<LatentTensor> {
    LatentTensor::new(x.index_axis(Axis(0), row).mapv(|v| v as f64))
}

/// Raw (unscaled) latents of every light image, indexed `[scene][light]`.
pub fn encode_scene_latents(
    ae: &AutoencoderParams,
    dataset: &[SceneSample],
) -> Result<Vec<Vec<LatentTensor>>> {
    dataset
        .iter()
        .map(|s| ae.encode_batch(&s.images.iter().collect::<Vec<_>>()))
        .collect()
}

fn latent_std(latents: &[Vec<LatentTensor>]) -> f64 {
    let vals = latents.iter().flatten().flat_map(|z| z.data().iter().copied());
    let (mut n, mut sum, mut sq) = (0usize, 0.0, 0.0);
    for v in vals {
        n += 1;
        sum += v;
        sq += v * v;
    }
    let mean = sum / n as f64;
    (sq / n as f64 - mean * mean).max(0.0).sqrt()
}

/// Result of a full training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: DiffusionModel,
    /// Per-step reports, in order.
    pub history: Vec<StepReport>,
}

/// Trains a fresh denoiser on all light pairs of `dataset` in the latent space of the
/// frozen autoencoder `ae`. When `log_path` is given, one CSV row per step is written.
pub fn train_diffusion(
    dataset: &[SceneSample],
    ae: &AutoencoderParams,
    denoiser: &DenoiserConfig,
    cfg: &TrainConfig,
    log_path: Option<&Path>,
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::param("diffusion training needs a non-empty dataset"));
    }
    if !ae.is_frozen() {
        return Err(Error::State("the autoencoder must be frozen before diffusion training".into()));
    }
    if dataset.iter().any(|s| s.k() < 2) {
        return Err(Error::param("every scene needs at least two lights"));
    }
    let latents = encode_scene_latents(ae, dataset)?;
    let scale = latent_std(&latents);
    let shape = latents[0][0].shape();
    let mut model = DiffusionModel::init(denoiser.clone(), cfg.clone(), scale, shape, ae.fingerprint())?;
    let scaled: Vec<Vec<Array3<f32>>> = latents
        .iter()
        .map(|scene| scene.iter().map(|z| z.data().mapv(|v| (v / scale) as f32)).collect())
        .collect();

    let mut log = match log_path {
        Some(p) => {
            let f = File::create(p).map_err(|e| Error::io(p, e))?;
            let mut w = BufWriter::new(f);
            writeln!(w, "{LOG_HEADER}").map_err(|e| Error::io(p, e))?;
            Some((p, w))
        }
        None => None,
    };

    let mut rng = rng_from_seed(derive_seed(cfg.seed, 0xd1ff));
    let mut opt = Adam::new(
        AdamConfig {
            lr: cfg.learning_rate,
            ..Default::default()
        },
        &model.store,
    );
    let (h, w, c) = shape;
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let b = cfg.batch_size;
        let mut z_i = Array4::<f32>::zeros((b, h, w, c));
        let mut z_j = Array4::<f32>::zeros((b, h, w, c));
        let mut lights = Vec::with_capacity(b);
        for r in 0..b {
            let scene = &scaled[rng.random_range(0..scaled.len())];
            let i = rng.random_range(0..scene.len());
            let j = (i + rng.random_range(1..scene.len())) % scene.len();
            z_i.index_axis_mut(Axis(0), r).assign(&scene[i]);
            z_j.index_axis_mut(Axis(0), r).assign(&scene[j]);
            lights.push((i, j));
        }
        let batch = PairBatch::new(z_i, z_j, lights)?;
        let draws = StepDraws::sample(&mut rng, (b, h, w, c), cfg.timesteps, cfg, denoiser.cond_dropout_prob);
        let report = model.train_step(&mut opt, &batch, &draws, ae)?;
        if let Some((p, w)) = &mut log {
            let l = &report.parts;
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                step + 1,
                l.relight,
                l.albedo,
                l.consistency,
                l.invariant,
                l.reg,
                report.total
            )
            .map_err(|e| Error::io(*p, e))?;
        }
        if (step + 1) % 100 == 0 {
            info!("diffusion step {}: total {:.5}", step + 1, report.total);
        }
        history.push(report);
    }
    if let Some((p, mut w)) = log {
        w.flush().map_err(|e| Error::io(p, e))?;
    }
    Ok(TrainOutcome { model, history })
}
