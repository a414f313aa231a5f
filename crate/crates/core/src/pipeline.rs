//! End-to-end runs: data, autoencoder, denoiser variants and their evaluation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::info;
use serde::{Deserialize, Serialize};

use crate::analysis::DistributionReport;
use crate::autoencoder::{train_autoencoder, AutoencoderConfig, AutoencoderParams};
use crate::diffusion::{train_diffusion, DenoiserConfig, DiffusionModel, StepReport, TrainConfig, TrainOutcome};
use crate::error::{Error, Result};
use crate::inference::{mean_albedo_latents, InferenceConfig};
use crate::metrics::{consistency_eval, pairwise_psnr, synth_judgments, whdr, ConsistencyReport};
use crate::rng::derive_seed;
use crate::scene::{gen_scenes, SceneSample};
use crate::tensor::{ImageTensor, LatentTensor};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub lights: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_scenes: 200,
            test_scenes: 20,
            lights: 5,
            size: 64,
            seed: 0,
        }
    }
}

impl DataConfig {
    /// Training and held-out scenes; the two sets use disjoint seed streams.
    pub fn generate(&self) -> Result<(Vec<SceneSample>, Vec<SceneSample>)> {
        let train = gen_scenes(derive_seed(self.seed, 0), self.train_scenes, self.lights, self.size, self.size)?;
        let test = gen_scenes(derive_seed(self.seed, 1), self.test_scenes, self.lights, self.size, self.size)?;
        Ok((train, test))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Lights per held-out scene that are run through the sampler.
    pub lights_per_scene: usize,
    pub judgments: usize,
    pub whdr_delta: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            lights_per_scene: 3,
            judgments: 200,
            whdr_delta: crate::metrics::WHDR_DELTA,
        }
    }
}

/// Everything a run depends on. Serialised into every run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub version: u32,
    pub data: DataConfig,
    pub autoencoder: AutoencoderConfig,
    pub denoiser: DenoiserConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            version: CONFIG_VERSION,
            data: DataConfig::default(),
            autoencoder: AutoencoderConfig::default(),
            denoiser: DenoiserConfig::default(),
            train: TrainConfig::default(),
            inference: InferenceConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let cfg: PipelineConfig = serde_json::from_str(text).map_err(|e| Error::format(origin, e.to_string()))?;
        if cfg.version != CONFIG_VERSION {
            return Err(Error::Version {
                path: origin.to_path_buf(),
                expected: CONFIG_VERSION,
                found: cfg.version,
            });
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable config")
    }
}

/// Training variants compared by the ablation run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    NoReg,
    NoConsistency,
    NoBlur,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Full, Ablation::NoReg, Ablation::NoConsistency, Ablation::NoBlur];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoReg => "no_reg",
            Ablation::NoConsistency => "no_consistency",
            Ablation::NoBlur => "no_blur",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoReg => "w/o reg. losses",
            Ablation::NoConsistency => "w/o consistency",
            Ablation::NoBlur => "w/o lighting blur",
        }
    }

    /// The training configuration with this variant's term switched off.
    pub fn apply(self, cfg: &TrainConfig) -> TrainConfig {
        let mut out = cfg.clone();
        match self {
            Ablation::Full => {}
            Ablation::NoReg => out.lambda = 0.0,
            Ablation::NoConsistency => out.consistency = false,
            Ablation::NoBlur => out.blur_prob = 0.0,
        }
        out
    }
}

/// Evaluation of one model on held-out scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    /// Predicted albedos against ground truth.
    pub albedo: ConsistencyReport,
    /// Input images against ground-truth albedo.
    pub baseline: ConsistencyReport,
    /// Mean over scenes of the pairwise PSNR between predictions for different lights.
    pub prediction_pairwise_psnr: f64,
    /// Same for the input images.
    pub input_pairwise_psnr: f64,
    /// Mean over scenes of the pairwise L2 distance between mean albedo latents
    /// (autoencoder scale).
    pub latent_pairwise_l2: f64,
    pub whdr: f64,
    /// Final-step lighting latents of every sample.
    pub lighting: DistributionReport,
}

fn mean_pairwise_l2(latents: &[LatentTensor]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0;
    for i in 0..latents.len() {
        for j in i + 1..latents.len() {
            sum += latents[i].l2_distance(&latents[j]);
            n += 1;
        }
    }
    sum / n.max(1) as f64
}

/// Runs the sampler on the first `lights_per_scene` lights of every held-out scene.
/// Works on untrained models too, so initial behaviour can be measured.
pub fn evaluate(
    model: &DiffusionModel,
    ae: &AutoencoderParams,
    test: &[SceneSample],
    inference: &InferenceConfig,
    eval: &EvalConfig,
) -> Result<EvalSummary> {
    Ok(evaluate_detailed(model, ae, test, inference, eval)?.summary)
}

/// An evaluation together with the decoded predictions, one vector per scene.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub summary: EvalSummary,
    pub predictions: Vec<Vec<ImageTensor>>,
}

pub fn evaluate_detailed(
    model: &DiffusionModel,
    ae: &AutoencoderParams,
    test: &[SceneSample],
    inference: &InferenceConfig,
    eval: &EvalConfig,
) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::param("evaluation needs held-out scenes"));
    }
    let lights = eval.lights_per_scene.min(test[0].k());
    if lights < 2 {
        return Err(Error::param("evaluation needs at least two lights per scene"));
    }
    let mut predictions = Vec::new();
    let mut inputs = Vec::new();
    let mut gts = Vec::new();
    let mut pred_pair = 0.0;
    let mut input_pair = 0.0;
    let mut latent_l2 = 0.0;
    let mut whdr_sum = 0.0;
    let mut whdr_n = 0;
    let mut lighting = Vec::new();
    for (idx, scene) in test.iter().enumerate() {
        let images: Vec<&ImageTensor> = scene.images.iter().take(lights).collect();
        let conds: Vec<LatentTensor> = ae.encode_batch(&images)?.iter().map(|z| model.normalize(z)).collect();
        let refs: Vec<&LatentTensor> = conds.iter().collect();
        let sampled = mean_albedo_latents(model, &refs, inference)?;
        let mut means = Vec::with_capacity(lights);
        for (mean, light) in sampled {
            means.push(model.denormalize(&mean));
            lighting.extend(light);
        }
        let decoded = ae.decode_batch(&means.iter().collect::<Vec<_>>())?;
        let judgments = synth_judgments(&scene.albedo, eval.judgments, eval.whdr_delta, derive_seed(idx as u64, 0x11d));
        for p in &decoded {
            whdr_sum += whdr(p, &judgments, eval.whdr_delta)?;
            whdr_n += 1;
        }
        pred_pair += pairwise_psnr(&decoded.iter().collect::<Vec<_>>())?;
        input_pair += pairwise_psnr(&images)?;
        latent_l2 += mean_pairwise_l2(&means);
        predictions.push(decoded);
        inputs.push(images.into_iter().cloned().collect::<Vec<_>>());
        gts.push(scene.albedo.clone());
    }
    let n = test.len() as f64;
    let summary = EvalSummary {
        albedo: consistency_eval(&predictions, &gts)?,
        baseline: consistency_eval(&inputs, &gts)?,
        prediction_pairwise_psnr: pred_pair / n,
        input_pairwise_psnr: input_pair / n,
        latent_pairwise_l2: latent_l2 / n,
        whdr: whdr_sum / whdr_n as f64,
        lighting: DistributionReport::from_latents(&lighting.iter().collect::<Vec<_>>())?,
    };
    Ok(Evaluation { summary, predictions })
}

/// Trains one variant's denoiser; writes the CSV log into `dir` when given.
pub fn train_variant(
    cfg: &PipelineConfig,
    variant: Ablation,
    train: &[SceneSample],
    ae: &AutoencoderParams,
    dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let log = dir.map(|d| d.join("train_log.csv"));
    if let Some(d) = dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    info!("training variant {}", variant.name());
    train_diffusion(train, ae, &cfg.denoiser, &variant.apply(&cfg.train), log.as_deref())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Ablation,
    pub label: String,
    pub psnr: f64,
    pub ssim: f64,
    pub whdr: f64,
    pub lighting_positive_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub baseline_psnr: f64,
    pub baseline_ssim: f64,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, variant: Ablation) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,psnr,ssim,whdr,lighting_positive_fraction\n");
        for r in &self.rows {
            writeln!(out, "{},{},{},{},{}", r.variant.name(), r.psnr, r.ssim, r.whdr, r.lighting_positive_fraction).unwrap();
        }
        writeln!(out, "input_baseline,{},{},,", self.baseline_psnr, self.baseline_ssim).unwrap();
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| variant | PSNR | SSIM |\n|---|---|---|\n");
        for r in &self.rows {
            writeln!(out, "| {} | {:.2} | {:.3} |", r.label, r.psnr, r.ssim).unwrap();
        }
        writeln!(out, "| input image (baseline) | {:.2} | {:.3} |", self.baseline_psnr, self.baseline_ssim).unwrap();
        out
    }
}

/// Outputs of a full ablation run.
#[derive(Debug, Clone)]
pub struct AblationRun {
    pub autoencoder: AutoencoderParams,
    pub models: Vec<(Ablation, DiffusionModel)>,
    pub histories: Vec<(Ablation, Vec<StepReport>)>,
    pub evaluations: Vec<(Ablation, Evaluation)>,
    pub report: AblationReport,
}

/// Generates data, trains the autoencoder once (unless `pretrained` is given) and every
/// variant on top of it, then evaluates each variant on the held-out scenes. With
/// `dir`, per-variant logs, checkpoints and reports are written below it.
pub fn run_ablation(
    cfg: &PipelineConfig,
    variants: &[Ablation],
    pretrained: Option<AutoencoderParams>,
    dir: Option<&Path>,
) -> Result<AblationRun> {
    let (train, test) = cfg.data.generate()?;
    let ae = match pretrained {
        Some(ae) if ae.is_frozen() => ae,
        Some(_) => return Err(Error::State("the autoencoder must be frozen before diffusion training".into())),
        None => train_autoencoder(&train, &cfg.autoencoder)?,
    };
    if let Some(d) = dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        ae.save(&d.join("autoencoder.ckpt"))?;
    }
    let mut models = Vec::new();
    let mut histories = Vec::new();
    let mut evaluations = Vec::new();
    let mut rows = Vec::new();
    let mut baseline = None;
    for &v in variants {
        let vdir = dir.map(|d| d.join(v.name()));
        let outcome = train_variant(cfg, v, &train, &ae, vdir.as_deref())?;
        let evaluation = evaluate_detailed(&outcome.model, &ae, &test, &cfg.inference, &cfg.eval)?;
        let summary = &evaluation.summary;
        if let Some(d) = &vdir {
            outcome.model.save(&d.join("denoiser.ckpt"))?;
            summary.albedo.write(d, "albedo_metrics")?;
            let path = d.join("eval.json");
            fs::write(&path, serde_json::to_string_pretty(summary).expect("serializable"))
                .map_err(|e| Error::io(&path, e))?;
            summary.lighting.write_json(&d.join("lighting_latents.json"))?;
            summary.lighting.write_histogram_png(&d.join("lighting_histogram.png"))?;
        }
        info!("variant {}: psnr {:.3} ssim {:.4}", v.name(), summary.albedo.mean_psnr, summary.albedo.mean_ssim);
        baseline.get_or_insert((summary.baseline.mean_psnr, summary.baseline.mean_ssim));
        rows.push(AblationRow {
            variant: v,
            label: v.label().to_string(),
            psnr: summary.albedo.mean_psnr,
            ssim: summary.albedo.mean_ssim,
            whdr: summary.whdr,
            lighting_positive_fraction: summary.lighting.positive_fraction,
        });
        models.push((v, outcome.model));
        histories.push((v, outcome.history));
        evaluations.push((v, evaluation));
    }
    let (baseline_psnr, baseline_ssim) = baseline.unwrap_or((f64::NAN, f64::NAN));
    let report = AblationReport {
        baseline_psnr,
        baseline_ssim,
        rows,
    };
    if let Some(d) = dir {
        let csv = d.join("ablation.csv");
        fs::write(&csv, report.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let md = d.join("ablation.md");
        fs::write(&md, report.to_markdown()).map_err(|e| Error::io(&md, e))?;
    }
    Ok(AblationRun {
        autoencoder: ae,
        models,
        histories,
        evaluations,
        report,
    })
}
