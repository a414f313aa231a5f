use std::fs;
use std::path::Path;

use albedo_core::autoencoder::{train_autoencoder, training_images, AutoencoderParams};
use albedo_core::dataset::{read_dataset, read_image_png, write_dataset, write_image_png};
use albedo_core::diffusion::{train_diffusion, DiffusionModel, StepReport};
use albedo_core::inference::predict_albedos;
use albedo_core::pipeline::{evaluate_detailed, run_ablation, Ablation, PipelineConfig};
use albedo_core::scene::gen_scenes;
use albedo_core::{analysis, Error, ImageTensor, SceneSample};
use clap::Parser;
use log::info;
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::run::{RunDir, RunRecord, CONFIG_FILE, RUN_RECORD_VERSION};
use crate::{config, plot, Cli, Command, GenDataArgs, Overrides};

const GRID_SCENES: usize = 4;
const GRID_IMAGES: usize = 6;

fn command_name(cmd: &Command) -> &'static str {
    match cmd {
        Command::GenData(_) => "gen-data",
        Command::TrainVae(_) => "train-vae",
        Command::Train(_) => "train",
        Command::Infer(_) => "infer",
        Command::Eval(_) => "eval",
        Command::Analyze(_) => "analyze",
        Command::Ablate(_) => "ablate",
        Command::Replay(_) => "replay",
    }
}

/// Defaults, config file and `--set`, then the named flags.
fn resolve_config(o: &Overrides) -> CliResult<PipelineConfig> {
    let mut cfg = config::load(o.config.as_deref(), &o.sets)?;
    let t = &mut cfg.train;
    macro_rules! set {
        ($src:expr => $dst:expr) => {
            if let Some(v) = $src {
                $dst = v;
            }
        };
    }
    set!(o.lambda => t.lambda);
    set!(o.blur_prob => t.blur_prob);
    set!(o.blur_sigma_min => t.blur_sigma_range[0]);
    set!(o.blur_sigma_max => t.blur_sigma_range[1]);
    set!(o.consistency => t.consistency);
    set!(o.steps => t.steps);
    set!(o.batch_size => t.batch_size);
    set!(o.learning_rate => t.learning_rate);
    set!(o.timesteps => t.timesteps);
    set!(o.train_seed => t.seed);
    let i = &mut cfg.inference;
    set!(o.ddim_steps => i.ddim_steps);
    set!(o.guidance_scale => i.guidance_scale);
    set!(o.n_samples => i.n_samples);
    set!(o.eta => i.eta);
    set!(o.infer_seed => i.seed);
    Ok(cfg)
}

fn validate(cfg: &PipelineConfig) -> CliResult<()> {
    cfg.autoencoder.validate()?;
    cfg.denoiser.validate()?;
    cfg.train.validate()?;
    Ok(())
}

/// Runs one parsed invocation. `snapshot` replaces every config source when replaying.
pub fn run(cli: Cli, argv: Vec<String>, snapshot: Option<PipelineConfig>) -> CliResult<()> {
    let name = command_name(&cli.command);
    match &cli.command {
        Command::GenData(args) => return gen_data(args),
        Command::Replay(args) => return replay(&cli, &args.source),
        _ => {}
    }
    let cfg = match snapshot {
        Some(c) => c,
        None => resolve_config(&cli.overrides)?,
    };
    validate(&cfg)?;
    require_inputs(&cli.command)?;
    let run = RunDir::create(cli.run.run_dir.as_deref(), &cli.run.run_root, name)?;
    let cwd = std::env::current_dir().map_err(|e| Error::io(".", e))?;
    run.write_snapshot(
        &cfg,
        &RunRecord {
            version: RUN_RECORD_VERSION,
            command: name.into(),
            argv,
            cwd,
        },
    )?;
    info!("run directory {}", run.path().display());
    match &cli.command {
        Command::TrainVae(args) => train_vae(&cfg, args.data.as_deref(), &run),
        Command::Train(args) => train(&cfg, args.data.data.as_deref(), &args.vae, &run),
        Command::Infer(args) => infer(&cfg, args, &run),
        Command::Eval(args) => eval(&cfg, args, &run),
        Command::Analyze(args) => analyze(&cfg, args, &run),
        Command::Ablate(args) => ablate(&cfg, args, &run),
        Command::GenData(_) | Command::Replay(_) => unreachable!("handled above"),
    }?;
    println!("{}", run.path().display());
    Ok(())
}

/// Fails on missing input paths before a run directory is created.
fn require_inputs(cmd: &Command) -> CliResult<()> {
    let paths: Vec<&Path> = match cmd {
        Command::TrainVae(a) => a.data.iter().map(|p| p.as_path()).collect(),
        Command::Train(a) => a.data.data.iter().map(|p| p.as_path()).chain([a.vae.as_path()]).collect(),
        Command::Infer(a) => [a.vae.as_path(), a.model.as_path()]
            .into_iter()
            .chain(a.inputs.iter().map(|p| p.as_path()))
            .collect(),
        Command::Eval(a) => a.data.data.iter().map(|p| p.as_path()).chain([a.vae.as_path(), a.model.as_path()]).collect(),
        Command::Analyze(a) => a.data.data.iter().map(|p| p.as_path()).chain([a.vae.as_path()]).collect(),
        Command::Ablate(a) => a.vae.iter().map(|p| p.as_path()).collect(),
        Command::GenData(_) | Command::Replay(_) => Vec::new(),
    };
    for p in paths {
        if !p.exists() {
            return Err(Error::io(p, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory")).into());
        }
    }
    Ok(())
}

fn replay(outer: &Cli, source: &Path) -> CliResult<()> {
    let record = crate::run::RunRecord::read(source)?;
    let cfg_path = source.join(CONFIG_FILE);
    let text = fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
    let cfg = PipelineConfig::from_json(&text, &cfg_path)?;
    let mut inner = Cli::try_parse_from(std::iter::once("albedo".to_string()).chain(record.argv.iter().cloned()))
        .map_err(|e| CliError::Usage(format!("recorded invocation no longer parses: {e}")))?;
    if matches!(inner.command, Command::Replay(_) | Command::GenData(_)) {
        return Err(CliError::Usage("only run-producing commands can be replayed".into()));
    }
    let dest = RunDir::create(outer.run.run_dir.as_deref(), &outer.run.run_root, &record.command)?;
    let dest = fs::canonicalize(dest.path()).map_err(|e| Error::io(dest.path(), e))?;
    std::env::set_current_dir(&record.cwd).map_err(|e| Error::io(&record.cwd, e))?;
    inner.run.run_dir = Some(dest);
    run(inner, record.argv, Some(cfg))
}

fn gen_data(args: &GenDataArgs) -> CliResult<()> {
    let out = &args.out;
    if out.exists() {
        let entries: Vec<_> = fs::read_dir(out)
            .map_err(|e| Error::io(out, e))?
            .collect::<std::io::Result<_>>()
            .map_err(|e| Error::io(out, e))?;
        if !entries.is_empty() && !args.force {
            return Err(CliError::Usage(format!(
                "{} is not empty; pass --force to replace it",
                out.display()
            )));
        }
        for entry in entries {
            let p = entry.path();
            let name = entry.file_name().to_string_lossy().into_owned();
            if name == "manifest.json" {
                fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
            } else if name.starts_with("scene_") && p.is_dir() {
                fs::remove_dir_all(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
    }
    let scenes = gen_scenes(args.seed, args.scenes, args.lights, args.size, args.size)?;
    let manifest = write_dataset(&scenes, out)?;
    println!(
        "wrote {} scenes x {} lights ({}x{}) to {}",
        manifest.scenes,
        manifest.lights,
        manifest.height,
        manifest.width,
        out.display()
    );
    Ok(())
}

enum Split {
    Train,
    Test,
}

fn load_scenes(data: Option<&Path>, cfg: &PipelineConfig, split: Split) -> CliResult<Vec<SceneSample>> {
    if let Some(dir) = data {
        return Ok(read_dataset(dir)?);
    }
    let (train, test) = cfg.data.generate()?;
    Ok(match split {
        Split::Train => train,
        Split::Test => test,
    })
}

fn history_series(history: &[StepReport]) -> Vec<Vec<f64>> {
    let col = |f: fn(&StepReport) -> f64| history.iter().map(f).collect::<Vec<f64>>();
    vec![
        col(|r| r.total),
        col(|r| r.parts.relight),
        col(|r| r.parts.albedo),
        col(|r| r.parts.consistency),
        col(|r| r.parts.invariant),
        col(|r| r.parts.reg),
    ]
}

/// One row per scene: ground truth, inputs, then predictions.
fn scene_grid(scenes: &[SceneSample], predictions: &[Vec<ImageTensor>], path: &Path) -> CliResult<()> {
    let rows: Vec<Vec<&ImageTensor>> = scenes
        .iter()
        .zip(predictions)
        .take(GRID_SCENES)
        .map(|(s, p)| {
            std::iter::once(&s.albedo)
                .chain(s.images.iter().take(p.len()))
                .chain(p.iter())
                .collect()
        })
        .collect();
    if rows.is_empty() {
        return Ok(());
    }
    Ok(plot::image_grid(&rows, path)?)
}

fn train_vae(cfg: &PipelineConfig, data: Option<&Path>, run: &RunDir) -> CliResult<()> {
    let scenes = load_scenes(data, cfg, Split::Train)?;
    let ae = train_autoencoder(&scenes, &cfg.autoencoder)?;
    ae.save(&run.join("autoencoder.ckpt"))?;
    let losses = ae.epoch_losses();
    let mut csv = String::from("epoch,loss\n");
    for (e, l) in losses.iter().enumerate() {
        csv.push_str(&format!("{},{}\n", e + 1, l));
    }
    run.write_text("autoencoder_loss.csv", &csv)?;
    plot::loss_curves(&[losses.to_vec()], &run.join("autoencoder_loss.png"))?;
    let images: Vec<&ImageTensor> = training_images(&scenes).into_iter().take(GRID_IMAGES).collect();
    let recon = ae.decode_batch(&ae.encode_batch(&images)?.iter().collect::<Vec<_>>())?;
    plot::image_grid(&[images, recon.iter().collect()], &run.join("reconstructions.png"))?;
    info!("autoencoder final epoch loss {:.5}", losses.last().copied().unwrap_or(f64::NAN));
    Ok(())
}

fn train(cfg: &PipelineConfig, data: Option<&Path>, vae: &Path, run: &RunDir) -> CliResult<()> {
    cfg.inference.validate(cfg.train.timesteps)?;
    let ae = AutoencoderParams::load(vae)?;
    let scenes = load_scenes(data, cfg, Split::Train)?;
    let out = train_diffusion(&scenes, &ae, &cfg.denoiser, &cfg.train, Some(&run.join("train_log.csv")))?;
    out.model.save(&run.join("denoiser.ckpt"))?;
    plot::loss_curves(&history_series(&out.history), &run.join("loss_curves.png"))?;
    Ok(())
}

#[derive(Serialize)]
struct Prediction {
    input: String,
    output: String,
}

fn infer(cfg: &PipelineConfig, args: &crate::InferArgs, run: &RunDir) -> CliResult<()> {
    let ae = AutoencoderParams::load(&args.vae)?;
    let model = DiffusionModel::load(&args.model)?;
    cfg.inference.validate(model.meta().train.timesteps)?;
    let images = args
        .inputs
        .iter()
        .map(|p| read_image_png(p))
        .collect::<albedo_core::Result<Vec<_>>>()?;
    let refs: Vec<&ImageTensor> = images.iter().collect();
    let albedos = predict_albedos(&refs, &cfg.inference, &ae, &model)?;
    let mut index = Vec::new();
    for (k, (input, albedo)) in args.inputs.iter().zip(&albedos).enumerate() {
        let name = format!("albedo_{k:03}.png");
        write_image_png(&run.join(&name), albedo)?;
        index.push(Prediction {
            input: input.display().to_string(),
            output: name,
        });
    }
    run.write_json("predictions.json", &index)?;
    plot::image_grid(&[refs, albedos.iter().collect()], &run.join("albedo_grid.png"))?;
    Ok(())
}

fn eval(cfg: &PipelineConfig, args: &crate::EvalArgs, run: &RunDir) -> CliResult<()> {
    let ae = AutoencoderParams::load(&args.vae)?;
    let model = DiffusionModel::load(&args.model)?;
    cfg.inference.validate(model.meta().train.timesteps)?;
    let scenes = load_scenes(args.data.data.as_deref(), cfg, Split::Test)?;
    let ev = evaluate_detailed(&model, &ae, &scenes, &cfg.inference, &cfg.eval)?;
    let s = &ev.summary;
    run.write_json("eval.json", s)?;
    s.albedo.write(run.path(), "albedo_metrics")?;
    s.baseline.write(run.path(), "baseline_metrics")?;
    s.lighting.write_json(&run.join("lighting_latents.json"))?;
    s.lighting.write_histogram_png(&run.join("lighting_histogram.png"))?;
    scene_grid(&scenes, &ev.predictions, &run.join("albedo_grid.png"))?;
    println!(
        "albedo PSNR {:.2} dB SSIM {:.3} (input baseline {:.2} dB) WHDR {:.3}",
        s.albedo.mean_psnr, s.albedo.mean_ssim, s.baseline.mean_psnr, s.whdr
    );
    Ok(())
}

fn analyze(cfg: &PipelineConfig, args: &crate::AnalyzeArgs, run: &RunDir) -> CliResult<()> {
    let ae = AutoencoderParams::load(&args.vae)?;
    let scenes = load_scenes(args.data.data.as_deref(), cfg, Split::Train)?;
    let report = analysis::analyze_lighting_latents(&scenes, &ae)?;
    report.write_json(&run.join("lighting_latents.json"))?;
    report.write_histogram_png(&run.join("lighting_histogram.png"))?;
    println!(
        "{} entries: mean {:.4} std {:.4} positive fraction {:.3}",
        report.count, report.mean, report.std, report.positive_fraction
    );
    Ok(())
}

fn parse_variants(names: &[String]) -> CliResult<Vec<Ablation>> {
    names
        .iter()
        .map(|n| {
            Ablation::ALL
                .into_iter()
                .find(|a| a.name() == n.trim())
                .ok_or_else(|| CliError::Usage(format!("unknown variant `{n}`")))
        })
        .collect()
}

fn ablate(cfg: &PipelineConfig, args: &crate::AblateArgs, run: &RunDir) -> CliResult<()> {
    cfg.inference.validate(cfg.train.timesteps)?;
    let variants = parse_variants(&args.variants)?;
    let pretrained = args.vae.as_deref().map(AutoencoderParams::load).transpose()?;
    let out = run_ablation(cfg, &variants, pretrained, Some(run.path()))?;
    let (_, test) = cfg.data.generate()?;
    for ((v, history), (_, ev)) in out.histories.iter().zip(&out.evaluations) {
        let dir = run.path().join(v.name());
        plot::loss_curves(&history_series(history), &dir.join("loss_curves.png"))?;
        scene_grid(&test, &ev.predictions, &dir.join("albedo_grid.png"))?;
    }
    run.write_json("ablation.json", &out.report)?;
    print!("{}", out.report.to_markdown());
    Ok(())
}

