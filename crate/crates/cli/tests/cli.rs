use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"{
  "data": {"train_scenes": 3, "test_scenes": 2, "size": 32, "lights": 3},
  "autoencoder": {"base_width": 8, "epochs": 1, "batch_size": 4},
  "denoiser": {"widths": [8, 8, 8], "time_embedding_dim": 8},
  "train": {"steps": 3, "batch_size": 2, "timesteps": 50},
  "inference": {"ddim_steps": 3, "n_samples": 2},
  "eval": {"judgments": 20}
}"#;

fn albedo(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_albedo"))
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .env_remove("ALBEDO_RUN_ROOT")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(cwd: &Path, args: &[&str]) -> String {
    let out = albedo(cwd, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(path: PathBuf) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Work dir with the tiny config and a trained autoencoder at `vae/autoencoder.ckpt`.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.json"), TINY).unwrap();
    ok(dir.path(), &["train-vae", "--config", "tiny.json", "--run-dir", "vae"]);
    dir
}

#[test]
fn gen_data_layout_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let args = ["gen-data", "--out", "ds", "--scenes", "10", "--lights", "5", "--size", "16", "--seed", "3"];
    ok(d, &args);
    let scenes: Vec<_> = fs::read_dir(d.join("ds"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_dir())
        .collect();
    assert_eq!(scenes.len(), 10);
    for s in &scenes {
        let lights = fs::read_dir(s)
            .unwrap()
            .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("light_"))
            .count();
        assert_eq!(lights, 5);
    }
    let first = fs::read(d.join("ds/manifest.json")).unwrap();
    let albedo0 = fs::read(d.join("ds/scene_0007/light_4.png")).unwrap();

    let refused = albedo(d, &args);
    assert_eq!(refused.status.code(), Some(2));

    let mut forced = args.to_vec();
    forced.push("--force");
    ok(d, &forced);
    assert_eq!(fs::read(d.join("ds/manifest.json")).unwrap(), first);
    assert_eq!(fs::read(d.join("ds/scene_0007/light_4.png")).unwrap(), albedo0);
}

#[test]
fn single_light_is_a_parameter_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = albedo(dir.path(), &["gen-data", "--out", "ds", "--lights", "1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(albedo(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(albedo(dir.path(), &["train"]).status.code(), Some(2));
}

#[test]
fn missing_checkpoint_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = albedo(dir.path(), &["train", "--vae", "nowhere/ae.ckpt"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere/ae.ckpt"));
    assert!(!dir.path().join("runs").exists());
}

#[test]
fn schema_violations_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.json"), r#"{"inference": {"guidance_scale": "high"}}"#).unwrap();
    let out = albedo(dir.path(), &["train-vae", "--config", "bad.json"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("inference.guidance_scale"));
    let out = albedo(dir.path(), &["train-vae", "--set", "train.lamda=0.1"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.lamda"));
}

#[test]
fn diverging_training_exits_with_four() {
    let ws = workspace();
    let out = albedo(
        ws.path(),
        &["train", "--config", "tiny.json", "--vae", "vae/autoencoder.ckpt", "--learning-rate", "1e30", "--steps", "4"],
    );
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn pipeline_commands_snapshot_and_replay() {
    let ws = workspace();
    let d = ws.path();
    assert!(d.join("vae/autoencoder_loss.png").is_file());
    assert!(d.join("vae/reconstructions.png").is_file());

    ok(d, &["train", "--config", "tiny.json", "--vae", "vae/autoencoder.ckpt", "--run-dir", "tr", "--blur-prob", "0.25"]);
    let snap = json(d.join("tr/config.json"));
    assert_eq!(snap["train"]["lambda"], 0.5);
    assert_eq!(snap["train"]["blur_prob"], 0.25);
    for f in ["denoiser.ckpt", "train_log.csv", "loss_curves.png", "run.json"] {
        assert!(d.join("tr").join(f).is_file(), "{f}");
    }

    ok(d, &["replay", "tr", "--run-dir", "tr_again"]);
    for f in ["config.json", "run.json", "denoiser.ckpt", "denoiser.ckpt.json", "train_log.csv", "loss_curves.png"] {
        assert_eq!(
            fs::read(d.join("tr").join(f)).unwrap(),
            fs::read(d.join("tr_again").join(f)).unwrap(),
            "{f} differs after replay"
        );
    }

    let args = ["--vae", "vae/autoencoder.ckpt", "--model", "tr/denoiser.ckpt"];
    let eval: Vec<&str> = ["eval", "--config", "tiny.json", "--run-dir", "ev"].iter().chain(&args).copied().collect();
    ok(d, &eval);
    let report = json(d.join("ev/eval.json"));
    assert!(report["albedo"]["mean_psnr"].is_number());
    for f in ["albedo_metrics.csv", "albedo_grid.png", "lighting_histogram.png", "lighting_latents.json"] {
        assert!(d.join("ev").join(f).is_file(), "{f}");
    }

    ok(d, &["gen-data", "--out", "imgs", "--scenes", "1", "--lights", "2", "--size", "32"]);
    // Default inference settings; only the denoiser's own timesteps come from the model.
    let infer: Vec<&str> = ["infer", "--run-dir", "inf", "--input", "imgs/scene_0000/light_0.png"]
        .iter()
        .chain(&args)
        .copied()
        .collect();
    ok(d, &infer);
    let snap = json(d.join("inf/config.json"));
    assert_eq!(snap["inference"]["guidance_scale"], 1.5);
    assert_eq!(snap["inference"]["ddim_steps"], 50);
    assert_eq!(snap["inference"]["n_samples"], 10);
    assert!(d.join("inf/albedo_000.png").is_file());

    ok(d, &["analyze", "--config", "tiny.json", "--vae", "vae/autoencoder.ckpt", "--run-dir", "an"]);
    let stats = json(d.join("an/lighting_latents.json"));
    assert!(stats["positive_fraction"].is_number());
}

#[test]
fn ablation_table_has_the_four_variants() {
    let ws = workspace();
    let d = ws.path();
    let stdout = ok(d, &["ablate", "--config", "tiny.json", "--vae", "vae/autoencoder.ckpt", "--run-dir", "ab"]);
    for label in ["full", "w/o reg. losses", "w/o consistency", "w/o lighting blur"] {
        assert!(stdout.contains(&format!("| {label} |")), "{label} missing from\n{stdout}");
    }
    let csv = fs::read_to_string(d.join("ab/ablation.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert!(header.contains(&"psnr") && header.contains(&"ssim"));
    let variants: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(variants, ["full", "no_reg", "no_consistency", "no_blur", "input_baseline"]);
    for v in ["full", "no_reg", "no_consistency", "no_blur"] {
        assert!(d.join("ab").join(v).join("denoiser.ckpt").is_file());
        assert!(d.join("ab").join(v).join("loss_curves.png").is_file());
    }
}

#[test]
fn run_root_comes_from_the_environment() {
    let ws = workspace();
    let d = ws.path();
    let out = Command::new(env!("CARGO_BIN_EXE_albedo"))
        .current_dir(d)
        .env("RUST_LOG", "warn")
        .env("ALBEDO_RUN_ROOT", d.join("elsewhere"))
        .args(["analyze", "--config", "tiny.json", "--vae", "vae/autoencoder.ckpt"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(d.join("elsewhere/analyze-0001/lighting_latents.json").is_file());
}
