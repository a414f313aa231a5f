mod common;

use albedo_core::diffusion::{add_noise, make_schedule, NoiseSchedule};
use albedo_core::inference::{
    ddim_step, ddim_timesteps, ddim_update, guide, guided_decompose, mean_albedo_latents, predict_albedo,
    run_sampler, sample_albedo_latent, sample_seed, InferenceConfig,
};
use albedo_core::{Error, LatentTensor};
use common::{lat_from, tiny_pipeline};
use proptest::prelude::*;

#[test]
fn schedule_matches_running_product() {
    let s = make_schedule(1000).unwrap();
    assert_eq!(s.steps(), 1000);
    let mut prod = 1.0;
    for t in 1..=1000 {
        prod *= 1.0 - s.beta(t);
        assert!((s.alpha_bar(t) - prod).abs() <= 1e-12);
        assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
    }
    assert!((s.alpha_bar(1) - 1.0).abs() < 1e-3);
    assert!(s.alpha_bar(1000) < 0.05);

    let one = make_schedule(1).unwrap();
    assert_eq!(one.steps(), 1);
    assert_eq!(one.alpha_bar(1), 1.0 - one.beta(1));
    assert!(matches!(make_schedule(0), Err(Error::Parameter(_))));
}

fn fixed_schedule(alpha_bar: f64) -> NoiseSchedule {
    serde_json::from_str(&format!(r#"{{"betas": [{}], "alpha_bars": [{alpha_bar}]}}"#, 1.0 - alpha_bar)).unwrap()
}

#[test]
fn add_noise_examples() {
    let s = fixed_schedule(0.25);
    let ones = lat_from(2, 2, 1, |_, _, _| 1.0);
    let out = add_noise(&ones, &ones, 1, &s).unwrap();
    for v in out.data() {
        assert!((v - (0.5 + 0.75f64.sqrt())).abs() < 1e-12);
    }
    let z = lat_from(3, 3, 2, |y, x, c| (y as f64 - x as f64) * 0.3 + c as f64);
    let zero = LatentTensor::zeros(3, 3, 2);
    let sched = make_schedule(1000).unwrap();
    let out = add_noise(&z, &zero, 500, &sched).unwrap();
    assert_eq!(out.data(), &(z.data() * sched.alpha_bar(500).sqrt()));
    let eps = lat_from(3, 3, 2, |y, x, c| ((y * 5 + x * 3 + c) % 7) as f64 / 7.0 - 0.5);
    let near = add_noise(&z, &eps, 1, &sched).unwrap();
    assert!(near.l2_distance(&z) <= 0.05 * z.norm());
    assert!(add_noise(&z, &eps, 0, &sched).is_err());
    assert!(add_noise(&z, &eps, 1001, &sched).is_err());
}

/// Every entry equal, so each one carries the scalar example.
fn constant(v: f64) -> LatentTensor {
    lat_from(2, 2, 1, |_, _, _| v)
}

#[test]
fn ddim_examples() {
    let out = ddim_update(&constant(1.0), &constant(1.0), 0.25, 0.81, 0.0, None).unwrap();
    let expected = 0.9 + 0.19f64.sqrt() * (0.5 / 0.75f64.sqrt());
    assert!(out.data().iter().all(|v| (v - expected).abs() <= 1e-9));

    let z = lat_from(2, 3, 2, |y, x, c| 0.2 * y as f64 - 0.1 * x as f64 + c as f64);
    let fixed = ddim_update(&z, &z, 0.4, 0.4, 0.0, None).unwrap();
    for (a, b) in fixed.data().iter().zip(z.data()) {
        assert!((a - b).abs() <= 1e-9);
    }

    let sched = make_schedule(1000).unwrap();
    let x0 = lat_from(2, 3, 2, |y, x, c| 0.5 - 0.3 * y as f64 + 0.1 * (x + c) as f64);
    let end = ddim_step(&z, &x0, 20, 0, &sched, 0.0, None).unwrap();
    for (a, b) in end.data().iter().zip(x0.data()) {
        assert!((a - b).abs() <= 1e-9);
    }
    assert!(matches!(ddim_step(&z, &x0, 5, 5, &sched, 0.0, None), Err(Error::Parameter(_))));
    assert!(matches!(ddim_step(&z, &x0, 4, 5, &sched, 0.0, None), Err(Error::Parameter(_))));
}

#[test]
fn guidance_examples() {
    let u = lat_from(2, 2, 2, |y, x, c| (y + x) as f64 * 0.37 - c as f64 * 1.3);
    let c = lat_from(2, 2, 2, |y, x, c| (y * x) as f64 * 0.71 + c as f64 * 0.9 - 0.2);
    let one = guide(&u, &c, 1.0).unwrap();
    for (a, b) in one.data().iter().zip(c.data()) {
        assert!((a - b).abs() <= 1e-12);
    }
    assert_eq!(guide(&u, &c, 0.0).unwrap(), u);
    let scalar = guide(&constant(0.0), &constant(2.0), 1.5).unwrap();
    assert!(scalar.data().iter().all(|v| (v - 3.0).abs() <= 1e-12));
}

proptest! {
    #[test]
    fn subsequence_runs_from_t_down_to_one(t in 1usize..2000, frac in 0.0..1.0f64) {
        let n = 1 + ((t - 1) as f64 * frac) as usize;
        let ts = ddim_timesteps(t, n).unwrap();
        prop_assert_eq!(ts.len(), n);
        prop_assert_eq!(ts[0], t);
        if n > 1 {
            prop_assert_eq!(*ts.last().unwrap(), 1);
        }
        prop_assert!(ts.windows(2).all(|w| w[0] > w[1]));
    }
}

fn small_inference(ddim_steps: usize, n_samples: usize, seed: u64) -> InferenceConfig {
    InferenceConfig {
        ddim_steps,
        n_samples,
        seed,
        ..Default::default()
    }
}

#[test]
fn trained_model_sampler_properties() {
    let tiny = tiny_pipeline(3);
    let (ae, model) = (&tiny.ae, &tiny.model);
    let cond = model.normalize(&ae.encode(&tiny.scenes[0].images[0]).unwrap());
    let shape = cond.shape();

    // Determinism and shape.
    let cfg = small_inference(4, 1, 3);
    let a = sample_albedo_latent(&cond, &cfg, model).unwrap();
    assert_eq!(a, sample_albedo_latent(&cond, &cfg, model).unwrap());
    assert_eq!(a.shape(), shape);
    let b = sample_albedo_latent(&cond, &small_inference(4, 1, 4), model).unwrap();
    assert!(a.l2_distance(&b) > 0.0);

    // The returned latent is the albedo head of the final iteration, not the recomposition.
    let full = run_sampler(model, &[&cond], &[sample_seed(3, 0)], &cfg).unwrap().remove(0);
    assert_eq!(full.albedo, a);
    assert!(full.recompose().l2_distance(&a) > 0.0);

    // Guidance identities on the real network.
    let z_t = lat_from(shape.0, shape.1, shape.2, |y, x, c| ((y * 3 + x + c) % 5) as f64 * 0.4 - 0.8);
    let cond_out = model.denoise_decompose(&z_t, 7, Some(&cond)).unwrap();
    let uncond_out = model.denoise_decompose(&z_t, 7, None).unwrap();
    assert_eq!(cond_out, model.denoise_decompose(&z_t, 7, Some(&cond)).unwrap());
    assert!(cond_out.albedo.l2_distance(&uncond_out.albedo) > 0.0);
    let g1 = guided_decompose(model, &z_t, 7, &cond, 1.0).unwrap();
    let g0 = guided_decompose(model, &z_t, 7, &cond, 0.0).unwrap();
    for (g, want) in [(&g1, &cond_out), (&g0, &uncond_out)] {
        for (x, y) in g.albedo.data().iter().zip(want.albedo.data()) {
            assert!((x - y).abs() <= 1e-12);
        }
        for (x, y) in g.lighting.data().iter().zip(want.lighting.data()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    // A single sample is decoded as is.
    let image = &tiny.scenes[1].images[2];
    let single = predict_albedo(image, &small_inference(4, 1, 9), ae, model).unwrap();
    let sampled = sample_albedo_latent(&model.normalize(&ae.encode(image).unwrap()), &small_inference(4, 1, 9), model).unwrap();
    assert_eq!(single, ae.decode(&model.denormalize(&sampled)).unwrap());
    assert_eq!(single.dims(), image.dims());
    assert!(single.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn averaging_reduces_variance() {
    let tiny = tiny_pipeline(3);
    let model = &tiny.model;
    let cond = model.normalize(&tiny.ae.encode(&tiny.scenes[0].images[1]).unwrap());
    let runs = 24;
    let k = 4;
    let mut singles = Vec::new();
    let mut means = Vec::new();
    for r in 0..runs {
        let cfg = small_inference(3, k, 1000 + r);
        let (mean, _) = mean_albedo_latents(model, &[&cond], &cfg).unwrap().remove(0);
        means.push(mean);
        singles.push(sample_albedo_latent(&cond, &small_inference(3, 1, 5000 + r), model).unwrap());
    }
    let variance = |xs: &[LatentTensor]| -> Vec<f64> {
        let n = xs.len() as f64;
        (0..xs[0].len())
            .map(|i| {
                let vals: Vec<f64> = xs.iter().map(|x| x.data().as_slice().unwrap()[i]).collect();
                let m = vals.iter().sum::<f64>() / n;
                vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)
            })
            .collect()
    };
    let (vm, vs) = (variance(&means), variance(&singles));
    let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(avg(&vm) <= avg(&vs), "mean-of-{k} variance {} vs single {}", avg(&vm), avg(&vs));
    let below = vm.iter().zip(&vs).filter(|(m, s)| m <= s).count() as f64 / vm.len() as f64;
    assert!(below >= 0.9, "only {below} of entries have lower variance");
}

#[test]
fn untrained_models_are_rejected() {
    let tiny = tiny_pipeline(0);
    let cond = tiny.model.normalize(&tiny.ae.encode(&tiny.scenes[0].images[0]).unwrap());
    assert!(matches!(
        sample_albedo_latent(&cond, &small_inference(2, 1, 0), &tiny.model),
        Err(Error::State(_))
    ));
}
