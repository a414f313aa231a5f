use albedo_core::analysis::{analyze_lighting_latents, two_pass_stats, DistributionReport, HISTOGRAM_BINS};
use albedo_core::autoencoder::{AutoencoderConfig, AutoencoderParams};
use albedo_core::rng::rng_from_seed;
use albedo_core::scene::gen_scenes;
use albedo_core::{LatentTensor, SceneSample};
use ndarray::Array3;
use rand::Rng;

#[test]
fn injected_latents() {
    let z = LatentTensor::new(Array3::from_shape_vec((2, 2, 1), vec![-1.0, -1.0, 1.0, 3.0]).unwrap()).unwrap();
    let r = DistributionReport::from_latents(&[&z]).unwrap();
    assert_eq!(r.count, 4);
    assert!((r.mean - 0.5).abs() < 1e-12);
    assert_eq!(r.positive_fraction, 0.5);
    assert_eq!(r.bins.len(), HISTOGRAM_BINS);
    assert_eq!(r.bins.iter().map(|b| b.count).sum::<u64>(), 4);
    let above: u64 = r.bins.iter().filter(|b| b.lo >= 0.0).map(|b| b.count).sum();
    assert_eq!(above as f64 / 4.0, r.positive_fraction);
}

#[test]
fn streaming_and_two_pass_statistics_agree() {
    let mut rng = rng_from_seed(3);
    let latents: Vec<LatentTensor> = (0..5)
        .map(|_| {
            let v: Vec<f64> = (0..4 * 4 * 3).map(|_| rng.random_range(-2.0..1.0) + 1e3).collect();
            LatentTensor::new(Array3::from_shape_vec((4, 4, 3), v).unwrap()).unwrap()
        })
        .collect();
    let refs: Vec<&LatentTensor> = latents.iter().collect();
    let r = DistributionReport::from_latents(&refs).unwrap();
    let all: Vec<f64> = latents.iter().flat_map(|z| z.data().iter().copied()).collect();
    let (mean, std) = two_pass_stats(&all);
    assert!((r.mean - mean).abs() <= 1e-9);
    assert!((r.std - std).abs() <= 1e-9);
    for ch in &r.per_channel {
        let vals: Vec<f64> = all.iter().skip(ch.channel).step_by(3).copied().collect();
        let (m, s) = two_pass_stats(&vals);
        assert!((ch.mean - m).abs() <= 1e-9 && (ch.std - s).abs() <= 1e-9);
        assert_eq!(ch.count, vals.len() as u64);
    }
    assert_eq!(r.bins.iter().map(|b| b.count).sum::<u64>(), all.len() as u64);
}

#[test]
fn images_equal_to_albedo_give_zero_lighting() {
    let mut ae = AutoencoderParams::init(AutoencoderConfig {
        base_width: 8,
        ..Default::default()
    })
    .unwrap();
    ae.freeze();
    let scenes: Vec<SceneSample> = gen_scenes(1, 2, 3, 32, 32)
        .unwrap()
        .into_iter()
        .map(|mut s| {
            s.images = vec![s.albedo.clone(); s.images.len()];
            s
        })
        .collect();
    let r = analyze_lighting_latents(&scenes, &ae).unwrap();
    assert_eq!((r.mean, r.min, r.max), (0.0, 0.0, 0.0));
    assert_eq!(r.positive_fraction, 0.0);
    assert_eq!(r.count, (2 * 3 * 8 * 8 * 4) as u64);
    assert!(analyze_lighting_latents(&[], &ae).is_err());
}
