use std::collections::VecDeque;
use std::fs;

use albedo_core::dataset::{read_dataset, read_manifest, write_dataset};
use albedo_core::scene::{gen_albedo_with_labels, gen_scene, gen_scenes, MAX_REGIONS, MIN_REGIONS};
use albedo_core::{compose_image, gen_albedo, gen_shading, Error};
use ndarray::Array2;

/// 4-connected components of equal labels, by breadth-first flood fill.
fn count_components(labels: &Array2<u32>) -> usize {
    let (h, w) = labels.dim();
    let mut seen = Array2::from_elem((h, w), false);
    let mut count = 0;
    for start in 0..h * w {
        let (sy, sx) = (start / w, start % w);
        if seen[[sy, sx]] {
            continue;
        }
        count += 1;
        let label = labels[[sy, sx]];
        let mut queue = VecDeque::from([(sy, sx)]);
        seen[[sy, sx]] = true;
        while let Some((y, x)) = queue.pop_front() {
            let neighbours = [(y.wrapping_sub(1), x), (y + 1, x), (y, x.wrapping_sub(1)), (y, x + 1)];
            for (ny, nx) in neighbours {
                if ny < h && nx < w && !seen[[ny, nx]] && labels[[ny, nx]] == label {
                    seen[[ny, nx]] = true;
                    queue.push_back((ny, nx));
                }
            }
        }
    }
    count
}

#[test]
fn region_count_matches_flood_fill() {
    let (albedo, labels) = gen_albedo_with_labels(7, 64, 64).unwrap();
    assert_eq!(albedo, gen_albedo(7, 64, 64).unwrap());
    let n = count_components(&labels);
    assert!((MIN_REGIONS..=MAX_REGIONS).contains(&n), "{n} regions");
    for seed in 0..20 {
        let (_, labels) = gen_albedo_with_labels(seed, 64, 64).unwrap();
        let n = count_components(&labels);
        assert!((MIN_REGIONS..=MAX_REGIONS).contains(&n), "seed {seed}: {n} regions");
    }
}

#[test]
fn shading_smoothness_exhaustive_scan() {
    for seed in 0..50 {
        let s = gen_shading(seed, 64, 64).unwrap();
        let d = s.data();
        let (h, w) = d.dim();
        for y in 0..h {
            for x in 0..w {
                let v = d[[y, x]];
                assert!((0.2..=1.5).contains(&v), "seed {seed} value {v}");
                if x + 1 < w {
                    assert!((v - d[[y, x + 1]]).abs() <= 0.05, "seed {seed} at ({y},{x}) horizontal");
                }
                if y + 1 < h {
                    assert!((v - d[[y + 1, x]]).abs() <= 0.05, "seed {seed} at ({y},{x}) vertical");
                }
            }
        }
    }
}

#[test]
fn scenes_regenerate_from_stored_seeds() {
    for seed in [0, 3, 99] {
        let s = gen_scene(seed, 4, 32, 32).unwrap();
        assert_eq!(s.images.len(), 4);
        assert_eq!(s.albedo, gen_albedo(s.albedo_seed, 32, 32).unwrap());
        for (k, im) in s.images.iter().enumerate() {
            let shading = gen_shading(s.light_seeds[k], 32, 32).unwrap();
            assert_eq!(im, &compose_image(&s.albedo, &shading).unwrap());
        }
        assert_ne!(s.images[0], s.images[1]);
    }
    assert!(matches!(gen_scene(0, 1, 32, 32), Err(Error::Parameter(_))));
}

#[test]
fn dataset_round_trip_within_quantisation() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = gen_scenes(11, 3, 2, 16, 24).unwrap();
    write_dataset(&scenes, dir.path()).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back.len(), scenes.len());
    for (a, b) in scenes.iter().zip(&back) {
        assert_eq!(a.light_seeds, b.light_seeds);
        assert_eq!(a.albedo_seed, b.albedo_seed);
        for (x, y) in std::iter::once((&a.albedo, &b.albedo)).chain(a.images.iter().zip(&b.images)) {
            let err = x
                .data()
                .iter()
                .zip(y.data().iter())
                .map(|(p, q)| (p - q).abs())
                .fold(0.0, f64::max);
            assert!(err <= 1.0 / 255.0, "max error {err}");
        }
    }
}

#[test]
fn empty_dataset_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&[], dir.path()).unwrap();
    let entries: Vec<_> = fs::read_dir(dir.path()).unwrap().collect();
    assert_eq!(entries.len(), 1);
    assert!(read_dataset(dir.path()).unwrap().is_empty());
}

#[test]
fn manifest_count_matches_directory_walk() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&gen_scenes(2, 7, 3, 16, 16).unwrap(), dir.path()).unwrap();
    let walked = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap())
        .filter(|e| e.file_type().unwrap().is_dir() && e.file_name().to_string_lossy().starts_with("scene_"))
        .count();
    let manifest = read_manifest(dir.path()).unwrap();
    assert_eq!(manifest.scenes, walked);
    assert_eq!((manifest.lights, manifest.height, manifest.width), (3, 16, 16));
}

#[test]
fn malformed_layout_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&gen_scenes(2, 2, 2, 16, 16).unwrap(), dir.path()).unwrap();
    let victim = dir.path().join("scene_0001/light_1.png");
    fs::write(&victim, b"not a png").unwrap();
    match read_dataset(dir.path()) {
        Err(Error::Format { path, .. }) => assert_eq!(path, victim),
        other => panic!("expected a format error, got {other:?}"),
    }
    fs::remove_dir_all(dir.path().join("scene_0001")).unwrap();
    match read_dataset(dir.path()) {
        Err(Error::Format { path, .. }) => assert!(path.ends_with("scene_0001")),
        other => panic!("expected a format error, got {other:?}"),
    }
}
