//! Reader round trips, split partition, resampling and synthetic data.

use std::collections::HashSet;

use lrad::datasets::{
    one_class_split, read_cifar10, read_idx, read_image_dir, resize_bilinear, synth_generate, write_cifar10,
    write_idx, write_image_dir, LabeledImages, Polarity, PixelRange, SynthSpec,
};
use lrad::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Images whose pixels are exact byte levels, so byte round trips are lossless.
fn byte_levels(n: usize, c: usize, size: usize, classes: u32, seed: u64) -> LabeledImages<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let px: Vec<f32> = (0..n * c * size * size)
        .map(|_| rng.random_range(0..=255u8) as f32 / 127.5 - 1.0)
        .collect();
    LabeledImages::new(
        Tensor::new(&[n, c, size, size], px).unwrap(),
        (0..n).map(|i| i as u32 % classes).collect(),
        (0..n).map(|i| format!("g{i}")).collect(),
        PixelRange::Tanh,
    )
    .unwrap()
}

#[test]
fn idx_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = byte_levels(7, 1, 28, 10, 1);
    let (ip, lp) = (dir.path().join("i.idx"), dir.path().join("l.idx"));
    write_idx(&d, &ip, &lp).unwrap();
    let back = read_idx(&ip, &lp).unwrap();
    assert_eq!(back.labels, d.labels);
    assert_eq!(back.images.shape(), d.images.shape());
    assert!(back.images.max_abs_diff(&d.images).unwrap() < 1e-6);
    assert_eq!(back.ids[3], "i.idx:3");
}

#[test]
fn idx_truncated_payload_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let d = byte_levels(3, 1, 4, 2, 2);
    let (ip, lp) = (dir.path().join("i.idx"), dir.path().join("l.idx"));
    write_idx(&d, &ip, &lp).unwrap();
    let bytes = std::fs::read(&ip).unwrap();
    std::fs::write(&ip, &bytes[..bytes.len() - 5]).unwrap();
    assert!(read_idx(&ip, &lp).is_err());
}

#[test]
fn cifar_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = byte_levels(5, 3, 32, 10, 3);
    write_cifar10(&d, &dir.path().join("data_batch_1.bin")).unwrap();
    write_cifar10(&d.select(&[0, 1]).unwrap(), &dir.path().join("test_batch.bin")).unwrap();
    let back = read_cifar10(dir.path()).unwrap();
    assert_eq!(back.len(), 7);
    assert_eq!(back.labels[..5], d.labels[..]);
    let head = back.select(&[0, 1, 2, 3, 4]).unwrap();
    assert!(head.images.max_abs_diff(&d.images).unwrap() < 1e-6);
}

#[test]
fn image_dir_round_trip_grey_and_rgb() {
    for c in [1, 3] {
        let dir = tempfile::tempdir().unwrap();
        let d = byte_levels(6, c, 16, 3, 4 + c as u64);
        write_image_dir(&d, dir.path()).unwrap();
        let back = read_image_dir(dir.path(), c, 16).unwrap();
        // Files are grouped by class directory; match them back by label order.
        let mut order: Vec<usize> = (0..6).collect();
        order.sort_by_key(|&i| (d.labels[i], i));
        let expect = d.select(&order).unwrap();
        assert_eq!(back.labels, expect.labels);
        assert!(back.images.max_abs_diff(&expect.images).unwrap() < 1e-6);
    }
}

#[test]
fn undecodable_file_is_named() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("0")).unwrap();
    let bad = dir.path().join("0").join("broken.png");
    std::fs::write(&bad, b"not an image").unwrap();
    let err = read_image_dir(dir.path(), 1, 8).unwrap_err().to_string();
    assert!(err.contains("broken.png"), "{err}");
}

#[test]
fn bilinear_checkerboard_upsampling() {
    let src: Vec<f32> = (0..16).map(|i| ((i / 4 + i % 4) % 2) as f32).collect();
    // Half-pixel 2x weights: output o samples source position o/2 - 1/4,
    // clamped to the border.
    let taps: [[(usize, f32); 2]; 8] = [
        [(0, 1.0), (0, 0.0)],
        [(0, 0.75), (1, 0.25)],
        [(0, 0.25), (1, 0.75)],
        [(1, 0.75), (2, 0.25)],
        [(1, 0.25), (2, 0.75)],
        [(2, 0.75), (3, 0.25)],
        [(2, 0.25), (3, 0.75)],
        [(3, 1.0), (3, 0.0)],
    ];
    let out = resize_bilinear(&src, 4, 4, 8, 8);
    for y in 0..8 {
        for x in 0..8 {
            let mut want = 0.0;
            for &(sy, wy) in &taps[y] {
                for &(sx, wx) in &taps[x] {
                    want += wy * wx * src[sy * 4 + sx];
                }
            }
            assert!((out[y * 8 + x] - want).abs() < 1e-6, "({y},{x}) {} vs {want}", out[y * 8 + x]);
        }
    }
}

#[test]
fn split_partitions_for_many_seeds() {
    let labels: Vec<u32> = (0..230).map(|i| (i * 7 % 10) as u32).collect();
    let n = labels.len();
    let d = LabeledImages::new(
        Tensor::new(&[n, 1, 1, 1], (0..n).map(|i| i as f32).collect()).unwrap(),
        labels.clone(),
        (0..n).map(|i| i.to_string()).collect(),
        PixelRange::Tanh,
    )
    .unwrap();
    for polarity in [Polarity::ClassIsAnomaly, Polarity::ClassIsNormal] {
        for seed in 0..100 {
            let s = one_class_split(&d, 3, polarity, 0.8, seed).unwrap();
            let train: HashSet<&String> = s.train_normals.ids.iter().collect();
            let test: HashSet<&String> = s.test.ids.iter().collect();
            assert_eq!(train.len() + test.len(), n);
            assert!(train.is_disjoint(&test));
            let anomalous = |l: u32| (l == 3) == (polarity == Polarity::ClassIsAnomaly);
            assert!(s.train_normals.labels.iter().all(|&l| !anomalous(l)));
            for (i, &f) in s.test_anomaly_flags.iter().enumerate() {
                assert_eq!(f, anomalous(s.test.labels[i]));
            }
            let normals = labels.iter().filter(|&&l| !anomalous(l)).count();
            assert_eq!(s.train_normals.len(), (0.8 * normals as f64).round() as usize);
        }
    }
    let a = one_class_split(&d, 3, Polarity::ClassIsAnomaly, 0.8, 1).unwrap();
    let b = one_class_split(&d, 3, Polarity::ClassIsAnomaly, 0.8, 2).unwrap();
    assert_ne!(a.train_normals.ids, b.train_normals.ids);
}

#[test]
fn synthetic_mean_difference_matches_stripe_contribution() {
    let spec = SynthSpec {
        normal_count: 4000,
        anomaly_count: 4000,
        radius_min: 7,
        radius_max: 7,
        noise: 0.05,
        ..SynthSpec::default()
    };
    // No pixel may hit the clamp, or the contribution is no longer additive.
    let hi = spec.disk_level.max(spec.background) + spec.stripe_amplitude + spec.noise;
    let lo = spec.disk_level.min(spec.background) - spec.noise;
    assert!(hi <= 1.0 && lo >= -1.0);
    let d = synth_generate(&spec).unwrap();
    let row = d.images.row_len();
    let mean_of = |label: u32| {
        let (mut s, mut k) = (0.0f64, 0usize);
        for (i, img) in d.images.data().chunks(row).enumerate() {
            if d.labels[i] == label {
                s += img.iter().map(|&v| v as f64).sum::<f64>() / row as f64;
                k += 1;
            }
        }
        s / k as f64
    };
    let measured = mean_of(1) - mean_of(0);
    let analytic = spec.stripe_pixels() as f64 * spec.stripe_amplitude as f64 / row as f64;
    assert!(
        (measured - analytic).abs() <= 0.02 * analytic,
        "measured {measured}, analytic {analytic}"
    );
}
