use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ulsqueeze::data::{
    apply_affine, augment_pixels, batch_iter, epoch_order, load_and_preprocess, resize_bilinear,
    scan_dataset, stratified_split, synthetic, AffineParams, AugmentConfig, ImageRecord, Sample,
    SampleSource, SplitManifest,
};
use ulsqueeze::{Class, Error, Tensor4};

fn tent(d: f64) -> f64 {
    (1.0 - d.abs()).max(0.0)
}

fn write_gray(path: &Path, w: u32, h: u32, value: u8) {
    image::RgbImage::from_pixel(w, h, image::Rgb([value, value, value]))
        .save(path)
        .unwrap();
}

#[test]
fn uniform_images_hit_normalization_endpoints() {
    let dir = tempfile::tempdir().unwrap();
    let white = dir.path().join("Uninfected").join("w.png");
    let black = dir.path().join("Parasitized").join("b.png");
    std::fs::create_dir_all(white.parent().unwrap()).unwrap();
    std::fs::create_dir_all(black.parent().unwrap()).unwrap();
    write_gray(&white, 97, 143, 255);
    write_gray(&black, 40, 40, 0);

    let w = load_and_preprocess(&white).unwrap();
    assert_eq!(w.pixels.dims(), [1, 130, 130, 3]);
    assert!(w.pixels.data().iter().all(|&v| v == 1.0));
    assert_eq!(w.label, Class::Uninfected);
    let b = load_and_preprocess(&black).unwrap();
    assert!(b.pixels.data().iter().all(|&v| v == 0.0));
    assert_eq!(b.label, Class::Parasitized);
}

#[test]
fn channel_order_is_rgb() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("Parasitized").join("red.png");
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    image::RgbImage::from_pixel(8, 8, image::Rgb([255, 0, 0])).save(&path).unwrap();
    let r = load_and_preprocess(&path).unwrap();
    assert_eq!(r.pixels.pixel(0, 64, 64), &[1.0, 0.0, 0.0]);
}

#[test]
fn corrupt_and_non_image_files_name_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let class_dir = dir.path().join("Uninfected");
    std::fs::create_dir_all(&class_dir).unwrap();
    let bad = class_dir.join("broken.png");
    std::fs::write(&bad, b"\x89PNG\r\n\x1a\nnot really").unwrap();
    let text = class_dir.join("notes.png");
    std::fs::write(&text, "hello").unwrap();
    for p in [&bad, &text] {
        match load_and_preprocess(p) {
            Err(Error::Ingestion { path, .. }) => assert_eq!(&path, p),
            other => panic!("expected ingestion error, got {other:?}"),
        }
    }
}

#[test]
fn checkerboard_upsize_matches_bilinear_oracle() {
    let src = Tensor4::new([1, 2, 2, 1], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
    let out = resize_bilinear(&src, 130, 130);
    let scale = 2.0 / 130.0;
    let mut worst = 0.0f64;
    for y in 0..130 {
        for x in 0..130 {
            let fy = ((y as f64 + 0.5) * scale - 0.5).clamp(0.0, 1.0);
            let fx = ((x as f64 + 0.5) * scale - 0.5).clamp(0.0, 1.0);
            let mut want = 0.0;
            for i in 0..2 {
                for j in 0..2 {
                    want += src.at(0, i, j, 0) as f64 * tent(fy - i as f64) * tent(fx - j as f64);
                }
            }
            worst = worst.max((out.at(0, y, x, 0) as f64 - want).abs());
        }
    }
    assert!(worst < 1e-5, "worst {worst}");
}

#[test]
fn identity_augmentation_is_exact() {
    let rec = &synthetic::records(1, 4)[0];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let out = augment_pixels(&rec.pixels, &AugmentConfig::identity(), &mut rng);
    assert_eq!(out.data(), rec.pixels.data());
}

#[test]
fn horizontal_flip_swaps_halves() {
    let img = Tensor4::from_fn([1, 6, 6, 1], |_, _, x, _| if x < 3 { 0.0 } else { 1.0 });
    let p = AffineParams {
        hflip: true,
        ..AffineParams::IDENTITY
    };
    let out = apply_affine(&img, &p);
    let want = Tensor4::from_fn([1, 6, 6, 1], |_, _, x, _| if x < 3 { 1.0 } else { 0.0 });
    assert_eq!(out, want);
}

#[test]
fn ten_degree_rotation_of_a_spike_matches_inverse_map_oracle() {
    let (size, py, px) = (31usize, 12usize, 19usize);
    let img = Tensor4::from_fn([1, size, size, 1], |_, y, x, _| {
        if (y, x) == (py, px) {
            1.0
        } else {
            0.0
        }
    });
    let p = AffineParams {
        rotation_deg: 10.0,
        ..AffineParams::IDENTITY
    };
    let out = apply_affine(&img, &p);
    let theta = 10f64.to_radians();
    let c = (size as f64 - 1.0) / 2.0;
    let mut worst = 0.0f64;
    let mut mass = 0.0;
    for y in 0..size {
        for x in 0..size {
            // source point: output offset rotated back by the transform
            let (u, v) = (x as f64 - c, y as f64 - c);
            let sx = theta.cos() * u + theta.sin() * v + c;
            let sy = -theta.sin() * u + theta.cos() * v + c;
            let want = tent(sx - px as f64) * tent(sy - py as f64);
            worst = worst.max((out.at(0, y, x, 0) as f64 - want).abs());
            mass += out.at(0, y, x, 0) as f64;
        }
    }
    assert!(worst < 1e-4, "worst {worst}");
    assert!(mass > 0.5, "spike vanished");
}

#[test]
fn augmentation_stays_in_range_and_shape() {
    let rec = &synthetic::records(1, 9)[1];
    let cfg = AugmentConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..5 {
        let out = augment_pixels(&rec.pixels, &cfg, &mut rng);
        assert_eq!(out.dims(), [1, 130, 130, 3]);
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

fn fake_samples(per_class: usize) -> Vec<Sample> {
    Class::ALL
        .iter()
        .flat_map(|&label| {
            (0..per_class).map(move |i| Sample {
                path: PathBuf::from(label.dir_name()).join(format!("{i:04}.png")),
                label,
            })
        })
        .collect()
}

#[test]
fn zero_fraction_gives_empty_validation() {
    let split = stratified_split(&fake_samples(7), 0.0, 3).unwrap();
    assert!(split.validation.is_empty());
    assert_eq!(split.train.len(), 14);
}

#[test]
fn missing_class_is_usage_error() {
    let only: Vec<Sample> = fake_samples(3).into_iter().filter(|s| s.label == Class::Uninfected).collect();
    assert!(matches!(stratified_split(&only, 0.2, 0), Err(Error::Usage(_))));
}

#[test]
fn ten_record_split_matches_recorded_reference() {
    let samples = fake_samples(5);
    let split = stratified_split(&samples, 0.2, 11).unwrap();
    // membership recorded once from the seeded shuffle
    let val: Vec<String> = split.validation.iter().map(|s| s.path.display().to_string()).collect();
    assert_eq!(val, ["Parasitized/0004.png", "Uninfected/0001.png"]);
    assert_eq!(split.train.len(), 8);
    assert_eq!(stratified_split(&samples, 0.2, 11).unwrap(), split);
}

#[test]
fn manifest_roundtrip_and_scan() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("cells");
    let written = synthetic::write_dataset(&root, 3, 1).unwrap();
    let mut scanned = scan_dataset(&root).unwrap();
    scanned.sort();
    let mut expect = written.clone();
    expect.sort();
    assert_eq!(scanned, expect);

    let split = stratified_split(&scanned, 0.2, 5).unwrap();
    let manifest = SplitManifest::from_split(&root, &split);
    let path = dir.path().join("split.json");
    manifest.save(&path).unwrap();
    let back = SplitManifest::load(&path).unwrap();
    assert_eq!(back, manifest);
    assert_eq!(back.validation_samples().unwrap(), split.validation);
    assert_eq!(back.train_samples().unwrap(), split.train);
}

#[test]
fn seventy_records_batch_as_32_32_6() {
    let records: Vec<ImageRecord> = synthetic::records(35, 0);
    let sizes: Vec<usize> = batch_iter(&records, 32, 1, 0, None)
        .unwrap()
        .map(|b| b.unwrap().1.len())
        .collect();
    assert_eq!(sizes, vec![32, 32, 6]);
}

#[test]
fn batch_iter_errors() {
    let records = synthetic::records(1, 0);
    assert!(matches!(batch_iter(&records, 0, 0, 0, None), Err(Error::Usage(_))));
    let empty: Vec<ImageRecord> = Vec::new();
    assert!(matches!(batch_iter(&empty, 4, 0, 0, None), Err(Error::EmptyDataset)));
}

#[test]
fn batches_are_deterministic_and_augmented_per_image() {
    let records = synthetic::records(3, 2);
    let cfg = AugmentConfig::default();
    let collect = || -> Vec<Tensor4<f32>> {
        batch_iter(&records, 4, 9, 1, Some(&cfg))
            .unwrap()
            .map(|b| b.unwrap().0)
            .collect()
    };
    assert_eq!(collect(), collect());
    let plain: Vec<Tensor4<f32>> = batch_iter(&records, 4, 9, 1, None)
        .unwrap()
        .map(|b| b.unwrap().0)
        .collect();
    assert_ne!(collect(), plain);
}

#[test]
fn pixels_follow_the_planned_order() {
    let records = synthetic::records(3, 2);
    let it = batch_iter(&records, 4, 5, 2, None).unwrap();
    let plan = it.plan();
    for (batch, idx) in it.zip(plan) {
        let (x, labels) = batch.unwrap();
        for (k, &i) in idx.iter().enumerate() {
            assert_eq!(x.sample(k).data(), records.pixels(i).unwrap().data());
            assert_eq!(labels.as_slice()[k], records.label(i).index());
        }
    }
}

proptest! {
    #[test]
    fn split_is_a_stratified_partition(p in 1usize..40, u in 1usize..40, frac in 0.0f64..0.9, seed: u64) {
        let mut samples = fake_samples(p.max(u));
        let keep_p: BTreeSet<usize> = (0..p).collect();
        let keep_u: BTreeSet<usize> = (0..u).collect();
        let mut counter = [0usize; 2];
        samples.retain(|s| {
            let i = counter[s.label.index()];
            counter[s.label.index()] += 1;
            if s.label == Class::Parasitized { keep_p.contains(&i) } else { keep_u.contains(&i) }
        });
        let split = stratified_split(&samples, frac, seed).unwrap();
        let train: BTreeSet<_> = split.train.iter().cloned().collect();
        let val: BTreeSet<_> = split.validation.iter().cloned().collect();
        prop_assert!(train.is_disjoint(&val));
        let all: BTreeSet<_> = samples.iter().cloned().collect();
        prop_assert_eq!(train.union(&val).cloned().collect::<BTreeSet<_>>(), all);
        for (class, n) in [(Class::Parasitized, p), (Class::Uninfected, u)] {
            let got = split.validation.iter().filter(|s| s.label == class).count();
            prop_assert_eq!(got, ((frac * n as f64) - 1e-9).ceil().max(0.0) as usize);
        }
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation(n in 1usize..200, seed: u64, epoch in 0u64..5) {
        let order = epoch_order(n, seed, epoch);
        let mut seen = order.clone();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(order, epoch_order(n, seed, epoch));
    }
}

#[test]
fn batch_union_is_the_partition_exactly_once() {
    let records = synthetic::records(9, 1);
    for batch in [1, 4, 7, 18, 32] {
        let it = batch_iter(&records, batch, 3, 0, None).unwrap();
        let mut idx: Vec<usize> = it.plan().into_iter().flatten().collect();
        assert!(it.plan().iter().all(|b| b.len() <= batch));
        idx.sort_unstable();
        assert_eq!(idx, (0..records.len()).collect::<Vec<_>>());
    }
}
