mod common;

use common::{labeler_recovery, rng};
use gasformer::labeler::*;
use gasformer::Error;
use proptest::prelude::*;
use rand::Rng;

fn gray(w: usize, h: usize, f: impl Fn(usize, usize) -> f64) -> GrayImage {
    GrayImage::from_fn(w, h, f)
}

fn noise(g: &mut impl Rng, w: usize, h: usize) -> GrayImage {
    GrayImage::new(w, h, (0..w * h).map(|_| f64::from(g.gen_range(0u8..=255))).collect()).unwrap()
}

fn binary_from(img: &GrayImage, f: impl Fn(f64) -> bool) -> Binary {
    Binary {
        width: img.width,
        height: img.height,
        data: img.data.iter().map(|&v| f(v)).collect(),
    }
}

fn labels_from(w: usize, h: usize, data: Vec<u32>) -> Labels {
    let count = data.iter().copied().max().unwrap_or(0);
    Labels { width: w, height: h, data, count }
}

/// Direct windowed-mean reference with explicit mirroring.
fn naive_threshold(img: &GrayImage, block: usize, offset: f64) -> Vec<bool> {
    let r = (block / 2) as isize;
    let (w, h) = (img.width, img.height);
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut sum = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    sum += img.get(mirror(x + dx, w), mirror(y + dy, h));
                }
            }
            let area = (block * block) as f64;
            out.push(img.get(x as usize, y as usize) * area > sum + offset * area);
        }
    }
    out
}

#[test]
fn average_background_cases() {
    let f = gray(5, 4, |x, y| (x * 7 + y) as f64);
    assert_eq!(average_background(&[f.clone(), f.clone(), f.clone()]).unwrap(), f);

    let zeros = gray(3, 3, |_, _| 0.0);
    let hundreds = gray(3, 3, |_, _| 100.0);
    assert!(average_background(&[zeros, hundreds]).unwrap().data.iter().all(|&v| v == 50.0));

    let mut g = rng(1);
    let frames: Vec<GrayImage> = (0..10).map(|_| noise(&mut g, 6, 5)).collect();
    let avg = average_background(&frames).unwrap();
    for i in 0..30 {
        let mut s = 0.0;
        for f in &frames {
            s += f.data[i];
        }
        assert_eq!(avg.data[i], s / 10.0);
    }

    assert!(matches!(average_background(&[]), Err(Error::Input(_))));
    assert!(matches!(average_background(&[gray(2, 2, |_, _| 0.0), gray(3, 2, |_, _| 0.0)]), Err(Error::Input(_))));
}

#[test]
fn subtract_enhance_cases() {
    let cfg = LabelerConfig::default();
    let bg = gray(8, 8, |x, y| (x + y) as f64 * 3.0);
    assert!(subtract_enhance(&bg, &bg, &cfg).unwrap().data.iter().all(|&v| v == 0.0));

    let shifted = gray(8, 8, |x, y| (x + y) as f64 * 3.0 + 17.0);
    let out = subtract_enhance(&shifted, &bg, &cfg).unwrap();
    assert!(out.data.iter().all(|&v| v == out.data[0] && v.is_finite()));

    let two_level = gray(8, 8, |x, y| (x + y) as f64 * 3.0 + if x < 4 { 10.0 } else { 90.0 });
    let out = subtract_enhance(&two_level, &bg, &cfg).unwrap();
    for y in 0..8 {
        for x in 0..8 {
            assert_eq!(out.get(x, y), if x < 4 { 0.0 } else { 255.0 });
        }
    }

    assert!(matches!(subtract_enhance(&gray(3, 3, |_, _| 0.0), &bg, &cfg), Err(Error::Input(_))));
}

#[test]
fn adaptive_threshold_cases() {
    let flat = gray(20, 20, |_, _| 80.0);
    assert_eq!(adaptive_threshold(&flat, 11, 3.0).unwrap().count(), 0);

    let square = gray(30, 30, |x, y| if (12..17).contains(&x) && (12..17).contains(&y) { 200.0 } else { 10.0 });
    let b = adaptive_threshold(&square, 11, 5.0).unwrap();
    for y in 0..30 {
        for x in 0..30 {
            let inside = (12..17).contains(&x) && (12..17).contains(&y);
            assert_eq!(b.data[y * 30 + x], inside, "({x},{y})");
        }
    }
    assert_eq!(b.data, naive_threshold(&square, 11, 5.0));

    assert_eq!(adaptive_threshold(&square, 11, 1e6).unwrap().count(), 0);
    assert!(matches!(adaptive_threshold(&square, 10, 0.0), Err(Error::Config { .. })));
}

#[test]
fn watershed_single_and_empty() {
    let blob = gray(40, 40, |x, y| {
        let (dx, dy) = (x as f64 - 20.0, y as f64 - 20.0);
        200.0 * (-(dx * dx + dy * dy) / 50.0).exp()
    });
    let labels = watershed_refine(&blob, &binary_from(&blob, |v| v > 40.0)).unwrap();
    assert_eq!(labels.count, 1);

    let empty = binary_from(&blob, |_| false);
    let labels = watershed_refine(&blob, &empty).unwrap();
    assert_eq!(labels.count, 0);
    assert!(labels.data.iter().all(|&l| l == 0));
}

#[test]
fn watershed_separates_two_gaussian_blobs() {
    let centers = [(32.0, 40.0), (96.0, 42.0)];
    let field = |x: usize, y: usize, c: (f64, f64)| {
        let (dx, dy) = (x as f64 + 0.5 - c.0, y as f64 + 0.5 - c.1);
        (-(dx * dx + dy * dy) / (2.0 * 100.0)).exp()
    };
    let img = gray(128, 84, |x, y| 255.0 * centers.iter().map(|&c| field(x, y, c)).sum::<f64>());
    let support: Vec<Vec<bool>> = centers
        .iter()
        .map(|&c| (0..128 * 84).map(|i| field(i % 128, i / 128, c) > 0.2).collect())
        .collect();
    let labels = watershed_refine(&img, &binary_from(&img, |v| v > 0.2 * 255.0)).unwrap();
    assert_eq!(labels.count, 2);
    for truth in &support {
        let mut votes = vec![0usize; labels.count as usize + 1];
        (0..truth.len()).filter(|&i| truth[i]).for_each(|i| votes[labels.data[i] as usize] += 1);
        let id = (0..votes.len()).max_by_key(|&l| votes[l]).unwrap() as u32;
        assert_ne!(id, 0);
        let region: Vec<bool> = labels.data.iter().map(|&l| l == id).collect();
        let sym = region.iter().zip(truth).filter(|(a, b)| a != b).count();
        let area = truth.iter().filter(|&&t| t).count();
        assert!(sym as f64 <= 0.05 * area as f64, "{sym} of {area}");
    }
}

#[test]
fn region_filter_examples() {
    let cfg = LabelerConfig { min_region_size: 10, ..Default::default() };
    let mut data = vec![0u32; 100];
    data[..3].fill(1);
    let out = region_filter(&labels_from(10, 10, data), &cfg);
    assert!(out.data.iter().all(|&v| v == 0));

    let cfg = LabelerConfig { min_region_size: 0, separation_y: vec![100], ..Default::default() };
    let out = region_filter(&labels_from(8, 120, vec![1; 960]), &cfg);
    for y in 0..120 {
        let expect = if y < 100 { 1 } else { 0 };
        assert!(out.data[y * 8..(y + 1) * 8].iter().all(|&v| v == expect), "row {y}");
    }

    let cfg = LabelerConfig { min_region_size: 10, class_id: 3, ..Default::default() };
    let mut data = vec![0u32; 400];
    for y in 0..5 {
        for x in 0..10 {
            data[y * 20 + x] = 1;
        }
    }
    for x in 0..5 {
        data[15 * 20 + 10 + x] = 2;
    }
    let out = region_filter(&labels_from(20, 20, data.clone()), &cfg);
    let kept: Vec<u8> = data.iter().map(|&l| if l == 1 { 3 } else { 0 }).collect();
    assert_eq!(out.data, kept);
}

#[test]
fn pipeline_on_static_scene_is_empty_and_deterministic() {
    let mut g = rng(5);
    let bg: Vec<GrayImage> = (0..3).map(|_| gray(32, 24, |x, _| 60.0 + x as f64)).collect();
    let masks = run_pipeline(&bg, &bg, &LabelerConfig { thresh_block: 11, ..Default::default() }).unwrap();
    assert!(masks.iter().all(|m| m.data.iter().all(|&v| v == 0)));

    let frames: Vec<GrayImage> = (0..4).map(|_| noise(&mut g, 32, 24)).collect();
    let cfg = LabelerConfig { thresh_block: 7, min_region_size: 2, ..Default::default() };
    assert_eq!(run_pipeline(&bg, &frames, &cfg).unwrap(), run_pipeline(&bg, &frames, &cfg).unwrap());
    let odd = vec![gray(10, 10, |_, _| 0.0)];
    assert!(matches!(run_pipeline(&bg, &odd, &cfg), Err(Error::Input(_))));
}

#[test]
fn synthetic_sequences_are_recovered() {
    let ious = labeler_recovery(2, 4, 2, 96);
    let mean = ious.iter().sum::<f64>() / ious.len() as f64;
    assert!(mean >= 0.85, "mean IoU {mean}");
}

#[test]
fn config_json_rejects_unknown_and_invalid() {
    let cfg = LabelerConfig::default();
    assert_eq!(LabelerConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    assert!(LabelerConfig::from_json(r#"{"thresh_blok": 5}"#).is_err());
    assert!(matches!(LabelerConfig::from_json(r#"{"thresh_block": 4}"#), Err(Error::Config { .. })));
    assert!(LabelerConfig::from_json(r#"{"contrast_low_pct": 50, "contrast_high_pct": 40}"#).is_err());
}

#[test]
fn png_frames_are_read_in_numeric_order() {
    let dir = tempfile::tempdir().unwrap();
    for i in [10, 2, 1] {
        let img = gray(4, 3, |x, _| (x * 10 + i) as f64);
        img.save_png(&dir.path().join(format!("frame_{i}.png"))).unwrap();
    }
    let (paths, frames) = load_frames(dir.path()).unwrap();
    let names: Vec<String> = paths.iter().map(|p| p.file_name().unwrap().to_string_lossy().into()).collect();
    assert_eq!(names, ["frame_1.png", "frame_2.png", "frame_10.png"]);
    assert_eq!(frames[2].get(1, 0), 20.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn threshold_matches_naive_reference(
        w in 1usize..24, h in 1usize..24, half in 1usize..6, offset in -20.0f64..20.0, seed in any::<u64>()
    ) {
        let mut g = rng(seed);
        let img = noise(&mut g, w, h);
        let block = 2 * half + 1;
        prop_assert_eq!(adaptive_threshold(&img, block, offset).unwrap().data, naive_threshold(&img, block, offset));
    }

    #[test]
    fn filtered_regions_respect_size_and_separation(
        w in 4usize..30, h in 4usize..30, min in 0usize..15, cut in 0usize..30, class_id in 1u8..=10, seed in any::<u64>()
    ) {
        let mut g = rng(seed);
        let b: Vec<bool> = (0..w * h).map(|_| g.gen_bool(0.45)).collect();
        let labels = connected_components(&Binary { width: w, height: h, data: b });
        let cfg = LabelerConfig { min_region_size: min, separation_y: vec![cut, cut + 3], class_id, ..Default::default() };
        let out = region_filter(&labels, &cfg);
        prop_assert!(out.data.iter().all(|&v| v == 0 || v == class_id));
        prop_assert!(out.data[cut.min(h) * w..].iter().all(|&v| v == 0));
        let kept: Vec<bool> = out.data.iter().map(|&v| v > 0).collect();
        let components = connected_components(&Binary { width: w, height: h, data: kept });
        let mut area = vec![0usize; components.count as usize + 1];
        components.data.iter().for_each(|&l| area[l as usize] += 1);
        prop_assert!(area[1..].iter().all(|&a| a >= min));
    }
}
