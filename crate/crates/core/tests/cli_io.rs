use qimagegen::cli_io::*;
use qimagegen::image_codec::Image;
use qimagegen::rng;
use std::fs;

fn idx_fixture(dir: &std::path::Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let images: Vec<Image> = (0..6)
        .map(|i| Image::gray(4, (0..16).map(|p| ((i * 16 + p) % 256) as f64 / 255.0).collect()).unwrap())
        .collect();
    let (ip, lp) = (dir.join("img.idx3"), dir.join("lab.idx1"));
    write_idx_images(&ip, &images).unwrap();
    write_idx_labels(&lp, &[0, 1, 2, 1, 0, 1]).unwrap();
    (ip, lp)
}

#[test]
fn idx_header_layout() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = idx_fixture(dir.path());
    let raw = fs::read(&ip).unwrap();
    assert_eq!(&raw[..16], &[0, 0, 8, 3, 0, 0, 0, 6, 0, 0, 0, 4, 0, 0, 0, 4]);
    assert_eq!(raw.len(), 16 + 6 * 16);
    let lab = fs::read(&lp).unwrap();
    assert_eq!(&lab[..8], &[0, 0, 8, 1, 0, 0, 0, 6]);
}

#[test]
fn idx_roundtrip_with_class_filter_and_resize() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = idx_fixture(dir.path());
    let all = load_idx(&ip, Some(&lp), None, None).unwrap();
    assert_eq!(all.len(), 6);
    assert_eq!(all.images[1].data()[0], 16.0 / 255.0);
    let ones = load_idx(&ip, Some(&lp), Some(&[1]), Some(2)).unwrap();
    assert_eq!(ones.labels, Some(vec![1, 1, 1]));
    assert_eq!(ones.images[0].height(), 2);
    assert_eq!(ones.images[0].get(0, 0, 0), all.images[1].get(0, 0, 0));
    assert!(ones.provenance.contains("classes=[1]"));
}

#[test]
fn idx_errors_are_specific() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = idx_fixture(dir.path());
    assert!(matches!(load_idx(&lp, None, None, None), Err(DataError::BadMagic { .. })));
    let raw = fs::read(&ip).unwrap();
    let cut = dir.path().join("cut.idx3");
    fs::write(&cut, &raw[..raw.len() - 5]).unwrap();
    assert!(matches!(load_idx(&cut, None, None, None), Err(DataError::Truncated { .. })));
    let short_labels = dir.path().join("short.idx1");
    write_idx_labels(&short_labels, &[0, 1]).unwrap();
    assert!(matches!(
        load_idx(&ip, Some(&short_labels), None, None),
        Err(DataError::CountMismatch { images: 6, labels: 2 })
    ));
    assert!(matches!(load_idx(&ip, None, Some(&[1]), None), Err(DataError::FilterWithoutLabels)));
    assert!(matches!(load_idx(&ip, Some(&lp), Some(&[9]), None), Err(DataError::Empty)));
}

#[test]
fn mnist_sized_images_resize_to_32() {
    let dir = tempfile::tempdir().unwrap();
    let images = vec![Image::filled(28, 28, 1, 0.0); 2];
    let ip = dir.path().join("m.idx3");
    write_idx_images(&ip, &images).unwrap();
    let d = load_idx(&ip, None, None, Some(32)).unwrap();
    assert_eq!((d.images[0].height(), d.images[0].width()), (32, 32));
}

#[test]
fn truncation_error_names_byte_counts() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, _) = idx_fixture(dir.path());
    let raw = fs::read(&ip).unwrap();
    fs::write(&ip, &raw[..50]).unwrap();
    let msg = load_idx(&ip, None, None, None).unwrap_err().to_string();
    assert!(msg.contains("112") && msg.contains("50"), "{msg}");
}

#[test]
fn quadrant_images_have_one_bright_quadrant() {
    let d = make_synthetic(SyntheticKind::Quadrant, 4, 20, &mut rng(2)).unwrap();
    for img in &d.images {
        assert_eq!(img.data().iter().filter(|&&v| v > 0.5).count(), 4);
    }
    assert!(matches!(
        make_synthetic(SyntheticKind::Quadrant, 4, 0, &mut rng(2)),
        Err(DataError::Empty)
    ));
}

#[test]
fn two_pattern_center_is_near_black_or_white() {
    let d = make_synthetic(SyntheticKind::TwoPattern, 4, 200, &mut rng(100)).unwrap();
    let labels = d.labels.as_ref().unwrap();
    assert!(labels.contains(&0) && labels.contains(&1));
    for (img, &l) in d.images.iter().zip(labels) {
        let c = img.get(2, 2, 0);
        if l == 0 {
            assert!(c <= TWO_PATTERN_JITTER);
        } else {
            assert!(c >= 1.0 - TWO_PATTERN_JITTER);
        }
        assert!(img.data().iter().all(|&v| v <= TWO_PATTERN_JITTER || v >= 1.0 - TWO_PATTERN_JITTER));
    }
}

#[test]
fn synthetic_data_is_seeded() {
    for kind in [SyntheticKind::Quadrant, SyntheticKind::TwoPattern, SyntheticKind::Bars] {
        let a = make_synthetic(kind, 8, 10, &mut rng(1)).unwrap();
        let b = make_synthetic(kind, 8, 10, &mut rng(1)).unwrap();
        assert_eq!(a, b);
    }
    assert!(make_synthetic(SyntheticKind::Bars, 6, 10, &mut rng(1)).is_err());
    assert!("two-pattern".parse::<SyntheticKind>().is_ok());
    assert!("nope".parse::<SyntheticKind>().is_err());
}

#[test]
fn run_config_defaults_and_strictness() {
    let c = RunConfig::from_json("{}").unwrap();
    assert_eq!(c, RunConfig::default());
    assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
    let partial = RunConfig::from_json(r#"{"train": {"seed": 5}, "generator": {"layers": 2}}"#).unwrap();
    assert_eq!(partial.train.seed, 5);
    assert_eq!(partial.generator.layers, 2);
    assert_ne!(partial.hash(), c.hash());
    assert_eq!(c.hash().len(), 64);
    assert!(RunConfig::from_json(r#"{"train": {"learning_rate": 1}}"#).is_err());
}

#[test]
fn dataset_config_resolves_relative_idx_paths() {
    let dir = tempfile::tempdir().unwrap();
    idx_fixture(dir.path());
    let cfg = DatasetConfig {
        source: DatasetSource::Idx,
        images: Some("img.idx3".into()),
        labels: Some("lab.idx1".into()),
        classes: Some(vec![0]),
        ..DatasetConfig::default()
    };
    assert_eq!(cfg.load(4, dir.path()).unwrap().len(), 2);
    let missing = DatasetConfig {
        source: DatasetSource::Idx,
        ..DatasetConfig::default()
    };
    assert!(missing.load(4, dir.path()).is_err());
}

#[test]
fn grid_layout_with_gaps() {
    let imgs: Vec<Image> = (0..3).map(|i| Image::filled(2, 2, 1, i as f64 / 4.0)).collect();
    let g = image_grid(&imgs, 2, 1.0).unwrap();
    assert_eq!((g.height(), g.width()), (5, 5));
    assert_eq!(g.get(0, 2, 0), 1.0);
    assert_eq!(g.get(0, 3, 0), 0.25);
    assert_eq!(g.get(3, 0, 0), 0.5);
    assert_eq!(g.get(4, 4, 0), 1.0);
    assert!(image_grid(&[], 2, 0.0).is_err());
}
