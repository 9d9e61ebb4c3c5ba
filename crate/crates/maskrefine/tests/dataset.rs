use std::fs;

use image::GrayImage;
use maskrefine::dataset::{read_mask_png, Manifest, MANIFEST};
use maskrefine::{read_dataset, write_dataset, Error};
use maskrefine_core::training::generate_synthetic_dataset;

#[test]
fn generated_split_round_trips_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let split = generate_synthetic_dataset(10, 7, 64).unwrap();
    let manifest = write_dataset(dir.path(), &split).unwrap();
    assert_eq!(manifest.samples.len(), 10);
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!((back.train.len(), back.val.len(), back.test.len()), (6, 2, 2));
    assert_eq!(back, split);
}

#[test]
fn masks_binarize_at_128() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.png");
    let mut img = GrayImage::new(56, 56);
    img.put_pixel(0, 0, [255].into());
    img.put_pixel(1, 0, [128].into());
    img.put_pixel(2, 0, [127].into());
    img.save(&path).unwrap();
    let m = read_mask_png(&path).unwrap();
    assert_eq!(m.get(0, 0), 1.0);
    assert_eq!(m.get(0, 1), 1.0);
    assert_eq!(m.get(0, 2), 0.0);
    assert_eq!(m.get(5, 5), 0.0);
    assert_eq!(m.count_foreground(), 2);
}

#[test]
fn wrong_mask_size_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.png");
    GrayImage::new(28, 28).save(&path).unwrap();
    assert!(matches!(read_mask_png(&path), Err(Error::Data(_))));
}

fn edit_manifest(dir: &std::path::Path, f: impl FnOnce(&mut Manifest)) {
    let path = dir.join(MANIFEST);
    let mut m: Manifest = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    f(&mut m);
    fs::write(&path, serde_json::to_string(&m).unwrap()).unwrap();
}

#[test]
fn unknown_class_lists_the_vocabulary() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &generate_synthetic_dataset(10, 1, 64).unwrap()).unwrap();
    edit_manifest(dir.path(), |m| m.samples[3].class = "Scratch".into());
    let err = read_dataset(dir.path()).unwrap_err();
    assert!(matches!(err, Error::Data(_)));
    let msg = err.to_string();
    for name in ["Scratch", "Cracked Paint", "Dent", "Loose", "Scrape"] {
        assert!(msg.contains(name), "{msg}");
    }
}

#[test]
fn missing_image_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_dataset(dir.path(), &generate_synthetic_dataset(10, 1, 64).unwrap()).unwrap();
    let victim = dir.path().join(&manifest.samples[0].image);
    fs::remove_file(&victim).unwrap();
    let err = read_dataset(dir.path()).unwrap_err();
    assert!(matches!(err, Error::Data(_)));
    assert!(err.to_string().contains(&*victim.to_string_lossy()), "{err}");
}

#[test]
fn unknown_manifest_keys_and_splits_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &generate_synthetic_dataset(10, 1, 64).unwrap()).unwrap();
    edit_manifest(dir.path(), |m| m.samples[0].split = "holdout".into());
    assert!(read_dataset(dir.path()).is_err());

    let path = dir.path().join(MANIFEST);
    let text = fs::read_to_string(&path).unwrap().replacen("\"version\"", "\"extra\":1,\"version\"", 1);
    fs::write(&path, text).unwrap();
    assert!(matches!(read_dataset(dir.path()), Err(Error::Data(_))));
}

#[test]
fn missing_manifest_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(read_dataset(dir.path()), Err(Error::Data(_))));
}
