//! IDX reading and dataset helpers.

use std::io::Write;

use fedvc::data::{load_idx, parse_idx_images, write_idx_images, write_idx_labels, DataError};
use flate2::write::GzEncoder;
use flate2::Compression;

fn sample_bytes() -> (Vec<u8>, Vec<u8>) {
    let pixels: Vec<u8> = (0..5 * 3 * 2).map(|i| (i * 37 % 256) as u8).collect();
    (pixels, vec![0, 3, 1, 3, 2])
}

#[test]
fn idx_round_trip_plain_and_gzip() {
    let dir = tempfile::tempdir().unwrap();
    let (pixels, labels) = sample_bytes();
    let mut img = Vec::new();
    write_idx_images(&mut img, 3, 2, &pixels).unwrap();
    let mut lab = Vec::new();
    write_idx_labels(&mut lab, &labels).unwrap();
    std::fs::write(dir.path().join("img.idx"), &img).unwrap();
    std::fs::write(dir.path().join("lab.idx"), &lab).unwrap();
    for (name, bytes) in [("img.idx.gz", &img), ("lab.idx.gz", &lab)] {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(bytes).unwrap();
        std::fs::write(dir.path().join(name), enc.finish().unwrap()).unwrap();
    }

    let plain = load_idx(dir.path().join("img.idx"), dir.path().join("lab.idx")).unwrap();
    let gz = load_idx(dir.path().join("img.idx.gz"), dir.path().join("lab.idx.gz")).unwrap();
    assert_eq!(plain, gz);
    assert_eq!(plain.len(), 5);
    assert_eq!(plain.dim(), 6);
    assert_eq!(plain.num_classes(), 4);
    assert_eq!(plain.labels(), &[0, 3, 1, 3, 2]);
    for (v, &p) in plain.features().data().iter().zip(&pixels) {
        assert_eq!(*v, p as f64 / 255.0);
    }
    assert_eq!(parse_idx_images(&img).unwrap(), (5, 3, 2, pixels));
}

#[test]
fn count_mismatch_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let (pixels, labels) = sample_bytes();
    let mut img = Vec::new();
    write_idx_images(&mut img, 3, 2, &pixels).unwrap();
    let mut lab = Vec::new();
    write_idx_labels(&mut lab, &labels[..4]).unwrap();
    std::fs::write(dir.path().join("i"), img).unwrap();
    std::fs::write(dir.path().join("l"), lab).unwrap();
    let err = load_idx(dir.path().join("i"), dir.path().join("l")).unwrap_err();
    assert!(matches!(
        err,
        DataError::CountMismatch {
            images: 5,
            labels: 4
        }
    ));
}

#[test]
fn missing_file_names_the_path() {
    let err = load_idx("/nonexistent/images.idx", "/nonexistent/labels.idx").unwrap_err();
    assert!(err.to_string().contains("/nonexistent/images.idx"), "{err}");
}
