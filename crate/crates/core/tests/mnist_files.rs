use std::fs;
use std::io::Write;
use std::path::PathBuf;

use dptail_core::mnist_io::{
    encode_idx_images, encode_idx_labels, load_idx, patchify, reassemble, stratified_ids, to_dataset, NUM_DIGITS,
};
use dptail_core::Error;
use flate2::write::GzEncoder;
use flate2::Compression;
use tempfile::tempdir;

fn gz(bytes: &[u8]) -> Vec<u8> {
    let mut e = GzEncoder::new(Vec::new(), Compression::default());
    e.write_all(bytes).unwrap();
    e.finish().unwrap()
}

fn fixture(n: usize) -> (Vec<u8>, Vec<u8>) {
    let pixels: Vec<u8> = (0..n * 16).map(|i| (i * 37 % 256) as u8).collect();
    let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
    (pixels, labels)
}

#[test]
fn plain_and_gzip_files_load_identically() {
    let dir = tempdir().unwrap();
    let (pixels, labels) = fixture(30);
    let (img, lbl) = (encode_idx_images(4, 4, &pixels), encode_idx_labels(&labels));
    fs::write(dir.path().join("i"), &img).unwrap();
    fs::write(dir.path().join("l"), &lbl).unwrap();
    fs::write(dir.path().join("i.gz"), gz(&img)).unwrap();
    fs::write(dir.path().join("l.gz"), gz(&lbl)).unwrap();

    let plain = load_idx(&dir.path().join("i"), &dir.path().join("l")).unwrap();
    let zipped = load_idx(&dir.path().join("i.gz"), &dir.path().join("l.gz")).unwrap();
    assert_eq!(plain, zipped);
    assert_eq!((plain.rows, plain.cols, plain.len()), (4, 4, 30));
    assert_eq!(plain.image(3), &pixels[48..64]);
    assert_eq!(plain.class_histogram(), [3; NUM_DIGITS]);
}

#[test]
fn mismatched_and_missing_files_are_reported() {
    let dir = tempdir().unwrap();
    let (pixels, labels) = fixture(10);
    fs::write(dir.path().join("i"), encode_idx_images(4, 4, &pixels)).unwrap();
    fs::write(dir.path().join("l"), encode_idx_labels(&labels[..9])).unwrap();
    assert!(matches!(
        load_idx(&dir.path().join("i"), &dir.path().join("l")),
        Err(Error::DimensionMismatch(_))
    ));
    assert!(matches!(
        load_idx(&dir.path().join("nope"), &dir.path().join("l")),
        Err(Error::MissingFile(_))
    ));

    let mut truncated = encode_idx_images(4, 4, &pixels);
    truncated.truncate(40);
    fs::write(dir.path().join("t"), truncated).unwrap();
    fs::write(dir.path().join("l"), encode_idx_labels(&labels)).unwrap();
    match load_idx(&dir.path().join("t"), &dir.path().join("l")) {
        Err(Error::Parse { .. }) => {}
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn patches_cover_the_image() {
    let img: Vec<f64> = (0..28 * 28).map(|i| i as f64).collect();
    for p in [1, 2, 4] {
        let patches = patchify(&img, 28, 28, p).unwrap();
        assert_eq!(patches.len(), img.len());
        assert_eq!(reassemble(&patches, 28, 28, p).unwrap(), img);
        let mut sorted = patches.clone();
        sorted.sort_by(f64::total_cmp);
        assert_eq!(sorted, img);
    }
    assert!(patchify(&img, 28, 28, 3).is_err());
}

/// Checks that only run against the real files, e.g.
/// `DPTAIL_MNIST_DIR=/data/mnist cargo test`.
#[test]
fn official_files_when_available() {
    let Some(dir) = std::env::var_os("DPTAIL_MNIST_DIR").map(PathBuf::from) else {
        eprintln!("DPTAIL_MNIST_DIR unset; skipping the official-file checks");
        return;
    };
    let find = |name: &str| {
        let p = dir.join(name);
        if p.exists() {
            p
        } else {
            dir.join(format!("{name}.gz"))
        }
    };
    let train = load_idx(&find("train-images-idx3-ubyte"), &find("train-labels-idx1-ubyte")).unwrap();
    let test = load_idx(&find("t10k-images-idx3-ubyte"), &find("t10k-labels-idx1-ubyte")).unwrap();
    assert_eq!((train.len(), train.rows, train.cols), (60_000, 28, 28));
    assert_eq!(test.len(), 10_000);
    assert_eq!(train.class_histogram(), [5923, 6742, 5958, 6131, 5842, 5421, 5918, 6265, 5851, 5949]);
    assert_eq!(test.class_histogram(), [980, 1135, 1032, 1010, 982, 892, 958, 1028, 974, 1009]);

    let ids = stratified_ids(&train, Some(1000), 0).unwrap();
    assert_eq!(ids.len(), 10_000);
    assert_eq!(ids, stratified_ids(&train, Some(1000), 0).unwrap());
    let data = to_dataset(&train, 2, Some(1000), 0).unwrap();
    assert_eq!((data.dim, data.num_patches), (392, 2));
    assert_eq!(data.class_counts, vec![1000; 10]);
}
