use std::path::{Path, PathBuf};

use batchaug_core::data::load_idx;
use batchaug_core::Error;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

#[test]
fn loads_hand_written_fixture() {
    let ds = load_idx::<f64>(
        &fixture("tiny-images.idx3-ubyte"),
        &fixture("tiny-labels.idx1-ubyte"),
    )
    .unwrap();
    assert_eq!(ds.len(), 4);
    assert_eq!(ds.image_shape(), [1, 3, 2]);
    assert_eq!(ds.labels, vec![3, 0, 2, 1]);
    assert_eq!(ds.classes, 4);
    // Byte values written by make_idx.py: (50 i + 2 r + 7 c) mod 256.
    for i in 0..4 {
        for r in 0..3 {
            for c in 0..2 {
                let byte = (50 * i + 2 * r + 7 * c) % 256;
                let got = ds.images.data()[i * 6 + r * 2 + c];
                assert_eq!(got, byte as f64 / 255.0, "image {i} pixel ({r}, {c})");
            }
        }
    }
}

#[test]
fn rejects_bad_magic_truncation_and_count_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let images = std::fs::read(fixture("tiny-images.idx3-ubyte")).unwrap();
    let labels = fixture("tiny-labels.idx1-ubyte");

    let bad = dir.path().join("bad");
    let mut b = images.clone();
    b[2] = 0x0d;
    std::fs::write(&bad, &b).unwrap();
    assert!(matches!(
        load_idx::<f32>(&bad, &labels),
        Err(Error::IdxFormat { .. })
    ));

    let short = dir.path().join("short");
    std::fs::write(&short, &images[..images.len() - 1]).unwrap();
    assert!(matches!(
        load_idx::<f32>(&short, &labels),
        Err(Error::IdxTruncated { .. })
    ));

    let three = dir.path().join("three");
    std::fs::write(&three, [0, 0, 8, 1, 0, 0, 0, 3, 0, 1, 2]).unwrap();
    assert!(matches!(
        load_idx::<f32>(&fixture("tiny-images.idx3-ubyte"), &three),
        Err(Error::IdxCountMismatch {
            images: 4,
            labels: 3
        })
    ));
}
