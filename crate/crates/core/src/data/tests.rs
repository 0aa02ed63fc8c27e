use std::collections::HashSet;
use std::f64::consts::{PI, TAU};
use std::fs;

use proptest::prelude::*;

use super::*;

#[test]
fn zero_spread_blobs_repeat_their_centers() {
    let d = gen_blobs(100, 2, 0.0, 5).unwrap();
    let mut distinct: Vec<HashSet<[u64; 2]>> = vec![HashSet::new(); 2];
    for i in 0..d.len() {
        let r = d.row(i);
        distinct[d.labels()[i]].insert([r[0].to_bits(), r[1].to_bits()]);
    }
    assert!(distinct.iter().all(|s| s.len() == 1));
    assert_eq!(d.labels().iter().filter(|&&l| l == 0).count(), 50);
}

#[test]
fn generators_are_deterministic() {
    assert_eq!(gen_spirals(300, 0.2, 9).unwrap(), gen_spirals(300, 0.2, 9).unwrap());
    assert_ne!(gen_spirals(300, 0.2, 9).unwrap(), gen_spirals(300, 0.2, 10).unwrap());
    assert_eq!(
        gen_blobs(60, 3, 0.5, 1).unwrap().digest(),
        gen_blobs(60, 3, 0.5, 1).unwrap().digest()
    );
}

#[test]
fn noiseless_spirals_lie_on_their_curves() {
    let d = gen_spirals(500, 0.0, 3).unwrap();
    for i in 0..d.len() {
        let (x, y) = (d.row(i)[0], d.row(i)[1]);
        let r = x.hypot(y);
        // Arm 1 is arm 0 rotated by π, so its polar angle is θ + π.
        let phase = if d.labels()[i] == 0 { 0.0 } else { PI };
        let predicted = (r + phase).rem_euclid(TAU);
        let angle = y.atan2(x).rem_euclid(TAU);
        let diff = (predicted - angle).abs();
        let residual = diff.min(TAU - diff);
        assert!(residual < 1e-9 || r < 1e-9, "row {i}: residual {residual}");
    }
}

#[test]
fn generator_arguments_are_validated() {
    assert!(gen_blobs(1, 2, 0.0, 0).is_err());
    assert!(gen_blobs(10, 1, 0.0, 0).is_err());
    assert!(gen_spirals(10, -1.0, 0).is_err());
    assert!(GeneratorSpec::Spirals {
        n: 0,
        noise: 0.0,
        seed: 0
    }
    .generate()
    .is_err());
}

#[test]
fn csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    let d = Dataset::new(
        vec![0.1, -2.5, 1e-300, 3.0, 7.25, 1.0 / 3.0],
        vec![0, 1, 0],
        2,
        2,
        DataProvenance::File {
            path: String::new(),
            sha256: String::new(),
        },
    )
    .unwrap();
    save_csv(&d, &path).unwrap();
    let back = load_csv(&path, None).unwrap();
    assert_eq!(back.features(), d.features());
    assert_eq!(back.labels(), d.labels());
    assert_eq!(back.classes(), 2);
    match back.provenance() {
        DataProvenance::File { sha256, .. } => {
            assert_eq!(sha256, &sha256_hex(&fs::read(&path).unwrap()))
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn csv_label_column_can_be_anywhere() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    fs::write(&path, "label,a,b\n1,0.5,2\n0,1,1\n").unwrap();
    let d = load_csv(&path, Some(3)).unwrap();
    assert_eq!(d.features(), &[0.5, 2.0, 1.0, 1.0]);
    assert_eq!(d.labels(), &[1, 0]);
    assert_eq!(d.classes(), 3);
}

#[test]
fn csv_errors_carry_positions() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");

    fs::write(&path, "a,b,label\n1,2,0\n3,4\n").unwrap();
    match load_csv(&path, None).unwrap_err() {
        DataError::RaggedRow {
            line,
            byte,
            expected,
            found,
            ..
        } => {
            assert_eq!((line, byte, expected, found), (3, 16, 3, 2));
        }
        e => panic!("{e}"),
    }

    fs::write(&path, "a,label\n1,0\n2,5\n").unwrap();
    match load_csv(&path, Some(2)).unwrap_err() {
        DataError::LabelOutOfRange {
            line, label, classes, ..
        } => {
            assert_eq!((line, label.as_str(), classes), (3, "5", 2));
        }
        e => panic!("{e}"),
    }

    fs::write(&path, "a,label\n1,-1\n").unwrap();
    assert!(matches!(
        load_csv(&path, None),
        Err(DataError::LabelOutOfRange { line: 2, .. })
    ));

    fs::write(&path, "a,label\nnope,0\n").unwrap();
    let err = load_csv(&path, None).unwrap_err();
    assert!(matches!(err, DataError::Csv { line: 2, byte: 8, .. }), "{err}");

    fs::write(&path, "a,b\n1,0\n").unwrap();
    assert!(matches!(
        load_csv(&path, None),
        Err(DataError::MissingLabelColumn { .. })
    ));

    fs::write(&path, "a,label\n").unwrap();
    assert!(matches!(load_csv(&path, None), Err(DataError::Empty)));
}

fn idx_images(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
    let mut v = 0x0000_0803u32.to_be_bytes().to_vec();
    for d in [n, rows, cols] {
        v.extend_from_slice(&d.to_be_bytes());
    }
    v.extend_from_slice(pixels);
    v
}

fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut v = 0x0000_0801u32.to_be_bytes().to_vec();
    v.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    v.extend_from_slice(labels);
    v
}

#[test]
fn idx_bytes_scale_to_unit_interval() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lbl) = (dir.path().join("i.idx"), dir.path().join("l.idx"));
    fs::write(&img, idx_images(1, 2, 2, &[0, 255, 0, 255])).unwrap();
    fs::write(&lbl, idx_labels(&[1])).unwrap();
    let d = load_idx(&img, &lbl).unwrap();
    assert_eq!(d.features(), &[0.0, 1.0, 0.0, 1.0]);
    assert_eq!((d.dim(), d.classes(), d.labels()), (4, 2, &[1usize][..]));
}

#[test]
fn idx_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lbl) = (dir.path().join("i.idx"), dir.path().join("l.idx"));
    fs::write(&lbl, idx_labels(&[1])).unwrap();

    fs::write(&img, idx_images(1, 2, 2, &[0, 255, 0])).unwrap();
    match load_idx(&img, &lbl).unwrap_err() {
        DataError::IdxTruncated { expected, actual, .. } => assert_eq!((expected, actual), (20, 19)),
        e => panic!("{e}"),
    }

    fs::write(&img, idx_labels(&[0])).unwrap();
    match load_idx(&img, &lbl).unwrap_err() {
        DataError::IdxMagic { expected, found, .. } => assert_eq!((expected, found), (0x803, 0x801)),
        e => panic!("{e}"),
    }

    fs::write(&img, idx_images(2, 1, 1, &[3, 4])).unwrap();
    assert!(matches!(load_idx(&img, &lbl), Err(DataError::IdxCountMismatch { .. })));

    fs::write(&img, [0u8, 0]).unwrap();
    assert!(matches!(load_idx(&img, &lbl), Err(DataError::IdxTruncated { .. })));
}

#[test]
fn split_sizes_and_partition() {
    let d = gen_blobs(100, 2, 1.0, 0).unwrap();
    let (train, val) = d.split(0.75, 4).unwrap();
    assert_eq!((train.len(), val.len()), (75, 25));
    let key = |ds: &Dataset, i: usize| (ds.row(i)[0].to_bits(), ds.row(i)[1].to_bits());
    let all: HashSet<_> = (0..d.len()).map(|i| key(&d, i)).collect();
    let tr: HashSet<_> = (0..train.len()).map(|i| key(&train, i)).collect();
    let va: HashSet<_> = (0..val.len()).map(|i| key(&val, i)).collect();
    assert!(tr.is_disjoint(&va));
    assert_eq!(tr.union(&va).cloned().collect::<HashSet<_>>(), all);
    assert_eq!(d.split(0.75, 4).unwrap(), (train, val));
}

#[test]
fn split_rejects_empty_sides() {
    let d = gen_blobs(4, 2, 1.0, 0).unwrap();
    assert!(matches!(d.split(0.1, 0), Err(DataError::EmptySplit { n: 4, .. })));
    assert!(matches!(d.split(0.9, 0), Err(DataError::EmptySplit { .. })));
    assert!(matches!(d.split(1.0, 0), Err(DataError::InvalidFraction(_))));
    assert!(matches!(d.split(0.0, 0), Err(DataError::InvalidFraction(_))));
}

proptest! {
    #[test]
    fn batches_cover_the_dataset_once(n in 1usize..200, size in 1usize..50, seed in any::<u64>(), epoch in 0u64..5) {
        let d = gen_spirals(n.max(2), 0.1, 1).unwrap();
        let idx = d.batch_indices(size, seed, epoch).unwrap();
        let mut seen: Vec<usize> = idx.iter().flatten().copied().collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..d.len()).collect::<Vec<_>>());
        prop_assert!(idx[..idx.len() - 1].iter().all(|b| b.len() == size));
        prop_assert_eq!(&idx, &d.batch_indices(size, seed, epoch).unwrap());
    }
}

#[test]
fn batch_order_depends_on_epoch() {
    let d = gen_spirals(64, 0.1, 1).unwrap();
    assert_ne!(d.batch_indices(8, 0, 0).unwrap(), d.batch_indices(8, 0, 1).unwrap());
    let b: Vec<Batch> = d.batches(10, 0, 0).unwrap().collect();
    assert_eq!(b.len(), 7);
    assert_eq!(b[6].features.shape(), &[4, 2]);
    assert!(matches!(d.batch_indices(0, 0, 0), Err(DataError::ZeroBatch)));
}
