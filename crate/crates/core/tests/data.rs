use proptest::prelude::*;

use swin_mae::data::pnm::{decode, encode};
use swin_mae::data::{generate_synthetic_dataset, split_samples, synthesize, test_count, DatasetManifest, Split};

proptest! {
    #[test]
    fn pnm_round_trip(channels in prop_oneof![Just(1usize), Just(3usize)], h in 1usize..9, w in 1usize..9, seed in any::<u8>()) {
        let samples: Vec<u8> = (0..channels * h * w).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect();
        let bytes = encode(channels, h, w, &samples).unwrap();
        prop_assert_eq!(decode(&bytes).unwrap(), (channels, h, w, samples));
    }

    #[test]
    fn test_split_is_a_fifth(n in 2usize..500) {
        let t = test_count(n);
        prop_assert!(t >= 1 && t < n);
        prop_assert!((t as f64 - 0.2 * n as f64).abs() <= 0.5 + 1e-9 || t == 1);
    }
}

#[test]
fn synthesis_is_deterministic_and_labeled() {
    let a = synthesize(3, 5, 32, 4);
    let b = synthesize(3, 5, 32, 4);
    assert_eq!(a.labeled, b.labeled);
    assert!(a.unlabeled.iter().zip(&b.unlabeled).all(|(x, y)| x.bit_eq(y)));
    for s in &a.labeled {
        assert_eq!(s.image.shape(), &[3, 32, 32]);
        assert_eq!(s.labels.len(), 32 * 32);
        assert!(s.labels.iter().all(|&l| l < 3));
    }
    assert!(a.labeled.iter().any(|s| s.labels.contains(&2)));
    assert!(a.labeled.iter().any(|s| !s.labels.contains(&2)));
}

#[test]
fn written_dataset_matches_memory() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_synthetic_dataset(4, 10, 32, 6, dir.path()).unwrap();
    assert_eq!(m.of_split(Split::Unlabeled).count(), 4);
    assert_eq!(m.of_split(Split::Test).count(), 2);
    let mem = synthesize(4, 10, 32, 6);
    let (train, test) = split_samples(&mem.labeled, 6);
    let scanned = DatasetManifest::scan(dir.path(), 6).unwrap();
    assert_eq!(scanned, m);
    for (disk, want) in [(m.load_labeled(Split::Train).unwrap(), train), (m.load_labeled(Split::Test).unwrap(), test)] {
        assert_eq!(disk.len(), want.len());
        for (a, b) in disk.iter().zip(&want) {
            assert_eq!(a.labels, b.labels);
            assert!(a.image.max_abs_diff(&b.image) <= 0.5 / 255.0 + 1e-12);
        }
    }
    let u = m.load_unlabeled().unwrap();
    assert!(u.iter().zip(&mem.unlabeled).all(|(a, b)| a.max_abs_diff(b) <= 0.5 / 255.0 + 1e-12));
}

#[test]
fn empty_root_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(DatasetManifest::scan(dir.path(), 0).is_err());
    assert!(decode(b"P7\n1 1\n255\n\0").is_err());
}
