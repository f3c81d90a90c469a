use std::fs;
use std::path::{Path, PathBuf};

use capsnet::data::{self, DatasetSplit, NoiseKind, NoiseSpec, SplitRole, SIDE};
use capsnet::{Error, Tensor};
use proptest::prelude::*;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/digits").join(name)
}

fn write_pair(dir: &Path, n_img: usize, n_lab: usize, side: usize) -> (PathBuf, PathBuf) {
    let pixels: Vec<u8> = (0..n_img * side * side).map(|i| (i * 7 % 256) as u8).collect();
    let labels: Vec<u8> = (0..n_lab).map(|i| (i % 10) as u8).collect();
    let (ip, lp) = (dir.join("img"), dir.join("lab"));
    fs::write(&ip, data::idx_image_bytes(n_img, side, side, &pixels)).unwrap();
    fs::write(&lp, data::idx_label_bytes(&labels)).unwrap();
    (ip, lp)
}

fn synthetic(n: usize, seed: u64) -> DatasetSplit {
    let data: Vec<f32> = (0..n * SIDE * SIDE)
        .map(|i| ((i as u64 * 2654435761 + seed) % 1000) as f32 / 999.0)
        .collect();
    DatasetSplit::new(
        Tensor::new(vec![n, 1, SIDE, SIDE], data).unwrap(),
        (0..n).map(|i| i % 10).collect(),
        SplitRole::Train,
    )
    .unwrap()
}

#[test]
fn two_image_file_loads_with_expected_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = write_pair(dir.path(), 2, 2, 32);
    let split = data::load_idx(&ip, &lp).unwrap();
    assert_eq!(split.images.shape(), &[2, 1, 32, 32]);
    assert_eq!(split.labels, vec![0, 1]);
}

#[test]
fn digit_fixtures_have_expected_sizes() {
    let train = data::load_idx(fixture("train-images-idx3-ubyte"), fixture("train-labels-idx1-ubyte")).unwrap();
    let test = data::load_idx(fixture("test-images-idx3-ubyte"), fixture("test-labels-idx1-ubyte")).unwrap();
    assert_eq!(train.images.shape(), &[2000, 1, 32, 32]);
    assert_eq!(test.images.shape(), &[500, 1, 32, 32]);
    assert!(train.class_counts().iter().all(|&c| c > 0));
    assert!(train.images.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
}

#[test]
fn count_mismatch_is_consistency_error() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = write_pair(dir.path(), 5, 4, 32);
    assert!(matches!(data::load_idx(&ip, &lp), Err(Error::Consistency(_))));
}

#[test]
fn bad_magic_is_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = write_pair(dir.path(), 2, 2, 32);
    let mut bytes = fs::read(&ip).unwrap();
    bytes[3] = 0x01;
    fs::write(&ip, bytes).unwrap();
    assert!(matches!(data::load_idx(&ip, &lp), Err(Error::Format { .. })));
    // labels file given as the images file
    assert!(matches!(data::load_idx(&lp, &lp), Err(Error::Format { .. })));
    // truncated payload
    let (ip, lp) = write_pair(dir.path(), 2, 2, 32);
    let bytes = fs::read(&ip).unwrap();
    fs::write(&ip, &bytes[..bytes.len() - 1]).unwrap();
    assert!(matches!(data::load_idx(&ip, &lp), Err(Error::Format { .. })));
}

#[test]
fn missing_file_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let r = data::load_idx(dir.path().join("nope"), dir.path().join("nope2"));
    assert!(matches!(r, Err(Error::Io { .. })));
}

#[test]
fn pixel_scaling_maps_255_to_one() {
    let dir = tempfile::tempdir().unwrap();
    let mut pixels = vec![0u8; 32 * 32];
    pixels[5] = 255;
    pixels[6] = 51;
    let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
    fs::write(&ip, data::idx_image_bytes(1, 32, 32, &pixels)).unwrap();
    fs::write(&lp, data::idx_label_bytes(&[3])).unwrap();
    let s = data::load_idx(&ip, &lp).unwrap();
    assert_eq!(s.images.data()[5], 1.0);
    assert_eq!(s.images.data()[6], 0.2);
    assert_eq!(s.images.data()[0], 0.0);
}

#[test]
fn other_sizes_are_centre_fitted() {
    let dir = tempfile::tempdir().unwrap();
    for side in [28usize, 36] {
        let pixels = vec![255u8; side * side];
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        fs::write(&ip, data::idx_image_bytes(1, side, side, &pixels)).unwrap();
        fs::write(&lp, data::idx_label_bytes(&[1])).unwrap();
        let s = data::load_idx(&ip, &lp).unwrap();
        assert_eq!(s.images.shape(), &[1, 1, 32, 32]);
        let ones = s.images.data().iter().filter(|&&p| p == 1.0).count();
        assert_eq!(ones, side.min(32) * side.min(32));
        if side == 28 {
            assert_eq!(s.images.data()[0], 0.0);
            assert_eq!(s.images.data()[2 * 32 + 2], 1.0);
        }
    }
}

#[test]
fn idx_round_trip_is_byte_exact() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = write_pair(dir.path(), 3, 3, 32);
    let split = data::load_idx(&ip, &lp).unwrap();
    let (ip2, lp2) = (dir.path().join("i2"), dir.path().join("l2"));
    data::write_idx(&split, &ip2, &lp2).unwrap();
    assert_eq!(fs::read(&ip).unwrap(), fs::read(&ip2).unwrap());
    assert_eq!(fs::read(&lp).unwrap(), fs::read(&lp2).unwrap());
}

#[test]
fn validation_split_is_disjoint_exhaustive_and_seeded() {
    let split = synthetic(600, 1);
    let (tr, va) = data::split_validation(&split, 50, 9).unwrap();
    assert_eq!((tr.len(), va.len()), (550, 50));
    assert_eq!(va.role, SplitRole::Validation);
    let mut seen: Vec<&[f32]> = (0..tr.len()).map(|i| tr.image(i)).chain((0..va.len()).map(|i| va.image(i))).collect();
    seen.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut all: Vec<&[f32]> = (0..split.len()).map(|i| split.image(i)).collect();
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    assert_eq!(seen, all);

    let (tr2, va2) = data::split_validation(&split, 50, 9).unwrap();
    assert_eq!((tr2, va2), (tr.clone(), va.clone()));
    let (_, va3) = data::split_validation(&split, 50, 10).unwrap();
    assert_ne!(va3, va);

    let (tr0, va0) = data::split_validation(&split, 0, 9).unwrap();
    assert_eq!(tr0.len(), 600);
    assert!(va0.is_empty());
    assert!(matches!(data::split_validation(&split, 600, 9), Err(Error::Contract(_))));
}

#[test]
fn batches_cover_every_sample_once() {
    let split = synthetic(1000, 2);
    let b = data::batches(&split, 400, true, 5).unwrap();
    assert_eq!(b.iter().map(|x| x.labels.len()).collect::<Vec<_>>(), vec![400, 400, 200]);
    let mut idx: Vec<usize> = b.iter().flat_map(|x| x.indices.clone()).collect();
    assert_ne!(idx, (0..1000).collect::<Vec<_>>());
    idx.sort_unstable();
    assert_eq!(idx, (0..1000).collect::<Vec<_>>());
    for batch in &b {
        assert_eq!(batch.images.shape()[0], batch.labels.len());
        for (k, &i) in batch.indices.iter().enumerate() {
            assert_eq!(batch.labels[k], split.labels[i]);
            assert_eq!(&batch.images.data()[k * 1024..(k + 1) * 1024], split.image(i));
        }
    }

    let single = data::batches(&split, 1, false, 0).unwrap();
    assert_eq!(single.len(), 1000);
    assert!(single.iter().enumerate().all(|(k, x)| x.indices == vec![k] && x.index == k));
    assert!(matches!(data::batches(&split, 0, false, 0), Err(Error::Contract(_))));

    let again = data::batches(&split, 400, true, 5).unwrap();
    assert!(again.iter().zip(&b).all(|(x, y)| x.indices == y.indices));
}

#[test]
fn zero_intensity_is_identity() {
    let split = synthetic(4, 3);
    for kind in NoiseKind::ALL {
        let out = data::apply_noise(&split.images, &NoiseSpec::new(kind, 0.0, 1)).unwrap();
        assert_eq!(out, split.images, "{kind}");
    }
}

#[test]
fn full_pepper_without_salt_zeroes_everything() {
    let split = synthetic(3, 4);
    let mut spec = NoiseSpec::new(NoiseKind::Pepper, 1.0, 7);
    spec.salt = false;
    let out = data::apply_noise(&split.images, &spec).unwrap();
    assert!(out.data().iter().all(|&p| p == 0.0));
}

#[test]
fn pepper_corrupts_exact_pixel_count() {
    let img = Tensor::full(vec![2, 1, 32, 32], 0.5f32);
    let out = data::apply_noise(&img, &NoiseSpec::new(NoiseKind::Pepper, 0.05, 3)).unwrap();
    for n in 0..2 {
        let changed = out.data()[n * 1024..(n + 1) * 1024].iter().filter(|&&p| p != 0.5).count();
        assert_eq!(changed, 51);
    }
}

#[test]
fn blurred_impulse_is_centred_kernel() {
    for sigma in [0.5, 0.8, 1.5] {
        let mut px = vec![0.0f32; 1024];
        px[16 * 32 + 16] = 1.0;
        let out = data::apply_noise(&Tensor::new(vec![1, 1, 32, 32], px).unwrap(), &NoiseSpec::new(NoiseKind::Blur, sigma, 0)).unwrap();
        let taps = data::gaussian_kernel(sigma);
        let half = taps.len() / 2;
        let total: f64 = out.data().iter().map(|&p| p as f64).sum();
        assert!((total - 1.0).abs() < 1e-6, "sigma {sigma}: sum {total}");
        for dy in 0..taps.len() {
            for dx in 0..taps.len() {
                let got = out.data()[(16 + dy - half) * 32 + 16 + dx - half] as f64;
                assert!((got - taps[dy] * taps[dx]).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn noise_is_seeded_and_validated() {
    let split = synthetic(2, 5);
    for kind in [NoiseKind::Pepper, NoiseKind::Speckle, NoiseKind::Gaussian] {
        let a = data::apply_noise(&split.images, &NoiseSpec::new(kind, 0.3, 11)).unwrap();
        let b = data::apply_noise(&split.images, &NoiseSpec::new(kind, 0.3, 11)).unwrap();
        let c = data::apply_noise(&split.images, &NoiseSpec::new(kind, 0.3, 12)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
    assert!(matches!(
        data::apply_noise(&split.images, &NoiseSpec::new(NoiseKind::Pepper, 1.5, 0)),
        Err(Error::Contract(_))
    ));
    assert!("smudge".parse::<NoiseKind>().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn noise_preserves_shape_and_range(
        kind in prop::sample::select(NoiseKind::ALL.to_vec()),
        frac in 0.0f64..1.0,
        n in 1usize..4,
        seed in any::<u64>(),
    ) {
        let split = synthetic(n, seed % 97);
        let max = match kind { NoiseKind::Pepper => 1.0, NoiseKind::Blur => 8.0, _ => 10.0 };
        let out = data::apply_noise(&split.images, &NoiseSpec::new(kind, frac * max, seed)).unwrap();
        prop_assert_eq!(out.shape(), split.images.shape());
        prop_assert!(out.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
    }
}
