use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage, RgbaImage};
use proptest::prelude::*;
use skinseg_core::data::synth::{self, SynthOptions};
use skinseg_core::data::{self, DatasetManifest};
use skinseg_core::{Shape, Tensor};

fn write_pair(dir: &Path, w: u32, h: u32, mask_value: impl Fn(u32, u32) -> u8) -> (std::path::PathBuf, std::path::PathBuf) {
    let img = RgbImage::from_fn(w, h, |x, y| Rgb([(x % 256) as u8, (y % 256) as u8, 77]));
    let mask = GrayImage::from_fn(w, h, |x, y| Luma([mask_value(x, y)]));
    let (ip, mp) = (dir.join("img.png"), dir.join("mask.png"));
    img.save(&ip).unwrap();
    mask.save(&mp).unwrap();
    (ip, mp)
}

#[test]
fn large_image_is_reduced_to_target() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, mp) = write_pair(dir.path(), 600, 400, |x, _| if x < 300 { 255 } else { 0 });
    let s = data::load_sample("big", &ip, &mp, (384, 384)).unwrap();
    assert_eq!(s.image.shape(), Shape::new(1, 3, 384, 384).unwrap());
    assert_eq!(s.mask.dims(), (384, 384));
    assert!(s.mask.data().iter().all(|&v| v <= 1));
    let left = (0..384).filter(|&y| s.mask.get(y, 10)).count();
    let right = (0..384).filter(|&y| s.mask.get(y, 370)).count();
    assert_eq!((left, right), (384, 0));
}

#[test]
fn equal_size_resize_is_exact_copy() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, mp) = write_pair(dir.path(), 64, 32, |_, _| 255);
    let s = data::load_sample("same", &ip, &mp, (32, 64)).unwrap();
    for y in 0..32 {
        for x in 0..64 {
            assert_eq!(s.image.at(0, 0, y, x), x as f32);
            assert_eq!(s.image.at(0, 1, y, x), y as f32);
            assert_eq!(s.image.at(0, 2, y, x), 77.0);
        }
    }
    assert_eq!(s.mask.count_ones(), 32 * 64, "all-255 mask gives all-ones labels");
}

#[test]
fn grey_mask_levels_are_thresholded() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, mp) = write_pair(dir.path(), 4, 1, |x, _| [0, 127, 128, 255][x as usize]);
    let s = data::load_sample("grey", &ip, &mp, (1, 4)).unwrap();
    assert_eq!(s.mask.data(), &[0, 0, 1, 1]);
}

#[test]
fn non_rgb_inputs_are_data_errors_naming_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let (_, mp) = write_pair(dir.path(), 8, 8, |_, _| 0);
    let rgba = dir.path().join("rgba.png");
    RgbaImage::new(8, 8).save(&rgba).unwrap();
    let err = data::load_sample("x", &rgba, &mp, (8, 8)).unwrap_err();
    assert!(err.is_data_error() && err.to_string().contains("rgba.png"), "{err}");

    let colour_mask = dir.path().join("colour_mask.png");
    RgbImage::new(8, 8).save(&colour_mask).unwrap();
    let err = data::load_sample("x", &rgba.with_file_name("img.png"), &colour_mask, (8, 8)).unwrap_err();
    assert!(err.is_data_error() && err.to_string().contains("colour_mask.png"), "{err}");

    let missing = dir.path().join("missing.png");
    let err = data::load_sample("x", &missing, &mp, (8, 8)).unwrap_err();
    assert!(err.to_string().contains("missing.png"), "{err}");
}

#[test]
fn dataset_means_centre_the_training_set() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth::synth_generate(6, 32, 4, dir.path(), &SynthOptions::default()).unwrap();
    let samples = data::load_manifest(&manifest, (32, 32)).unwrap();
    let means = data::channel_means(&samples).unwrap();
    let mut sums = [0.0f64; 3];
    for s in &samples {
        let x = data::normalize(&s.image, means).unwrap();
        for (c, sum) in sums.iter_mut().enumerate() {
            *sum += x.plane(0, c).iter().map(|&v| v as f64).sum::<f64>();
        }
    }
    for sum in sums {
        assert!((sum / (6.0 * 32.0 * 32.0)).abs() < 1e-3);
    }
}

#[test]
fn batch_counts() {
    let b = data::make_batches(2000, 6, 0, 0).unwrap();
    assert_eq!(b.len(), 334);
    assert_eq!(b.last().unwrap().len(), 2);
    assert_eq!(data::make_batches(10, 3, 1, 2).unwrap(), data::make_batches(10, 3, 1, 2).unwrap());
    assert_ne!(data::make_batches(50, 50, 1, 2).unwrap(), data::make_batches(50, 50, 1, 3).unwrap());
    let single = data::make_batches(7, 1, 3, 0).unwrap();
    let whole = data::make_batches(7, 7, 3, 0).unwrap();
    assert_eq!(single.concat(), whole[0]);
    assert!(data::make_batches(0, 6, 0, 0).is_err());
}

#[test]
fn synthetic_set_is_reproducible_byte_for_byte() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let opts = SynthOptions { hair: true, ..SynthOptions::default() };
    let ma = synth::synth_generate(20, 64, 3, a.path(), &opts).unwrap();
    let mb = synth::synth_generate(20, 64, 3, b.path(), &opts).unwrap();
    assert_eq!(ma.len(), 20);
    for (ea, eb) in ma.entries.iter().zip(&mb.entries) {
        assert_eq!(std::fs::read(&ea.image).unwrap(), std::fs::read(&eb.image).unwrap());
        assert_eq!(std::fs::read(&ea.mask).unwrap(), std::fs::read(&eb.mask).unwrap());
        let mask = data::read_mask_png(&ea.mask).unwrap();
        let frac = mask.count_ones() as f64 / mask.len() as f64;
        assert!((0.05..=0.60).contains(&frac), "{}: {frac}", ea.id);
    }
}

#[test]
fn manifest_saved_next_to_data_reloads() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth::synth_generate(3, 32, 0, dir.path(), &SynthOptions::default()).unwrap();
    let path = dir.path().join("manifest.tsv");
    m.save(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.contains("synth_0000\timages/synth_0000.png\tmasks/synth_0000.png"));
    let back = DatasetManifest::load(&path).unwrap();
    assert_eq!(back, m);
    back.check_paths().unwrap();
}

proptest! {
    #[test]
    fn batches_partition_indices(len in 1usize..200, bs in 1usize..20, seed in any::<u64>(), epoch in 0u64..10) {
        let b = data::make_batches(len, bs, seed, epoch).unwrap();
        let mut all: Vec<usize> = b.concat();
        prop_assert!(b[..b.len() - 1].iter().all(|x| x.len() == bs));
        all.sort_unstable();
        prop_assert_eq!(all, (0..len).collect::<Vec<_>>());
    }

    #[test]
    fn pad_then_crop_is_identity(h in 1usize..70, w in 1usize..70, seed in any::<u64>()) {
        let x: Tensor<f32> = skinseg_core::tensor::gaussian_init(Shape::new(1, 2, h, w).unwrap(), 1.0, seed).unwrap();
        let p = data::pad_to_multiple(&x, 32);
        prop_assert_eq!(p.shape().h % 32, 0);
        prop_assert_eq!(p.shape().w % 32, 0);
        prop_assert!(p.shape().h - h < 32 && p.shape().w - w < 32);
        prop_assert_eq!(data::crop(&p, h, w).unwrap(), x);
    }

    #[test]
    fn mask_decoder_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..512)) {
        let _ = data::decode_mask_png(&bytes);
    }
}
