//! Image and mask ingestion, normalisation and batching.
//!
//! Images are kept as raw 0-255 floats; [`normalize`] only subtracts the
//! per-channel means. Images are resized with a triangle (bilinear) filter,
//! masks with nearest-neighbour so they stay binary.

mod manifest;
pub mod synth;

use std::io::Cursor;
use std::path::Path;

use image::imageops::{self, FilterType};
use image::{DynamicImage, GrayImage, ImageFormat, ImageReader, Limits, RgbImage};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use manifest::{DatasetManifest, ManifestEntry, Split};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::tensor::{Scalar, Shape, Tensor};

/// Largest width or height accepted from an image file.
pub const MAX_IMAGE_SIDE: u32 = 16_384;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `(1, 3, h, w)` raw 0-255 values.
    pub image: Tensor<f32>,
    pub mask: BinaryMask,
}

fn limits() -> Limits {
    let mut l = Limits::default();
    l.max_image_width = Some(MAX_IMAGE_SIDE);
    l.max_image_height = Some(MAX_IMAGE_SIDE);
    l.max_alloc = Some(1 << 30);
    l
}

fn decode_bytes(bytes: &[u8], format: Option<ImageFormat>) -> std::result::Result<DynamicImage, String> {
    let mut reader = ImageReader::new(Cursor::new(bytes));
    match format {
        Some(f) => reader.set_format(f),
        None => reader = reader.with_guessed_format().map_err(|e| e.to_string())?,
    }
    reader.limits(limits());
    reader.decode().map_err(|e| e.to_string())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Decodes an 8-bit RGB PNG or JPEG.
pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let bytes = read_file(path)?;
    match decode_bytes(&bytes, None).map_err(|e| Error::data(path, e))? {
        DynamicImage::ImageRgb8(img) => Ok(img),
        other => Err(Error::data(path, format!("expected 8-bit RGB, found {:?}", other.color()))),
    }
}

/// Raw `(1, 3, h, w)` tensor of an RGB image.
pub fn rgb_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = w * h;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c] as f32;
        }
    }
    Tensor::from_vec(Shape { n: 1, c: 3, h, w }, data).expect("sized buffer")
}

/// Resizes to `(height, width)`; equal sizes are returned unchanged.
pub fn resize_rgb(img: &RgbImage, height: u32, width: u32) -> RgbImage {
    if img.dimensions() == (width, height) {
        img.clone()
    } else {
        imageops::resize(img, width, height, FilterType::Triangle)
    }
}

fn resize_gray_nearest(img: &GrayImage, height: u32, width: u32) -> GrayImage {
    if img.dimensions() == (width, height) {
        img.clone()
    } else {
        imageops::resize(img, width, height, FilterType::Nearest)
    }
}

/// Nearest-neighbour resize, so the result stays binary.
pub fn resize_mask(mask: &BinaryMask, height: usize, width: usize) -> BinaryMask {
    if mask.dims() == (height, width) {
        return mask.clone();
    }
    let img = GrayImage::from_raw(mask.width() as u32, mask.height() as u32, mask.data().to_vec()).expect("sized buffer");
    let out = resize_gray_nearest(&img, height as u32, width as u32);
    BinaryMask::new(height, width, out.into_raw()).expect("nearest resize keeps values binary")
}

/// Loads an image/mask pair resized to `target = (height, width)`.
///
/// Mask pixels >= 128 become lesion. Masks are expected to hold only 0 and
/// 255; other grey levels are thresholded with a warning.
pub fn load_sample(id: &str, image_path: &Path, mask_path: &Path, target: (usize, usize)) -> Result<Sample> {
    let (th, tw) = (target.0 as u32, target.1 as u32);
    if th == 0 || tw == 0 {
        return Err(Error::Config(format!("target size {}x{} is empty", target.0, target.1)));
    }
    let rgb = read_rgb(image_path)?;
    let image = rgb_to_tensor(&resize_rgb(&rgb, th, tw));

    let bytes = read_file(mask_path)?;
    let gray = match decode_bytes(&bytes, None).map_err(|e| Error::data(mask_path, e))? {
        DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(Error::data(
                mask_path,
                format!("mask must be 8-bit grayscale, found {:?}", other.color()),
            ))
        }
    };
    let grey_levels = gray.pixels().filter(|p| p[0] != 0 && p[0] != 255).count();
    if grey_levels > 0 {
        log::warn!(
            "{}: {grey_levels} mask pixels outside {{0, 255}}; thresholding at 128",
            mask_path.display()
        );
    }
    let gray = resize_gray_nearest(&gray, th, tw);
    let data = gray.pixels().map(|p| (p[0] >= 128) as u8).collect();
    let mask = BinaryMask::new(target.0, target.1, data)?;
    Ok(Sample {
        id: id.to_string(),
        image,
        mask,
    })
}

pub fn load_manifest(manifest: &DatasetManifest, target: (usize, usize)) -> Result<Vec<Sample>> {
    manifest.check_paths()?;
    manifest
        .entries
        .iter()
        .map(|e| load_sample(&e.id, &e.image, &e.mask, target))
        .collect()
}

/// Subtracts per-channel means from a raw `(n, 3, h, w)` batch.
pub fn normalize<T: Scalar>(batch: &Tensor<T>, means: [f32; 3]) -> Result<Tensor<T>> {
    let s = batch.shape();
    if s.c != 3 {
        return Err(Error::shape(format!("normalize expects 3 channels, got {}", s.c)));
    }
    let plane = s.plane();
    let mut out = batch.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let c = (i / plane) % 3;
        *v -= T::from_f64_lossy(means[c] as f64);
    }
    Ok(out)
}

/// Per-channel mean over every pixel of every sample.
pub fn channel_means(samples: &[Sample]) -> Result<[f32; 3]> {
    if samples.is_empty() {
        return Err(Error::Dataset("cannot compute means of an empty dataset".into()));
    }
    let mut sums = [0.0f64; 3];
    let mut count = 0usize;
    for s in samples {
        let plane = s.image.shape().plane();
        for (c, sum) in sums.iter_mut().enumerate() {
            *sum += s.image.plane(0, c).iter().map(|&v| v as f64).sum::<f64>();
        }
        count += plane;
    }
    Ok(sums.map(|s| (s / count as f64) as f32))
}

/// Epoch-seeded shuffle of `0..len` split into batches; the last batch may be short.
pub fn make_batches(len: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if len == 0 {
        return Err(Error::Dataset("no samples to batch".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Stacks the selected samples into a normalised batch and a flat label grid.
pub fn collate(samples: &[Sample], indices: &[usize], means: [f32; 3]) -> Result<(Tensor<f32>, Vec<u8>)> {
    let first = indices
        .first()
        .map(|&i| &samples[i])
        .ok_or_else(|| Error::Dataset("empty batch".into()))?;
    let s = first.image.shape();
    let mut data = Vec::with_capacity(indices.len() * s.numel());
    let mut labels = Vec::with_capacity(indices.len() * s.plane());
    for &i in indices {
        let sample = &samples[i];
        if sample.image.shape() != s {
            return Err(Error::Dataset(format!(
                "sample {} has shape {}, batch expects {s}",
                sample.id,
                sample.image.shape()
            )));
        }
        data.extend_from_slice(sample.image.data());
        labels.extend_from_slice(sample.mask.data());
    }
    let batch = Tensor::from_vec(Shape { n: indices.len(), ..s }, data)?;
    Ok((normalize(&batch, means)?, labels))
}

#[inline]
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

/// Reflect-pads bottom and right so both sides are multiples of `multiple`.
pub fn pad_to_multiple<T: Scalar>(x: &Tensor<T>, multiple: usize) -> Tensor<T> {
    let s = x.shape();
    let round = |v: usize| v.div_ceil(multiple) * multiple;
    let (h, w) = (round(s.h), round(s.w));
    if (h, w) == (s.h, s.w) {
        return x.clone();
    }
    let out_shape = Shape { h, w, ..s };
    let mut data = Vec::with_capacity(out_shape.numel());
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            for y in 0..h {
                let row = &src[reflect(y, s.h) * s.w..][..s.w];
                data.extend((0..w).map(|xx| row[reflect(xx, s.w)]));
            }
        }
    }
    Tensor::from_vec(out_shape, data).expect("sized buffer")
}

/// Crops a tensor to its top-left `h x w` window.
pub fn crop<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if h > s.h || w > s.w {
        return Err(Error::shape(format!("cannot crop {s} to {h}x{w}")));
    }
    let mut data = Vec::with_capacity(s.n * s.c * h * w);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            for y in 0..h {
                data.extend_from_slice(&src[y * s.w..y * s.w + w]);
            }
        }
    }
    Tensor::from_vec(Shape { h, w, ..s }, data)
}

pub fn encode_mask_png(mask: &BinaryMask) -> Vec<u8> {
    let img = GrayImage::from_raw(
        mask.width() as u32,
        mask.height() as u32,
        mask.data().iter().map(|&v| v * 255).collect(),
    )
    .expect("sized buffer");
    let mut out = Vec::new();
    DynamicImage::ImageLuma8(img)
        .write_to(&mut Cursor::new(&mut out), ImageFormat::Png)
        .expect("in-memory png encoding");
    out
}

/// Strict decoder: 8-bit grayscale PNG holding only 0 and 255.
pub fn decode_mask_png(bytes: &[u8]) -> std::result::Result<BinaryMask, String> {
    let gray = match decode_bytes(bytes, Some(ImageFormat::Png))? {
        DynamicImage::ImageLuma8(g) => g,
        other => return Err(format!("mask must be 8-bit grayscale, found {:?}", other.color())),
    };
    let (w, h) = gray.dimensions();
    let mut data = Vec::with_capacity((w * h) as usize);
    for p in gray.pixels() {
        match p[0] {
            0 => data.push(0),
            255 => data.push(1),
            v => return Err(format!("mask value {v} is neither 0 nor 255")),
        }
    }
    BinaryMask::new(h as usize, w as usize, data).map_err(|e| e.to_string())
}

pub fn write_mask_png(mask: &BinaryMask, path: &Path) -> Result<()> {
    std::fs::write(path, encode_mask_png(mask)).map_err(|e| Error::io(path, e))
}

pub fn read_mask_png(path: &Path) -> Result<BinaryMask> {
    decode_mask_png(&read_file(path)?).map_err(|e| Error::data(path, e))
}
