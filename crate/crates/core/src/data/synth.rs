//! Synthetic dermoscopy-like images: one or two soft-edged dark ellipses on a
//! textured skin-coloured background, with exact binary masks. Optional
//! hair-like dark arcs are drawn over the image without touching the mask.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{write_mask_png, DatasetManifest, ManifestEntry, Split};
use crate::error::{Error, Result};
use crate::mask::BinaryMask;

/// Accepted lesion area fraction per image.
pub const LESION_FRACTION: (f64, f64) = (0.05, 0.60);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthOptions {
    pub hair: bool,
    /// Width of the soft lesion border in pixels.
    pub edge_softness: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            hair: false,
            edge_softness: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    /// Normalised radius: < 1 inside.
    fn radius(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        ((u / self.a).powi(2) + (v / self.b).powi(2)).sqrt()
    }
}

fn random_ellipses(rng: &mut ChaCha8Rng, size: f64) -> Vec<Ellipse> {
    let count = if rng.random_bool(0.3) { 2 } else { 1 };
    (0..count)
        .map(|_| {
            let theta = rng.random_range(0.0..PI);
            Ellipse {
                cx: size * rng.random_range(0.3..0.7),
                cy: size * rng.random_range(0.3..0.7),
                a: size * rng.random_range(0.16..0.32),
                b: size * rng.random_range(0.14..0.28),
                cos: theta.cos(),
                sin: theta.sin(),
            }
        })
        .collect()
}

fn lesion_mask(ellipses: &[Ellipse], size: usize) -> BinaryMask {
    let mut m = BinaryMask::zeros(size, size);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            m.set(y, x, ellipses.iter().any(|e| e.radius(px, py) < 1.0));
        }
    }
    m
}

/// Low-frequency texture: a sum of random plane waves.
struct Texture {
    waves: Vec<(f64, f64, f64, f64)>,
}

impl Texture {
    fn new(rng: &mut ChaCha8Rng, size: f64, amplitude: f64) -> Self {
        let waves = (0..4)
            .map(|_| {
                let angle = rng.random_range(0.0..2.0 * PI);
                let freq = rng.random_range(1.0..4.0) * 2.0 * PI / size;
                (freq * angle.cos(), freq * angle.sin(), rng.random_range(0.0..2.0 * PI), amplitude / 4.0)
            })
            .collect();
        Texture { waves }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        self.waves.iter().map(|&(kx, ky, ph, amp)| amp * (kx * x + ky * y + ph).sin()).sum()
    }
}

fn draw_hair(img: &mut RgbImage, rng: &mut ChaCha8Rng) {
    let size = img.width() as f64;
    let strands = rng.random_range(1..=3);
    for _ in 0..strands {
        let p0 = (rng.random_range(0.0..size), rng.random_range(0.0..size));
        let p1 = (rng.random_range(0.0..size), rng.random_range(0.0..size));
        let p2 = (rng.random_range(0.0..size), rng.random_range(0.0..size));
        let shade = rng.random_range(25.0..60.0);
        let steps = (size * 4.0) as usize;
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            let q = |a: f64, b: f64, c: f64| (1.0 - t).powi(2) * a + 2.0 * (1.0 - t) * t * b + t * t * c;
            let (x, y) = (q(p0.0, p1.0, p2.0), q(p0.1, p1.1, p2.1));
            if x >= 0.0 && y >= 0.0 && x < size && y < size {
                let px = img.get_pixel_mut(x as u32, y as u32);
                *px = Rgb([shade as u8, (shade * 0.8) as u8, (shade * 0.7) as u8]);
            }
        }
    }
}

/// Renders one image/mask pair. Deterministic in `(seed, index)`.
pub fn render(size: usize, seed: u64, index: u64, opts: &SynthOptions) -> (RgbImage, BinaryMask) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let s = size as f64;

    let (lo, hi) = LESION_FRACTION;
    let (ellipses, mask) = loop {
        let e = random_ellipses(&mut rng, s);
        let m = lesion_mask(&e, size);
        let frac = m.count_ones() as f64 / (size * size) as f64;
        if (lo..=hi).contains(&frac) {
            break (e, m);
        }
    };

    let skin = [
        rng.random_range(200.0..230.0),
        rng.random_range(155.0..185.0),
        rng.random_range(130.0..160.0),
    ];
    let lesion = [
        rng.random_range(95.0..135.0),
        rng.random_range(55.0..85.0),
        rng.random_range(40.0..70.0),
    ];
    let skin_tex = Texture::new(&mut rng, s, 10.0);
    let lesion_tex = Texture::new(&mut rng, s, 14.0);
    let grain = Normal::new(0.0, 3.0).expect("valid std");
    let min_axis = ellipses.iter().map(|e| e.a.min(e.b)).fold(f64::INFINITY, f64::min);

    let mut img = RgbImage::new(size as u32, size as u32);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let r = ellipses.iter().map(|e| e.radius(px, py)).fold(f64::INFINITY, f64::min);
            // Signed distance to the border in pixels (approximate), negative inside.
            let dist = (r - 1.0) * min_axis;
            let alpha = 1.0 / (1.0 + (dist / opts.edge_softness.max(1e-3)).exp());
            let (ts, tl) = (skin_tex.at(px, py), lesion_tex.at(px, py));
            let mut rgb = [0u8; 3];
            for c in 0..3 {
                let v = (1.0 - alpha) * (skin[c] + ts) + alpha * (lesion[c] + tl) + grain.sample(&mut rng);
                rgb[c] = v.round().clamp(0.0, 255.0) as u8;
            }
            img.put_pixel(x as u32, y as u32, Rgb(rgb));
        }
    }
    if opts.hair {
        draw_hair(&mut img, &mut rng);
    }
    (img, mask)
}

/// Writes `count` pairs under `out_dir/images` and `out_dir/masks` and returns
/// their manifest (paths relative to `out_dir` when saved there).
pub fn synth_generate(count: usize, size: usize, seed: u64, out_dir: &Path, opts: &SynthOptions) -> Result<DatasetManifest> {
    if size == 0 || size % 32 != 0 {
        return Err(Error::Config(format!("synthetic image size must be a positive multiple of 32, got {size}")));
    }
    let images = out_dir.join("images");
    let masks = out_dir.join("masks");
    for d in [&images, &masks] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut manifest = DatasetManifest {
        entries: Vec::with_capacity(count),
        split: Split::Train,
    };
    for i in 0..count {
        let id = format!("synth_{i:04}");
        let (img, mask) = render(size, seed, i as u64, opts);
        let image_path = images.join(format!("{id}.png"));
        let mask_path = masks.join(format!("{id}.png"));
        img.save(&image_path)
            .map_err(|e| Error::data(&image_path, format!("cannot write image: {e}")))?;
        write_mask_png(&mask, &mask_path)?;
        manifest.entries.push(ManifestEntry {
            id,
            image: image_path,
            mask: mask_path,
        });
    }
    Ok(manifest)
}
