//! Dataset ingestion and preparation: PNG directory loading with a
//! deterministic seeded train/test split, the CelebA-style corner crop,
//! nearest-neighbor resizing, training-time augmentation, and a synthetic
//! sprite generator for self-contained experiments.

use crate::error::{Error, Result};
use crate::transforms::{load_png, ImageU8};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use std::path::Path;

/// Side length of the face-style corner crop.
pub const CELEBA_CROP_SIZE: usize = 148;
/// Crop origin: rows skipped from the top, columns from the left.
pub const CELEBA_CROP_TOP: usize = 40;
pub const CELEBA_CROP_LEFT: usize = 15;

#[derive(Debug, Clone, Copy, Default)]
pub struct IngestOptions {
    /// Apply the 148x148 corner crop before any resize.
    pub celeba_crop: bool,
    /// Resize (nearest-neighbor) to (height, width) after cropping.
    pub resize_to: Option<(usize, usize)>,
}

/// Load every `.png` in `dir` (sorted by file name), verify uniform
/// dimensions, then split train/test with a seeded shuffle.
pub fn ingest_dataset(
    dir: &Path,
    split_fraction: f64,
    seed: u64,
    options: &IngestOptions,
) -> Result<(Vec<ImageU8>, Vec<ImageU8>)> {
    if !(0.0..1.0).contains(&split_fraction) {
        return Err(Error::domain(format!(
            "split fraction must be in [0, 1), got {split_fraction}"
        )));
    }
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::domain(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .map(|ext| ext.eq_ignore_ascii_case("png"))
                .unwrap_or(false)
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::domain(format!("no PNG files in {}", dir.display())));
    }

    let mut images = Vec::with_capacity(paths.len());
    let mut problems = Vec::new();
    for path in &paths {
        match load_png(path) {
            Ok(img) => images.push(img),
            Err(e) => problems.push(format!("{}: {e}", path.display())),
        }
    }
    if images.len() > 1 {
        let (h, w, c) = (images[0].height, images[0].width, images[0].channels);
        for (img, path) in images.iter().zip(&paths) {
            if (img.height, img.width, img.channels) != (h, w, c) {
                problems.push(format!(
                    "{}: {}x{}x{} differs from {}x{}x{}",
                    path.display(),
                    img.height,
                    img.width,
                    img.channels,
                    h,
                    w,
                    c
                ));
            }
        }
    }
    if !problems.is_empty() {
        return Err(Error::domain(format!(
            "{} unusable image(s):\n  {}",
            problems.len(),
            problems.join("\n  ")
        )));
    }

    if options.celeba_crop {
        images = images.iter().map(celeba_crop).collect::<Result<_>>()?;
    }
    if let Some((h, w)) = options.resize_to {
        images = images.iter().map(|img| resize_nearest(img, h, w)).collect();
    }
    Ok(split_dataset(images, split_fraction, seed))
}

/// Seeded train/test split; membership depends only on (len, fraction, seed).
pub fn split_dataset(
    images: Vec<ImageU8>,
    split_fraction: f64,
    seed: u64,
) -> (Vec<ImageU8>, Vec<ImageU8>) {
    let n = images.len();
    let n_test = ((n as f64) * split_fraction).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut crate::SeedRng::seed_from_u64(seed));
    let mut is_test = vec![false; n];
    for &i in order.iter().take(n_test) {
        is_test[i] = true;
    }
    let mut train = Vec::with_capacity(n - n_test);
    let mut test = Vec::with_capacity(n_test);
    for (img, test_member) in images.into_iter().zip(is_test) {
        if test_member {
            test.push(img);
        } else {
            train.push(img);
        }
    }
    (train, test)
}

/// 148x148 window with its top-left corner 40 rows down, 15 columns in.
pub fn celeba_crop(img: &ImageU8) -> Result<ImageU8> {
    crop(img, CELEBA_CROP_TOP, CELEBA_CROP_LEFT, CELEBA_CROP_SIZE, CELEBA_CROP_SIZE)
}

pub fn crop(img: &ImageU8, top: usize, left: usize, height: usize, width: usize) -> Result<ImageU8> {
    if top + height > img.height || left + width > img.width {
        return Err(Error::domain(format!(
            "crop {height}x{width}+{top}+{left} exceeds a {}x{} image",
            img.height, img.width
        )));
    }
    let c = img.channels;
    let mut pixels = Vec::with_capacity(height * width * c);
    for y in 0..height {
        let row = ((top + y) * img.width + left) * c;
        pixels.extend_from_slice(&img.pixels[row..row + width * c]);
    }
    ImageU8::new(height, width, c, pixels)
}

/// Nearest-neighbor resize to `new_h` x `new_w`.
pub fn resize_nearest(img: &ImageU8, new_h: usize, new_w: usize) -> ImageU8 {
    let c = img.channels;
    let mut pixels = Vec::with_capacity(new_h * new_w * c);
    for y in 0..new_h {
        let sy = (((y as f64 + 0.5) * img.height as f64 / new_h as f64) as usize)
            .min(img.height - 1);
        for x in 0..new_w {
            let sx = (((x as f64 + 0.5) * img.width as f64 / new_w as f64) as usize)
                .min(img.width - 1);
            for ch in 0..c {
                pixels.push(img.get(sy, sx, ch));
            }
        }
    }
    ImageU8::new(new_h, new_w, c, pixels).expect("size computed from loop bounds")
}

/// Mirror left-right.
pub fn hflip(img: &ImageU8) -> ImageU8 {
    let (h, w, c) = (img.height, img.width, img.channels);
    let mut pixels = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                pixels.push(img.get(y, w - 1 - x, ch));
            }
        }
    }
    ImageU8::new(h, w, c, pixels).expect("same size as input")
}

/// Rotate about the image center by `angle_deg`, then translate by
/// (`dx`, `dy`) pixels, sampling the source nearest-neighbor. Pixels whose
/// preimage falls outside the frame become 0.
pub fn affine_nearest(img: &ImageU8, angle_deg: f64, dx: f64, dy: f64) -> ImageU8 {
    let (h, w, c) = (img.height, img.width, img.channels);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let theta = angle_deg.to_radians();
    let (sin, cos) = (theta.sin(), theta.cos());
    let mut pixels = vec![0u8; h * w * c];
    for y in 0..h {
        for x in 0..w {
            // invert the output transform to find the source pixel
            let ry = y as f64 - cy - dy;
            let rx = x as f64 - cx - dx;
            let sy = cos * ry - sin * rx + cy;
            let sx = sin * ry + cos * rx + cx;
            let (syr, sxr) = (sy.round(), sx.round());
            if syr < 0.0 || sxr < 0.0 || syr >= h as f64 || sxr >= w as f64 {
                continue;
            }
            let (sy, sx) = (syr as usize, sxr as usize);
            for ch in 0..c {
                pixels[(y * w + x) * c + ch] = img.get(sy, sx, ch);
            }
        }
    }
    ImageU8::new(h, w, c, pixels).expect("same size as input")
}

/// Training-time augmentation: per image, 50% horizontal flip, rotation
/// uniform in [-5, 5] degrees, translation up to 5% of each side.
pub fn augment<R: Rng>(batch: &[ImageU8], rng: &mut R) -> Vec<ImageU8> {
    batch
        .iter()
        .map(|img| {
            let flipped = if rng.gen::<bool>() { hflip(img) } else { img.clone() };
            let angle = rng.gen_range(-5.0..=5.0);
            let dx = rng.gen_range(-0.05..=0.05) * img.width as f64;
            let dy = rng.gen_range(-0.05..=0.05) * img.height as f64;
            affine_nearest(&flipped, angle, dx, dy)
        })
        .collect()
}

const SPRITE_PALETTE: [[u8; 3]; 8] = [
    [230, 60, 50],
    [60, 160, 230],
    [60, 200, 90],
    [240, 200, 60],
    [180, 80, 200],
    [240, 140, 50],
    [80, 220, 210],
    [235, 235, 235],
];

/// Procedural 16x16 RGB sprites: a flat background carrying one filled
/// shape (rectangle, disc, or cross) from a small palette on a coarse
/// placement grid — structured enough for a small model to compress.
pub fn synthetic_sprites(n: usize, seed: u64) -> Vec<ImageU8> {
    let mut rng = crate::SeedRng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let bg = SPRITE_PALETTE[rng.gen_range(0..SPRITE_PALETTE.len())];
            let fg = loop {
                let c = SPRITE_PALETTE[rng.gen_range(0..SPRITE_PALETTE.len())];
                if c != bg {
                    break c;
                }
            };
            let mut pixels = Vec::with_capacity(16 * 16 * 3);
            for _ in 0..256 {
                pixels.extend_from_slice(&bg);
            }
            let mut img = ImageU8::new(16, 16, 3, pixels).expect("fixed size");
            let cy = 2 * rng.gen_range(2..7) as i64; // even grid keeps shapes aligned
            let cx = 2 * rng.gen_range(2..7) as i64;
            let r = 2 * rng.gen_range(1..4) as i64;
            let shape = rng.gen_range(0..3);
            for y in 0..16i64 {
                for x in 0..16i64 {
                    let inside = match shape {
                        0 => (y - cy).abs() <= r && (x - cx).abs() <= r,
                        1 => (y - cy).pow(2) + (x - cx).pow(2) <= r * r,
                        _ => {
                            ((y - cy).abs() <= 1 && (x - cx).abs() <= r)
                                || ((x - cx).abs() <= 1 && (y - cy).abs() <= r)
                        }
                    };
                    if inside {
                        let at = ((y * 16 + x) * 3) as usize;
                        img.pixels[at..at + 3].copy_from_slice(&fg);
                    }
                }
            }
            img
        })
        .collect()
}
