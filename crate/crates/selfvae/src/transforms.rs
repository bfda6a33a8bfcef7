//! Deterministic, discrete image transforms supplying the self-supervised
//! variables: block-average downscale, luma grayscale, and a dodge-blend
//! sketch. All rounding is half-up and all outputs are 8-bit, so repeated
//! application is bit-identical.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::path::Path;

/// 8-bit image, row-major with interleaved channels (h, w, c).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageU8 {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl ImageU8 {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::shape("image dimensions must be positive"));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::shape(format!(
                "{} pixel values for a {}x{}x{} image",
                pixels.len(),
                height,
                width,
                channels
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn constant(height: usize, width: usize, channels: usize, value: u8) -> Self {
        Self {
            height,
            width,
            channels,
            pixels: vec![value; height * width * channels],
        }
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> u8 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    pub fn num_elements(&self) -> usize {
        self.pixels.len()
    }

    /// Channel-first f64 tensor [C, H, W] with raw 0..255 values.
    pub fn to_tensor_chw(&self) -> Tensor {
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut data = vec![0.0; c * h * w];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data[(ch * h + y) * w + x] = self.pixels[(y * w + x) * c + ch] as f64;
                }
            }
        }
        Tensor::from_vec(data, &[c, h, w])
    }

    /// Rebuild an image from a [C, H, W] tensor of (near-)integer values,
    /// rounding half-up and clamping into {0..255}.
    pub fn from_tensor_chw(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 {
            return Err(Error::shape(format!("expected [C,H,W], got {:?}", s)));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let data = t.data();
        let mut pixels = vec![0u8; h * w * c];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let v = (data[(ch * h + y) * w + x] + 0.5).floor().clamp(0.0, 255.0);
                    pixels[(y * w + x) * c + ch] = v as u8;
                }
            }
        }
        Self::new(h, w, c, pixels)
    }
}

/// One stage of the deterministic transform chain d(x).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TransformSpec {
    Downscale { factor: usize },
    Grayscale,
    Sketch { blur_sigma: f64 },
}

impl TransformSpec {
    pub fn apply(&self, x: &ImageU8) -> Result<ImageU8> {
        match *self {
            TransformSpec::Downscale { factor } => downscale(x, factor),
            TransformSpec::Grayscale => grayscale(x),
            TransformSpec::Sketch { blur_sigma } => sketch(x, blur_sigma),
        }
    }

    /// Output shape (channels, height, width) for a given input shape,
    /// with the same domain checks `apply` would raise.
    pub fn out_shape(&self, shape: (usize, usize, usize)) -> Result<(usize, usize, usize)> {
        let (c, h, w) = shape;
        match *self {
            TransformSpec::Downscale { factor } => {
                if factor < 2 {
                    return Err(Error::domain(format!("downscale factor {factor} must be >= 2")));
                }
                if h % factor != 0 || w % factor != 0 {
                    return Err(Error::domain(format!(
                        "{h}x{w} not divisible by factor {factor}"
                    )));
                }
                Ok((c, h / factor, w / factor))
            }
            TransformSpec::Grayscale | TransformSpec::Sketch { .. } => {
                if c != 1 && c != 3 {
                    return Err(Error::domain(format!("expected 1 or 3 channels, got {c}")));
                }
                Ok((1, h, w))
            }
        }
    }
}

/// Block-average downscale by an integer factor, rounded half-up.
pub fn downscale(x: &ImageU8, factor: usize) -> Result<ImageU8> {
    if factor < 2 {
        return Err(Error::domain(format!("downscale factor {factor} must be >= 2")));
    }
    if x.height % factor != 0 || x.width % factor != 0 {
        return Err(Error::domain(format!(
            "{}x{} not divisible by factor {}",
            x.height, x.width, factor
        )));
    }
    let (oh, ow, c) = (x.height / factor, x.width / factor, x.channels);
    let n = (factor * factor) as u32;
    let mut pixels = vec![0u8; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut sum: u32 = 0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        sum += x.get(oy * factor + dy, ox * factor + dx, ch) as u32;
                    }
                }
                // integer round-half-up: floor((2 sum + n) / 2n)
                pixels[(oy * ow + ox) * c + ch] = ((2 * sum + n) / (2 * n)) as u8;
            }
        }
    }
    ImageU8::new(oh, ow, c, pixels)
}

/// Luma grayscale (0.299, 0.587, 0.114), rounded half-up; identity on
/// single-channel input.
pub fn grayscale(x: &ImageU8) -> Result<ImageU8> {
    match x.channels {
        1 => Ok(x.clone()),
        3 => {
            let mut pixels = vec![0u8; x.height * x.width];
            for (i, px) in x.pixels.chunks_exact(3).enumerate() {
                let sum = 299 * px[0] as u32 + 587 * px[1] as u32 + 114 * px[2] as u32;
                pixels[i] = ((sum + 500) / 1000) as u8;
            }
            ImageU8::new(x.height, x.width, 1, pixels)
        }
        c => Err(Error::domain(format!("grayscale expects 1 or 3 channels, got {c}"))),
    }
}

/// Symmetric border reflection into [0, n).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// Separable Gaussian blur of a single-channel plane, truncated at 3 sigma
/// with symmetric border reflection. Works in f64.
pub(crate) fn gaussian_blur(plane: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    assert!(sigma > 0.0, "blur sigma must be positive");
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for i in -radius..=radius {
        kernel.push((-((i * i) as f64) / (2.0 * sigma * sigma)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= norm;
    }
    // horizontal pass
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (kidx, kv) in kernel.iter().enumerate() {
                let sx = reflect(x as isize + kidx as isize - radius, w);
                acc += kv * plane[y * w + sx];
            }
            tmp[y * w + x] = acc;
        }
    }
    // vertical pass
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (kidx, kv) in kernel.iter().enumerate() {
                let sy = reflect(y as isize + kidx as isize - radius, h);
                acc += kv * tmp[sy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Dodge-blend sketch: grayscale, invert, blur, then g*255 / (255 - blur),
/// with non-positive denominators mapping to white.
pub fn sketch(x: &ImageU8, blur_sigma: f64) -> Result<ImageU8> {
    if blur_sigma <= 0.0 {
        return Err(Error::domain(format!(
            "sketch blur_sigma {blur_sigma} must be positive"
        )));
    }
    let g = grayscale(x)?;
    let (h, w) = (g.height, g.width);
    let inverted: Vec<f64> = g.pixels.iter().map(|&p| 255.0 - p as f64).collect();
    let blurred = gaussian_blur(&inverted, h, w, blur_sigma);
    let mut pixels = vec![0u8; h * w];
    for i in 0..h * w {
        let denom = 255.0 - blurred[i];
        pixels[i] = if denom <= 0.0 {
            255
        } else {
            let v = (g.pixels[i] as f64) * 255.0 / denom;
            (v + 0.5).floor().clamp(0.0, 255.0) as u8
        };
    }
    ImageU8::new(h, w, 1, pixels)
}

/// Apply a chain of transforms, returning every intermediate result with
/// the coarsest level last (the objectives re-index into the paper's
/// coarsest-first convention).
pub fn apply_chain(x: &ImageU8, specs: &[TransformSpec]) -> Result<Vec<ImageU8>> {
    let mut out = Vec::with_capacity(specs.len());
    let mut cur = x.clone();
    for spec in specs {
        let next = spec.apply(&cur)?;
        if next.num_elements() > cur.num_elements() {
            return Err(Error::contract(
                "transform chain must not increase dimensionality",
            ));
        }
        out.push(next.clone());
        cur = next;
    }
    Ok(out)
}

/// Read an 8-bit PNG as grayscale (1 channel) or color (3 channels);
/// alpha, if present, is dropped.
pub fn load_png(path: &Path) -> Result<ImageU8> {
    let img = image::open(path)?;
    match img {
        image::DynamicImage::ImageLuma8(g) => {
            let (w, h) = (g.width() as usize, g.height() as usize);
            ImageU8::new(h, w, 1, g.into_raw())
        }
        image::DynamicImage::ImageLumaA8(g) => {
            let (w, h) = (g.width() as usize, g.height() as usize);
            let pixels: Vec<u8> = g.into_raw().chunks_exact(2).map(|p| p[0]).collect();
            ImageU8::new(h, w, 1, pixels)
        }
        other => {
            let rgb = other.into_rgb8();
            let (w, h) = (rgb.width() as usize, rgb.height() as usize);
            ImageU8::new(h, w, 3, rgb.into_raw())
        }
    }
}

/// Write an image as an 8-bit gray or RGB PNG.
pub fn save_png(img: &ImageU8, path: &Path) -> Result<()> {
    let color = match img.channels {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        c => {
            return Err(Error::domain(format!(
                "PNG output supports 1 or 3 channels, got {c}"
            )))
        }
    };
    image::save_buffer(
        path,
        &img.pixels,
        img.width as u32,
        img.height as u32,
        color,
    )?;
    Ok(())
}
