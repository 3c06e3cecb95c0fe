//! Images as RGB particle clouds, one particle per pixel in raster order.

use std::path::Path;

use image::{ImageBuffer, ImageReader, Rgb, RgbImage};

use crate::embeddings::WeightedParticles;
use crate::error::{Result, UsdError};
use crate::scalar::Real;

fn decode(path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(UsdError::FileNotFound(path.to_path_buf()));
    }
    ImageReader::open(path)?
        .with_guessed_format()?
        .decode()
        .map_err(|e| UsdError::UnsupportedImage(format!("{}: {e}", path.display())))
}

/// Reads an 8-bit image as RGB, converting gray or alpha variants.
pub fn load_rgb8(path: &Path) -> Result<RgbImage> {
    use image::DynamicImage::*;
    match decode(path)? {
        img @ (ImageRgb8(_) | ImageRgba8(_) | ImageLuma8(_) | ImageLumaA8(_)) => Ok(img.to_rgb8()),
        other => Err(UsdError::UnsupportedImage(format!(
            "{}: expected 8 bits per channel, found {:?}",
            path.display(),
            other.color()
        ))),
    }
}

/// Pixel `(r, g, b)` becomes the particle `(r, g, b) / 255`, weights `1/n`.
pub fn rgb_to_particles<T: Real>(img: &RgbImage) -> Result<WeightedParticles<T>> {
    let scale = T::lit(255.0);
    let points = img.pixels().flat_map(|p| p.0).map(|c| T::lit(f64::from(c)) / scale).collect();
    WeightedParticles::uniform(points, 3)
}

pub fn image_to_particles<T: Real>(path: &Path) -> Result<WeightedParticles<T>> {
    rgb_to_particles(&load_rgb8(path)?)
}

/// Inverse of [`rgb_to_particles`]: clamps to `[0, 1]` and rounds to the
/// nearest 8-bit level. Weights are ignored.
pub fn particles_to_rgb<T: Real>(p: &WeightedParticles<T>, width: u32, height: u32) -> Result<RgbImage> {
    if p.dim() != 3 {
        return Err(UsdError::DimensionMismatch {
            expected: 3,
            got: p.dim(),
        });
    }
    let expected = width as usize * height as usize;
    if p.len() != expected {
        return Err(UsdError::CountMismatch { expected, got: p.len() });
    }
    let quantize = |v: T| (v.to_f64_lossy().clamp(0.0, 1.0) * 255.0).round() as u8;
    Ok(ImageBuffer::from_fn(width, height, |x, y| {
        let px = p.point(y as usize * width as usize + x as usize);
        Rgb([quantize(px[0]), quantize(px[1]), quantize(px[2])])
    }))
}

pub fn particles_to_image<T: Real>(p: &WeightedParticles<T>, width: u32, height: u32, path: &Path) -> Result<()> {
    particles_to_rgb(p, width, height)?
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => UsdError::Io(io),
            other => UsdError::UnsupportedImage(other.to_string()),
        })
}
