//! PNG IO for images and label maps.

use std::path::Path;

use image::{GrayImage, ImageReader, RgbImage};
use softseg_core::imaging::RasterImage;

use crate::formats::FormatError;

/// Reads an 8-bit RGB PNG into [0,1] floats. The physical spacing comes
/// from the dataset manifest, not from image metadata.
pub fn load_image(path: &Path, pixel_spacing: f64) -> Result<RasterImage, FormatError> {
    let reader = ImageReader::open(path).map_err(|e| FormatError::io(path, e))?;
    let dynamic = reader
        .decode()
        .map_err(|e| FormatError::parse(path, e.to_string()))?;
    let rgb = dynamic.to_rgb8();
    let (width, height) = (rgb.width() as usize, rgb.height() as usize);
    let mut pixels = Vec::with_capacity(height * width * 3);
    for value in rgb.into_raw() {
        pixels.push(value as f64 / 255.0);
    }
    Ok(RasterImage {
        height,
        width,
        pixel_spacing,
        pixels,
    })
}

pub fn save_image(path: &Path, image: &RasterImage) -> Result<(), FormatError> {
    let bytes: Vec<u8> = image
        .pixels
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let rgb = RgbImage::from_raw(image.width as u32, image.height as u32, bytes)
        .ok_or_else(|| FormatError::parse(path, "image buffer size mismatch"))?;
    rgb.save(path).map_err(|e| FormatError::parse(path, e.to_string()))
}

/// Class-index map as 8-bit grayscale; 255 marks invalid pixels.
pub fn save_label_map(
    path: &Path,
    labels: &[u32],
    valid: &[bool],
    height: usize,
    width: usize,
) -> Result<(), FormatError> {
    let bytes: Vec<u8> = labels
        .iter()
        .zip(valid.iter())
        .map(|(&l, &v)| if v { (l as u8).min(254) } else { 255 })
        .collect();
    let gray = GrayImage::from_raw(width as u32, height as u32, bytes)
        .ok_or_else(|| FormatError::parse(path, "label buffer size mismatch"))?;
    gray.save(path).map_err(|e| FormatError::parse(path, e.to_string()))
}
