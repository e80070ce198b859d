//! 8-bit PNG reading and writing for [`ImageTensor`]s.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tokenizer::ImageTensor;

fn codec_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image { path: path.to_path_buf(), message: e.to_string() }
}

fn to_byte<S: Real>(v: S) -> u8 {
    (v.to_f64_lossy() * 255.0).round().clamp(0.0, 255.0) as u8
}

fn from_bytes<S: Real>(h: usize, w: usize, c: usize, bytes: &[u8]) -> ImageTensor<S> {
    let px = bytes.iter().map(|&b| S::lit(b as f64 / 255.0)).collect();
    ImageTensor::new(h, w, c, px).expect("byte levels lie in [0, 1]")
}

/// Reads any PNG as 3-channel RGB.
pub fn read_rgb<S: Real>(path: &Path) -> Result<ImageTensor<S>> {
    let img = open(path)?.to_rgb8();
    Ok(from_bytes(img.height() as usize, img.width() as usize, 3, img.as_raw()))
}

/// Reads any PNG as a single luma channel.
pub fn read_gray<S: Real>(path: &Path) -> Result<ImageTensor<S>> {
    let img = open(path)?.to_luma8();
    Ok(from_bytes(img.height() as usize, img.width() as usize, 1, img.as_raw()))
}

fn open(path: &Path) -> Result<DynamicImage> {
    if !path.exists() {
        return Err(Error::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    image::open(path).map_err(|e| codec_err(path, e))
}

/// Writes a 1- or 3-channel image, rounding to the nearest 8-bit level.
pub fn write<S: Real>(image: &ImageTensor<S>, path: &Path) -> Result<()> {
    let (w, h) = (image.width() as u32, image.height() as u32);
    let bytes: Vec<u8> = image.pixels().iter().map(|&v| to_byte(v)).collect();
    let encoded = match image.channels() {
        1 => GrayImage::from_raw(w, h, bytes).map(DynamicImage::ImageLuma8),
        3 => RgbImage::from_raw(w, h, bytes).map(DynamicImage::ImageRgb8),
        c => return Err(Error::Input(format!("cannot store a {c}-channel image as PNG"))),
    }
    .expect("buffer length matches dimensions");
    encoded.save_with_format(path, ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => codec_err(path, other),
    })
}

/// Writes a boolean mask as black/white.
pub fn write_mask(mask: &[bool], height: usize, width: usize, path: &Path) -> Result<()> {
    let img = ImageTensor::<f64>::new(height, width, 1, mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect())?;
    write(&img, path)
}
