//! PNG/PNM reading and writing on top of the `image` crate.

use std::path::Path;

use image::{DynamicImage, GrayImage, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn save_gray(path: &Path, width: usize, height: usize, bytes: &[u8]) -> Result<()> {
    let img = GrayImage::from_raw(width as u32, height as u32, bytes.to_vec())
        .ok_or_else(|| Error::format(path, "gray buffer size mismatch"))?;
    img.save(path).map_err(|e| Error::format(path, e.to_string()))
}

pub fn save_rgb(path: &Path, width: usize, height: usize, bytes: &[u8]) -> Result<()> {
    let img = RgbImage::from_raw(width as u32, height as u32, bytes.to_vec())
        .ok_or_else(|| Error::format(path, "rgb buffer size mismatch"))?;
    img.save(path).map_err(|e| Error::format(path, e.to_string()))
}

/// `(3, H, W)` tensor in `[0, 1]` -> 8-bit RGB rows.
pub fn tensor_to_rgb_bytes(t: &Tensor) -> Vec<u8> {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let d = t.data();
    let mut out = Vec::with_capacity(3 * h * w);
    for i in 0..h {
        for j in 0..w {
            for c in 0..3 {
                out.push((d[(c * h + i) * w + j].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out
}

fn open(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|e| Error::format(path, e.to_string()))
}

/// Decodes an image, resizes to `(w, h)` with bilinear filtering and scales
/// 8-bit values to `[0, 1]`, channel-major.
pub fn load_rgb_resized(path: &Path, width: usize, height: usize) -> Result<Tensor> {
    let img = open(path)?.to_rgb8();
    let img = if img.width() as usize == width && img.height() as usize == height {
        img
    } else {
        image::imageops::resize(
            &img,
            width as u32,
            height as u32,
            image::imageops::FilterType::Triangle,
        )
    };
    let mut data = vec![0.0; 3 * width * height];
    for (j, i, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * height + i as usize) * width + j as usize] = f64::from(p.0[c]) / 255.0;
        }
    }
    Ok(Tensor::from_parts(vec![3, height, width], data))
}

/// Decodes a grayscale mask at its native resolution.
#[cfg_attr(not(test), allow(dead_code))]
pub fn load_gray(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((w, h, img.into_raw()))
}
