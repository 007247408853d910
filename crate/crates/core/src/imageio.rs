//! 8-bit PNG encoding of float images and masks.

use std::io::Cursor;
use std::path::Path;

use image::imageops::FilterType;
use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::{Image, Tensor3};

#[inline]
fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn to_rgb8(image: &Image) -> Result<RgbImage> {
    if image.channels() != 3 {
        return Err(Error::contract("RGB export needs three channels"));
    }
    let buf: Vec<u8> = image.as_slice().iter().map(|&v| to_u8(v)).collect();
    RgbImage::from_raw(image.cols() as u32, image.rows() as u32, buf)
        .ok_or_else(|| Error::contract("image buffer size mismatch"))
}

pub fn from_rgb8(img: &RgbImage) -> Image {
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
    Tensor3::from_vec(h as usize, w as usize, 3, data).expect("rgb buffer shape")
}

pub fn encode_png(image: &Image) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    to_rgb8(image)?.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn decode_png(bytes: &[u8]) -> Result<Image> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?;
    Ok(from_rgb8(&img.to_rgb8()))
}

pub fn load_image(path: &Path) -> Result<Image> {
    Ok(from_rgb8(&image::open(path)?.to_rgb8()))
}

/// Resamples to `rows×cols` with a triangle filter; returns the input
/// unchanged when it already has those dimensions.
pub fn resize(image: &Image, rows: usize, cols: usize) -> Result<Image> {
    if image.rows() == rows && image.cols() == cols {
        return Ok(image.clone());
    }
    let rgb = DynamicImage::ImageRgb8(to_rgb8(image)?);
    let out = rgb.resize_exact(cols as u32, rows as u32, FilterType::Triangle);
    Ok(from_rgb8(&out.to_rgb8()))
}

/// A binary pixel mask: `true` marks editable pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelMask {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<bool>,
}

impl PixelMask {
    pub fn new(rows: usize, cols: usize, values: Vec<bool>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::contract("mask size mismatch"));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.values[r * self.cols + c]
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }
}

/// Single-channel 8-bit PNG: 0 frozen, 255 editable.
pub fn encode_mask_png(mask: &PixelMask) -> Result<Vec<u8>> {
    let buf = mask.values.iter().map(|&v| if v { 255 } else { 0 }).collect();
    let img = GrayImage::from_raw(mask.cols as u32, mask.rows as u32, buf)
        .ok_or_else(|| Error::contract("mask buffer size mismatch"))?;
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// Reads a mask image; pixels at or above mid-gray count as editable.
pub fn decode_mask_png(bytes: &[u8]) -> Result<PixelMask> {
    let img = image::load_from_memory(bytes)?.to_luma8();
    let (w, h) = img.dimensions();
    PixelMask::new(h as usize, w as usize, img.as_raw().iter().map(|&v| v >= 128).collect())
}
