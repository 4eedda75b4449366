//! 8-bit PNG / PPM / PGM reading and writing, plus conversion to clip tensors.

use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::{resize_plane, Tensor};

/// Interleaved 8-bit RGB image.
#[derive(Clone, Debug, PartialEq)]
pub struct Rgb8 {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

/// Single-channel 8-bit image.
#[derive(Clone, Debug, PartialEq)]
pub struct Gray8 {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

pub const IMAGE_EXTENSIONS: [&str; 4] = ["png", "ppm", "pgm", "pnm"];

pub fn read_rgb(path: &Path) -> Result<Rgb8> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?
        .into_rgb8();
    Ok(Rgb8 {
        width: img.width() as usize,
        height: img.height() as usize,
        data: img.into_raw(),
    })
}

pub fn read_gray(path: &Path) -> Result<Gray8> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?
        .into_luma8();
    Ok(Gray8 {
        width: img.width() as usize,
        height: img.height() as usize,
        data: img.into_raw(),
    })
}

pub fn write_rgb(path: &Path, img: &Rgb8) -> Result<()> {
    let buf = RgbImage::from_raw(img.width as u32, img.height as u32, img.data.clone())
        .ok_or_else(|| Error::Data("RGB buffer does not match its size".into()))?;
    buf.save(path)?;
    Ok(())
}

pub fn write_gray(path: &Path, img: &Gray8) -> Result<()> {
    let buf = GrayImage::from_raw(img.width as u32, img.height as u32, img.data.clone())
        .ok_or_else(|| Error::Data("gray buffer does not match its size".into()))?;
    buf.save(path)?;
    Ok(())
}

/// Image files of a directory sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::Data(format!("cannot list {}: {e}", dir.display())))?;
    let mut out: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p
                    .extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    out.sort();
    Ok(out)
}

pub fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Bilinear resize of every channel to `oh x ow`.
pub fn resize_rgb(img: &Rgb8, oh: usize, ow: usize) -> Rgb8 {
    if img.height == oh && img.width == ow {
        return img.clone();
    }
    let (h, w) = (img.height, img.width);
    let mut data = vec![0u8; oh * ow * 3];
    for c in 0..3 {
        let plane: Vec<f32> = (0..h * w).map(|i| img.data[i * 3 + c] as f32).collect();
        for (i, v) in resize_plane(&plane, h, w, oh, ow).into_iter().enumerate() {
            data[i * 3 + c] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    Rgb8 {
        width: ow,
        height: oh,
        data,
    }
}

/// Stacks frames into a `[T, 3, H, W]` tensor with values in `[0, 1]`.
pub fn clip_tensor(frames: &[Rgb8]) -> Result<Tensor<f32>> {
    let first = frames.first().ok_or_else(|| Error::Data("empty clip".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(frames.len() * 3 * h * w);
    for f in frames {
        if f.height != h || f.width != w {
            return Err(Error::Data(format!(
                "frame sizes differ: {}x{} vs {}x{}",
                f.width, f.height, w, h
            )));
        }
        for c in 0..3 {
            data.extend((0..h * w).map(|i| f.data[i * 3 + c] as f32 / 255.0));
        }
    }
    Tensor::new(data, &[frames.len(), 3, h, w])
}
