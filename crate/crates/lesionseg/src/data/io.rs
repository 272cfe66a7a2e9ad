//! PNG encode/decode for images, masks and probability maps.

use std::path::{Path, PathBuf};

use image::{ImageBuffer, ImageFormat, Luma, Rgb};

use crate::error::{Error, Result};

use super::{ImageBuf, Mask, Sample};

/// A non-fatal observation made while loading data (e.g. mask pixels that
/// are neither 0 nor 255). The CLI prints these; the library returns them.
#[derive(Debug, Clone)]
pub struct LoadWarning {
    pub path: PathBuf,
    pub message: String,
}

fn map_image_error(path: &Path, err: image::ImageError) -> Error {
    match err {
        image::ImageError::IoError(e) => Error::io(path, e),
        other => Error::Data(format!("{}: {other}", path.display())),
    }
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| map_image_error(path, e))
}

/// Load an RGB image and its grayscale mask. Image values scale to [0,1]
/// by /255; mask pixels map 255 -> 1 and 0 -> 0, any other value maps by
/// `>= 128` and produces one warning per file.
pub fn load_sample(image_path: &Path, mask_path: &Path) -> Result<(Sample, Vec<LoadWarning>)> {
    let rgb = open(image_path)?.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);

    let (mask, warnings) = load_mask_png(mask_path)?;
    if mask.h != h || mask.w != w {
        return Err(Error::Data(format!(
            "{} is {w}x{h} but its mask {} is {}x{}",
            image_path.display(),
            mask_path.display(),
            mask.w,
            mask.h
        )));
    }

    let mut image = ImageBuf::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let px = rgb.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                image.set(c, y, x, px.0[c] as f32 / 255.0);
            }
        }
    }

    let id = image_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("sample")
        .to_string();
    let sample = Sample::new(id, image, mask)?;
    Ok((sample, warnings))
}

/// Load an RGB image alone (no mask), scaled to [0,1].
pub fn load_image_png(path: &Path) -> Result<ImageBuf> {
    let rgb = open(path)?.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut image = ImageBuf::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let px = rgb.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                image.set(c, y, x, px.0[c] as f32 / 255.0);
            }
        }
    }
    Ok(image)
}

pub fn load_mask_png(path: &Path) -> Result<(Mask, Vec<LoadWarning>)> {
    let gray = open(path)?.to_luma8();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let mut mask = Mask::new(h, w);
    let mut nonstandard = 0usize;
    for y in 0..h {
        for x in 0..w {
            let v = gray.get_pixel(x as u32, y as u32).0[0];
            if v != 0 && v != 255 {
                nonstandard += 1;
            }
            mask.set(y, x, v >= 128);
        }
    }
    let mut warnings = Vec::new();
    if nonstandard > 0 {
        warnings.push(LoadWarning {
            path: path.to_path_buf(),
            message: format!(
                "{nonstandard} mask pixel(s) are neither 0 nor 255; mapped by >= 128"
            ),
        });
    }
    Ok((mask, warnings))
}

pub fn save_image_png(image: &ImageBuf, path: &Path) -> Result<()> {
    let (h, w) = (image.h, image.w);
    let mut buf: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [0, 1, 2].map(|c| (image.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            buf.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    buf.save_with_format(path, ImageFormat::Png).map_err(|e| map_image_error(path, e))
}

/// Masks encode as 8-bit grayscale with exactly the values 0 and 255.
pub fn save_mask_png(mask: &Mask, path: &Path) -> Result<()> {
    let mut buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::new(mask.w as u32, mask.h as u32);
    for y in 0..mask.h {
        for x in 0..mask.w {
            buf.put_pixel(x as u32, y as u32, Luma([if mask.get(y, x) { 255 } else { 0 }]));
        }
    }
    buf.save_with_format(path, ImageFormat::Png).map_err(|e| map_image_error(path, e))
}

/// Probability maps encode as 16-bit grayscale, value = round(p * 65535).
pub fn save_prob_png16(probs: &[f32], h: usize, w: usize, path: &Path) -> Result<()> {
    debug_assert_eq!(probs.len(), h * w);
    let mut buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = (probs[y * w + x].clamp(0.0, 1.0) * 65535.0).round() as u16;
            buf.put_pixel(x as u32, y as u32, Luma([v]));
        }
    }
    buf.save_with_format(path, ImageFormat::Png).map_err(|e| map_image_error(path, e))
}

pub fn save_sample(sample: &Sample, image_path: &Path, mask_path: &Path) -> Result<()> {
    save_image_png(&sample.image, image_path)?;
    save_mask_png(&sample.mask, mask_path)
}
