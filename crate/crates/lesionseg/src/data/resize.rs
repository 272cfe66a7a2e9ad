//! Resampling and color balance.
//!
//! Coordinate mapping (half-pixel-center convention): an output pixel
//! `d` samples the source at `s = (d + 0.5) * (src_extent / dst_extent) - 0.5`.
//! Images interpolate bilinearly with edge clamping; masks take the nearest
//! source pixel `floor((d + 0.5) * scale)` clamped into range, so they stay
//! binary.

use crate::error::Result;

use super::{ImageBuf, Mask, Sample};

pub fn resize_image(image: &ImageBuf, out_h: usize, out_w: usize) -> ImageBuf {
    let mut out = ImageBuf::zeros(out_h, out_w);
    let scale_y = image.h as f64 / out_h as f64;
    let scale_x = image.w as f64 / out_w as f64;
    for c in 0..3 {
        for y in 0..out_h {
            let sy = ((y as f64 + 0.5) * scale_y - 0.5).clamp(0.0, (image.h - 1) as f64);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(image.h - 1);
            let fy = (sy - y0 as f64) as f32;
            for x in 0..out_w {
                let sx = ((x as f64 + 0.5) * scale_x - 0.5).clamp(0.0, (image.w - 1) as f64);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(image.w - 1);
                let fx = (sx - x0 as f64) as f32;
                let top = image.get(c, y0, x0) * (1.0 - fx) + image.get(c, y0, x1) * fx;
                let bottom = image.get(c, y1, x0) * (1.0 - fx) + image.get(c, y1, x1) * fx;
                out.set(c, y, x, top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    out
}

pub fn resize_mask(mask: &Mask, out_h: usize, out_w: usize) -> Mask {
    let mut out = Mask::new(out_h, out_w);
    let scale_y = mask.h as f64 / out_h as f64;
    let scale_x = mask.w as f64 / out_w as f64;
    for y in 0..out_h {
        let sy = (((y as f64 + 0.5) * scale_y).floor() as usize).min(mask.h - 1);
        for x in 0..out_w {
            let sx = (((x as f64 + 0.5) * scale_x).floor() as usize).min(mask.w - 1);
            out.set(y, x, mask.get(sy, sx));
        }
    }
    out
}

/// Resize a sample to `size` x `size`.
pub fn resize(sample: &Sample, size: usize) -> Result<Sample> {
    Sample::new(
        sample.id.clone(),
        resize_image(&sample.image, size, size),
        resize_mask(&sample.mask, size, size),
    )
}

/// Gray-world color balance: each channel is scaled so its mean equals the
/// global mean of the three channel means, then clamped to [0,1]. Channels
/// with mean 0 are left unscaled; their indices are returned so the caller
/// can log them.
pub fn color_balance(image: &ImageBuf) -> (ImageBuf, Vec<usize>) {
    let means = [image.channel_mean(0), image.channel_mean(1), image.channel_mean(2)];
    let target = (means[0] + means[1] + means[2]) / 3.0;
    let mut out = image.clone();
    let mut skipped = Vec::new();
    for c in 0..3 {
        if means[c] == 0.0 {
            skipped.push(c);
            continue;
        }
        let scale = (target / means[c]) as f32;
        let plane = &mut out.data[c * out.h * out.w..(c + 1) * out.h * out.w];
        for v in plane {
            *v = (*v * scale).clamp(0.0, 1.0);
        }
    }
    (out, skipped)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_to_same_size_is_identity() {
        let mut image = ImageBuf::zeros(8, 8);
        for (i, v) in image.data.iter_mut().enumerate() {
            *v = (i % 97) as f32 / 96.0;
        }
        let mut mask = Mask::new(8, 8);
        mask.set(3, 4, true);
        let sample = Sample::new("s", image.clone(), mask.clone()).unwrap();
        let out = resize(&sample, 8).unwrap();
        for (a, b) in out.image.data.iter().zip(&image.data) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(out.mask, mask);
    }

    #[test]
    fn mask_stays_binary_under_any_resize() {
        let mut mask = Mask::new(7, 5);
        for (i, v) in mask.data.iter_mut().enumerate() {
            *v = i % 3 == 0;
        }
        for size in [3, 8, 16] {
            let out = resize_mask(&mask, size, size);
            assert_eq!(out.h, size);
            // Vec<bool> is binary by construction; the point is that the op
            // samples rather than blends, so every output pixel equals some
            // input pixel.
            for y in 0..size {
                for x in 0..size {
                    let sy = (((y as f64 + 0.5) * (7.0 / size as f64)).floor() as usize).min(6);
                    let sx = (((x as f64 + 0.5) * (5.0 / size as f64)).floor() as usize).min(4);
                    assert_eq!(out.get(y, x), mask.get(sy, sx));
                }
            }
        }
    }

    #[test]
    fn checkerboard_downsample_follows_documented_mapping() {
        // 4x4 checkerboard to 2x2: output (y,x) samples source (2y+1, 2x+1).
        let mut mask = Mask::new(4, 4);
        for y in 0..4 {
            for x in 0..4 {
                mask.set(y, x, (y + x) % 2 == 0);
            }
        }
        let out = resize_mask(&mask, 2, 2);
        for y in 0..2 {
            for x in 0..2 {
                assert_eq!(out.get(y, x), mask.get(2 * y + 1, 2 * x + 1));
            }
        }
    }

    #[test]
    fn balanced_image_is_a_fixed_point() {
        let mut image = ImageBuf::zeros(4, 4);
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    image.set(c, y, x, ((y * 4 + x) as f32) / 32.0 + 0.2);
                }
            }
        }
        let (out, skipped) = color_balance(&image);
        assert!(skipped.is_empty());
        for (a, b) in out.data.iter().zip(&image.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn unbalanced_channels_converge_to_the_global_mean() {
        let mut image = ImageBuf::zeros(4, 4);
        for (c, m) in [(0usize, 0.2f32), (1, 0.4), (2, 0.6)] {
            for y in 0..4 {
                for x in 0..4 {
                    image.set(c, y, x, m);
                }
            }
        }
        let (out, skipped) = color_balance(&image);
        assert!(skipped.is_empty());
        for c in 0..3 {
            assert!((out.channel_mean(c) - 0.4).abs() < 1e-6, "channel {c}");
        }
    }

    #[test]
    fn zero_mean_channel_is_left_unscaled() {
        let mut image = ImageBuf::zeros(2, 2);
        for y in 0..2 {
            for x in 0..2 {
                image.set(1, y, x, 0.5);
                image.set(2, y, x, 0.25);
            }
        }
        let (out, skipped) = color_balance(&image);
        assert_eq!(skipped, vec![0]);
        assert_eq!(out.channel(0), image.channel(0));
    }
}
