//! Random augmentation: dihedral symmetries, rotation, zoom, and lighting
//! jitter. Deterministic in the provided seed.
//!
//! Rotation and zoom compose into a single affine map applied in one
//! resampling pass (bilinear for the image with reflected borders, nearest
//! for the mask). The dihedral element is applied afterwards as an exact
//! index permutation, so dihedral-only transforms are bit-exact and the
//! group property holds without interpolation error.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::{reflect_index, ImageBuf, Mask, Sample};

/// The transform set of the augmentation pipeline, with per-transform
/// enable flags.
#[derive(Clone, Debug)]
pub struct AugmentParams {
    pub dihedral: bool,
    pub rotation: bool,
    pub max_rotation_deg: f64,
    pub zoom: bool,
    pub max_zoom: f64,
    pub lighting: bool,
    /// Additive brightness jitter, drawn from [-brightness, +brightness].
    pub brightness: f64,
    /// Contrast scale jitter about the image mean, factor in [1-c, 1+c].
    pub contrast: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            dihedral: true,
            rotation: true,
            max_rotation_deg: 44.0,
            zoom: true,
            max_zoom: 1.05,
            lighting: true,
            brightness: 0.05,
            contrast: 0.05,
        }
    }
}

impl AugmentParams {
    pub fn disabled() -> Self {
        AugmentParams {
            dihedral: false,
            rotation: false,
            zoom: false,
            lighting: false,
            ..AugmentParams::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_zoom < 1.0 {
            return Err(Error::Config(format!("max_zoom {} must be >= 1", self.max_zoom)));
        }
        if !(0.0..180.0).contains(&self.max_rotation_deg) {
            return Err(Error::Config(format!(
                "max_rotation_deg {} must lie in [0, 180)",
                self.max_rotation_deg
            )));
        }
        Ok(())
    }
}

/// One of the 8 symmetries of the square: `rot` quarter-turns (CCW) after
/// an optional horizontal flip.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dihedral {
    pub rot: u8,
    pub flip: bool,
}

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral { rot: 0, flip: false };

    pub fn from_index(i: u8) -> Self {
        Dihedral { rot: i % 4, flip: i >= 4 }
    }

    pub fn index(self) -> u8 {
        self.rot + if self.flip { 4 } else { 0 }
    }

    /// Group inverse: reflections are involutions, rotations invert.
    pub fn inverse(self) -> Self {
        if self.flip {
            self
        } else {
            Dihedral { rot: (4 - self.rot) % 4, flip: false }
        }
    }

    pub fn all() -> [Dihedral; 8] {
        std::array::from_fn(|i| Dihedral::from_index(i as u8))
    }
}

/// Map output coordinates of the transformed grid back to input
/// coordinates, returning the output extents.
fn dihedral_source(
    d: Dihedral,
    in_h: usize,
    in_w: usize,
) -> (usize, usize, impl Fn(usize, usize) -> (usize, usize)) {
    // Flip first (horizontal mirror), then `rot` CCW quarter-turns.
    let (out_h, out_w) = if d.rot % 2 == 0 { (in_h, in_w) } else { (in_w, in_h) };
    let f = move |y: usize, x: usize| -> (usize, usize) {
        // Undo the rotation: map output coords to the flipped image.
        let (fy, fx) = match d.rot {
            0 => (y, x),
            // CCW rotation r: out[y][x] = mid[x][in_w-1-y]
            1 => (x, in_w - 1 - y),
            2 => (in_h - 1 - y, in_w - 1 - x),
            3 => (in_h - 1 - x, y),
            _ => unreachable!(),
        };
        // Undo the flip.
        if d.flip {
            (fy, in_w - 1 - fx)
        } else {
            (fy, fx)
        }
    };
    (out_h, out_w, f)
}

pub fn apply_dihedral_mask(mask: &Mask, d: Dihedral) -> Mask {
    let (out_h, out_w, src) = dihedral_source(d, mask.h, mask.w);
    let mut out = Mask::new(out_h, out_w);
    for y in 0..out_h {
        for x in 0..out_w {
            let (sy, sx) = src(y, x);
            out.set(y, x, mask.get(sy, sx));
        }
    }
    out
}

pub fn apply_dihedral_image(image: &ImageBuf, d: Dihedral) -> ImageBuf {
    let (out_h, out_w, src) = dihedral_source(d, image.h, image.w);
    let mut out = ImageBuf::zeros(out_h, out_w);
    for c in 0..3 {
        for y in 0..out_h {
            for x in 0..out_w {
                let (sy, sx) = src(y, x);
                out.set(c, y, x, image.get(c, sy, sx));
            }
        }
    }
    out
}

/// One-pass inverse-mapped affine resample: rotation by `theta` composed
/// with zoom `z` about the image center. Bilinear for the image, nearest
/// for the mask; both use reflected borders.
fn resample_affine(sample: &Sample, theta: f64, zoom: f64) -> (ImageBuf, Mask) {
    let (h, w) = (sample.image.h, sample.image.w);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = theta.sin_cos();
    let inv_zoom = 1.0 / zoom;

    let mut image = ImageBuf::zeros(h, w);
    let mut mask = Mask::new(h, w);
    for y in 0..h {
        for x in 0..w {
            // Inverse map: rotate by -theta, then unzoom.
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let sy = cy + inv_zoom * (cos * dy - sin * dx);
            let sx = cx + inv_zoom * (sin * dy + cos * dx);

            let y0 = sy.floor() as isize;
            let x0 = sx.floor() as isize;
            let fy = (sy - y0 as f64) as f32;
            let fx = (sx - x0 as f64) as f32;
            let yi = [reflect_index(y0, h), reflect_index(y0 + 1, h)];
            let xi = [reflect_index(x0, w), reflect_index(x0 + 1, w)];
            for c in 0..3 {
                let top = sample.image.get(c, yi[0], xi[0]) * (1.0 - fx)
                    + sample.image.get(c, yi[0], xi[1]) * fx;
                let bottom = sample.image.get(c, yi[1], xi[0]) * (1.0 - fx)
                    + sample.image.get(c, yi[1], xi[1]) * fx;
                image.set(c, y, x, top * (1.0 - fy) + bottom * fy);
            }
            let ny = reflect_index((sy + 0.5).floor() as isize, h);
            let nx = reflect_index((sx + 0.5).floor() as isize, w);
            mask.set(y, x, sample.mask.get(ny, nx));
        }
    }
    (image, mask)
}

/// Apply one random draw of the enabled transforms. Pure in
/// `(sample, params, rng_seed)`; with everything disabled the sample is
/// returned bit-exactly.
pub fn augment(sample: &Sample, params: &AugmentParams, rng_seed: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);

    let dihedral = params
        .dihedral
        .then(|| Dihedral::from_index(rng.random_range(0..8u8)));
    let theta_deg = if params.rotation && params.max_rotation_deg > 0.0 {
        rng.random_range(-params.max_rotation_deg..params.max_rotation_deg)
    } else {
        0.0
    };
    let zoom = if params.zoom && params.max_zoom > 1.0 {
        rng.random_range(1.0..params.max_zoom)
    } else {
        1.0
    };
    let lighting = params.lighting.then(|| {
        let brightness = if params.brightness > 0.0 {
            rng.random_range(-params.brightness..params.brightness)
        } else {
            0.0
        };
        let contrast = if params.contrast > 0.0 {
            rng.random_range(1.0 - params.contrast..1.0 + params.contrast)
        } else {
            1.0
        };
        (brightness, contrast)
    });

    let (mut image, mut mask) = if theta_deg != 0.0 || zoom != 1.0 {
        resample_affine(sample, theta_deg.to_radians(), zoom)
    } else {
        (sample.image.clone(), sample.mask.clone())
    };

    if let Some(d) = dihedral {
        image = apply_dihedral_image(&image, d);
        mask = apply_dihedral_mask(&mask, d);
    }

    if let Some((brightness, contrast)) = lighting {
        let mean = image.mean() as f32;
        let (b, c) = (brightness as f32, contrast as f32);
        for v in &mut image.data {
            *v = (mean + (*v - mean) * c + b).clamp(0.0, 1.0);
        }
    }

    Sample { id: sample.id.clone(), image, mask }
}
