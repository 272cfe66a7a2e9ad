//! Synthetic lesion dataset generator: skin-toned textured backgrounds with
//! one randomized lesion blob per image (perturbed ellipse with an
//! irregular boundary, darker varied hue, optional hair-like occluding
//! strokes). The mask is the exact analytic support of the blob, evaluated
//! per pixel from the same boundary function that colors the lesion.

use std::f64::consts::{PI, TAU};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::{derive_seed, save_sample, ImageBuf, Mask, Sample};

struct Blob {
    cx: f64,
    cy: f64,
    r0: f64,
    ex: f64,
    ey: f64,
    alpha: f64,
    amps: [f64; 5],
    phases: [f64; 5],
}

impl Blob {
    /// Radial boundary perturbation at polar angle phi (harmonics 2..=6).
    fn perturbation(&self, phi: f64) -> f64 {
        let mut p = 0.0;
        for (i, (&a, &ps)) in self.amps.iter().zip(&self.phases).enumerate() {
            let m = (i + 2) as f64;
            p += a * (m * phi + ps).cos();
        }
        p
    }

    /// Whether a pixel center lies inside the blob.
    fn contains(&self, y: f64, x: f64) -> bool {
        self.relative_radius(y, x) <= 1.0
    }

    /// Distance from the center in units of the local boundary radius.
    fn relative_radius(&self, y: f64, x: f64) -> f64 {
        let dy = y - self.cy;
        let dx = x - self.cx;
        let (sin, cos) = (-self.alpha).sin_cos();
        let ry = cos * dy - sin * dx;
        let rx = sin * dy + cos * dx;
        let uy = ry / self.ey;
        let ux = rx / self.ex;
        let rho = (ux * ux + uy * uy).sqrt();
        if rho == 0.0 {
            return 0.0;
        }
        let phi = uy.atan2(ux);
        rho / (self.r0 * (1.0 + self.perturbation(phi)))
    }
}

/// Bilinearly upsampled coarse value-noise grid in [-1, 1].
fn value_noise(size: usize, cells: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let grid: Vec<f32> = (0..cells * cells).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let mut out = vec![0.0f32; size * size];
    let scale = (cells - 1) as f64 / size as f64;
    for y in 0..size {
        let gy = (y as f64 + 0.5) * scale;
        let y0 = (gy.floor() as usize).min(cells - 2);
        let fy = (gy - y0 as f64) as f32;
        for x in 0..size {
            let gx = (x as f64 + 0.5) * scale;
            let x0 = (gx.floor() as usize).min(cells - 2);
            let fx = (gx - x0 as f64) as f32;
            let top = grid[y0 * cells + x0] * (1.0 - fx) + grid[y0 * cells + x0 + 1] * fx;
            let bot = grid[(y0 + 1) * cells + x0] * (1.0 - fx) + grid[(y0 + 1) * cells + x0 + 1] * fx;
            out[y * size + x] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

/// Generate one synthetic image/mask pair. Deterministic in the seed.
pub fn synth_image(size: usize, seed: u64) -> (ImageBuf, Mask) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Skin-toned background with low-frequency texture.
    let base_r: f64 = rng.random_range(0.70..0.88);
    let base_g = base_r * rng.random_range(0.72..0.88);
    let base_b = base_g * rng.random_range(0.75..0.95);
    let cells = (size / 8).max(2) + 1;
    let noise = value_noise(size, cells, &mut rng);

    // Blob geometry: target area fraction in [4%, 40%] of the image.
    let area_frac: f64 = rng.random_range(0.04..0.40);
    let u: f64 = rng.random_range(-0.3..0.3);
    let (ex, ey) = (u.exp(), (-u).exp());
    let alpha: f64 = rng.random_range(0.0..PI);
    let mut amps = [0.0f64; 5];
    let mut phases = [0.0f64; 5];
    for i in 0..5 {
        amps[i] = rng.random_range(0.0..0.2 / (i + 2) as f64);
        phases[i] = rng.random_range(0.0..TAU);
    }
    // Scale r0 so the analytic blob area hits the target exactly:
    // area = ex * ey * 1/2 * integral of (r0 * (1 + p(phi)))^2 dphi.
    let mut blob = Blob { cx: 0.0, cy: 0.0, r0: 1.0, ex, ey, alpha, amps, phases };
    let samples = 720;
    let mut integral = 0.0;
    for i in 0..samples {
        let phi = TAU * i as f64 / samples as f64;
        let r = 1.0 + blob.perturbation(phi);
        integral += 0.5 * r * r * (TAU / samples as f64);
    }
    blob.r0 = (area_frac * (size * size) as f64 / (integral * ex * ey)).sqrt();

    let amp_sum: f64 = amps.iter().sum();
    let max_r = blob.r0 * (1.0 + amp_sum) * ex.max(ey);
    let margin = max_r + 1.0;
    let center_range = size as f64 - 2.0 * margin;
    if center_range > 1.0 {
        blob.cx = rng.random_range(margin..size as f64 - margin);
        blob.cy = rng.random_range(margin..size as f64 - margin);
    } else {
        blob.cx = size as f64 / 2.0;
        blob.cy = size as f64 / 2.0;
    }

    // Lesion coloring: darker and browner than the background, with its own
    // texture and a slightly darker core.
    let dark: f64 = rng.random_range(0.30..0.55);
    let tint_g: f64 = rng.random_range(0.70..1.00);
    let tint_b: f64 = rng.random_range(0.50..0.90);
    let lesion_noise = value_noise(size, cells, &mut rng);

    let mut image = ImageBuf::zeros(size, size);
    let mut mask = Mask::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let n = noise[y * size + x] * 0.03;
            let mut px = [
                (base_r as f32 + n).clamp(0.0, 1.0),
                (base_g as f32 + n).clamp(0.0, 1.0),
                (base_b as f32 + n).clamp(0.0, 1.0),
            ];
            let inside = blob.contains(y as f64, x as f64);
            if inside {
                mask.set(y, x, true);
                let rho = blob.relative_radius(y as f64, x as f64);
                let core = 0.75 + 0.35 * rho as f32;
                let ln = lesion_noise[y * size + x] * 0.05;
                px[0] = (px[0] * dark as f32 * core + ln).clamp(0.0, 1.0);
                px[1] = (px[1] * (dark * tint_g) as f32 * core + ln).clamp(0.0, 1.0);
                px[2] = (px[2] * (dark * tint_b) as f32 * core + ln).clamp(0.0, 1.0);
            }
            for c in 0..3 {
                image.set(c, y, x, px[c]);
            }
        }
    }

    // Hair-like occluding strokes over background and lesion alike; the
    // mask stays the blob support.
    let hairs = rng.random_range(0..3u32);
    for _ in 0..hairs {
        let shade: f32 = rng.random_range(0.10..0.30);
        let (x0, y0) = (rng.random_range(0.0..size as f64), rng.random_range(0.0..size as f64));
        let (x1, y1) = (rng.random_range(0.0..size as f64), rng.random_range(0.0..size as f64));
        let (cxp, cyp) = (rng.random_range(0.0..size as f64), rng.random_range(0.0..size as f64));
        let steps = 4 * size;
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            let omt = 1.0 - t;
            let px = omt * omt * x0 + 2.0 * omt * t * cxp + t * t * x1;
            let py = omt * omt * y0 + 2.0 * omt * t * cyp + t * t * y1;
            let (xi, yi) = (px.round() as isize, py.round() as isize);
            if xi >= 0 && yi >= 0 && (xi as usize) < size && (yi as usize) < size {
                for c in 0..3 {
                    image.set(c, yi as usize, xi as usize, shade);
                }
            }
        }
    }

    (image, mask)
}

/// Write `n` image/mask pairs (`images/synth_NNNN.png`, `masks/...`) under
/// `out_dir`; returns the ids in order. Deterministic in the seed.
pub fn synth_generate(n: usize, size: usize, seed: u64, out_dir: &Path) -> Result<Vec<String>> {
    if size < 16 {
        return Err(Error::Contract(format!("synthetic image size {size} must be >= 16")));
    }
    let images_dir = out_dir.join("images");
    let masks_dir = out_dir.join("masks");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    std::fs::create_dir_all(&masks_dir).map_err(|e| Error::io(&masks_dir, e))?;

    let mut ids = Vec::with_capacity(n);
    for i in 0..n {
        let id = format!("synth_{i:04}");
        let (image, mask) = synth_image(size, derive_seed(seed, &id, 0));
        let sample = Sample::new(id.clone(), image, mask)?;
        save_sample(
            &sample,
            &images_dir.join(format!("{id}.png")),
            &masks_dir.join(format!("{id}.png")),
        )?;
        ids.push(id);
    }
    Ok(ids)
}
