//! Image/mask data types, PNG I/O, preprocessing, augmentation, k-fold
//! splitting and the synthetic lesion dataset generator.
//!
//! Dataset layout on disk: `images/<id>.png` (8-bit RGB) and
//! `masks/<id>.png` (8-bit grayscale with values 0 = background,
//! 255 = lesion). The optional split file is a CSV `id,fold`.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

mod augment;
mod folds;
mod io;
mod resize;
mod synth;

pub use augment::{apply_dihedral_image, apply_dihedral_mask, augment, AugmentParams, Dihedral};
pub use folds::{kfold_split, FoldSplit};
pub use io::{
    load_image_png, load_mask_png, load_sample, save_image_png, save_mask_png, save_prob_png16, save_sample,
    LoadWarning,
};
pub use resize::{color_balance, resize, resize_image, resize_mask};
pub use synth::{synth_generate, synth_image};

/// Binary lesion mask: `true` = lesion pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(h: usize, w: usize) -> Self {
        Mask { h, w, data: vec![false; h * w] }
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.w + x] = v;
    }

    pub fn count_ones(&self) -> u64 {
        self.data.iter().filter(|&&v| v).count() as u64
    }

    pub fn area_fraction(&self) -> f64 {
        self.count_ones() as f64 / (self.h * self.w) as f64
    }
}

/// RGB image in [0,1], planar channel-major layout (3 x H x W).
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuf {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl ImageBuf {
    pub fn zeros(h: usize, w: usize) -> Self {
        ImageBuf { h, w, data: vec![0.0; 3 * h * w] }
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.h + y) * self.w + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.h + y) * self.w + x] = v;
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        &self.data[c * self.h * self.w..(c + 1) * self.h * self.w]
    }

    pub fn channel_mean(&self, c: usize) -> f64 {
        let plane = self.channel(c);
        plane.iter().map(|&v| v as f64).sum::<f64>() / plane.len() as f64
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }
}

/// One dataset element: an RGB image paired with its binary lesion mask of
/// equal spatial extents.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub image: ImageBuf,
    pub mask: Mask,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: ImageBuf, mask: Mask) -> Result<Self> {
        if image.h != mask.h || image.w != mask.w {
            return Err(Error::Data(format!(
                "image ({}x{}) and mask ({}x{}) extents differ",
                image.h, image.w, mask.h, mask.w
            )));
        }
        Ok(Sample { id: id.into(), image, mask })
    }
}

/// Stable per-sample RNG seed: FNV-1a over the id mixed with the global
/// seed and epoch through splitmix64, so parallel sample order cannot
/// change augmentation results.
pub fn derive_seed(global_seed: u64, sample_id: &str, epoch: u64) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in sample_id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(global_seed ^ h.rotate_left(17) ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Mirror an index into [0, n-1] by reflecting at the borders.
pub(crate) fn reflect_index(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stack samples of equal extents into (N,3,H,W) image and (N,1,H,W)
/// target tensors.
pub fn batch_to_tensors<E: Element>(samples: &[&Sample]) -> Result<(Tensor<E>, Tensor<E>)> {
    let Some(first) = samples.first() else {
        return Err(Error::Contract("cannot batch zero samples".into()));
    };
    let (h, w) = (first.image.h, first.image.w);
    let n = samples.len();
    let mut images = Vec::with_capacity(n * 3 * h * w);
    let mut targets = Vec::with_capacity(n * h * w);
    for s in samples {
        if s.image.h != h || s.image.w != w {
            return Err(Error::Shape(format!(
                "sample '{}' is {}x{} but the batch is {h}x{w}",
                s.id, s.image.h, s.image.w
            )));
        }
        images.extend(s.image.data.iter().map(|&v| E::from_f64(v as f64)));
        targets.extend(s.mask.data.iter().map(|&m| if m { E::one() } else { E::zero() }));
    }
    Ok((
        Tensor::from_vec([n, 3, h, w], images)?,
        Tensor::from_vec([n, 1, h, w], targets)?,
    ))
}

/// Load every image/mask pair under `dir` (sorted by id). Ids present on
/// only one side are an error listing them.
pub fn load_dataset(dir: &Path) -> Result<(Vec<Sample>, Vec<LoadWarning>)> {
    let image_ids = png_ids(&dir.join("images"))?;
    let mask_ids = png_ids(&dir.join("masks"))?;
    let missing_masks: Vec<&String> = image_ids.iter().filter(|i| !mask_ids.contains(i)).collect();
    let missing_images: Vec<&String> = mask_ids.iter().filter(|i| !image_ids.contains(i)).collect();
    if !missing_masks.is_empty() || !missing_images.is_empty() {
        return Err(Error::Data(format!(
            "dataset {} is inconsistent: ids without masks {:?}, ids without images {:?}",
            dir.display(),
            missing_masks,
            missing_images
        )));
    }
    let mut samples = Vec::with_capacity(image_ids.len());
    let mut warnings = Vec::new();
    for id in &image_ids {
        let image_path = dir.join("images").join(format!("{id}.png"));
        let mask_path = dir.join("masks").join(format!("{id}.png"));
        let (sample, mut warns) = load_sample(&image_path, &mask_path)?;
        samples.push(sample);
        warnings.append(&mut warns);
    }
    Ok((samples, warnings))
}

/// Sorted stems of the `.png` files in a directory.
pub fn png_ids(dir: &Path) -> Result<Vec<String>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path: PathBuf = entry.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}
