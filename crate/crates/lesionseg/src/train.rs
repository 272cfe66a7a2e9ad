//! Per-fold training orchestration, progressive resizing, prediction,
//! probability-averaging ensembles, directory evaluation, and checkpoint
//! serialization.

use std::path::{Path, PathBuf};

use crate::archive::Archive;
use crate::data::{load_mask_png, png_ids, resize, FoldSplit, ImageBuf, LoadWarning, Mask, Sample};
use crate::data::{derive_seed, reflect_index};
use crate::error::{Error, Result};
use crate::metrics::{binarize, MetricReport};
use crate::model::{ModelConfig, UNetModel};
use crate::procedure::{run_training_procedure, EpochStats, TrainHyper};
use crate::schedule::LrCurve;
use crate::tensor::{Element, Mode, Tape, Tensor};

/// Everything needed to reproduce and identify a trained model: the model
/// and schedule configuration, the data split, and the best epoch's scores.
#[derive(Clone, Debug)]
pub struct CheckpointManifest {
    pub model: ModelConfig,
    pub seed: u64,
    pub image_size: usize,
    pub folds: usize,
    pub fold: Option<usize>,
    pub epochs_per_phase: usize,
    pub stlr_cut_frac: f64,
    pub stlr_ratio: f64,
    pub phase: usize,
    pub epoch: usize,
    pub val_dice: f64,
    pub val_jaccard: f64,
}

/// Serialized weights plus manifest. `load(save(model))` reproduces forward
/// outputs bit-identically.
pub struct Checkpoint<E: Element> {
    pub manifest: CheckpointManifest,
    arrays: Vec<(String, Vec<usize>, Vec<E>)>,
}

impl<E: Element> Checkpoint<E> {
    pub fn from_model(model: &UNetModel<E>, manifest: CheckpointManifest) -> Self {
        Checkpoint { manifest, arrays: model.state_arrays() }
    }

    /// Rebuild the model and load every array; the archive must cover the
    /// architecture exactly.
    pub fn to_model(&self) -> Result<UNetModel<E>> {
        let model = UNetModel::build(&self.manifest.model, 0)?;
        let expected = model.state_arrays().len();
        if self.arrays.len() != expected {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} arrays but the architecture has {expected}",
                self.arrays.len()
            )));
        }
        for (name, dims, values) in &self.arrays {
            model.load_state_array(name, dims, values)?;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut archive = Archive::new();
        let m = &self.manifest;
        let list = |v: &[usize; 4]| {
            v.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
        };
        archive.push_meta("model.input_channels", m.model.input_channels.to_string());
        archive.push_meta("model.output_channels", m.model.output_channels.to_string());
        archive.push_meta("model.stem_channels", m.model.stem_channels.to_string());
        archive.push_meta("model.stem_kernel", m.model.stem_kernel.to_string());
        archive.push_meta("model.stem_stride", m.model.stem_stride.to_string());
        archive.push_meta("model.stage_blocks", list(&m.model.stage_blocks));
        archive.push_meta("model.stage_channels", list(&m.model.stage_channels));
        archive.push_meta("model.decoder_channels", list(&m.model.decoder_channels));
        archive.push_meta("model.bn_momentum", m.model.bn_momentum.to_string());
        archive.push_meta("model.bn_eps", m.model.bn_eps.to_string());
        archive.push_meta("seed", m.seed.to_string());
        archive.push_meta("image_size", m.image_size.to_string());
        archive.push_meta("folds", m.folds.to_string());
        if let Some(fold) = m.fold {
            archive.push_meta("fold", fold.to_string());
        }
        archive.push_meta("schedule.epochs_per_phase", m.epochs_per_phase.to_string());
        archive.push_meta("schedule.stlr_cut_frac", m.stlr_cut_frac.to_string());
        archive.push_meta("schedule.stlr_ratio", m.stlr_ratio.to_string());
        archive.push_meta("phase", m.phase.to_string());
        archive.push_meta("epoch", m.epoch.to_string());
        archive.push_meta("val_dice", m.val_dice.to_string());
        archive.push_meta("val_jaccard", m.val_jaccard.to_string());
        for (name, dims, values) in &self.arrays {
            archive.push_values::<E>(name, dims, values);
        }
        archive.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let archive = Archive::read(path)?;
        let manifest = read_manifest(&archive)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let mut arrays = Vec::with_capacity(archive.entries.len());
        let mut seen = std::collections::HashSet::new();
        for entry in &archive.entries {
            if !seen.insert(entry.name.clone()) {
                return Err(Error::Checkpoint(format!(
                    "{}: duplicate array '{}'",
                    path.display(),
                    entry.name
                )));
            }
            arrays.push((entry.name.clone(), entry.dims.clone(), entry.values::<E>()?));
        }
        Ok(Checkpoint { manifest, arrays })
    }
}

fn read_manifest(archive: &Archive) -> Result<CheckpointManifest> {
    fn parse<T: std::str::FromStr>(archive: &Archive, key: &str) -> Result<T> {
        let raw = archive.require_meta(key)?;
        raw.parse::<T>()
            .map_err(|_| Error::Checkpoint(format!("bad manifest value for {key}: '{raw}'")))
    }
    fn parse4(archive: &Archive, key: &str) -> Result<[usize; 4]> {
        let raw = archive.require_meta(key)?;
        let parts: Vec<usize> = raw
            .split(',')
            .map(|p| {
                p.parse::<usize>()
                    .map_err(|_| Error::Checkpoint(format!("bad manifest value for {key}: '{raw}'")))
            })
            .collect::<Result<_>>()?;
        parts
            .try_into()
            .map_err(|_| Error::Checkpoint(format!("{key} must list exactly 4 extents")))
    }

    let model = ModelConfig {
        input_channels: parse(archive, "model.input_channels")?,
        output_channels: parse(archive, "model.output_channels")?,
        stem_channels: parse(archive, "model.stem_channels")?,
        stem_kernel: parse(archive, "model.stem_kernel")?,
        stem_stride: parse(archive, "model.stem_stride")?,
        stage_blocks: parse4(archive, "model.stage_blocks")?,
        stage_channels: parse4(archive, "model.stage_channels")?,
        decoder_channels: parse4(archive, "model.decoder_channels")?,
        bn_momentum: parse(archive, "model.bn_momentum")?,
        bn_eps: parse(archive, "model.bn_eps")?,
    };
    let fold = match archive.meta("fold") {
        Some(raw) => Some(raw.parse::<usize>().map_err(|_| {
            Error::Checkpoint(format!("bad manifest value for fold: '{raw}'"))
        })?),
        None => None,
    };
    Ok(CheckpointManifest {
        model,
        seed: parse(archive, "seed")?,
        image_size: parse(archive, "image_size")?,
        folds: parse(archive, "folds")?,
        fold,
        epochs_per_phase: parse(archive, "schedule.epochs_per_phase")?,
        stlr_cut_frac: parse(archive, "schedule.stlr_cut_frac")?,
        stlr_ratio: parse(archive, "schedule.stlr_ratio")?,
        phase: parse(archive, "phase")?,
        epoch: parse(archive, "epoch")?,
        val_dice: parse(archive, "val_dice")?,
        val_jaccard: parse(archive, "val_jaccard")?,
    })
}

pub struct FoldOutcome<E: Element> {
    pub checkpoint: Checkpoint<E>,
    pub history: Vec<EpochStats>,
    pub curves: Vec<LrCurve>,
}

/// Split the dataset for `fold`, returning (train, validation) at native
/// resolution.
pub fn split_samples<'a>(
    samples: &'a [Sample],
    split: &FoldSplit,
    fold: usize,
) -> Result<(Vec<&'a Sample>, Vec<&'a Sample>)> {
    if fold >= split.k {
        return Err(Error::Contract(format!("fold {fold} out of range for k={}", split.k)));
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for sample in samples {
        match split.fold_of(&sample.id) {
            Some(f) if f == fold => val.push(sample),
            Some(_) => train.push(sample),
            None => {
                return Err(Error::Data(format!("sample '{}' is not in the fold split", sample.id)))
            }
        }
    }
    Ok((train, val))
}

/// Train one fold at a single resolution: the full two-phase procedure,
/// returning the checkpoint with the best validation Dice over all epochs.
pub fn train_fold<E: Element>(
    samples: &[Sample],
    split: &FoldSplit,
    fold: usize,
    model_cfg: &ModelConfig,
    hyper: &TrainHyper,
    seed: u64,
    size: usize,
) -> Result<FoldOutcome<E>> {
    progressive_train(samples, split, fold, model_cfg, hyper, &[size], seed)
}

/// Progressive resizing: train at `sizes[0]`, then for each larger size
/// reload the best weights and rerun the whole procedure at that
/// resolution. Returns the final best checkpoint tagged with its size.
pub fn progressive_train<E: Element>(
    samples: &[Sample],
    split: &FoldSplit,
    fold: usize,
    model_cfg: &ModelConfig,
    hyper: &TrainHyper,
    sizes: &[usize],
    seed: u64,
) -> Result<FoldOutcome<E>> {
    if sizes.is_empty() {
        return Err(Error::Contract("progressive training needs at least one size".into()));
    }
    let factor = model_cfg.downsample_factor();
    for window in sizes.windows(2) {
        if window[1] <= window[0] {
            return Err(Error::Contract(format!(
                "sizes must increase strictly, got {sizes:?}"
            )));
        }
    }
    for &size in sizes {
        if size == 0 || size % factor != 0 {
            return Err(Error::Shape(format!(
                "training size {size} must be a positive multiple of {factor}"
            )));
        }
    }

    let (train_refs, val_refs) = split_samples(samples, split, fold)?;
    let model = UNetModel::<E>::build(model_cfg, derive_seed(seed, "build", fold as u64))?;

    let epochs = hyper.epochs_per_phase;
    let mut history: Vec<EpochStats> = Vec::new();
    let mut curves: Vec<LrCurve> = Vec::new();
    let mut best = None;
    for (si, &size) in sizes.iter().enumerate() {
        let train: Vec<Sample> =
            train_refs.iter().map(|s| resize(s, size)).collect::<Result<_>>()?;
        let val: Vec<Sample> = val_refs.iter().map(|s| resize(s, size)).collect::<Result<_>>()?;

        let run_seed = derive_seed(seed, &format!("fold{fold}"), si as u64);
        let outcome = run_training_procedure(&model, &train, &val, hyper, run_seed)?;

        for mut row in outcome.history {
            row.epoch += si * 2 * epochs;
            row.phase += si * 2;
            history.push(row);
        }
        curves.extend(outcome.curves);

        // Carry the best weights of this resolution into the next one.
        model.restore_state(&outcome.best_state);
        best = Some(CheckpointManifest {
            model: model_cfg.clone(),
            seed,
            image_size: size,
            folds: split.k,
            fold: Some(fold),
            epochs_per_phase: epochs,
            stlr_cut_frac: hyper.stlr_cut_frac,
            stlr_ratio: hyper.stlr_ratio,
            phase: outcome.best_phase + si * 2,
            epoch: outcome.best_epoch + si * 2 * epochs,
            val_dice: outcome.best_val_dice,
            val_jaccard: outcome.best_val_jaccard,
        });
    }

    let manifest = best.expect("at least one size trained");
    Ok(FoldOutcome { checkpoint: Checkpoint::from_model(&model, manifest), history, curves })
}

/// Eval-mode forward plus sigmoid for one image whose extents divide the
/// model's downsampling factor. Returns a (1,H,W) probability map.
pub fn predict<E: Element>(model: &UNetModel<E>, image: &ImageBuf) -> Result<Tensor<E>> {
    let data: Vec<E> = image.data.iter().map(|&v| E::from_f64(v as f64)).collect();
    let x = Tensor::from_vec([1, 3, image.h, image.w], data)?;
    let tape = Tape::new();
    let logits = model.forward(&tape, &x, Mode::Eval)?;
    let probs = tape.sigmoid(&logits);
    Tensor::from_vec([1, image.h, image.w], probs.to_vec())
}

/// [`predict`] for arbitrary extents: reflection-pads right/bottom to the
/// next multiple of the downsampling factor and crops the output back.
/// On an already-divisible input this is exactly `predict`.
pub fn predict_padded<E: Element>(model: &UNetModel<E>, image: &ImageBuf) -> Result<Tensor<E>> {
    let factor = model.config.downsample_factor();
    let (h, w) = (image.h, image.w);
    if h == 0 || w == 0 {
        return Err(Error::Shape("cannot predict an empty image".into()));
    }
    if h % factor == 0 && w % factor == 0 {
        return predict(model, image);
    }
    let ph = h.div_ceil(factor) * factor;
    let pw = w.div_ceil(factor) * factor;
    let mut padded = ImageBuf::zeros(ph, pw);
    for c in 0..3 {
        for y in 0..ph {
            let sy = reflect_index(y as isize, h);
            for x in 0..pw {
                let sx = reflect_index(x as isize, w);
                padded.set(c, y, x, image.get(c, sy, sx));
            }
        }
    }
    let full = predict(model, &padded)?;
    let data = full.data();
    let mut cropped = Vec::with_capacity(h * w);
    for y in 0..h {
        cropped.extend_from_slice(&data[y * pw..y * pw + w]);
    }
    drop(data);
    Tensor::from_vec([1, h, w], cropped)
}

/// The members of a probability-averaging ensemble, by checkpoint path.
#[derive(Clone, Debug)]
pub struct EnsembleSpec {
    pub checkpoints: Vec<PathBuf>,
    pub threshold: f64,
}

pub struct Ensemble<E: Element> {
    members: Vec<UNetModel<E>>,
    pub threshold: f64,
}

impl<E: Element> Ensemble<E> {
    /// Load all members. The member order is fixed by sorting the paths, so
    /// the probability mean is independent of the listing order.
    pub fn load(spec: &EnsembleSpec) -> Result<Self> {
        if spec.checkpoints.is_empty() {
            return Err(Error::Ensemble("an ensemble needs at least one member".into()));
        }
        let mut paths = spec.checkpoints.clone();
        paths.sort();
        let mut members = Vec::with_capacity(paths.len());
        for path in &paths {
            let checkpoint = Checkpoint::<E>::load(path)?;
            members.push(checkpoint.to_model()?);
        }
        let out_channels = members[0].config.output_channels;
        if members.iter().any(|m| m.config.output_channels != out_channels) {
            return Err(Error::Ensemble("members disagree on output channels".into()));
        }
        Ok(Ensemble { members, threshold: spec.threshold })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Arithmetic mean of the member probability maps, then a binarization
    /// at the threshold (ties count as lesion).
    pub fn predict(&self, image: &ImageBuf) -> Result<(Tensor<E>, Mask)> {
        let mut sum: Option<Vec<E>> = None;
        for model in &self.members {
            let map = predict_padded(model, image)?;
            match sum.as_mut() {
                None => sum = Some(map.to_vec()),
                Some(acc) => {
                    let data = map.data();
                    if data.len() != acc.len() {
                        return Err(Error::Ensemble(format!(
                            "member output sizes disagree: {} vs {}",
                            data.len(),
                            acc.len()
                        )));
                    }
                    for (a, v) in acc.iter_mut().zip(data.iter()) {
                        *a += *v;
                    }
                }
            }
        }
        let mut mean = sum.expect("at least one member");
        let scale = E::from_f64(1.0 / self.members.len() as f64);
        for v in &mut mean {
            *v *= scale;
        }
        let map = Tensor::from_vec([1, image.h, image.w], mean)?;
        let mask = binarize(&map, self.threshold)?;
        Ok((map, mask))
    }
}

/// Compare prediction masks against truth masks by id (PNG stems must
/// biject) and compute the metric report at `cut`.
pub fn evaluate_dirs(
    pred_dir: &Path,
    truth_dir: &Path,
    cut: f64,
) -> Result<(MetricReport, Vec<LoadWarning>)> {
    let pred_ids = png_ids(pred_dir)?;
    let truth_ids = png_ids(truth_dir)?;
    let missing_pred: Vec<&String> = truth_ids.iter().filter(|i| !pred_ids.contains(i)).collect();
    let missing_truth: Vec<&String> = pred_ids.iter().filter(|i| !truth_ids.contains(i)).collect();
    if !missing_pred.is_empty() || !missing_truth.is_empty() {
        return Err(Error::Data(format!(
            "prediction/truth ids disagree: missing predictions {missing_pred:?}, missing truths {missing_truth:?}"
        )));
    }
    if pred_ids.is_empty() {
        return Err(Error::Data(format!("no .png masks found in {}", pred_dir.display())));
    }

    let mut warnings = Vec::new();
    let mut pairs: Vec<(String, Mask, Mask)> = Vec::with_capacity(pred_ids.len());
    for id in &pred_ids {
        let (pred, mut w1) = load_mask_png(&pred_dir.join(format!("{id}.png")))?;
        let (truth, mut w2) = load_mask_png(&truth_dir.join(format!("{id}.png")))?;
        warnings.append(&mut w1);
        warnings.append(&mut w2);
        pairs.push((id.clone(), pred, truth));
    }
    let report = MetricReport::from_masks(
        pairs.iter().map(|(id, p, t)| (id.as_str(), p, t)),
        cut,
    )?;
    Ok((report, warnings))
}
