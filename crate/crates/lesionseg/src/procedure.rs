//! The four-step fine-tuning procedure driver: freeze the first layer
//! group, find a learning rate with the range test, train under the
//! slanted triangular schedule for the configured epochs, then unfreeze
//! everything except batch norm and repeat the last two steps.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{augment, batch_to_tensors, derive_seed, AugmentParams, Sample};
use crate::error::{Error, Result};
use crate::layers::{set_trainable, FreezePolicy};
use crate::losses::{compute_loss, LossKind};
use crate::metrics::{binarize, dice, jaccard, PerImageMetrics};
use crate::model::{ModelState, UNetModel};
use crate::optim::Adam;
use crate::schedule::{lr_range_test, pick_lr, LrCurve, RangeTestConfig, ScheduleKind, ScheduleSpec};
use crate::tensor::{Element, Mode, Tape, Tensor};

/// Training hyperparameters of one procedure run.
#[derive(Clone, Debug)]
pub struct TrainHyper {
    pub epochs_per_phase: usize,
    pub batch_size: usize,
    pub loss: LossKind,
    /// Binarization threshold for validation metrics.
    pub threshold: f64,
    pub range_test: RangeTestConfig,
    pub stlr_cut_frac: f64,
    pub stlr_ratio: f64,
    pub augment: AugmentParams,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            epochs_per_phase: 30,
            batch_size: 8,
            loss: LossKind::Bce,
            threshold: 0.5,
            range_test: RangeTestConfig::default(),
            stlr_cut_frac: 0.1,
            stlr_ratio: 32.0,
            augment: AugmentParams::default(),
        }
    }
}

/// One row of the training history.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub phase: usize,
    pub lr_max: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_dice: f64,
    pub val_jaccard: f64,
}

/// History CSV: `epoch,phase,lr_max,train_loss,val_loss,val_dice,val_jaccard`.
pub fn write_history_csv(history: &[EpochStats], path: &Path) -> Result<()> {
    let mut out = String::from("epoch,phase,lr_max,train_loss,val_loss,val_dice,val_jaccard\n");
    for row in history {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            row.epoch, row.phase, row.lr_max, row.train_loss, row.val_loss, row.val_dice,
            row.val_jaccard
        )
        .expect("string write");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub struct ProcedureOutcome<E: Element> {
    pub history: Vec<EpochStats>,
    pub curves: Vec<LrCurve>,
    pub best_state: ModelState<E>,
    pub best_epoch: usize,
    pub best_phase: usize,
    pub best_val_dice: f64,
    pub best_val_jaccard: f64,
}

pub struct EvalStats {
    pub loss: f64,
    pub dice: f64,
    pub jaccard: f64,
    pub per_image: Vec<PerImageMetrics>,
}

/// Eval-mode pass over a sample set: mean loss plus per-image Jaccard/Dice
/// of the thresholded sigmoid outputs.
pub fn evaluate_on_samples<E: Element>(
    model: &UNetModel<E>,
    samples: &[Sample],
    batch_size: usize,
    loss_kind: LossKind,
    threshold: f64,
) -> Result<EvalStats> {
    if samples.is_empty() {
        return Err(Error::Contract("evaluation needs at least one sample".into()));
    }
    let mut loss_sum = 0.0f64;
    let mut per_image = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (images, targets) = batch_to_tensors::<E>(&refs)?;
        let tape = Tape::new();
        let logits = model.forward(&tape, &images, Mode::Eval)?;
        let loss = compute_loss(&tape, loss_kind, &logits, &targets)?;
        loss_sum += loss.item().to_f64() * chunk.len() as f64;

        let probs = tape.sigmoid(&logits);
        let data = probs.data();
        let plane = chunk[0].image.h * chunk[0].image.w;
        for (bi, sample) in chunk.iter().enumerate() {
            let slice = &data[bi * plane..(bi + 1) * plane];
            let map = Tensor::<E>::from_vec([1, sample.image.h, sample.image.w], slice.to_vec())?;
            let pred = binarize(&map, threshold)?;
            per_image.push(PerImageMetrics {
                id: sample.id.clone(),
                jaccard: jaccard(&pred, &sample.mask)?,
                dice: dice(&pred, &sample.mask)?,
            });
        }
    }
    let n = samples.len() as f64;
    Ok(EvalStats {
        loss: loss_sum / n,
        dice: per_image.iter().map(|m| m.dice).sum::<f64>() / n,
        jaccard: per_image.iter().map(|m| m.jaccard).sum::<f64>() / n,
        per_image,
    })
}

/// Infinite cycling batch source for the range test: a fixed shuffled
/// order, no augmentation.
fn range_test_batches<'a, E: Element>(
    train: &'a [Sample],
    batch_size: usize,
    seed: u64,
) -> impl Iterator<Item = (Tensor<E>, Tensor<E>)> + 'a {
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut pos = 0usize;
    std::iter::from_fn(move || {
        if train.is_empty() {
            return None;
        }
        let mut refs = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            refs.push(&train[order[pos]]);
            pos = (pos + 1) % order.len();
        }
        batch_to_tensors::<E>(&refs).ok()
    })
}

/// Run the full two-phase procedure on a prepared train/validation split.
/// Epochs number 1..=2*epochs_per_phase across the run; the best state is
/// the strictly-best validation Dice over all epochs.
pub fn run_training_procedure<E: Element>(
    model: &UNetModel<E>,
    train: &[Sample],
    val: &[Sample],
    hyper: &TrainHyper,
    seed: u64,
) -> Result<ProcedureOutcome<E>> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Contract(format!(
            "procedure needs non-empty splits, got {} train / {} validation",
            train.len(),
            val.len()
        )));
    }
    let params = model.params();
    let groups = model.layer_groups();
    let epochs = hyper.epochs_per_phase;
    let steps_per_epoch = train.len().div_ceil(hyper.batch_size.max(1));

    let mut history = Vec::with_capacity(2 * epochs);
    let mut curves = Vec::with_capacity(2);
    let mut best: Option<(f64, f64, usize, usize, ModelState<E>)> = None;

    for phase in 1..=2usize {
        let policy = if phase == 1 {
            FreezePolicy::FreezeFirstGroup
        } else {
            FreezePolicy::UnfreezeAllExceptBatchNorm
        };
        set_trainable(&groups, policy);
        let mut opt = Adam::new();

        let mut batches = range_test_batches::<E>(
            train,
            hyper.batch_size,
            derive_seed(seed, "range_test", phase as u64),
        );
        let curve = lr_range_test(model, &mut batches, &mut opt, hyper.loss, &hyper.range_test)?;
        let lr_max = pick_lr(&curve)?;
        curves.push(curve);

        let spec = ScheduleSpec {
            kind: ScheduleKind::Stlr,
            total_iterations: epochs * steps_per_epoch,
            cut_frac: hyper.stlr_cut_frac,
            ratio: hyper.stlr_ratio,
            lr_max,
        };
        let mut t = 0usize;
        for epoch_in_phase in 1..=epochs {
            let epoch = (phase - 1) * epochs + epoch_in_phase;
            let mut order: Vec<usize> = (0..train.len()).collect();
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(seed, "shuffle", epoch as u64));
            order.shuffle(&mut rng);

            let mut train_loss_sum = 0.0f64;
            for chunk in order.chunks(hyper.batch_size.max(1)) {
                let augmented: Vec<Sample> = chunk
                    .iter()
                    .map(|&i| {
                        augment(
                            &train[i],
                            &hyper.augment,
                            derive_seed(seed, &train[i].id, epoch as u64),
                        )
                    })
                    .collect();
                let refs: Vec<&Sample> = augmented.iter().collect();
                let (images, targets) = batch_to_tensors::<E>(&refs)?;

                let tape = Tape::new();
                let logits = model.forward(&tape, &images, Mode::Train)?;
                let loss = compute_loss(&tape, hyper.loss, &logits, &targets)?;
                let raw = loss.item().to_f64();
                if !raw.is_finite() {
                    return Err(Error::Training(format!(
                        "non-finite loss at phase {phase}, epoch {epoch}, step {t}"
                    )));
                }
                train_loss_sum += raw * chunk.len() as f64;
                tape.backward(&loss)?;
                opt.step(&params, spec.lr_at(t.min(spec.total_iterations))?)?;
                for p in &params {
                    p.tensor.zero_grad();
                }
                t += 1;
            }

            let eval =
                evaluate_on_samples(model, val, hyper.batch_size, hyper.loss, hyper.threshold)?;
            history.push(EpochStats {
                epoch,
                phase,
                lr_max,
                train_loss: train_loss_sum / train.len() as f64,
                val_loss: eval.loss,
                val_dice: eval.dice,
                val_jaccard: eval.jaccard,
            });
            let strictly_better = match &best {
                None => true,
                Some((best_dice, ..)) => eval.dice > *best_dice,
            };
            if strictly_better {
                best = Some((eval.dice, eval.jaccard, epoch, phase, model.snapshot_state()));
            }
        }
    }

    let (best_val_dice, best_val_jaccard, best_epoch, best_phase, best_state) =
        best.expect("at least one epoch ran");
    Ok(ProcedureOutcome {
        history,
        curves,
        best_state,
        best_epoch,
        best_phase,
        best_val_dice,
        best_val_jaccard,
    })
}
