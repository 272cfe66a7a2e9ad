//! Learning-rate machinery: the slanted triangular (one-cycle) schedule,
//! the range test that sweeps learning rates over mini-batch steps, and
//! the steepest-descent picker that reads the resulting curve.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::{compute_loss, LossKind};
use crate::model::UNetModel;
use crate::optim::Adam;
use crate::tensor::{Element, Mode, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Stlr,
    Constant,
}

/// Parameters of the per-iteration learning-rate schedule. The slanted
/// triangle rises linearly from `lr_max/ratio` to `lr_max` over the first
/// `cut_frac` of training, then decays linearly back.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub total_iterations: usize,
    pub cut_frac: f64,
    pub ratio: f64,
    pub lr_max: f64,
}

impl ScheduleSpec {
    pub fn stlr(total_iterations: usize, lr_max: f64) -> Self {
        ScheduleSpec { kind: ScheduleKind::Stlr, total_iterations, cut_frac: 0.1, ratio: 32.0, lr_max }
    }

    pub fn constant(lr: f64) -> Self {
        ScheduleSpec {
            kind: ScheduleKind::Constant,
            total_iterations: usize::MAX,
            cut_frac: 0.1,
            ratio: 1.0,
            lr_max: lr,
        }
    }

    /// The warm-up length in iterations, at least 1 and less than T.
    pub fn cut(&self) -> usize {
        let t = self.total_iterations;
        if t <= 1 {
            return 1;
        }
        ((t as f64 * self.cut_frac).floor() as usize).clamp(1, t - 1)
    }

    /// Learning rate at iteration `t` in `[0, T]`. Endpoints are exact:
    /// `lr(0) = lr(T) = lr_max/ratio` and `lr(cut) = lr_max`.
    pub fn lr_at(&self, t: usize) -> Result<f64> {
        if self.kind == ScheduleKind::Constant {
            return Ok(self.lr_max);
        }
        let total = self.total_iterations;
        if t > total {
            return Err(Error::Contract(format!(
                "schedule iteration {t} out of range 0..={total}"
            )));
        }
        let cut = self.cut();
        let p = if t < cut {
            t as f64 / cut as f64
        } else if total == cut {
            1.0
        } else {
            1.0 - (t - cut) as f64 / (total - cut) as f64
        };
        Ok(self.lr_max * (1.0 + p * (self.ratio - 1.0)) / self.ratio)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrRecord {
    pub lr: f64,
    pub raw_loss: f64,
    pub smoothed_loss: f64,
}

/// The measurements of one learning-rate range test: strictly increasing
/// learning rates with raw and bias-corrected smoothed losses.
#[derive(Clone, Debug, Default)]
pub struct LrCurve {
    pub records: Vec<LrRecord>,
    pub beta: f64,
}

impl LrCurve {
    /// CSV with header `lr,raw_loss,smoothed_loss`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("lr,raw_loss,smoothed_loss\n");
        for r in &self.records {
            writeln!(out, "{},{},{}", r.lr, r.raw_loss, r.smoothed_loss).expect("string write");
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 {
                if line != "lr,raw_loss,smoothed_loss" {
                    return Err(Error::Data(format!(
                        "{}: expected lr,raw_loss,smoothed_loss header",
                        path.display()
                    )));
                }
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 3 {
                return Err(Error::Data(format!("{}: malformed line '{line}'", path.display())));
            }
            let parse = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| Error::Data(format!("{}: bad number '{s}'", path.display())))
            };
            records.push(LrRecord {
                lr: parse(fields[0])?,
                raw_loss: parse(fields[1])?,
                smoothed_loss: parse(fields[2])?,
            });
        }
        Ok(LrCurve { records, beta: 0.0 })
    }
}

/// Pick the learning rate with the steepest downward gradient of the
/// smoothed loss. Slopes are taken between consecutive records on the
/// log-lr axis (range-test curves are read on a log scale); the returned
/// value is the lr of the record the steepest descent lands on, with ties
/// resolving to the smaller lr.
pub fn pick_lr(curve: &LrCurve) -> Result<f64> {
    if curve.records.len() < 3 {
        return Err(Error::Contract(format!(
            "pick_lr needs at least 3 records, got {}",
            curve.records.len()
        )));
    }
    let mut best: Option<(f64, usize)> = None;
    for i in 0..curve.records.len() - 1 {
        let a = &curve.records[i];
        let b = &curve.records[i + 1];
        let dx = b.lr.log10() - a.lr.log10();
        if dx <= 0.0 {
            return Err(Error::Contract("range-test records must have increasing lrs".into()));
        }
        let slope = (b.smoothed_loss - a.smoothed_loss) / dx;
        let better = match best {
            None => slope < 0.0,
            Some((s, _)) => slope < s,
        };
        if better {
            best = Some((slope, i + 1));
        }
    }
    match best {
        Some((_, idx)) => Ok(curve.records[idx].lr),
        None => Err(Error::LrSelection(
            "no downward slope in the loss curve; widen the lr range or lower lr_start".into(),
        )),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Spacing {
    Linear,
    Log,
}

impl std::str::FromStr for Spacing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Spacing::Linear),
            "log" => Ok(Spacing::Log),
            other => Err(Error::Config(format!("unknown lr spacing '{other}' (linear|log)"))),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RangeTestConfig {
    pub lr_start: f64,
    pub lr_end: f64,
    pub num_iters: usize,
    pub spacing: Spacing,
    /// Exponential smoothing factor, bias-corrected so early records are
    /// not pulled toward the first loss.
    pub smooth_beta: f64,
    /// Stop once the smoothed loss exceeds this multiple of the best seen.
    pub divergence_factor: f64,
}

impl Default for RangeTestConfig {
    fn default() -> Self {
        RangeTestConfig {
            lr_start: 1e-5,
            lr_end: 1.0,
            num_iters: 80,
            spacing: Spacing::Log,
            smooth_beta: 0.98,
            divergence_factor: 4.0,
        }
    }
}

/// The scheduled learning rates of a range test: `num_iters` points from
/// `lr_start` to `lr_end` inclusive.
pub fn range_test_lrs(cfg: &RangeTestConfig) -> Result<Vec<f64>> {
    if !(cfg.lr_start > 0.0 && cfg.lr_start < cfg.lr_end) {
        return Err(Error::Contract(format!(
            "range test needs 0 < lr_start < lr_end, got {} .. {}",
            cfg.lr_start, cfg.lr_end
        )));
    }
    if cfg.num_iters < 2 {
        return Err(Error::Contract("range test needs at least 2 iterations".into()));
    }
    let n = cfg.num_iters;
    Ok((0..n)
        .map(|i| {
            let f = i as f64 / (n - 1) as f64;
            match cfg.spacing {
                Spacing::Linear => cfg.lr_start + f * (cfg.lr_end - cfg.lr_start),
                Spacing::Log => (cfg.lr_start.ln() + f * (cfg.lr_end.ln() - cfg.lr_start.ln())).exp(),
            }
        })
        .collect())
}

/// One optimizer step per iteration, all on a single fixed mini-batch (the
/// first the iterator yields), at increasing learning rates. Reusing one
/// batch keeps batch-composition noise out of the curve, so consecutive
/// loss differences reflect the rate alone. Records the bias-corrected
/// smoothed loss and stops early on divergence (smoothed loss beyond the
/// guard factor, or a non-finite loss). Model, batch-norm statistics and
/// optimizer state are restored bit-exactly before returning.
pub fn lr_range_test<E, I>(
    model: &UNetModel<E>,
    batches: &mut I,
    opt: &mut Adam<E>,
    loss_kind: LossKind,
    cfg: &RangeTestConfig,
) -> Result<LrCurve>
where
    E: Element,
    I: Iterator<Item = (Tensor<E>, Tensor<E>)>,
{
    let lrs = range_test_lrs(cfg)?;
    let Some((images, targets)) = batches.next() else {
        return Err(Error::Contract("range test needs a batch (empty dataset)".into()));
    };
    let snapshot = model.snapshot_state();
    let opt_snapshot = opt.clone();
    let params = model.params();

    let mut curve = LrCurve { records: Vec::new(), beta: cfg.smooth_beta };
    let mut avg = 0.0f64;
    let mut best = f64::INFINITY;

    let result = (|| -> Result<()> {
        for (i, &lr) in lrs.iter().enumerate() {
            let tape = Tape::new();
            let logits = model.forward(&tape, &images, Mode::Train)?;
            let loss = compute_loss(&tape, loss_kind, &logits, &targets)?;
            let raw = loss.item().to_f64();
            if !raw.is_finite() {
                break;
            }
            avg = cfg.smooth_beta * avg + (1.0 - cfg.smooth_beta) * raw;
            let smoothed = avg / (1.0 - cfg.smooth_beta.powi(i as i32 + 1));
            curve.records.push(LrRecord { lr, raw_loss: raw, smoothed_loss: smoothed });
            if smoothed > cfg.divergence_factor * best {
                break;
            }
            best = best.min(smoothed);

            tape.backward(&loss)?;
            opt.step(&params, lr)?;
            for p in &params {
                p.tensor.zero_grad();
            }
        }
        Ok(())
    })();

    // Restore even when the sweep failed part-way.
    model.restore_state(&snapshot);
    *opt = opt_snapshot;
    for p in &params {
        p.tensor.zero_grad();
    }
    result?;
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn spec(t: usize, cut_frac: f64, ratio: f64, lr_max: f64) -> ScheduleSpec {
        ScheduleSpec { kind: ScheduleKind::Stlr, total_iterations: t, cut_frac, ratio, lr_max }
    }

    #[test]
    fn stlr_endpoints_and_peak() {
        let s = spec(100, 0.1, 32.0, 0.01);
        assert_eq!(s.cut(), 10);
        assert!((s.lr_at(0).unwrap() - 0.01 / 32.0).abs() < 1e-15);
        assert!((s.lr_at(10).unwrap() - 0.01).abs() < 1e-15);
        // T=100, cut_frac=0.1, ratio=32, lr_max=0.01 at t=100: 3.125e-4.
        assert!((s.lr_at(100).unwrap() - 3.125e-4).abs() < 1e-15);
    }

    #[test]
    fn stlr_out_of_range_is_contract_error() {
        let s = spec(10, 0.1, 32.0, 0.01);
        assert!(matches!(s.lr_at(11), Err(Error::Contract(_))));
    }

    proptest! {
        #[test]
        fn stlr_is_bounded_and_unimodal(
            t in 3usize..5000,
            cut_frac in 0.01f64..0.9,
            ratio in 1.5f64..128.0,
            lr_max in 1e-6f64..1.0,
        ) {
            let s = spec(t, cut_frac, ratio, lr_max);
            let cut = s.cut();
            let lo = lr_max / ratio;
            let mut prev = None;
            for i in 0..=t {
                let lr = s.lr_at(i).unwrap();
                prop_assert!(lr >= lo - 1e-15 && lr <= lr_max + 1e-15, "t={i} lr={lr}");
                if let Some(p) = prev {
                    if i <= cut {
                        prop_assert!(lr >= p - 1e-15, "not rising at {i}");
                    } else {
                        prop_assert!(lr <= p + 1e-15, "not falling at {i}");
                    }
                }
                prev = Some(lr);
            }
            // Exact endpoint identities.
            prop_assert!((s.lr_at(0).unwrap() - lo).abs() < 1e-12);
            prop_assert!((s.lr_at(cut).unwrap() - lr_max).abs() < 1e-12);
            prop_assert!((s.lr_at(t).unwrap() - lo).abs() < 1e-12);
        }
    }

    fn curve_of(points: &[(f64, f64)]) -> LrCurve {
        LrCurve {
            records: points
                .iter()
                .map(|&(lr, loss)| LrRecord { lr, raw_loss: loss, smoothed_loss: loss })
                .collect(),
            beta: 0.98,
        }
    }

    #[test]
    fn pick_lr_follows_the_steepest_descent() {
        let curve = curve_of(&[(0.001, 1.0), (0.01, 0.8), (0.1, 0.2), (1.0, 0.9)]);
        assert_eq!(pick_lr(&curve).unwrap(), 0.1);
    }

    #[test]
    fn pick_lr_monotone_increase_is_selection_error() {
        let curve = curve_of(&[(0.001, 0.5), (0.01, 0.6), (0.1, 0.9)]);
        assert!(matches!(pick_lr(&curve), Err(Error::LrSelection(_))));
    }

    #[test]
    fn pick_lr_tie_takes_the_smaller_lr() {
        // Symmetric V on the log axis: both descending slopes equal.
        let curve = curve_of(&[
            (1e-4, 1.0),
            (1e-3, 0.6),
            (1e-2, 0.2),
            (1e-1, 0.6),
            (1.0, 1.0),
        ]);
        // Slopes: -0.4, -0.4, +0.4, +0.4; tie between records 1 and 2.
        assert_eq!(pick_lr(&curve).unwrap(), 1e-3);
    }

    #[test]
    fn pick_lr_is_shift_and_scale_invariant() {
        let base = [(0.001, 1.0), (0.01, 0.8), (0.1, 0.2), (1.0, 0.9)];
        let picked = pick_lr(&curve_of(&base)).unwrap();
        let shifted: Vec<(f64, f64)> = base.iter().map(|&(lr, l)| (lr, l + 5.0)).collect();
        let scaled: Vec<(f64, f64)> = base.iter().map(|&(lr, l)| (lr, l * 3.0)).collect();
        assert_eq!(pick_lr(&curve_of(&shifted)).unwrap(), picked);
        assert_eq!(pick_lr(&curve_of(&scaled)).unwrap(), picked);
    }

    #[test]
    fn linear_spacing_hits_documented_points() {
        let cfg = RangeTestConfig {
            lr_start: 0.1,
            lr_end: 0.3,
            num_iters: 3,
            spacing: Spacing::Linear,
            ..Default::default()
        };
        let lrs = range_test_lrs(&cfg).unwrap();
        assert_eq!(lrs.len(), 3);
        for (got, want) in lrs.iter().zip([0.1, 0.2, 0.3]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn log_spacing_is_geometric() {
        let cfg = RangeTestConfig {
            lr_start: 1e-4,
            lr_end: 1.0,
            num_iters: 5,
            spacing: Spacing::Log,
            ..Default::default()
        };
        let lrs = range_test_lrs(&cfg).unwrap();
        for (got, want) in lrs.iter().zip([1e-4, 1e-3, 1e-2, 1e-1, 1.0]) {
            assert!((got - want).abs() < 1e-9 * want.max(1e-4));
        }
    }

    fn tiny_samples(n: usize) -> Vec<crate::data::Sample> {
        (0..n)
            .map(|i| {
                let id = format!("s{i}");
                let (image, mask) =
                    crate::data::synth_image(16, crate::data::derive_seed(2, &id, 0));
                crate::data::Sample::new(id, image, mask).unwrap()
            })
            .collect()
    }

    fn batches<'a>(
        samples: &'a [crate::data::Sample],
        batch: usize,
    ) -> impl Iterator<Item = (crate::tensor::Tensor<f32>, crate::tensor::Tensor<f32>)> + 'a {
        let mut pos = 0usize;
        std::iter::from_fn(move || {
            let refs: Vec<&crate::data::Sample> =
                (0..batch).map(|k| &samples[(pos + k) % samples.len()]).collect();
            pos = (pos + batch) % samples.len();
            crate::data::batch_to_tensors::<f32>(&refs).ok()
        })
    }

    #[test]
    fn range_test_restores_model_and_optimizer_bit_exactly() {
        use crate::model::{ModelConfig, UNetModel};
        use crate::optim::Adam;

        let samples = tiny_samples(6);
        let model = UNetModel::<f32>::build(&ModelConfig::desk(), 3).unwrap();
        let before: Vec<Vec<f32>> = model.params().iter().map(|p| p.tensor.to_vec()).collect();
        let mut opt = Adam::new();
        let cfg = RangeTestConfig {
            lr_start: 1e-4,
            lr_end: 0.2,
            num_iters: 8,
            ..Default::default()
        };
        let mut it = batches(&samples, 3);
        let curve =
            lr_range_test(&model, &mut it, &mut opt, crate::losses::LossKind::Bce, &cfg).unwrap();
        assert!(!curve.records.is_empty());
        assert!(curve.records.windows(2).all(|w| w[0].lr < w[1].lr));

        for (p, b) in model.params().iter().zip(&before) {
            let now = p.tensor.to_vec();
            assert!(
                now.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()),
                "parameter {} not restored",
                p.name
            );
        }
        assert_eq!(opt.step_count(), 0, "optimizer state not restored");
    }

    #[test]
    fn range_test_stops_early_when_the_loss_explodes() {
        use crate::model::{ModelConfig, UNetModel};
        use crate::optim::Adam;

        let samples = tiny_samples(6);
        let model = UNetModel::<f32>::build(&ModelConfig::desk(), 3).unwrap();
        let mut opt = Adam::new();
        // Sweeping far past any usable rate has to trip the divergence
        // guard (or the non-finite stop) well before the end.
        let cfg = RangeTestConfig {
            lr_start: 1e-3,
            lr_end: 1e4,
            num_iters: 60,
            ..Default::default()
        };
        let mut it = batches(&samples, 3);
        let curve =
            lr_range_test(&model, &mut it, &mut opt, crate::losses::LossKind::Bce, &cfg).unwrap();
        assert!(
            curve.records.len() < 60,
            "expected an early stop, got all {} records",
            curve.records.len()
        );
    }

    #[test]
    fn curve_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curve.csv");
        let curve = curve_of(&[(0.001, 1.0), (0.01, 0.8), (0.1, 0.2)]);
        curve.write_csv(&path).unwrap();
        let back = LrCurve::read_csv(&path).unwrap();
        assert_eq!(back.records.len(), 3);
        assert_eq!(back.records[2].lr, 0.1);
        assert_eq!(pick_lr(&back).unwrap(), pick_lr(&curve).unwrap());
    }
}
