//! The `lesionseg` command-line interface: synthetic data generation,
//! learning-rate finding, training, prediction, ensembling and evaluation.
//!
//! Exit codes: 0 success, 2 config error, 3 data error, 4 training/numeric
//! error, 5 I/O error.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::data::{
    color_balance, kfold_split, load_dataset, load_image_png, png_ids, resize, save_mask_png,
    save_prob_png16, synth_generate, FoldSplit, LoadWarning, Sample,
};
use crate::error::{Error, Result};
use crate::layers::{set_trainable, FreezePolicy};
use crate::model::UNetModel;
use crate::optim::Adam;
use crate::plot::{line_chart_svg, Series};
use crate::procedure::{write_history_csv, EpochStats};
use crate::schedule::{lr_range_test, pick_lr, LrCurve};
use crate::tensor::Element;
use crate::train::{
    evaluate_dirs, progressive_train, train_fold, Ensemble, EnsembleSpec, FoldOutcome,
};

#[derive(Parser, Debug)]
#[command(
    name = "lesionseg",
    version,
    about = "Binary lesion segmentation: synthetic data, LR finding, training, ensembling, evaluation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Config resolution shared by the data-driven subcommands. Precedence:
/// defaults < --config file < LESIONSEG_* environment < --set < flags.
#[derive(Args, Debug, Default)]
pub struct ConfigArgs {
    /// Path to a key = value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Override one config key, e.g. --set epochs=5 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    /// Write the fully resolved config to this path, then continue.
    #[arg(long, value_name = "PATH")]
    pub dump_config: Option<PathBuf>,

    /// Shorthand for --set seed=N.
    #[arg(long)]
    pub seed: Option<u64>,

    /// Shorthand for --set data_dir=PATH.
    #[arg(long)]
    pub data: Option<PathBuf>,

    /// Shorthand for --set out_dir=PATH.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,

    /// Shorthand for --set epochs=N.
    #[arg(long)]
    pub epochs: Option<usize>,

    /// Shorthand for --set image_size=N.
    #[arg(long)]
    pub size: Option<usize>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut config = RunConfig::default();
        if let Some(path) = &self.config {
            config.apply_file(path)?;
        }
        config.apply_env()?;
        config.apply_overrides(&self.overrides)?;
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(data) = &self.data {
            config.data_dir = data.clone();
        }
        if let Some(out) = &self.out_dir {
            config.out_dir = out.clone();
        }
        if let Some(epochs) = self.epochs {
            config.epochs = epochs;
        }
        if let Some(size) = self.size {
            config.image_size = size;
        }
        if let Some(path) = &self.dump_config {
            std::fs::write(path, config.dump()).map_err(|e| Error::io(path, e))?;
        }
        Ok(config)
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic lesion dataset (images/ + masks/).
    Synth {
        /// Number of image/mask pairs.
        #[arg(long)]
        n: usize,
        /// Square image size in pixels (>= 16).
        #[arg(long)]
        size: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Write into a non-empty directory.
        #[arg(long, default_value_t = false)]
        force: bool,
    },

    /// Run the learning-rate range test and report the picked rate.
    LrFind {
        #[command(flatten)]
        config: ConfigArgs,
        /// Curve CSV output path.
        #[arg(long, default_value = "lr_curve.csv")]
        out: PathBuf,
        /// Optional SVG chart path.
        #[arg(long)]
        svg: Option<PathBuf>,
    },

    /// Train one fold or all folds with the two-phase procedure.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Train only this fold index.
        #[arg(long, conflicts_with = "all_folds")]
        fold: Option<usize>,
        /// Train every fold in sequence.
        #[arg(long, default_value_t = false)]
        all_folds: bool,
        /// Progressive resizing over the configured `sizes` list.
        #[arg(long, default_value_t = false)]
        progressive: bool,
    },

    /// Predict lesion masks for a directory of images.
    Predict {
        /// A single checkpoint.
        #[arg(long, conflicts_with = "ensemble")]
        checkpoint: Option<PathBuf>,
        /// Comma-separated member checkpoints averaged into an ensemble.
        #[arg(long, value_delimiter = ',')]
        ensemble: Vec<PathBuf>,
        /// Directory of input .png images.
        #[arg(long)]
        images: PathBuf,
        /// Output directory for mask PNGs.
        #[arg(long)]
        out: PathBuf,
        /// Binarization threshold (ties count as lesion).
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Optional directory for 16-bit probability PNGs.
        #[arg(long)]
        probs: Option<PathBuf>,
        /// Apply gray-world color balance before prediction, matching the
        /// training-time default.
        #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
        color_balance: bool,
    },

    /// Score predicted masks against truth masks.
    Evaluate {
        /// Directory of predicted mask PNGs.
        #[arg(long)]
        pred: PathBuf,
        /// Directory of ground-truth mask PNGs.
        #[arg(long)]
        truth: PathBuf,
        /// Threshold-Jaccard cut.
        #[arg(long, default_value_t = 0.65)]
        cut: f64,
        /// Per-image CSV path; the summary CSV lands next to it.
        #[arg(long, default_value = "report.csv")]
        out: PathBuf,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { n, size, seed, out, force } => cmd_synth(n, size, seed, &out, force),
        Command::LrFind { config, out, svg } => cmd_lr_find(&config, &out, svg.as_deref()),
        Command::Train { config, fold, all_folds, progressive } => {
            cmd_train(&config, fold, all_folds, progressive)
        }
        Command::Predict { checkpoint, ensemble, images, out, threshold, probs, color_balance } => {
            cmd_predict(
                checkpoint.as_deref(),
                &ensemble,
                &images,
                &out,
                threshold,
                probs.as_deref(),
                color_balance,
            )
        }
        Command::Evaluate { pred, truth, cut, out } => cmd_evaluate(&pred, &truth, cut, &out),
    }
}

fn print_warnings(warnings: &[LoadWarning]) {
    for w in warnings {
        eprintln!("warning: {}: {}", w.path.display(), w.message);
    }
}

fn cmd_synth(n: usize, size: usize, seed: u64, out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        let non_empty = std::fs::read_dir(out)
            .map_err(|e| Error::io(out, e))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(Error::Config(format!(
                "output directory {} is not empty (pass --force to write anyway)",
                out.display()
            )));
        }
    }
    let ids = synth_generate(n, size, seed, out)?;
    println!(
        "wrote {} image/mask pairs ({}x{}, seed {}) under {}",
        ids.len(),
        size,
        size,
        seed,
        out.display()
    );
    Ok(())
}

/// Load the dataset named by the config, apply color balance when enabled,
/// and resize everything to the given square size.
fn prepare_dataset(config: &RunConfig, size: usize) -> Result<Vec<Sample>> {
    let (samples, warnings) = load_dataset(&config.data_dir)?;
    print_warnings(&warnings);
    samples
        .into_iter()
        .map(|mut sample| {
            if config.color_balance {
                let (balanced, skipped) = color_balance(&sample.image);
                for c in skipped {
                    eprintln!("warning: {}: channel {c} has zero mean, left unscaled", sample.id);
                }
                sample.image = balanced;
            }
            resize(&sample, size)
        })
        .collect()
}

fn dataset_split(config: &RunConfig, samples: &[Sample]) -> Result<FoldSplit> {
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    kfold_split(&ids, config.folds, config.seed)
}

fn cmd_lr_find(config_args: &ConfigArgs, out: &Path, svg: Option<&Path>) -> Result<()> {
    let config = config_args.resolve()?;
    let samples = prepare_dataset(&config, config.image_size)?;
    let split = dataset_split(&config, &samples)?;
    let (train, _val) = crate::train::split_samples(&samples, &split, 0)?;
    let train: Vec<Sample> = train.into_iter().cloned().collect();

    let model = UNetModel::<f32>::build(&config.model_config()?, config.seed)?;
    let groups = model.layer_groups();
    set_trainable(&groups, FreezePolicy::FreezeFirstGroup);
    let mut opt = Adam::new();
    let mut batches = batch_cycle(&train, config.batch_size, config.seed);
    let curve =
        lr_range_test(&model, &mut batches, &mut opt, config.loss_kind()?, &config.range_test_config()?)?;
    curve.write_csv(out)?;
    if let Some(svg_path) = svg {
        write_curve_svg(&curve, svg_path)?;
    }
    let lr = pick_lr(&curve)?;
    println!("picked lr = {lr}");
    Ok(())
}

fn batch_cycle<E: Element>(
    train: &[Sample],
    batch_size: usize,
    seed: u64,
) -> impl Iterator<Item = (crate::tensor::Tensor<E>, crate::tensor::Tensor<E>)> + '_ {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut pos = 0usize;
    std::iter::from_fn(move || {
        if train.is_empty() {
            return None;
        }
        let mut refs = Vec::with_capacity(batch_size);
        for _ in 0..batch_size.max(1) {
            refs.push(&train[order[pos]]);
            pos = (pos + 1) % order.len();
        }
        crate::data::batch_to_tensors::<E>(&refs).ok()
    })
}

fn write_curve_svg(curve: &LrCurve, path: &Path) -> Result<()> {
    let raw: Vec<(f64, f64)> = curve.records.iter().map(|r| (r.lr, r.raw_loss)).collect();
    let smoothed: Vec<(f64, f64)> =
        curve.records.iter().map(|r| (r.lr, r.smoothed_loss)).collect();
    let svg = line_chart_svg(
        "learning-rate range test",
        "learning rate",
        "loss",
        true,
        &[
            Series { name: "raw loss".into(), points: raw },
            Series { name: "smoothed loss".into(), points: smoothed },
        ],
    );
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}

fn write_loss_svg(history: &[EpochStats], path: &Path) -> Result<()> {
    let train: Vec<(f64, f64)> =
        history.iter().map(|r| (r.epoch as f64, r.train_loss)).collect();
    let val: Vec<(f64, f64)> = history.iter().map(|r| (r.epoch as f64, r.val_loss)).collect();
    let svg = line_chart_svg(
        "training history",
        "epoch",
        "loss",
        false,
        &[
            Series { name: "train loss".into(), points: train },
            Series { name: "validation loss".into(), points: val },
        ],
    );
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}

fn cmd_train(
    config_args: &ConfigArgs,
    fold: Option<usize>,
    all_folds: bool,
    progressive: bool,
) -> Result<()> {
    let config = config_args.resolve()?;
    let sizes: Vec<usize> =
        if progressive { config.sizes.clone() } else { vec![config.image_size] };
    let native = sizes.iter().copied().max().unwrap_or(config.image_size);
    let samples = prepare_dataset(&config, native)?;
    let split = dataset_split(&config, &samples)?;
    let hyper = config.hyper()?;
    let model_cfg = config.model_config()?;

    std::fs::create_dir_all(&config.out_dir).map_err(|e| Error::io(&config.out_dir, e))?;
    split.write_csv(&config.out_dir.join("split.csv"))?;

    let folds: Vec<usize> = match (fold, all_folds) {
        (Some(f), false) => vec![f],
        (None, true) => (0..config.folds).collect(),
        (None, false) => vec![0],
        (Some(_), true) => unreachable!("clap conflicts_with"),
    };

    for f in folds {
        let outcome: FoldOutcome<f32> = if progressive {
            progressive_train(&samples, &split, f, &model_cfg, &hyper, &sizes, config.seed)?
        } else {
            train_fold(&samples, &split, f, &model_cfg, &hyper, config.seed, config.image_size)?
        };
        let fold_dir = config.out_dir.join(format!("fold{f}"));
        std::fs::create_dir_all(&fold_dir).map_err(|e| Error::io(&fold_dir, e))?;
        outcome.checkpoint.save(&fold_dir.join("checkpoint.ckpt"))?;
        write_history_csv(&outcome.history, &fold_dir.join("history.csv"))?;
        write_loss_svg(&outcome.history, &fold_dir.join("loss.svg"))?;
        for (i, curve) in outcome.curves.iter().enumerate() {
            curve.write_csv(&fold_dir.join(format!("lr_curve_phase{}.csv", i + 1)))?;
        }
        let m = &outcome.checkpoint.manifest;
        println!(
            "fold {f}: best val_dice {:.4} val_jaccard {:.4} at epoch {} (size {})",
            m.val_dice, m.val_jaccard, m.epoch, m.image_size
        );
    }
    Ok(())
}

fn cmd_predict(
    checkpoint: Option<&Path>,
    ensemble: &[PathBuf],
    images: &Path,
    out: &Path,
    threshold: f64,
    probs_dir: Option<&Path>,
    balance: bool,
) -> Result<()> {
    let members: Vec<PathBuf> = match (checkpoint, ensemble.is_empty()) {
        (Some(path), true) => vec![path.to_path_buf()],
        (None, false) => ensemble.to_vec(),
        (None, true) => {
            return Err(Error::Config("pass --checkpoint or --ensemble".into()));
        }
        (Some(_), false) => unreachable!("clap conflicts_with"),
    };
    let ensemble = Ensemble::<f32>::load(&EnsembleSpec { checkpoints: members, threshold })?;

    let ids = png_ids(images)?;
    if ids.is_empty() {
        return Err(Error::Data(format!("no .png images in {}", images.display())));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    if let Some(dir) = probs_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    for id in &ids {
        let mut image = load_image_png(&images.join(format!("{id}.png")))?;
        if balance {
            image = color_balance(&image).0;
        }
        let (map, mask) = ensemble.predict(&image)?;
        save_mask_png(&mask, &out.join(format!("{id}.png")))?;
        if let Some(dir) = probs_dir {
            save_prob_png16(&map.to_vec(), image.h, image.w, &dir.join(format!("{id}.png")))?;
        }
    }
    println!("wrote {} masks to {}", ids.len(), out.display());
    Ok(())
}

fn cmd_evaluate(pred: &Path, truth: &Path, cut: f64, out: &Path) -> Result<()> {
    let (report, warnings) = evaluate_dirs(pred, truth, cut)?;
    print_warnings(&warnings);
    report.write_csv(out)?;
    let summary_path = summary_path_for(out);
    report.write_summary_csv(&summary_path)?;
    println!(
        "jaccard={:.4} threshold_jaccard={:.4} cut={} images={}",
        report.dataset_jaccard,
        report.dataset_threshold_jaccard,
        report.cut,
        report.per_image.len()
    );
    Ok(())
}

/// `report.csv` -> `report_summary.csv` next to it.
pub fn summary_path_for(out: &Path) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    let mut name = format!("{stem}_summary");
    if let Some(ext) = out.extension().and_then(|e| e.to_str()) {
        name.push('.');
        name.push_str(ext);
    }
    out.with_file_name(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_path_derivation() {
        assert_eq!(
            summary_path_for(Path::new("runs/report.csv")),
            PathBuf::from("runs/report_summary.csv")
        );
        assert_eq!(summary_path_for(Path::new("report")), PathBuf::from("report_summary"));
    }

    #[test]
    fn cli_parses_subcommands() {
        use clap::Parser;
        let cli = Cli::parse_from([
            "lesionseg", "synth", "--n", "10", "--size", "32", "--seed", "1", "--out", "d",
        ]);
        assert!(matches!(cli.command, Command::Synth { n: 10, size: 32, .. }));

        let cli = Cli::parse_from([
            "lesionseg",
            "predict",
            "--ensemble",
            "a.ckpt,b.ckpt",
            "--images",
            "imgs",
            "--out",
            "masks",
        ]);
        match cli.command {
            Command::Predict { ensemble, threshold, .. } => {
                assert_eq!(ensemble.len(), 2);
                assert_eq!(threshold, 0.5);
            }
            other => panic!("parsed {other:?}"),
        }
    }
}
