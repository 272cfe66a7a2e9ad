//! A self-contained binary-segmentation training engine: a U-Net with a
//! residual encoder, trained with learning-rate range tests, a slanted
//! triangular schedule, layer-group freezing, progressive resizing and
//! k-fold ensembling, evaluated with Jaccard-family metrics.
//!
//! Everything runs on the CPU, in reproducible fashion: the same seeds and
//! thread count give bit-identical training histories. The `book/`
//! directory holds a narrative guide whose code snippets run as doc-tests
//! against this crate.
//!
//! ```
//! use lesionseg::model::{ModelConfig, UNetModel};
//! use lesionseg::tensor::{Mode, Tape, Tensor};
//!
//! let model = UNetModel::<f32>::build(&ModelConfig::desk(), 42)?;
//! let tape = Tape::new();
//! let input = Tensor::zeros([1, 3, 32, 32]);
//! let logits = model.forward(&tape, &input, Mode::Eval)?;
//! assert_eq!(logits.shape().dims(), &[1, 1, 32, 32]);
//! # Ok::<(), lesionseg::Error>(())
//! ```

pub mod archive;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod plot;
pub mod procedure;
pub mod schedule;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

// Every fenced Rust block in the guide compiles and runs as a doc-test,
// keeping the book in lockstep with the crate.
#[cfg(doctest)]
mod book {
    macro_rules! chapter {
        ($name:ident, $path:literal) => {
            #[doc = include_str!($path)]
            pub struct $name;
        };
    }

    chapter!(Introduction, "../../../book/src/introduction.md");
    chapter!(TensorsAndAutograd, "../../../book/src/tensors-and-autograd.md");
    chapter!(LayersAndModel, "../../../book/src/layers-and-model.md");
    chapter!(LossesAndMetrics, "../../../book/src/losses-and-metrics.md");
    chapter!(OptimizerAndSchedules, "../../../book/src/optimizer-and-schedules.md");
    chapter!(DataPipeline, "../../../book/src/data-pipeline.md");
    chapter!(TrainingAndEnsembles, "../../../book/src/training-and-ensembles.md");
    chapter!(CommandLine, "../../../book/src/cli.md");
    chapter!(FileFormats, "../../../book/src/file-formats.md");
}
