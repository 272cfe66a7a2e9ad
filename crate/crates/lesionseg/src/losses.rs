//! Training losses. Both are thin fronts over the differentiable tape ops;
//! BCE-with-logits is the default, the soft Jaccard relaxation ships for
//! comparison runs.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LossKind {
    Bce,
    SoftJaccard { smooth: f64 },
}

impl LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Bce => "bce",
            LossKind::SoftJaccard { .. } => "soft_jaccard",
        }
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bce" => Ok(LossKind::Bce),
            "soft_jaccard" => Ok(LossKind::SoftJaccard { smooth: 1.0 }),
            other => Err(Error::Config(format!("unknown loss '{other}' (bce|soft_jaccard)"))),
        }
    }
}

pub fn bce_with_logits<E: Element>(
    tape: &Tape<E>,
    logits: &Tensor<E>,
    targets: &Tensor<E>,
) -> Result<Tensor<E>> {
    tape.bce_with_logits(logits, targets)
}

pub fn soft_jaccard_loss<E: Element>(
    tape: &Tape<E>,
    logits: &Tensor<E>,
    targets: &Tensor<E>,
    smooth: f64,
) -> Result<Tensor<E>> {
    tape.soft_jaccard_loss(logits, targets, smooth)
}

pub fn compute_loss<E: Element>(
    tape: &Tape<E>,
    kind: LossKind,
    logits: &Tensor<E>,
    targets: &Tensor<E>,
) -> Result<Tensor<E>> {
    match kind {
        LossKind::Bce => bce_with_logits(tape, logits, targets),
        LossKind::SoftJaccard { smooth } => soft_jaccard_loss(tape, logits, targets, smooth),
    }
}
