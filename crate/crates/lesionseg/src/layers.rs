//! Composite layers built from the tensor primitives: convolution blocks,
//! residual blocks, and the layer-group bookkeeping behind the freezing
//! policies used during fine tuning.

use std::cell::Cell;
use std::rc::Rc;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{BnStats, Element, Mode, Tape, Tensor};

/// What role a parameter plays; batch-norm parameters are treated
/// specially by the freezing policies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight,
    ConvBias,
    BnGamma,
    BnBeta,
}

impl ParamKind {
    pub fn is_batch_norm(self) -> bool {
        matches!(self, ParamKind::BnGamma | ParamKind::BnBeta)
    }
}

/// A model parameter with its hierarchical name, e.g.
/// `encoder.stage2.block0.conv1.weight`.
#[derive(Clone)]
pub struct NamedParam<E: Element> {
    pub name: String,
    pub tensor: Tensor<E>,
    pub kind: ParamKind,
}

/// 2-d convolution layer. He fan-in initialization for the weight.
pub struct Conv2dLayer<E: Element> {
    pub weight: Tensor<E>,
    pub bias: Option<Tensor<E>>,
    pub stride: usize,
    pub padding: usize,
}

impl<E: Element> Conv2dLayer<E> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        with_bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let std = (2.0 / fan_in).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let n = out_channels * in_channels * kernel * kernel;
        let data: Vec<E> = (0..n).map(|_| E::from_f64(normal.sample(rng))).collect();
        let weight =
            Tensor::param([out_channels, in_channels, kernel, kernel], data).expect("sizes agree");
        let bias = with_bias
            .then(|| Tensor::param([out_channels], vec![E::zero(); out_channels]).unwrap());
        Conv2dLayer { weight, bias, stride, padding }
    }

    pub fn forward(&self, tape: &Tape<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
        tape.conv2d(x, &self.weight, self.bias.as_ref(), self.stride, self.padding)
    }

    pub fn visit_params(&self, prefix: &str, out: &mut Vec<NamedParam<E>>) {
        out.push(NamedParam {
            name: format!("{prefix}.weight"),
            tensor: self.weight.clone(),
            kind: ParamKind::ConvWeight,
        });
        if let Some(bias) = &self.bias {
            out.push(NamedParam {
                name: format!("{prefix}.bias"),
                tensor: bias.clone(),
                kind: ParamKind::ConvBias,
            });
        }
    }
}

/// Batch normalization layer. A frozen layer pins both its parameters
/// (via the trainable flags) and its running statistics: it normalizes by
/// the stored statistics even in train mode and never updates them.
pub struct BatchNorm2d<E: Element> {
    pub gamma: Tensor<E>,
    pub beta: Tensor<E>,
    pub stats: Rc<BnStats<E>>,
    pub frozen: Rc<Cell<bool>>,
    pub momentum: f64,
    pub eps: f64,
}

impl<E: Element> BatchNorm2d<E> {
    pub fn new(channels: usize, momentum: f64, eps: f64) -> Self {
        BatchNorm2d {
            gamma: Tensor::param([channels], vec![E::one(); channels]).unwrap(),
            beta: Tensor::param([channels], vec![E::zero(); channels]).unwrap(),
            stats: Rc::new(BnStats::identity(channels)),
            frozen: Rc::new(Cell::new(false)),
            momentum,
            eps,
        }
    }

    pub fn forward(&self, tape: &Tape<E>, x: &Tensor<E>, mode: Mode) -> Result<Tensor<E>> {
        let effective = if self.frozen.get() { Mode::Eval } else { mode };
        tape.batch_norm2d(x, &self.gamma, &self.beta, &self.stats, effective, self.momentum, self.eps)
    }

    pub fn visit_params(&self, prefix: &str, out: &mut Vec<NamedParam<E>>) {
        out.push(NamedParam {
            name: format!("{prefix}.gamma"),
            tensor: self.gamma.clone(),
            kind: ParamKind::BnGamma,
        });
        out.push(NamedParam {
            name: format!("{prefix}.beta"),
            tensor: self.beta.clone(),
            kind: ParamKind::BnBeta,
        });
    }
}

/// conv 3x3 -> batch norm -> relu, the decoder building block.
pub struct ConvBnRelu<E: Element> {
    pub conv: Conv2dLayer<E>,
    pub bn: BatchNorm2d<E>,
}

impl<E: Element> ConvBnRelu<E> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        momentum: f64,
        eps: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        ConvBnRelu {
            conv: Conv2dLayer::new(in_channels, out_channels, 3, 1, 1, false, rng),
            bn: BatchNorm2d::new(out_channels, momentum, eps),
        }
    }

    pub fn forward(&self, tape: &Tape<E>, x: &Tensor<E>, mode: Mode) -> Result<Tensor<E>> {
        let y = self.conv.forward(tape, x)?;
        let y = self.bn.forward(tape, &y, mode)?;
        Ok(tape.relu(&y))
    }

    pub fn visit_params(&self, prefix: &str, out: &mut Vec<NamedParam<E>>) {
        self.conv.visit_params(&format!("{prefix}.conv"), out);
        self.bn.visit_params(&format!("{prefix}.bn"), out);
    }
}

/// Residual block: `output = relu(F(x) + shortcut(x))` with
/// `F = bn2 . conv2 . relu . bn1 . conv1`. The shortcut is the identity,
/// or a 1x1 projection when channel counts or stride differ.
pub struct ResidualBlock<E: Element> {
    pub conv1: Conv2dLayer<E>,
    pub bn1: BatchNorm2d<E>,
    pub conv2: Conv2dLayer<E>,
    pub bn2: BatchNorm2d<E>,
    pub projection: Option<Conv2dLayer<E>>,
}

impl<E: Element> ResidualBlock<E> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        momentum: f64,
        eps: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let projection = (stride != 1 || in_channels != out_channels)
            .then(|| Conv2dLayer::new(in_channels, out_channels, 1, stride, 0, true, rng));
        ResidualBlock {
            conv1: Conv2dLayer::new(in_channels, out_channels, 3, stride, 1, false, rng),
            bn1: BatchNorm2d::new(out_channels, momentum, eps),
            conv2: Conv2dLayer::new(out_channels, out_channels, 3, 1, 1, false, rng),
            bn2: BatchNorm2d::new(out_channels, momentum, eps),
            projection,
        }
    }

    pub fn forward(&self, tape: &Tape<E>, x: &Tensor<E>, mode: Mode) -> Result<Tensor<E>> {
        let f = self.conv1.forward(tape, x)?;
        let f = self.bn1.forward(tape, &f, mode)?;
        let f = tape.relu(&f);
        let f = self.conv2.forward(tape, &f)?;
        let f = self.bn2.forward(tape, &f, mode)?;
        let shortcut = match &self.projection {
            Some(proj) => proj.forward(tape, x)?,
            None => x.clone(),
        };
        let sum = tape.add(&f, &shortcut)?;
        Ok(tape.relu(&sum))
    }

    pub fn visit_params(&self, prefix: &str, out: &mut Vec<NamedParam<E>>) {
        self.conv1.visit_params(&format!("{prefix}.conv1"), out);
        self.bn1.visit_params(&format!("{prefix}.bn1"), out);
        self.conv2.visit_params(&format!("{prefix}.conv2"), out);
        self.bn2.visit_params(&format!("{prefix}.bn2"), out);
        if let Some(proj) = &self.projection {
            proj.visit_params(&format!("{prefix}.proj"), out);
        }
    }

    pub fn visit_bn_flags(&self, out: &mut Vec<Rc<Cell<bool>>>) {
        out.push(Rc::clone(&self.bn1.frozen));
        out.push(Rc::clone(&self.bn2.frozen));
    }
}

/// A named slice of the model's parameters plus the frozen-state handles of
/// its batch-norm layers. Groups partition the model: every parameter
/// belongs to exactly one group.
pub struct LayerGroup<E: Element> {
    pub name: String,
    pub params: Vec<NamedParam<E>>,
    pub bn_flags: Vec<Rc<Cell<bool>>>,
}

/// The freezing policies of the fine-tuning procedure.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FreezePolicy {
    /// Parameters of the first group are excluded from optimizer updates;
    /// batch-norm statistics keep updating everywhere.
    FreezeFirstGroup,
    /// Everything trains except batch norm: gamma/beta are excluded from
    /// updates and running statistics are pinned (layers normalize by the
    /// stored statistics even in train mode).
    UnfreezeAllExceptBatchNorm,
    UnfreezeAll,
}

impl FromStr for FreezePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "freeze_first_group" => Ok(FreezePolicy::FreezeFirstGroup),
            "unfreeze_all_except_batchnorm" => Ok(FreezePolicy::UnfreezeAllExceptBatchNorm),
            "unfreeze_all" => Ok(FreezePolicy::UnfreezeAll),
            other => Err(Error::Config(format!("unknown freeze policy '{other}'"))),
        }
    }
}

/// Apply a freezing policy to the whole model. Each policy sets the full
/// trainable/frozen state; policies do not compose.
pub fn set_trainable<E: Element>(groups: &[LayerGroup<E>], policy: FreezePolicy) {
    match policy {
        FreezePolicy::FreezeFirstGroup => {
            for (gi, group) in groups.iter().enumerate() {
                for p in &group.params {
                    p.tensor.set_trainable(gi != 0);
                }
                for flag in &group.bn_flags {
                    flag.set(false);
                }
            }
        }
        FreezePolicy::UnfreezeAllExceptBatchNorm => {
            for group in groups {
                for p in &group.params {
                    p.tensor.set_trainable(!p.kind.is_batch_norm());
                }
                for flag in &group.bn_flags {
                    flag.set(true);
                }
            }
        }
        FreezePolicy::UnfreezeAll => {
            for group in groups {
                for p in &group.params {
                    p.tensor.set_trainable(true);
                }
                for flag in &group.bn_flags {
                    flag.set(false);
                }
            }
        }
    }
}

/// Freeze a single group by name; errors list the known group names.
pub fn freeze_group_by_name<E: Element>(groups: &[LayerGroup<E>], name: &str) -> Result<()> {
    let Some(group) = groups.iter().find(|g| g.name == name) else {
        let known: Vec<&str> = groups.iter().map(|g| g.name.as_str()).collect();
        return Err(Error::Config(format!(
            "unknown layer group '{name}', known groups: {}",
            known.join(", ")
        )));
    };
    for p in &group.params {
        p.tensor.set_trainable(false);
    }
    Ok(())
}
