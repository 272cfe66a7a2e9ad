//! The recorded-operation tape and reverse-mode backward pass.

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};

use super::kernels::{self, ConvDims};
use super::{debug_check_finite, Element, Mode, Tensor};

/// Running mean/variance buffers for a batch-norm layer. Owned by the layer,
/// read and (in train mode) updated by [`Tape::batch_norm2d`].
pub struct BnStats<E: Element> {
    pub mean: RefCell<Vec<E>>,
    pub var: RefCell<Vec<E>>,
}

impl<E: Element> BnStats<E> {
    /// Fresh stats that make eval-mode normalization the identity map.
    pub fn identity(channels: usize) -> Self {
        BnStats {
            mean: RefCell::new(vec![E::zero(); channels]),
            var: RefCell::new(vec![E::one(); channels]),
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.borrow().len()
    }
}

enum Op<E: Element> {
    Add { a: Tensor<E>, b: Tensor<E>, channel_broadcast: bool },
    Mul { a: Tensor<E>, b: Tensor<E> },
    Relu { input: Tensor<E> },
    Sigmoid { input: Tensor<E> },
    Conv2d { input: Tensor<E>, weight: Tensor<E>, bias: Option<Tensor<E>>, stride: usize, padding: usize },
    MaxPool2d { input: Tensor<E>, argmax: Vec<u32> },
    Upsample2x { input: Tensor<E> },
    ConcatChannels { a: Tensor<E>, b: Tensor<E> },
    BatchNorm {
        input: Tensor<E>,
        gamma: Tensor<E>,
        beta: Tensor<E>,
        mean: Vec<E>,
        inv_std: Vec<E>,
        batch_stats: bool,
    },
    Sum { input: Tensor<E> },
    BceWithLogits { logits: Tensor<E>, targets: Tensor<E> },
    SoftJaccard {
        logits: Tensor<E>,
        targets: Tensor<E>,
        probs: Vec<E>,
        intersection: E,
        union: E,
        smooth: E,
    },
}

struct Node<E: Element> {
    out: Tensor<E>,
    op: Op<E>,
}

/// Records forward operations in topological order; every node's inputs
/// precede it by construction. One tape belongs to one forward pass.
pub struct Tape<E: Element> {
    nodes: RefCell<Vec<Node<E>>>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn record(&self, out: Tensor<E>, op: Op<E>) -> Tensor<E> {
        self.nodes.borrow_mut().push(Node { out: out.clone(), op });
        out
    }

    /// Elementwise addition. `b` may also be a rank-1 per-channel vector
    /// broadcast over a rank-4 `a`; no other broadcasting exists.
    pub fn add(&self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        let broadcast = if a.shape() == b.shape() {
            false
        } else if a.shape().rank() == 4 && b.shape().rank() == 1 {
            let (_, c, _, _) = a.shape().dims4()?;
            if b.numel() != c {
                return Err(Error::Shape(format!(
                    "cannot add {} and {}: channel vector length must be {c}",
                    a.shape(),
                    b.shape()
                )));
            }
            true
        } else {
            return Err(Error::Shape(format!("cannot add {} and {}", a.shape(), b.shape())));
        };
        let ad = a.data();
        let bd = b.data();
        let out_data = if broadcast {
            let (n, c, h, w) = a.shape().dims4()?;
            let mut out = Vec::with_capacity(ad.len());
            for bi in 0..n {
                for ci in 0..c {
                    let off = (bi * c + ci) * h * w;
                    for i in off..off + h * w {
                        out.push(ad[i] + bd[ci]);
                    }
                }
            }
            out
        } else {
            ad.iter().zip(bd.iter()).map(|(x, y)| *x + *y).collect()
        };
        debug_check_finite("add", &out_data, &[&ad, &bd]);
        drop(ad);
        drop(bd);
        let out = Tensor::from_vec(a.shape().clone(), out_data)?;
        Ok(self.record(out, Op::Add { a: a.clone(), b: b.clone(), channel_broadcast: broadcast }))
    }

    /// Elementwise product of equal-shape tensors.
    pub fn mul(&self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        if a.shape() != b.shape() {
            return Err(Error::Shape(format!("cannot multiply {} and {}", a.shape(), b.shape())));
        }
        let ad = a.data();
        let bd = b.data();
        let out_data: Vec<E> = ad.iter().zip(bd.iter()).map(|(x, y)| *x * *y).collect();
        debug_check_finite("mul", &out_data, &[&ad, &bd]);
        drop(ad);
        drop(bd);
        let out = Tensor::from_vec(a.shape().clone(), out_data)?;
        Ok(self.record(out, Op::Mul { a: a.clone(), b: b.clone() }))
    }

    pub fn relu(&self, x: &Tensor<E>) -> Tensor<E> {
        let xd = x.data();
        let out_data = kernels::relu_forward(&xd);
        drop(xd);
        let out = Tensor::from_vec(x.shape().clone(), out_data).expect("same shape");
        self.record(out, Op::Relu { input: x.clone() })
    }

    pub fn sigmoid(&self, x: &Tensor<E>) -> Tensor<E> {
        let xd = x.data();
        let out_data = kernels::sigmoid_forward(&xd);
        debug_check_finite("sigmoid", &out_data, &[&xd]);
        drop(xd);
        let out = Tensor::from_vec(x.shape().clone(), out_data).expect("same shape");
        self.record(out, Op::Sigmoid { input: x.clone() })
    }

    /// 2-d cross-correlation over NCHW input with an OxCxKhxKw weight.
    pub fn conv2d(
        &self,
        x: &Tensor<E>,
        weight: &Tensor<E>,
        bias: Option<&Tensor<E>>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor<E>> {
        let (n, c, h, w) = x.shape().dims4()?;
        let (o, wc, kh, kw) = weight.shape().dims4()?;
        if wc != c {
            return Err(Error::Shape(format!(
                "conv2d: input {} has {c} channels but weight {} expects {wc}",
                x.shape(),
                weight.shape()
            )));
        }
        if kh == 0 || kw == 0 || stride == 0 {
            return Err(Error::Shape(format!(
                "conv2d: kernel {kh}x{kw} and stride {stride} must be positive"
            )));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::Shape(format!(
                "conv2d: padded input {}x{} is smaller than the {kh}x{kw} kernel",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        if let Some(b) = bias {
            if b.shape().rank() != 1 || b.numel() != o {
                return Err(Error::Shape(format!(
                    "conv2d: bias {} must be a vector of {o} elements",
                    b.shape()
                )));
            }
        }
        let dims = ConvDims {
            batch: n,
            in_channels: c,
            in_h: h,
            in_w: w,
            out_channels: o,
            kh,
            kw,
            stride,
            padding,
            out_h: kernels::conv_out_extent(h, kh, stride, padding),
            out_w: kernels::conv_out_extent(w, kw, stride, padding),
        };
        let xd = x.data();
        let wd = weight.data();
        let bias_data = bias.map(|b| b.to_vec());
        let out_data = kernels::conv2d_forward(&xd, &wd, bias_data.as_deref(), &dims);
        debug_check_finite("conv2d", &out_data, &[&xd, &wd]);
        drop(xd);
        drop(wd);
        let out = Tensor::from_vec([n, o, dims.out_h, dims.out_w], out_data)?;
        Ok(self.record(
            out,
            Op::Conv2d {
                input: x.clone(),
                weight: weight.clone(),
                bias: bias.cloned(),
                stride,
                padding,
            },
        ))
    }

    /// Non-overlapping k x k max pooling; spatial extents must divide by k.
    pub fn max_pool2d(&self, x: &Tensor<E>, k: usize) -> Result<Tensor<E>> {
        let (n, c, h, w) = x.shape().dims4()?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::Shape(format!(
                "max_pool2d: spatial extents of {} must divide by the window {k}",
                x.shape()
            )));
        }
        let xd = x.data();
        let (out_data, argmax) = kernels::max_pool_forward(&xd, (n, c, h, w), k);
        drop(xd);
        let out = Tensor::from_vec([n, c, h / k, w / k], out_data)?;
        Ok(self.record(out, Op::MaxPool2d { input: x.clone(), argmax }))
    }

    /// Nearest-neighbour 2x upsampling of a rank-4 tensor.
    pub fn upsample_nearest2x(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let (n, c, h, w) = x.shape().dims4()?;
        let xd = x.data();
        let out_data = kernels::upsample2x_forward(&xd, (n, c, h, w));
        drop(xd);
        let out = Tensor::from_vec([n, c, 2 * h, 2 * w], out_data)?;
        Ok(self.record(out, Op::Upsample2x { input: x.clone() }))
    }

    /// Channel concatenation, `a`'s channels first.
    pub fn concat_channels(&self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        let (na, ca, ha, wa) = a.shape().dims4()?;
        let (nb, cb, hb, wb) = b.shape().dims4()?;
        if na != nb || ha != hb || wa != wb {
            return Err(Error::Shape(format!(
                "concat_channels: batch/spatial extents of {} and {} differ",
                a.shape(),
                b.shape()
            )));
        }
        let ad = a.data();
        let bd = b.data();
        let mut out_data = Vec::with_capacity(ad.len() + bd.len());
        for bi in 0..na {
            out_data.extend_from_slice(&ad[bi * ca * ha * wa..(bi + 1) * ca * ha * wa]);
            out_data.extend_from_slice(&bd[bi * cb * hb * wb..(bi + 1) * cb * hb * wb]);
        }
        drop(ad);
        drop(bd);
        let out = Tensor::from_vec([na, ca + cb, ha, wa], out_data)?;
        Ok(self.record(out, Op::ConcatChannels { a: a.clone(), b: b.clone() }))
    }

    /// Batch normalization over the channel axis. Train mode normalizes by
    /// batch statistics and folds them into `stats` with factor `momentum`
    /// (running variance uses the unbiased estimate); eval mode normalizes
    /// by the running statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm2d(
        &self,
        x: &Tensor<E>,
        gamma: &Tensor<E>,
        beta: &Tensor<E>,
        stats: &BnStats<E>,
        mode: Mode,
        momentum: f64,
        eps: f64,
    ) -> Result<Tensor<E>> {
        let (n, c, h, w) = x.shape().dims4()?;
        if gamma.numel() != c || beta.numel() != c || stats.channels() != c {
            return Err(Error::Shape(format!(
                "batch_norm2d: input {} needs {c}-channel gamma/beta/stats, got {}/{}/{}",
                x.shape(),
                gamma.shape(),
                beta.shape(),
                stats.channels()
            )));
        }
        let m = n * h * w;
        let eps_e = E::from_f64(eps);
        let xd = x.data();
        let (mean, inv_std, batch_stats) = match mode {
            Mode::Train => {
                if m < 2 {
                    return Err(Error::Training(format!(
                        "batch_norm2d: train mode needs at least 2 values per channel, got {m} (input {})",
                        x.shape()
                    )));
                }
                let (mean, var) = kernels::bn_batch_stats(&xd, (n, c, h, w));
                let inv_std: Vec<E> = var.iter().map(|&v| E::one() / (v + eps_e).sqrt()).collect();
                let mom = E::from_f64(momentum);
                let unbias = E::from_f64(m as f64 / (m as f64 - 1.0));
                let mut rm = stats.mean.borrow_mut();
                let mut rv = stats.var.borrow_mut();
                for ci in 0..c {
                    rm[ci] = (E::one() - mom) * rm[ci] + mom * mean[ci];
                    rv[ci] = (E::one() - mom) * rv[ci] + mom * var[ci] * unbias;
                }
                (mean, inv_std, true)
            }
            Mode::Eval => {
                let mean = stats.mean.borrow().clone();
                let inv_std: Vec<E> =
                    stats.var.borrow().iter().map(|&v| E::one() / (v + eps_e).sqrt()).collect();
                (mean, inv_std, false)
            }
        };
        let gd = gamma.data();
        let bd = beta.data();
        let out_data = kernels::bn_normalize(&xd, (n, c, h, w), &mean, &inv_std, &gd, &bd);
        debug_check_finite("batch_norm2d", &out_data, &[&xd, &gd, &bd]);
        drop(xd);
        drop(gd);
        drop(bd);
        let out = Tensor::from_vec(x.shape().clone(), out_data)?;
        Ok(self.record(
            out,
            Op::BatchNorm {
                input: x.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                mean,
                inv_std,
                batch_stats,
            },
        ))
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&self, x: &Tensor<E>) -> Tensor<E> {
        let xd = x.data();
        let mut acc = E::zero();
        for v in xd.iter() {
            acc += *v;
        }
        drop(xd);
        let out = Tensor::scalar(acc);
        self.record(out, Op::Sum { input: x.clone() })
    }

    /// Mean binary cross-entropy computed directly from logits in the
    /// stable form `max(z,0) - t*z + ln(1+exp(-|z|))`.
    pub fn bce_with_logits(&self, logits: &Tensor<E>, targets: &Tensor<E>) -> Result<Tensor<E>> {
        check_target_pair(logits, targets)?;
        let zd = logits.data();
        let td = targets.data();
        let loss = kernels::bce_with_logits_forward(&zd, &td);
        drop(zd);
        drop(td);
        let out = Tensor::scalar(loss);
        Ok(self.record(out, Op::BceWithLogits { logits: logits.clone(), targets: targets.clone() }))
    }

    /// Differentiable Jaccard relaxation:
    /// `1 - (I + smooth) / (U + smooth)` with `p = sigmoid(logits)`,
    /// `I = sum(p*t)` and `U = sum(p) + sum(t) - I`.
    pub fn soft_jaccard_loss(
        &self,
        logits: &Tensor<E>,
        targets: &Tensor<E>,
        smooth: f64,
    ) -> Result<Tensor<E>> {
        check_target_pair(logits, targets)?;
        let zd = logits.data();
        let td = targets.data();
        let probs = kernels::sigmoid_forward(&zd);
        let mut intersection = E::zero();
        let mut p_sum = E::zero();
        let mut t_sum = E::zero();
        for i in 0..probs.len() {
            intersection += probs[i] * td[i];
            p_sum += probs[i];
            t_sum += td[i];
        }
        let union = p_sum + t_sum - intersection;
        let smooth_e = E::from_f64(smooth);
        let loss = E::one() - (intersection + smooth_e) / (union + smooth_e);
        drop(zd);
        drop(td);
        let out = Tensor::scalar(loss);
        Ok(self.record(
            out,
            Op::SoftJaccard {
                logits: logits.clone(),
                targets: targets.clone(),
                probs,
                intersection,
                union,
                smooth: smooth_e,
            },
        ))
    }

    /// Reverse pass from a scalar loss. Gradients accumulate into every
    /// `requires_grad` tensor reachable from the loss; the caller zeroes
    /// them between optimizer steps.
    pub fn backward(&self, loss: &Tensor<E>) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {}",
                loss.shape()
            )));
        }
        let nodes = self.nodes.borrow();
        let outputs: HashSet<u64> = nodes.iter().map(|n| n.out.id()).collect();
        let needs = |t: &Tensor<E>| t.requires_grad() || outputs.contains(&t.id());

        let mut slots: HashMap<u64, Slot<E>> = HashMap::new();
        slots.insert(loss.id(), Slot { tensor: loss.clone(), grad: vec![E::one()] });

        for node in nodes.iter().rev() {
            let Some(out_slot) = slots.remove(&node.out.id()) else { continue };
            let gout = out_slot.grad;
            match &node.op {
                Op::Add { a, b, channel_broadcast } => {
                    if needs(a) {
                        let ga = entry(&mut slots, a);
                        for (g, go) in ga.iter_mut().zip(&gout) {
                            *g += *go;
                        }
                    }
                    if needs(b) {
                        let gb = entry(&mut slots, b);
                        if *channel_broadcast {
                            let (n, c, h, w) = a.shape().dims4()?;
                            for bi in 0..n {
                                for ci in 0..c {
                                    let off = (bi * c + ci) * h * w;
                                    let mut acc = E::zero();
                                    for go in &gout[off..off + h * w] {
                                        acc += *go;
                                    }
                                    gb[ci] += acc;
                                }
                            }
                        } else {
                            for (g, go) in gb.iter_mut().zip(&gout) {
                                *g += *go;
                            }
                        }
                    }
                }
                Op::Mul { a, b } => {
                    if needs(a) {
                        let bd = b.to_vec();
                        let ga = entry(&mut slots, a);
                        for i in 0..gout.len() {
                            ga[i] += gout[i] * bd[i];
                        }
                    }
                    if needs(b) {
                        let ad = a.to_vec();
                        let gb = entry(&mut slots, b);
                        for i in 0..gout.len() {
                            gb[i] += gout[i] * ad[i];
                        }
                    }
                }
                Op::Relu { input } => {
                    if needs(input) {
                        let xd = input.to_vec();
                        let gx = entry(&mut slots, input);
                        kernels::relu_backward(&xd, &gout, gx);
                    }
                }
                Op::Sigmoid { input } => {
                    if needs(input) {
                        let yd = node.out.to_vec();
                        let gx = entry(&mut slots, input);
                        kernels::sigmoid_backward(&yd, &gout, gx);
                    }
                }
                Op::Conv2d { input, weight, bias, stride, padding } => {
                    let (n, c, h, w) = input.shape().dims4()?;
                    let (o, _, kh, kw) = weight.shape().dims4()?;
                    let dims = ConvDims {
                        batch: n,
                        in_channels: c,
                        in_h: h,
                        in_w: w,
                        out_channels: o,
                        kh,
                        kw,
                        stride: *stride,
                        padding: *padding,
                        out_h: kernels::conv_out_extent(h, kh, *stride, *padding),
                        out_w: kernels::conv_out_extent(w, kw, *stride, *padding),
                    };
                    if needs(input) {
                        let wd = weight.to_vec();
                        let gx = kernels::conv2d_backward_input(&wd, &gout, &dims);
                        let slot = entry(&mut slots, input);
                        for (g, v) in slot.iter_mut().zip(&gx) {
                            *g += *v;
                        }
                    }
                    let want_w = needs(weight);
                    let want_b = bias.as_ref().map(needs).unwrap_or(false);
                    if want_w || want_b {
                        let xd = input.to_vec();
                        let (gw, gb) = kernels::conv2d_backward_params(&xd, &gout, &dims, want_b);
                        if want_w {
                            let slot = entry(&mut slots, weight);
                            for (g, v) in slot.iter_mut().zip(&gw) {
                                *g += *v;
                            }
                        }
                        if let (true, Some(gb), Some(bias)) = (want_b, gb, bias.as_ref()) {
                            let slot = entry(&mut slots, bias);
                            for (g, v) in slot.iter_mut().zip(&gb) {
                                *g += *v;
                            }
                        }
                    }
                }
                Op::MaxPool2d { input, argmax } => {
                    if needs(input) {
                        let gx = entry(&mut slots, input);
                        kernels::max_pool_backward(argmax, &gout, gx);
                    }
                }
                Op::Upsample2x { input } => {
                    if needs(input) {
                        let (n, c, h, w) = input.shape().dims4()?;
                        let gx = entry(&mut slots, input);
                        kernels::upsample2x_backward(&gout, (n, c, h, w), gx);
                    }
                }
                Op::ConcatChannels { a, b } => {
                    let (n, ca, h, w) = a.shape().dims4()?;
                    let cb = b.shape().dims4()?.1;
                    let plane = h * w;
                    if needs(a) {
                        let ga = entry(&mut slots, a);
                        for bi in 0..n {
                            let src = bi * (ca + cb) * plane;
                            let dst = bi * ca * plane;
                            for i in 0..ca * plane {
                                ga[dst + i] += gout[src + i];
                            }
                        }
                    }
                    if needs(b) {
                        let gb = entry(&mut slots, b);
                        for bi in 0..n {
                            let src = bi * (ca + cb) * plane + ca * plane;
                            let dst = bi * cb * plane;
                            for i in 0..cb * plane {
                                gb[dst + i] += gout[src + i];
                            }
                        }
                    }
                }
                Op::BatchNorm { input, gamma, beta, mean, inv_std, batch_stats } => {
                    let dims = input.shape().dims4()?;
                    let xd = input.to_vec();
                    let gd = gamma.to_vec();
                    let c = dims.1;
                    let mut gx = vec![E::zero(); xd.len()];
                    let mut ggamma = vec![E::zero(); c];
                    let mut gbeta = vec![E::zero(); c];
                    if *batch_stats {
                        kernels::bn_backward_train(
                            &xd, dims, mean, inv_std, &gd, &gout, &mut gx, &mut ggamma, &mut gbeta,
                        );
                    } else {
                        kernels::bn_backward_eval(
                            &xd, dims, mean, inv_std, &gd, &gout, &mut gx, &mut ggamma, &mut gbeta,
                        );
                    }
                    if needs(input) {
                        let slot = entry(&mut slots, input);
                        for (g, v) in slot.iter_mut().zip(&gx) {
                            *g += *v;
                        }
                    }
                    if needs(gamma) {
                        let slot = entry(&mut slots, gamma);
                        for (g, v) in slot.iter_mut().zip(&ggamma) {
                            *g += *v;
                        }
                    }
                    if needs(beta) {
                        let slot = entry(&mut slots, beta);
                        for (g, v) in slot.iter_mut().zip(&gbeta) {
                            *g += *v;
                        }
                    }
                }
                Op::Sum { input } => {
                    if needs(input) {
                        let gx = entry(&mut slots, input);
                        for g in gx.iter_mut() {
                            *g += gout[0];
                        }
                    }
                }
                Op::BceWithLogits { logits, targets } => {
                    if needs(logits) {
                        let zd = logits.to_vec();
                        let td = targets.to_vec();
                        let gz = entry(&mut slots, logits);
                        kernels::bce_with_logits_backward(&zd, &td, gout[0], gz);
                    }
                }
                Op::SoftJaccard { logits, targets, probs, intersection, union, smooth } => {
                    if needs(logits) {
                        let td = targets.to_vec();
                        let gz = entry(&mut slots, logits);
                        let denom = (*union + *smooth) * (*union + *smooth);
                        let i_s = *intersection + *smooth;
                        let u_s = *union + *smooth;
                        for i in 0..probs.len() {
                            let dl_dp = -(td[i] * u_s - i_s * (E::one() - td[i])) / denom;
                            gz[i] += gout[0] * dl_dp * probs[i] * (E::one() - probs[i]);
                        }
                    }
                }
            }
        }

        for slot in slots.values() {
            if slot.tensor.requires_grad() {
                slot.tensor.accumulate_grad(&slot.grad);
            }
        }
        Ok(())
    }
}

struct Slot<E: Element> {
    tensor: Tensor<E>,
    grad: Vec<E>,
}

fn entry<'m, E: Element>(slots: &'m mut HashMap<u64, Slot<E>>, t: &Tensor<E>) -> &'m mut Vec<E> {
    &mut slots
        .entry(t.id())
        .or_insert_with(|| Slot { tensor: t.clone(), grad: vec![E::zero(); t.numel()] })
        .grad
}

fn check_target_pair<E: Element>(logits: &Tensor<E>, targets: &Tensor<E>) -> Result<()> {
    if logits.shape() != targets.shape() {
        return Err(Error::Shape(format!(
            "logits {} and targets {} must have equal shapes",
            logits.shape(),
            targets.shape()
        )));
    }
    let td = targets.data();
    if td.iter().any(|&t| t != E::zero() && t != E::one()) {
        return Err(Error::Contract("targets must contain only 0 and 1".into()));
    }
    Ok(())
}
