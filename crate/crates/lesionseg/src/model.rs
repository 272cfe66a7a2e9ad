//! The segmentation model: a residual encoder with tapped intermediate
//! activations and a decoder that upsamples and concatenates, producing
//! one-channel logits at input resolution.
//!
//! The encoder is a ResNet-style backbone: stem conv -> bn -> relu, a 2x2
//! max pool, then four residual stages where each stage after the first
//! halves the spatial extents and (by preset) doubles the channels. Skip
//! taps sit at the resolution-change boundaries: the end of the stem and
//! the ends of stages 1-3. Each decoder step upsamples 2x, concatenates
//! one tap of matching resolution, and applies two conv-bn-relu blocks.
//!
//! With the full preset the stem convolution has stride 2, giving five
//! halvings (inputs must divide by 32) and a final tapless 2x upsample in
//! the head; the desk preset uses a stride-1 stem (divide by 16, no head
//! upsample) so it stays CPU-trainable in minutes.

use std::cell::Cell;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::layers::{
    BatchNorm2d, Conv2dLayer, ConvBnRelu, LayerGroup, NamedParam, ResidualBlock,
};
use crate::tensor::{BnStats, Element, Mode, Tape, Tensor};

/// Architecture hyperparameters. `stage_blocks`/`stage_channels` follow the
/// ResNet34 preset `[3,4,6,3]` / `[64,128,256,512]` at full scale and
/// `[1,1,1,1]` / `[8,16,32,64]` at desk scale.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub output_channels: usize,
    pub stem_channels: usize,
    pub stem_kernel: usize,
    /// 2 for the full preset (inputs divide by 32), 1 for the desk preset
    /// (inputs divide by 16).
    pub stem_stride: usize,
    pub stage_blocks: [usize; 4],
    pub stage_channels: [usize; 4],
    pub decoder_channels: [usize; 4],
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig {
            input_channels: 3,
            output_channels: 1,
            stem_channels: 8,
            stem_kernel: 7,
            stem_stride: 1,
            stage_blocks: [1, 1, 1, 1],
            stage_channels: [8, 16, 32, 64],
            decoder_channels: [32, 16, 8, 8],
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }

    pub fn full() -> Self {
        ModelConfig {
            input_channels: 3,
            output_channels: 1,
            stem_channels: 64,
            stem_kernel: 7,
            stem_stride: 2,
            stage_blocks: [3, 4, 6, 3],
            stage_channels: [64, 128, 256, 512],
            decoder_channels: [256, 128, 64, 32],
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            other => Err(Error::Config(format!("unknown model preset '{other}' (desk|full)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive: [(&str, usize); 4] = [
            ("input_channels", self.input_channels),
            ("output_channels", self.output_channels),
            ("stem_channels", self.stem_channels),
            ("stem_kernel", self.stem_kernel),
        ];
        for (field, value) in positive {
            if value == 0 {
                return Err(Error::Config(format!("model field {field} must be positive")));
            }
        }
        if self.stem_kernel % 2 == 0 {
            return Err(Error::Config("model field stem_kernel must be odd".into()));
        }
        if self.stem_stride != 1 && self.stem_stride != 2 {
            return Err(Error::Config("model field stem_stride must be 1 or 2".into()));
        }
        for (field, values) in [
            ("stage_blocks", &self.stage_blocks),
            ("stage_channels", &self.stage_channels),
            ("decoder_channels", &self.decoder_channels),
        ] {
            if values.contains(&0) {
                return Err(Error::Config(format!("model field {field} must be positive")));
            }
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum < 1.0) {
            return Err(Error::Config("model field bn_momentum must lie in (0,1)".into()));
        }
        if self.bn_eps <= 0.0 {
            return Err(Error::Config("model field bn_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn total_blocks(&self) -> usize {
        self.stage_blocks.iter().sum()
    }

    /// How many times the encoder halves the input: stem stride, one max
    /// pool, and stages 2-4.
    pub fn downsample_factor(&self) -> usize {
        16 * self.stem_stride
    }
}

struct DecoderStep<E: Element> {
    block1: ConvBnRelu<E>,
    block2: ConvBnRelu<E>,
}

/// The built network. Owned by one trainer; parameters are shared handles.
pub struct UNetModel<E: Element> {
    pub config: ModelConfig,
    stem_conv: Conv2dLayer<E>,
    stem_bn: BatchNorm2d<E>,
    stages: Vec<Vec<ResidualBlock<E>>>,
    decoder: Vec<DecoderStep<E>>,
    head_block: Option<ConvBnRelu<E>>,
    head_conv: Conv2dLayer<E>,
}

/// Outcome of an encoder-weight import: which archive arrays were copied
/// into encoder parameters and which were left alone.
#[derive(Debug, Default)]
pub struct ImportReport {
    pub matched: Vec<String>,
    pub unmatched: Vec<String>,
}

/// A plain value snapshot of every parameter and batch-norm statistic,
/// in the model's canonical traversal order.
pub struct ModelState<E: Element> {
    params: Vec<Vec<E>>,
    stats: Vec<(Vec<E>, Vec<E>)>,
}

impl<E: Element> ModelState<E> {
    pub fn param_values(&self) -> &[Vec<E>] {
        &self.params
    }

    pub fn bn_stats(&self) -> &[(Vec<E>, Vec<E>)] {
        &self.stats
    }
}

enum Piece<'a, E: Element> {
    Conv(&'a Conv2dLayer<E>),
    Bn(&'a BatchNorm2d<E>),
}

impl<E: Element> UNetModel<E> {
    /// Deterministic construction from a seed: He fan-in conv weights,
    /// unit gamma / zero beta batch norms, zero biases.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mom, eps) = (config.bn_momentum, config.bn_eps);

        let stem_conv = Conv2dLayer::new(
            config.input_channels,
            config.stem_channels,
            config.stem_kernel,
            config.stem_stride,
            config.stem_kernel / 2,
            false,
            &mut rng,
        );
        let stem_bn = BatchNorm2d::new(config.stem_channels, mom, eps);

        let mut stages = Vec::with_capacity(4);
        let mut in_channels = config.stem_channels;
        for (si, (&blocks, &channels)) in
            config.stage_blocks.iter().zip(&config.stage_channels).enumerate()
        {
            let mut stage = Vec::with_capacity(blocks);
            for bi in 0..blocks {
                let stride = if si > 0 && bi == 0 { 2 } else { 1 };
                stage.push(ResidualBlock::new(in_channels, channels, stride, mom, eps, &mut rng));
                in_channels = channels;
            }
            stages.push(stage);
        }

        // Decoder steps run deepest first; step i consumes the tap at the
        // matching resolution (stage 3, 2, 1, then the stem).
        let tap_channels = [
            config.stage_channels[2],
            config.stage_channels[1],
            config.stage_channels[0],
            config.stem_channels,
        ];
        let mut decoder = Vec::with_capacity(4);
        let mut prev = config.stage_channels[3];
        for (i, &tap) in tap_channels.iter().enumerate() {
            let out = config.decoder_channels[i];
            decoder.push(DecoderStep {
                block1: ConvBnRelu::new(prev + tap, out, mom, eps, &mut rng),
                block2: ConvBnRelu::new(out, out, mom, eps, &mut rng),
            });
            prev = out;
        }

        let head_block = (config.stem_stride == 2)
            .then(|| ConvBnRelu::new(prev, prev, mom, eps, &mut rng));
        let head_conv =
            Conv2dLayer::new(prev, config.output_channels, 1, 1, 0, true, &mut rng);

        Ok(UNetModel {
            config: config.clone(),
            stem_conv,
            stem_bn,
            stages,
            decoder,
            head_block,
            head_conv,
        })
    }

    pub fn num_taps(&self) -> usize {
        self.decoder.len()
    }

    pub fn decoder_steps(&self) -> usize {
        self.decoder.len()
    }

    /// Forward pass to logits. Inputs must be (N, input_channels, H, W)
    /// with H and W divisible by [`ModelConfig::downsample_factor`];
    /// the output is (N, output_channels, H, W).
    pub fn forward(&self, tape: &Tape<E>, x: &Tensor<E>, mode: Mode) -> Result<Tensor<E>> {
        let (_, c, h, w) = x.shape().dims4()?;
        if c != self.config.input_channels {
            return Err(Error::Shape(format!(
                "model expects {} input channels, got {} (input {})",
                self.config.input_channels,
                c,
                x.shape()
            )));
        }
        let factor = self.config.downsample_factor();
        if h == 0 || w == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::Shape(format!(
                "input {} must have spatial extents divisible by {factor}",
                x.shape()
            )));
        }

        let stem = self.stem_conv.forward(tape, x)?;
        let stem = self.stem_bn.forward(tape, &stem, mode)?;
        let stem = tape.relu(&stem);

        let mut taps: Vec<Tensor<E>> = Vec::with_capacity(4);
        taps.push(stem.clone());
        let mut y = tape.max_pool2d(&stem, 2)?;
        for (si, stage) in self.stages.iter().enumerate() {
            for block in stage {
                y = block.forward(tape, &y, mode)?;
            }
            if si < 3 {
                taps.push(y.clone());
            }
        }

        for step in &self.decoder {
            let tap = taps.pop().expect("one tap per decoder step");
            y = tape.upsample_nearest2x(&y)?;
            y = tape.concat_channels(&y, &tap)?;
            y = step.block1.forward(tape, &y, mode)?;
            y = step.block2.forward(tape, &y, mode)?;
        }

        if let Some(head_block) = &self.head_block {
            y = tape.upsample_nearest2x(&y)?;
            y = head_block.forward(tape, &y, mode)?;
        }
        self.head_conv.forward(tape, &y)
    }

    fn visit(&self) -> Vec<(String, Piece<'_, E>)> {
        let mut pieces: Vec<(String, Piece<'_, E>)> = Vec::new();
        pieces.push(("stem.conv".into(), Piece::Conv(&self.stem_conv)));
        pieces.push(("stem.bn".into(), Piece::Bn(&self.stem_bn)));
        for (si, stage) in self.stages.iter().enumerate() {
            for (bi, block) in stage.iter().enumerate() {
                let p = format!("encoder.stage{}.block{bi}", si + 1);
                pieces.push((format!("{p}.conv1"), Piece::Conv(&block.conv1)));
                pieces.push((format!("{p}.bn1"), Piece::Bn(&block.bn1)));
                pieces.push((format!("{p}.conv2"), Piece::Conv(&block.conv2)));
                pieces.push((format!("{p}.bn2"), Piece::Bn(&block.bn2)));
                if let Some(proj) = &block.projection {
                    pieces.push((format!("{p}.proj"), Piece::Conv(proj)));
                }
            }
        }
        for (i, step) in self.decoder.iter().enumerate() {
            let p = format!("decoder.step{i}");
            pieces.push((format!("{p}.block1.conv"), Piece::Conv(&step.block1.conv)));
            pieces.push((format!("{p}.block1.bn"), Piece::Bn(&step.block1.bn)));
            pieces.push((format!("{p}.block2.conv"), Piece::Conv(&step.block2.conv)));
            pieces.push((format!("{p}.block2.bn"), Piece::Bn(&step.block2.bn)));
        }
        if let Some(head_block) = &self.head_block {
            pieces.push(("head.block.conv".into(), Piece::Conv(&head_block.conv)));
            pieces.push(("head.block.bn".into(), Piece::Bn(&head_block.bn)));
        }
        pieces.push(("head.conv".into(), Piece::Conv(&self.head_conv)));
        pieces
    }

    /// Every parameter with its hierarchical name, in canonical order.
    pub fn params(&self) -> Vec<NamedParam<E>> {
        let mut out = Vec::new();
        for (prefix, piece) in self.visit() {
            match piece {
                Piece::Conv(conv) => conv.visit_params(&prefix, &mut out),
                Piece::Bn(bn) => bn.visit_params(&prefix, &mut out),
            }
        }
        out
    }

    fn bn_layers(&self) -> Vec<(String, Rc<BnStats<E>>, Rc<Cell<bool>>)> {
        self.visit()
            .into_iter()
            .filter_map(|(prefix, piece)| match piece {
                Piece::Bn(bn) => Some((prefix, Rc::clone(&bn.stats), Rc::clone(&bn.frozen))),
                Piece::Conv(_) => None,
            })
            .collect()
    }

    fn group_index(name: &str) -> usize {
        if name.starts_with("stem.") || name.starts_with("encoder.stage1.") {
            0
        } else if name.starts_with("encoder.") {
            1
        } else {
            2
        }
    }

    /// The three layer groups of the freezing procedure: (stem + stage 1),
    /// (encoder stages 2-4), (decoder + head). Together they partition the
    /// parameter set.
    pub fn layer_groups(&self) -> Vec<LayerGroup<E>> {
        let names = ["encoder_stem_stage1", "encoder_rest", "decoder_head"];
        let mut groups: Vec<LayerGroup<E>> = names
            .iter()
            .map(|n| LayerGroup { name: n.to_string(), params: Vec::new(), bn_flags: Vec::new() })
            .collect();
        for p in self.params() {
            let gi = Self::group_index(&p.name);
            groups[gi].params.push(p);
        }
        for (name, _, flag) in self.bn_layers() {
            groups[Self::group_index(&name)].bn_flags.push(flag);
        }
        groups
    }

    /// All state arrays (parameters plus batch-norm running statistics) as
    /// (name, extents, values), in canonical order.
    pub fn state_arrays(&self) -> Vec<(String, Vec<usize>, Vec<E>)> {
        let mut out = Vec::new();
        for p in self.params() {
            out.push((p.name.clone(), p.tensor.shape().dims().to_vec(), p.tensor.to_vec()));
        }
        for (prefix, stats, _) in self.bn_layers() {
            let c = stats.channels();
            out.push((format!("{prefix}.running_mean"), vec![c], stats.mean.borrow().clone()));
            out.push((format!("{prefix}.running_var"), vec![c], stats.var.borrow().clone()));
        }
        out
    }

    /// Overwrite a named state array. Errors on unknown names or extent
    /// mismatches.
    pub fn load_state_array(&self, name: &str, dims: &[usize], values: &[E]) -> Result<()> {
        for p in self.params() {
            if p.name == name {
                if p.tensor.shape().dims() != dims {
                    return Err(Error::Checkpoint(format!(
                        "array '{name}' has extents {dims:?} but the model expects {:?}",
                        p.tensor.shape().dims()
                    )));
                }
                return p.tensor.set_data(values);
            }
        }
        for (prefix, stats, _) in self.bn_layers() {
            for (suffix, buf) in
                [("running_mean", &stats.mean), ("running_var", &stats.var)]
            {
                if name == format!("{prefix}.{suffix}") {
                    if dims != [stats.channels()] {
                        return Err(Error::Checkpoint(format!(
                            "array '{name}' has extents {dims:?} but the model expects [{}]",
                            stats.channels()
                        )));
                    }
                    buf.borrow_mut().copy_from_slice(values);
                    return Ok(());
                }
            }
        }
        Err(Error::Checkpoint(format!("model has no state array named '{name}'")))
    }

    /// Copy matching encoder arrays from an external weight archive; the
    /// decoder is never touched. An archive array whose name matches an
    /// encoder array but whose extents differ is an error.
    pub fn import_encoder_weights(&self, archive: &Archive) -> Result<ImportReport> {
        let is_encoder =
            |name: &str| name.starts_with("stem.") || name.starts_with("encoder.");
        let own: Vec<(String, Vec<usize>)> = self
            .state_arrays()
            .into_iter()
            .filter(|(name, _, _)| is_encoder(name))
            .map(|(name, dims, _)| (name, dims))
            .collect();

        let mut report = ImportReport::default();
        for entry in &archive.entries {
            match own.iter().find(|(name, _)| *name == entry.name) {
                Some((name, dims)) => {
                    if &entry.dims != dims {
                        return Err(Error::Import(format!(
                            "array '{}' has extents {:?} but the encoder expects {:?}",
                            entry.name, entry.dims, dims
                        )));
                    }
                    let values = entry.values::<E>().map_err(|_| {
                        Error::Import(format!(
                            "array '{}' has dtype {} but the model uses {}",
                            entry.name,
                            entry.dtype,
                            E::DTYPE
                        ))
                    })?;
                    self.load_state_array(name, dims, &values)?;
                    report.matched.push(entry.name.clone());
                }
                None => report.unmatched.push(entry.name.clone()),
            }
        }
        Ok(report)
    }

    pub fn snapshot_state(&self) -> ModelState<E> {
        ModelState {
            params: self.params().iter().map(|p| p.tensor.to_vec()).collect(),
            stats: self
                .bn_layers()
                .iter()
                .map(|(_, s, _)| (s.mean.borrow().clone(), s.var.borrow().clone()))
                .collect(),
        }
    }

    pub fn restore_state(&self, state: &ModelState<E>) {
        let params = self.params();
        assert_eq!(params.len(), state.params.len(), "state from a different architecture");
        for (p, values) in params.iter().zip(&state.params) {
            p.tensor.set_data(values).expect("snapshot matches");
        }
        let bns = self.bn_layers();
        assert_eq!(bns.len(), state.stats.len(), "state from a different architecture");
        for ((_, stats, _), (mean, var)) in bns.iter().zip(&state.stats) {
            stats.mean.borrow_mut().copy_from_slice(mean);
            stats.var.borrow_mut().copy_from_slice(var);
        }
    }
}
