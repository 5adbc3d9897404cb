//! Condense-block encoder/decoder segmenter.
//!
//! Layout for `P = pool_layers` (default 3) and a palindromic
//! `layers_per_block` of length `2P + 1`:
//!
//! ```text
//! stem: [dw3x3 -> pw1x1] ++ [dw5x5 -> pw1x1]            -> F maps
//! encoder i < P: condense block -> (skip_i) -> transition down
//! bottleneck:    condense block, keep only its new maps
//! decoder i < P: transposed 3x3 (stride 2) + proj1x1(skip_i) -> condense block
//! head:          norm -> relu -> 1x1 conv + bias -> softmax
//! ```
//!
//! Every convolution inside a condense block is an [`LGConvLayer`]. A
//! transition is norm -> relu -> 1x1 conv (halving channels) -> 2x2 max-pool.
//! The upsampling path carries only the maps a block added, as in
//! FC-DenseNet, and skips are merged by element-wise addition after a
//! learned 1x1 projection of the encoder branch.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lg_conv::{CondensationSchedule, InferenceLGConv, LGConvLayer};
use crate::tensor::{BatchStats, Element, Tape, Tensor, Var, NORM_EPS};

/// Depthwise channel multiplier of each stem branch.
const STEM_MULTIPLIER: usize = 4;
const STEM_KERNELS: [usize; 2] = [3, 5];
const NORM_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub input_size: usize,
    pub num_classes: usize,
    pub growth_rate: usize,
    pub groups: usize,
    pub condensation_factor: usize,
    pub layers_per_block: Vec<usize>,
    pub initial_features: usize,
    pub pool_layers: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            input_size: 128,
            num_classes: 4,
            growth_rate: 16,
            groups: 4,
            condensation_factor: 4,
            layers_per_block: vec![2, 3, 4, 5, 4, 3, 2],
            initial_features: 32,
            pool_layers: 3,
        }
    }
}

impl NetConfig {
    /// Every violated constraint, or `Ok` if none.
    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        let want = 2 * self.pool_layers + 1;
        if self.layers_per_block.len() != want {
            v.push(format!(
                "layers_per_block has {} entries, expected 2*pool_layers+1 = {want}",
                self.layers_per_block.len()
            ));
        }
        let rev: Vec<usize> = self.layers_per_block.iter().rev().copied().collect();
        if rev != self.layers_per_block {
            v.push(format!("layers_per_block {:?} is not palindromic", self.layers_per_block));
        }
        if self.layers_per_block.contains(&0) {
            v.push("every block needs at least one layer".into());
        }
        if self.pool_layers == 0 {
            v.push("pool_layers must be at least 1".into());
        }
        let stride = 1usize.checked_shl(self.pool_layers as u32).unwrap_or(0);
        if stride == 0 || self.input_size == 0 || self.input_size % stride != 0 {
            v.push(format!(
                "input_size {} not divisible by 2^pool_layers = 2^{}",
                self.input_size, self.pool_layers
            ));
        }
        if self.num_classes < 2 {
            v.push("num_classes must be at least 2".into());
        }
        if self.groups == 0 || self.growth_rate == 0 || self.growth_rate % self.groups != 0 {
            v.push(format!(
                "growth_rate {} must be a positive multiple of groups {}",
                self.growth_rate, self.groups
            ));
        }
        if self.condensation_factor == 0 {
            v.push("condensation_factor must be at least 1".into());
        }
        if self.initial_features < 2 || self.initial_features % 2 != 0 {
            v.push("initial_features must be even and at least 2".into());
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }
}

/// Channel counts at every stage of a configuration.
#[derive(Clone, Debug, PartialEq, Eq)]
struct Plan {
    /// Input channels of each encoder block.
    enc_in: Vec<usize>,
    /// Output channels of each encoder block (the skip source).
    skip: Vec<usize>,
    bottleneck_in: usize,
    /// Channels upsampled into each decoder stage, deepest first.
    dec_in: Vec<usize>,
    head_in: usize,
}

impl NetConfig {
    fn plan(&self) -> Plan {
        let p = self.pool_layers;
        let k = self.growth_rate;
        let mut enc_in = Vec::with_capacity(p);
        let mut skip = Vec::with_capacity(p);
        let mut c = self.initial_features;
        for i in 0..p {
            enc_in.push(c);
            let out = c.saturating_add(self.layers_per_block[i].saturating_mul(k));
            skip.push(out);
            c = (out / 2).max(1);
        }
        let mut carried = self.layers_per_block[p].saturating_mul(k);
        let mut dec_in = Vec::with_capacity(p);
        let mut head_in = 0;
        for i in (0..p).rev() {
            dec_in.push(carried);
            let added = self.layers_per_block[2 * p - i].saturating_mul(k);
            head_in = carried.saturating_add(added);
            carried = added;
        }
        Plan {
            enc_in,
            skip,
            bottleneck_in: c,
            dec_in,
            head_in,
        }
    }

    /// Trainable weights of the network this configuration builds. The
    /// config must be valid.
    pub fn dense_param_count(&self) -> usize {
        self.count(false)
    }

    /// Normalization running-statistic entries.
    pub fn buffer_count(&self) -> usize {
        self.count(true)
    }

    fn count(&self, buffers: bool) -> usize {
        let plan = self.plan();
        let k = self.growth_rate;
        let p = self.pool_layers;
        // Norm layers carry 2 params and 2 buffers per channel.
        let norm = |c: usize| c.saturating_mul(2);
        let block = |c0: usize, layers: usize| {
            (0..layers).fold(0usize, |acc, j| {
                let c = c0.saturating_add(j.saturating_mul(k));
                let w = if buffers { 0 } else { c.saturating_mul(k).saturating_mul(9) };
                acc.saturating_add(norm(c)).saturating_add(w)
            })
        };
        let weights = |n: usize| if buffers { 0 } else { n };
        let mut total = 0usize;
        let half = self.initial_features / 2;
        for kk in STEM_KERNELS {
            total = total.saturating_add(weights(STEM_MULTIPLIER * kk * kk + half.saturating_mul(STEM_MULTIPLIER)));
        }
        for i in 0..p {
            let out = plan.skip[i];
            let down = (out / 2).max(1);
            total = total
                .saturating_add(block(plan.enc_in[i], self.layers_per_block[i]))
                .saturating_add(norm(out))
                .saturating_add(weights(down.saturating_mul(out)));
        }
        total = total.saturating_add(block(plan.bottleneck_in, self.layers_per_block[p]));
        for (j, &carried) in plan.dec_in.iter().enumerate() {
            let i = p - 1 - j;
            let proj = if plan.skip[i] != carried { carried.saturating_mul(plan.skip[i]) } else { 0 };
            total = total
                .saturating_add(weights(carried.saturating_mul(carried).saturating_mul(9)))
                .saturating_add(weights(proj))
                .saturating_add(block(carried, self.layers_per_block[2 * p - i]));
        }
        total
            .saturating_add(norm(plan.head_in))
            .saturating_add(weights(self.num_classes.saturating_mul(plan.head_in).saturating_add(self.num_classes)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalization; running averages get updated.
    Train,
    /// Running averages in normalization.
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CountMode {
    Dense,
    Alive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Param,
    Buffer,
}

/// Named view of a tensor owned by the network.
pub struct NamedRef<'a, T> {
    pub name: String,
    pub slot: Slot,
    pub tensor: &'a Tensor<T>,
}

pub struct NamedMut<'a, T> {
    pub name: String,
    pub slot: Slot,
    pub tensor: &'a mut Tensor<T>,
}

fn he_normal<T: Element, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    Tensor::randn(shape, (2.0 / fan_in.max(1) as f64).sqrt(), rng)
}

/// Per-channel normalization with learned scale and shift.
#[derive(Clone, Debug)]
pub struct Norm<T> {
    name: String,
    gamma: Tensor<T>,
    beta: Tensor<T>,
    running_mean: Tensor<T>,
    running_var: Tensor<T>,
}

impl<T: Element> Norm<T> {
    fn new(name: String, channels: usize) -> Self {
        Norm {
            name,
            gamma: Tensor::full(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
        }
    }

    fn forward(&self, tape: &mut Tape<T>, x: Var, mode: Mode, stats: &mut Vec<(String, BatchStats<T>)>) -> Result<Var> {
        let g = tape.param(&format!("{}.gamma", self.name), &self.gamma);
        let b = tape.param(&format!("{}.beta", self.name), &self.beta);
        let fixed = match mode {
            Mode::Train => None,
            Mode::Eval => Some((self.running_mean.data(), self.running_var.data())),
        };
        let (y, s) = tape.scale_shift(x, g, b, fixed, NORM_EPS)?;
        if let Some(s) = s {
            stats.push((self.name.clone(), s));
        }
        Ok(y)
    }

    fn update_running(&mut self, s: &BatchStats<T>) {
        let m = T::from_f64_lossy(NORM_MOMENTUM);
        let keep = T::one() - m;
        let unbias = if s.count > 1 {
            T::from_f64_lossy(s.count as f64 / (s.count - 1) as f64)
        } else {
            T::one()
        };
        for (r, &v) in self.running_mean.data_mut().iter_mut().zip(&s.mean) {
            *r = keep * *r + m * v;
        }
        for (r, &v) in self.running_var.data_mut().iter_mut().zip(&s.var) {
            *r = keep * *r + m * v * unbias;
        }
    }

    fn visit<'a>(&'a self, out: &mut Vec<NamedRef<'a, T>>) {
        for (suffix, slot, t) in [
            ("gamma", Slot::Param, &self.gamma),
            ("beta", Slot::Param, &self.beta),
            ("running_mean", Slot::Buffer, &self.running_mean),
            ("running_var", Slot::Buffer, &self.running_var),
        ] {
            out.push(NamedRef {
                name: format!("{}.{suffix}", self.name),
                slot,
                tensor: t,
            });
        }
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<NamedMut<'a, T>>) {
        let name = &self.name;
        for (suffix, slot, t) in [
            ("gamma", Slot::Param, &mut self.gamma),
            ("beta", Slot::Param, &mut self.beta),
            ("running_mean", Slot::Buffer, &mut self.running_mean),
            ("running_var", Slot::Buffer, &mut self.running_var),
        ] {
            out.push(NamedMut {
                name: format!("{name}.{suffix}"),
                slot,
                tensor: t,
            });
        }
    }
}

/// Plain convolution kernel with a stable name.
#[derive(Clone, Debug)]
struct Conv<T> {
    name: String,
    kernel: Tensor<T>,
}

impl<T: Element> Conv<T> {
    fn bind(&self, tape: &mut Tape<T>) -> Var {
        tape.param(&self.name, &self.kernel)
    }

    fn visit<'a>(&'a self, out: &mut Vec<NamedRef<'a, T>>) {
        out.push(NamedRef {
            name: self.name.clone(),
            slot: Slot::Param,
            tensor: &self.kernel,
        });
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<NamedMut<'a, T>>) {
        out.push(NamedMut {
            name: self.name.clone(),
            slot: Slot::Param,
            tensor: &mut self.kernel,
        });
    }
}

/// norm -> relu -> learned group conv, emitting `growth_rate` maps.
#[derive(Clone, Debug)]
pub struct CondenseLayer<T> {
    norm: Norm<T>,
    conv: LGConvLayer<T>,
    compiled: Option<InferenceLGConv<T>>,
}

impl<T: Element> CondenseLayer<T> {
    fn forward(&self, tape: &mut Tape<T>, x: Var, mode: Mode, stats: &mut Vec<(String, BatchStats<T>)>) -> Result<Var> {
        let y = self.norm.forward(tape, x, mode, stats)?;
        let y = tape.relu(y);
        match (&self.compiled, mode) {
            (Some(c), Mode::Eval) => c.forward(tape, y),
            _ => self.conv.forward(tape, y),
        }
    }

    pub fn conv(&self) -> &LGConvLayer<T> {
        &self.conv
    }
}

/// Densely connected stack: each layer reads the block input concatenated
/// with every earlier layer's output.
#[derive(Clone, Debug)]
pub struct CondenseBlock<T> {
    layers: Vec<CondenseLayer<T>>,
    in_channels: usize,
    growth: usize,
}

impl<T: Element> CondenseBlock<T> {
    fn new<R: Rng + ?Sized>(name: &str, in_channels: usize, n_layers: usize, cfg: &NetConfig, rng: &mut R) -> Result<Self> {
        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let c = in_channels + i * cfg.growth_rate;
            layers.push(CondenseLayer {
                norm: Norm::new(format!("{name}.layer{i}.norm"), c),
                conv: LGConvLayer::new(
                    format!("{name}.layer{i}.conv"),
                    c,
                    cfg.growth_rate,
                    3,
                    cfg.groups,
                    cfg.condensation_factor,
                    rng,
                )?,
                compiled: None,
            });
        }
        Ok(CondenseBlock {
            layers,
            in_channels,
            growth: cfg.growth_rate,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.in_channels + self.new_channels()
    }

    pub fn new_channels(&self) -> usize {
        self.layers.len() * self.growth
    }

    /// Returns (input ++ all new maps, new maps only).
    fn forward(&self, tape: &mut Tape<T>, x: Var, mode: Mode, stats: &mut Vec<(String, BatchStats<T>)>) -> Result<(Var, Var)> {
        let mut feats = vec![x];
        let mut cur = x;
        for layer in &self.layers {
            let y = layer.forward(tape, cur, mode, stats)?;
            feats.push(y);
            cur = tape.concat_channels(&feats)?;
        }
        let new = if feats.len() == 2 { feats[1] } else { tape.concat_channels(&feats[1..])? };
        Ok((cur, new))
    }

    fn visit<'a>(&'a self, out: &mut Vec<NamedRef<'a, T>>) {
        for l in &self.layers {
            l.norm.visit(out);
            out.push(NamedRef {
                name: l.conv.weight_name(),
                slot: Slot::Param,
                tensor: l.conv.kernel(),
            });
        }
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<NamedMut<'a, T>>) {
        for l in &mut self.layers {
            l.norm.visit_mut(out);
            let name = l.conv.weight_name();
            out.push(NamedMut {
                name,
                slot: Slot::Param,
                tensor: l.conv.kernel_mut(),
            });
        }
    }
}

#[derive(Clone, Debug)]
struct TransitionDown<T> {
    norm: Norm<T>,
    conv: Conv<T>,
}

#[derive(Clone, Debug)]
struct DecoderStage<T> {
    up: Conv<T>,
    skip_proj: Option<Conv<T>>,
    block: CondenseBlock<T>,
}

#[derive(Clone, Debug)]
struct Stem<T> {
    branches: Vec<(Conv<T>, Conv<T>)>,
}

#[derive(Clone, Debug)]
struct Head<T> {
    norm: Norm<T>,
    conv: Conv<T>,
    bias_name: String,
    bias: Tensor<T>,
}

/// A built network together with its configuration.
#[derive(Clone, Debug)]
pub struct Network<T> {
    config: NetConfig,
    stem: Stem<T>,
    encoder: Vec<(CondenseBlock<T>, TransitionDown<T>)>,
    bottleneck: CondenseBlock<T>,
    decoder: Vec<DecoderStage<T>>,
    head: Head<T>,
}

/// One LG-Conv layer condensed by [`Network::apply_condensation`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CondensationEvent {
    pub epoch: usize,
    pub layer: String,
    pub stage: usize,
}

impl<T: Element> Network<T> {
    pub fn build<R: Rng + ?Sized>(config: &NetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let cfg = config;
        let p = cfg.pool_layers;
        let half = cfg.initial_features / 2;

        let stem = Stem {
            branches: STEM_KERNELS
                .iter()
                .map(|&k| {
                    let dw = Conv {
                        name: format!("stem.dw{k}"),
                        kernel: he_normal(&[STEM_MULTIPLIER, 1, k, k], k * k, rng),
                    };
                    let pw = Conv {
                        name: format!("stem.pw{k}"),
                        kernel: he_normal(&[half, STEM_MULTIPLIER, 1, 1], STEM_MULTIPLIER, rng),
                    };
                    (dw, pw)
                })
                .collect(),
        };

        let plan = cfg.plan();
        let mut encoder = Vec::with_capacity(p);
        for i in 0..p {
            let block = CondenseBlock::new(&format!("enc{i}"), plan.enc_in[i], cfg.layers_per_block[i], cfg, rng)?;
            let out = plan.skip[i];
            let down = (out / 2).max(1);
            let td = TransitionDown {
                norm: Norm::new(format!("down{i}.norm"), out),
                conv: Conv {
                    name: format!("down{i}.conv"),
                    kernel: he_normal(&[down, out, 1, 1], out, rng),
                },
            };
            encoder.push((block, td));
        }
        let bottleneck = CondenseBlock::new("bottleneck", plan.bottleneck_in, cfg.layers_per_block[p], cfg, rng)?;

        let mut decoder = Vec::with_capacity(p);
        for (j, &carried) in plan.dec_in.iter().enumerate() {
            let i = p - 1 - j;
            let up = Conv {
                name: format!("up{i}.conv"),
                kernel: he_normal(&[carried, carried, 3, 3], carried * 9, rng),
            };
            let skip_proj = (plan.skip[i] != carried).then(|| Conv {
                name: format!("up{i}.skip"),
                kernel: he_normal(&[carried, plan.skip[i], 1, 1], plan.skip[i], rng),
            });
            let block = CondenseBlock::new(&format!("dec{i}"), carried, cfg.layers_per_block[2 * p - i], cfg, rng)?;
            decoder.push(DecoderStage { up, skip_proj, block });
        }
        let last = plan.head_in;
        let head = Head {
            norm: Norm::new("head.norm".into(), last),
            conv: Conv {
                name: "head.conv".into(),
                kernel: he_normal(&[cfg.num_classes, last, 1, 1], last, rng),
            },
            bias_name: "head.bias".into(),
            bias: Tensor::zeros(&[cfg.num_classes]),
        };
        Ok(Network {
            config: config.clone(),
            stem,
            encoder,
            bottleneck,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    /// Records the forward pass and returns per-pixel class probabilities
    /// `[B, num_classes, S, S]`. Train mode updates normalization running
    /// averages.
    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        let mut stats = Vec::new();
        let out = self.forward_inner(tape, x, mode, &mut stats)?;
        if !stats.is_empty() {
            let by_name: HashMap<String, BatchStats<T>> = stats.into_iter().collect();
            for norm in self.norms_mut() {
                if let Some(s) = by_name.get(&norm.name) {
                    norm.update_running(s);
                }
            }
        }
        Ok(out)
    }

    /// Eval-mode forward that leaves the network untouched.
    pub fn forward_eval(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        self.forward_inner(tape, x, Mode::Eval, &mut Vec::new())
    }

    /// Eval-mode probabilities for a plain input tensor.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = self.forward_eval(&mut tape, xv)?;
        Ok(tape.value(y).clone())
    }

    fn forward_inner(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        mode: Mode,
        stats: &mut Vec<(String, BatchStats<T>)>,
    ) -> Result<Var> {
        let s = self.config.input_size;
        match tape.shape(x) {
            &[_, 1, h, w] if h == s && w == s => {}
            other => {
                return Err(Error::dim(
                    "network forward",
                    format!("expected [B, 1, {s}, {s}], got {other:?}"),
                ))
            }
        }
        let mut branches = Vec::new();
        for (dw, pw) in &self.stem.branches {
            let k = dw.kernel.shape()[2];
            let dwv = dw.bind(tape);
            let y = tape.conv2d(x, dwv, 1, k / 2)?;
            let pwv = pw.bind(tape);
            branches.push(tape.conv2d(y, pwv, 1, 0)?);
        }
        let mut cur = tape.concat_channels(&branches)?;

        let mut skips = Vec::with_capacity(self.encoder.len());
        for (block, td) in &self.encoder {
            let (full, _) = block.forward(tape, cur, mode, stats)?;
            skips.push(full);
            let y = td.norm.forward(tape, full, mode, stats)?;
            let y = tape.relu(y);
            let wv = td.conv.bind(tape);
            let y = tape.conv2d(y, wv, 1, 0)?;
            cur = tape.max_pool2d(y, 2)?;
        }
        let (_, mut carried) = self.bottleneck.forward(tape, cur, mode, stats)?;
        let mut full = carried;
        for stage in &self.decoder {
            let skip = skips.pop().expect("one skip per decoder stage");
            let wv = stage.up.bind(tape);
            let up = tape.conv_transpose2d(carried, wv, 2, 1, 1)?;
            let skip = match &stage.skip_proj {
                Some(p) => {
                    let pv = p.bind(tape);
                    tape.conv2d(skip, pv, 1, 0)?
                }
                None => skip,
            };
            let merged = tape.add(up, skip)?;
            let (f, new) = stage.block.forward(tape, merged, mode, stats)?;
            full = f;
            carried = new;
        }
        let y = self.head.norm.forward(tape, full, mode, stats)?;
        let y = tape.relu(y);
        let wv = self.head.conv.bind(tape);
        let y = tape.conv2d(y, wv, 1, 0)?;
        let bv = tape.param(&self.head.bias_name, &self.head.bias);
        let y = tape.bias_add(y, bv)?;
        tape.softmax_channels(y)
    }

    fn blocks(&self) -> impl Iterator<Item = &CondenseBlock<T>> {
        self.encoder
            .iter()
            .map(|(b, _)| b)
            .chain(std::iter::once(&self.bottleneck))
            .chain(self.decoder.iter().map(|d| &d.block))
    }

    fn blocks_mut(&mut self) -> impl Iterator<Item = &mut CondenseBlock<T>> {
        self.encoder
            .iter_mut()
            .map(|(b, _)| b)
            .chain(std::iter::once(&mut self.bottleneck))
            .chain(self.decoder.iter_mut().map(|d| &mut d.block))
    }

    pub fn lg_layers(&self) -> Vec<&LGConvLayer<T>> {
        self.blocks().flat_map(|b| b.layers.iter().map(|l| &l.conv)).collect()
    }

    pub fn lg_layers_mut(&mut self) -> Vec<&mut LGConvLayer<T>> {
        self.blocks_mut()
            .flat_map(|b| b.layers.iter_mut().map(|l| &mut l.conv))
            .collect()
    }

    fn norms_mut(&mut self) -> Vec<&mut Norm<T>> {
        let mut out: Vec<&mut Norm<T>> = Vec::new();
        let Network {
            encoder,
            bottleneck,
            decoder,
            head,
            ..
        } = self;
        for (b, td) in encoder.iter_mut() {
            out.extend(b.layers.iter_mut().map(|l| &mut l.norm));
            out.push(&mut td.norm);
        }
        out.extend(bottleneck.layers.iter_mut().map(|l| &mut l.norm));
        for d in decoder.iter_mut() {
            out.extend(d.block.layers.iter_mut().map(|l| &mut l.norm));
        }
        out.push(&mut head.norm);
        out
    }

    /// Every parameter and buffer in declaration order.
    pub fn tensors(&self) -> Vec<NamedRef<'_, T>> {
        let mut out = Vec::new();
        for (dw, pw) in &self.stem.branches {
            dw.visit(&mut out);
            pw.visit(&mut out);
        }
        for (b, td) in &self.encoder {
            b.visit(&mut out);
            td.norm.visit(&mut out);
            td.conv.visit(&mut out);
        }
        self.bottleneck.visit(&mut out);
        for d in &self.decoder {
            d.up.visit(&mut out);
            if let Some(p) = &d.skip_proj {
                p.visit(&mut out);
            }
            d.block.visit(&mut out);
        }
        self.head.norm.visit(&mut out);
        self.head.conv.visit(&mut out);
        out.push(NamedRef {
            name: self.head.bias_name.clone(),
            slot: Slot::Param,
            tensor: &self.head.bias,
        });
        out
    }

    /// Mutable view in the same order as [`Network::tensors`]. Drops any
    /// compiled inference layers since the weights may change.
    pub fn tensors_mut(&mut self) -> Vec<NamedMut<'_, T>> {
        self.decompile();
        let mut out = Vec::new();
        let Network {
            stem,
            encoder,
            bottleneck,
            decoder,
            head,
            ..
        } = self;
        for (dw, pw) in stem.branches.iter_mut() {
            dw.visit_mut(&mut out);
            pw.visit_mut(&mut out);
        }
        for (b, td) in encoder.iter_mut() {
            b.visit_mut(&mut out);
            td.norm.visit_mut(&mut out);
            td.conv.visit_mut(&mut out);
        }
        bottleneck.visit_mut(&mut out);
        for d in decoder.iter_mut() {
            d.up.visit_mut(&mut out);
            if let Some(p) = &mut d.skip_proj {
                p.visit_mut(&mut out);
            }
            d.block.visit_mut(&mut out);
        }
        head.norm.visit_mut(&mut out);
        head.conv.visit_mut(&mut out);
        out.push(NamedMut {
            name: head.bias_name.clone(),
            slot: Slot::Param,
            tensor: &mut head.bias,
        });
        out
    }

    /// Trainable parameters only, declaration order.
    pub fn params_mut(&mut self) -> Vec<NamedMut<'_, T>> {
        self.tensors_mut()
            .into_iter()
            .filter(|t| t.slot == Slot::Param)
            .collect()
    }

    /// Adds the tape's parameter gradients into the parameters' grad slots.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>) {
        let grads = tape.param_grads();
        for p in self.params_mut() {
            if let Some(g) = grads.get(&p.name) {
                p.tensor.accumulate_grad(g);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.tensor.zero_grad();
        }
    }

    /// Re-zeroes pruned LG-Conv weights, e.g. after an optimizer step.
    pub fn enforce_masks(&mut self) {
        for l in self.lg_layers_mut() {
            l.enforce_mask();
        }
    }

    /// Sum of group-lasso penalties of every LG-Conv layer, on the tape.
    pub fn group_lasso_on_tape(&self, tape: &mut Tape<T>) -> Result<Option<Var>> {
        let terms: Vec<(Var, T)> = self
            .lg_layers()
            .iter()
            .map(|l| Ok((l.group_lasso_on_tape(tape)?, T::one())))
            .collect::<Result<_>>()?;
        if terms.is_empty() {
            return Ok(None);
        }
        Ok(Some(tape.combine(&terms)?))
    }

    pub fn group_lasso_penalty(&self) -> f64 {
        self.lg_layers().iter().map(|l| l.group_lasso_penalty()).sum()
    }

    /// Trainable weights: all slots, or only unpruned ones.
    pub fn param_count(&self, mode: CountMode) -> usize {
        let dense: usize = self
            .tensors()
            .iter()
            .filter(|t| t.slot == Slot::Param)
            .map(|t| t.tensor.len())
            .sum();
        match mode {
            CountMode::Dense => dense,
            CountMode::Alive => {
                dense
                    - self
                        .lg_layers()
                        .iter()
                        .map(|l| l.dense_weight_count() - l.alive_weight_count())
                        .sum::<usize>()
            }
        }
    }

    /// Weights held by LG-Conv layers only.
    pub fn lg_param_count(&self, mode: CountMode) -> usize {
        self.lg_layers()
            .iter()
            .map(|l| match mode {
                CountMode::Dense => l.dense_weight_count(),
                CountMode::Alive => l.alive_weight_count(),
            })
            .sum()
    }

    /// Multiply-accumulates of one forward pass on a single image.
    pub fn macs(&self, mode: CountMode) -> u64 {
        let s = self.config.input_size;
        let area = |level: usize| ((s >> level) * (s >> level)) as u64;
        let conv = |t: &Tensor<T>| t.len() as u64;
        let lg = |l: &LGConvLayer<T>| match mode {
            CountMode::Dense => l.dense_weight_count() as u64,
            CountMode::Alive => l.alive_weight_count() as u64,
        };
        let mut total = 0u64;
        for (dw, pw) in &self.stem.branches {
            total += (conv(&dw.kernel) + conv(&pw.kernel)) * area(0);
        }
        for (i, (b, td)) in self.encoder.iter().enumerate() {
            total += b.layers.iter().map(|l| lg(&l.conv)).sum::<u64>() * area(i);
            total += conv(&td.conv.kernel) * area(i);
        }
        let p = self.encoder.len();
        total += self.bottleneck.layers.iter().map(|l| lg(&l.conv)).sum::<u64>() * area(p);
        for (j, d) in self.decoder.iter().enumerate() {
            let level = p - 1 - j;
            // transposed conv: every input pixel touches the whole kernel
            total += conv(&d.up.kernel) * area(level + 1);
            if let Some(sp) = &d.skip_proj {
                total += conv(&sp.kernel) * area(level);
            }
            total += d.block.layers.iter().map(|l| lg(&l.conv)).sum::<u64>() * area(level);
        }
        total + conv(&self.head.conv.kernel) * area(0)
    }

    /// Spatial side length at the input of each encoder block and the
    /// bottleneck.
    pub fn encoder_sizes(&self) -> Vec<usize> {
        (0..=self.config.pool_layers)
            .map(|i| self.config.input_size >> i)
            .collect()
    }

    /// Fires one condensing stage on every LG-Conv layer when `epoch` is a
    /// schedule boundary.
    pub fn apply_condensation(&mut self, epoch: usize, sched: &CondensationSchedule) -> Result<Vec<CondensationEvent>> {
        let Some(_) = sched.fires_at(epoch) else {
            return Ok(Vec::new());
        };
        self.decompile();
        let mut events = Vec::new();
        for l in self.lg_layers_mut() {
            if l.is_fully_condensed() {
                continue;
            }
            l.condense()?;
            events.push(CondensationEvent {
                epoch,
                layer: l.name().to_string(),
                stage: l.stage(),
            });
        }
        Ok(events)
    }

    /// Swaps every LG-Conv layer for its gather + grouped-conv form in
    /// eval-mode forwards. Fails unless all layers are fully condensed.
    pub fn compile_inference(&mut self) -> Result<()> {
        for b in self.blocks_mut() {
            for l in &mut b.layers {
                l.compiled = Some(l.conv.to_inference()?);
            }
        }
        Ok(())
    }

    pub fn is_compiled(&self) -> bool {
        self.blocks().all(|b| b.layers.iter().all(|l| l.compiled.is_some()))
    }

    pub fn decompile(&mut self) {
        for b in self.blocks_mut() {
            for l in &mut b.layers {
                l.compiled = None;
            }
        }
    }

    /// Weights stored by the compiled form (compact LG-Conv kernels plus
    /// every other parameter).
    pub fn compiled_param_count(&self) -> Option<usize> {
        let mut lg_compact = 0;
        for b in self.blocks() {
            for l in &b.layers {
                lg_compact += l.compiled.as_ref()?.weight_count();
            }
        }
        Some(self.param_count(CountMode::Dense) - self.lg_param_count(CountMode::Dense) + lg_compact)
    }
}
