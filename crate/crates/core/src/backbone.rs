//! The pretrained fusion network, cut into a feature extractor (FE) and a
//! channel mapper (CM).
//!
//! ```text
//! x  = concat(up(Y), P)                      (C+1 channels)
//! h0 = relu(conv_in(x))                      (S channels)
//! hi = h(i-1) + conv_b(relu(conv_a(h(i-1))))  i = 1..k
//! Z  = hk                                    FE output
//! X  = conv_cm(Z) + up(Y)                    CM output
//! ```
//! Every convolution is 3×3 with reflect padding.

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rand_pcg::Pcg64;
use rayon::prelude::*;

use crate::error::{bail, Result};
use crate::tensor::{AdamConfig, AdamState, PadMode, Real, Tape, Tensor, Var};
use crate::weights::WeightArchive;

pub const KERNEL: usize = 3;
/// Scale applied to the He-initialized channel-mapper weights.
pub const MAPPER_INIT_SCALE: f64 = 0.1;

/// One 3×3 convolution's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T: Real = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> ConvLayer<T> {
    /// He-normal weights (`std = sqrt(2 / fan_in)`), zero bias.
    pub fn he(cin: usize, cout: usize, rng: &mut Pcg64) -> Self {
        let std = (2.0 / (cin * KERNEL * KERNEL) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let data = (0..cout * cin * KERNEL * KERNEL).map(|_| T::from_f64(normal.sample(rng))).collect();
        ConvLayer { weight: Tensor::from_vec([cout, cin, KERNEL, KERNEL], data).expect("shape"), bias: Tensor::zeros([cout, 1, 1, 1]) }
    }

    pub fn zeros(cin: usize, cout: usize) -> Self {
        ConvLayer { weight: Tensor::zeros([cout, cin, KERNEL, KERNEL]), bias: Tensor::zeros([cout, 1, 1, 1]) }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub(crate) fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundConv {
        BoundConv { weight: tape.leaf(self.weight.clone(), trainable), bias: tape.leaf(self.bias.clone(), trainable) }
    }

    pub(crate) fn cast<U: Real>(&self) -> ConvLayer<U> {
        ConvLayer { weight: self.weight.cast(), bias: self.bias.cast() }
    }
}

/// Tape handles of a bound [`ConvLayer`].
#[derive(Clone, Copy, Debug)]
pub struct BoundConv {
    pub weight: Var,
    pub bias: Var,
}

impl BoundConv {
    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, input: Var) -> Result<Var> {
        tape.conv2d(input, self.weight, Some(self.bias), PadMode::Reflect)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub bands: usize,
    pub features: usize,
    pub blocks: usize,
    pub ratio: usize,
}

impl BackboneConfig {
    pub fn new(bands: usize, features: usize, blocks: usize, ratio: usize) -> Self {
        BackboneConfig { bands, features, blocks, ratio }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bands == 0 || self.features < self.bands || self.blocks == 0 || self.ratio == 0 {
            bail!(Config, "invalid backbone config {self:?} (need S >= C >= 1, k >= 1, r >= 1)");
        }
        Ok(())
    }

    /// `(C+1)·S·9 + S + k·2·(S²·9 + S) + S·C·9 + C`.
    pub fn param_count(&self) -> usize {
        let (c, s, k) = (self.bands, self.features, self.blocks);
        (c + 1) * s * 9 + s + k * 2 * (s * s * 9 + s) + s * c * 9 + c
    }

    /// Number of 3×3 convolutions between input and output, i.e. the
    /// receptive-field radius in pixels: `2k + 2`.
    pub fn receptive_radius(&self) -> usize {
        2 * self.blocks + 2
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone<T: Real = f32> {
    config: BackboneConfig,
    pub input: ConvLayer<T>,
    pub blocks: Vec<(ConvLayer<T>, ConvLayer<T>)>,
    pub mapper: ConvLayer<T>,
    frozen: bool,
}

/// Tape handles of a bound backbone; FE and CM halves can be used separately.
#[derive(Clone, Debug)]
pub struct BoundBackbone {
    input: BoundConv,
    blocks: Vec<(BoundConv, BoundConv)>,
    mapper: BoundConv,
    ratio: usize,
}

impl BoundBackbone {
    /// `up(Y)`, the shared residual shortcut and FE input.
    pub fn upsample<T: Real>(&self, tape: &mut Tape<T>, lrms: Var) -> Result<Var> {
        tape.upsample(lrms, self.ratio)
    }

    /// FE: fused latent `Z` from `up(Y)` and `P`.
    pub fn fe_forward<T: Real>(&self, tape: &mut Tape<T>, up_lrms: Var, pan: Var) -> Result<Var> {
        let x = tape.concat(up_lrms, pan)?;
        let h = self.input.apply(tape, x)?;
        let mut h = tape.relu(h);
        for (a, b) in &self.blocks {
            let t = a.apply(tape, h)?;
            let t = tape.relu(t);
            let t = b.apply(tape, t)?;
            h = tape.add(h, t)?;
        }
        Ok(h)
    }

    /// CM: `conv(Z) + up(Y)`.
    pub fn cm_forward<T: Real>(&self, tape: &mut Tape<T>, z: Var, up_lrms: Var) -> Result<Var> {
        let m = self.mapper.apply(tape, z)?;
        tape.add(m, up_lrms)
    }

    pub fn params(&self) -> Vec<Var> {
        let mut v = vec![self.input.weight, self.input.bias];
        for (a, b) in &self.blocks {
            v.extend([a.weight, a.bias, b.weight, b.bias]);
        }
        v.extend([self.mapper.weight, self.mapper.bias]);
        v
    }
}

fn check_pair_tensors<T: Real>(cfg: &BackboneConfig, lrms: &Tensor<T>, pan: &Tensor<T>) -> Result<()> {
    if lrms.channels() != cfg.bands {
        bail!(Dimension, "backbone expects {} bands, LRMS has {}", cfg.bands, lrms.channels());
    }
    if pan.channels() != 1 {
        bail!(Dimension, "PAN must have one band, got {}", pan.channels());
    }
    if pan.height() != lrms.height() * cfg.ratio || pan.width() != lrms.width() * cfg.ratio || pan.batch() != lrms.batch() {
        bail!(Geometry, "PAN {:?} and LRMS {:?} are not aligned at ratio {}", pan.shape(), lrms.shape(), cfg.ratio);
    }
    Ok(())
}

impl<T: Real> Backbone<T> {
    /// He-initialized network, deterministic in `seed`.
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Pcg64::seed_from_u64(seed);
        let (c, s) = (config.bands, config.features);
        let input = ConvLayer::he(c + 1, s, &mut rng);
        let blocks = (0..config.blocks).map(|_| (ConvLayer::he(s, s, &mut rng), ConvLayer::he(s, s, &mut rng))).collect();
        let mut mapper = ConvLayer::he(s, c, &mut rng);
        // small residual head: the network starts close to plain upsampling
        mapper.weight = mapper.weight.map(|w| w * T::from_f64(MAPPER_INIT_SCALE));
        Ok(Backbone { config, input, blocks, mapper, frozen: false })
    }

    pub fn config(&self) -> BackboneConfig {
        self.config
    }

    pub fn receptive_radius(&self) -> usize {
        self.config.receptive_radius()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|l| l.param_count()).sum()
    }

    fn layers(&self) -> Vec<&ConvLayer<T>> {
        let mut v = vec![&self.input];
        for (a, b) in &self.blocks {
            v.extend([a, b]);
        }
        v.push(&self.mapper);
        v
    }

    fn layers_mut(&mut self) -> Vec<&mut ConvLayer<T>> {
        let mut v = vec![&mut self.input];
        for (a, b) in &mut self.blocks {
            v.push(a);
            v.push(b);
        }
        v.push(&mut self.mapper);
        v
    }

    /// Weights and biases in binding order.
    pub fn param_tensors(&self) -> Vec<&Tensor<T>> {
        self.layers().into_iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    fn param_tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers_mut().into_iter().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundBackbone {
        BoundBackbone {
            input: self.input.bind(tape, trainable),
            blocks: self.blocks.iter().map(|(a, b)| (a.bind(tape, trainable), b.bind(tape, trainable))).collect(),
            mapper: self.mapper.bind(tape, trainable),
            ratio: self.config.ratio,
        }
    }

    /// `Z = F1(Y, P)` as a plain tensor.
    pub fn fe_forward(&self, lrms: &Tensor<T>, pan: &Tensor<T>) -> Result<Tensor<T>> {
        check_pair_tensors(&self.config, lrms, pan)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let (y, p) = (tape.constant(lrms.clone()), tape.constant(pan.clone()));
        let up = bound.upsample(&mut tape, y)?;
        let z = bound.fe_forward(&mut tape, up, p)?;
        Ok(tape.value(z).clone())
    }

    /// `X = F2(Z) + up(Y)` as a plain tensor.
    pub fn cm_forward(&self, z: &Tensor<T>, lrms: &Tensor<T>) -> Result<Tensor<T>> {
        if z.channels() != self.config.features {
            bail!(Dimension, "CM expects {} feature channels, got {}", self.config.features, z.channels());
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let (zv, y) = (tape.constant(z.clone()), tape.constant(lrms.clone()));
        let up = bound.upsample(&mut tape, y)?;
        let x = bound.cm_forward(&mut tape, zv, up)?;
        Ok(tape.value(x).clone())
    }

    pub fn full_forward(&self, lrms: &Tensor<T>, pan: &Tensor<T>) -> Result<Tensor<T>> {
        let z = self.fe_forward(lrms, pan)?;
        self.cm_forward(&z, lrms)
    }

    pub fn cast<U: Real>(&self) -> Backbone<U> {
        Backbone {
            config: self.config,
            input: self.input.cast(),
            blocks: self.blocks.iter().map(|(a, b)| (a.cast(), b.cast())).collect(),
            mapper: self.mapper.cast(),
            frozen: self.frozen,
        }
    }

    /// Supervised L1 loss and its gradient for one sample.
    fn sample_grad(&self, sample: &TrainingSample<T>) -> Result<(f64, Vec<Tensor<T>>)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, true);
        let y = tape.constant(sample.lrms.clone());
        let p = tape.constant(sample.pan.clone());
        let gt = tape.constant(sample.gt.clone());
        let up = bound.upsample(&mut tape, y)?;
        let z = bound.fe_forward(&mut tape, up, p)?;
        let x = bound.cm_forward(&mut tape, z, up)?;
        let loss = tape.l1_mean(x, gt)?;
        let mut grads = tape.backward(loss)?;
        let g = bound.params().into_iter().map(|v| grads.take(v).expect("trainable leaf")).collect();
        Ok((tape.value(loss).item().as_f64(), g))
    }

    /// Supervised pretraining on `(LRMS, PAN, GT)` samples with Adam and L1.
    ///
    /// Samples are visited in a seed-determined order that is fixed per
    /// epoch; each minibatch's gradients are computed in parallel and summed
    /// in sample order, so the result does not depend on the thread count.
    pub fn pretrain(&mut self, data: &[TrainingSample<T>], cfg: &PretrainConfig) -> Result<PretrainReport> {
        if self.frozen {
            bail!(Contract, "cannot pretrain a frozen backbone");
        }
        if data.is_empty() {
            bail!(Config, "pretraining needs at least one sample");
        }
        if cfg.batch == 0 {
            bail!(Config, "pretraining batch must be >= 1");
        }
        for s in data {
            check_pair_tensors(&self.config, &s.lrms, &s.pan)?;
            if s.gt.shape() != [s.lrms.batch(), self.config.bands, s.pan.height(), s.pan.width()] {
                bail!(Dimension, "GT {:?} does not match PAN {:?}", s.gt.shape(), s.pan.shape());
            }
        }
        let mut adam = AdamState::new(cfg.adam, &self.param_tensors());
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = Pcg64::seed_from_u64(cfg.seed);
        let mut epoch_losses = Vec::with_capacity(cfg.epochs);
        for _ in 0..cfg.epochs {
            use rand::seq::SliceRandom;
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            for chunk in order.chunks(cfg.batch) {
                let results: Vec<Result<(f64, Vec<Tensor<T>>)>> = chunk.par_iter().map(|&i| self.sample_grad(&data[i])).collect();
                let mut total: Option<Vec<Tensor<T>>> = None;
                for r in results {
                    let (loss, grads) = r?;
                    epoch_loss += loss;
                    match total.as_mut() {
                        None => total = Some(grads),
                        Some(acc) => {
                            for (a, g) in acc.iter_mut().zip(&grads) {
                                for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                                    *x += *y;
                                }
                            }
                        }
                    }
                }
                let inv = T::from_f64(1.0 / chunk.len() as f64);
                let mean: Vec<Tensor<T>> = total.expect("non-empty chunk").iter().map(|g| g.map(|v| v * inv)).collect();
                let grads: Vec<&Tensor<T>> = mean.iter().collect();
                adam.step(&mut self.param_tensors_mut(), &grads)?;
            }
            epoch_losses.push(epoch_loss / data.len() as f64);
        }
        Ok(PretrainReport { epoch_losses })
    }
}

impl Backbone<f32> {
    pub fn to_archive(&self) -> Result<WeightArchive> {
        let c = self.config;
        let mut a = WeightArchive::new(c.features as u32, c.bands as u32, c.blocks as u32);
        a.insert("fe.in.w", self.input.weight.clone())?;
        a.insert("fe.in.b", self.input.bias.clone())?;
        for (i, (x, y)) in self.blocks.iter().enumerate() {
            a.insert(format!("fe.block{i}.a.w"), x.weight.clone())?;
            a.insert(format!("fe.block{i}.a.b"), x.bias.clone())?;
            a.insert(format!("fe.block{i}.b.w"), y.weight.clone())?;
            a.insert(format!("fe.block{i}.b.b"), y.bias.clone())?;
        }
        a.insert("cm.w", self.mapper.weight.clone())?;
        a.insert("cm.b", self.mapper.bias.clone())?;
        Ok(a)
    }

    /// Loaded backbones come back frozen.
    pub fn from_archive(a: &WeightArchive, ratio: usize) -> Result<Self> {
        let config = BackboneConfig::new(a.bands as usize, a.features as usize, a.blocks as usize, ratio);
        config.validate()?;
        let (c, s) = (config.bands, config.features);
        let layer = |name: &str, cin: usize, cout: usize| -> Result<ConvLayer> {
            Ok(ConvLayer {
                weight: a.require(&format!("{name}.w"), [cout, cin, KERNEL, KERNEL])?,
                bias: a.require(&format!("{name}.b"), [cout, 1, 1, 1])?,
            })
        };
        let input = layer("fe.in", c + 1, s)?;
        let blocks = (0..config.blocks)
            .map(|i| Ok((layer(&format!("fe.block{i}.a"), s, s)?, layer(&format!("fe.block{i}.b"), s, s)?)))
            .collect::<Result<Vec<_>>>()?;
        let mapper = layer("cm", s, c)?;
        if a.len() != 2 * (config.blocks * 2 + 2) {
            bail!(Format, "backbone archive has {} entries, expected {}", a.len(), 2 * (config.blocks * 2 + 2));
        }
        Ok(Backbone { config, input, blocks, mapper, frozen: true })
    }
}

/// One supervised sample: `[1,C,h,w]` LRMS, `[1,1,H,W]` PAN, `[1,C,H,W]` GT.
#[derive(Clone, Debug)]
pub struct TrainingSample<T: Real = f32> {
    pub lrms: Tensor<T>,
    pub pan: Tensor<T>,
    pub gt: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { epochs: 20, batch: 4, seed: 1, adam: AdamConfig { lr: 1e-3, weight_decay: 0.0, ..AdamConfig::default() } }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    /// Mean training L1 per epoch, measured during the epoch.
    pub epoch_losses: Vec<f64>,
}
