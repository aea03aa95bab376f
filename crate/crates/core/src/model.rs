//! Builders for the baseline U-Net (and its widened variant) and the
//! VGG19-UNet, plus parameter accounting.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::nn::{ConvRole, Graph, Layer, ParamTensor, Scalar, Tensor4, Trace};
use crate::perceptual::IMAGE_SIZE;
use crate::{Error, Result};

const VGG_BLOCKS: [(usize, usize); 5] = [(2, 64), (2, 128), (4, 256), (4, 512), (4, 512)];
const VGG_DECODER: [usize; 5] = [512, 256, 128, 64, 32];
const UNET_ENCODER: [usize; 4] = [32, 64, 128, 256];
const UNET_BOTTLENECK: usize = 512;
const UNET_DECODER: [usize; 4] = [256, 128, 64, 32];
/// Std scale of the linear output layer relative to Kaiming.
const HEAD_GAIN: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    Unet,
    Vgg19Unet,
}

impl fmt::Display for ArchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ArchKind::Unet => "unet",
            ArchKind::Vgg19Unet => "vgg19-unet",
        })
    }
}

impl FromStr for ArchKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "unet" => Ok(ArchKind::Unet),
            "vgg19-unet" => Ok(ArchKind::Vgg19Unet),
            other => Err(Error::invalid(format!("unknown architecture `{other}`"))),
        }
    }
}

/// Which network to build and at what scale. `width_multiplier` 1 is the
/// full-size network; every channel count is scaled and rounded (min 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchitectureSpec {
    pub kind: ArchKind,
    pub width_multiplier: f64,
    pub input_channels: usize,
    pub input_size: usize,
}

impl Default for ArchitectureSpec {
    fn default() -> Self {
        Self::vgg19_unet(1.0)
    }
}

impl ArchitectureSpec {
    pub fn new(kind: ArchKind, width_multiplier: f64) -> Self {
        Self {
            kind,
            width_multiplier,
            input_channels: 1,
            input_size: IMAGE_SIZE,
        }
    }

    pub fn vgg19_unet(width_multiplier: f64) -> Self {
        Self::new(ArchKind::Vgg19Unet, width_multiplier)
    }

    pub fn unet(width_multiplier: f64) -> Self {
        Self::new(ArchKind::Unet, width_multiplier)
    }

    /// Number of 2x down-samplings.
    pub fn depth(&self) -> usize {
        match self.kind {
            ArchKind::Unet => UNET_ENCODER.len(),
            ArchKind::Vgg19Unet => VGG_BLOCKS.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.width_multiplier;
        if !(w > 0.0 && w <= 2.0) {
            return Err(Error::invalid(format!("width multiplier {w} outside (0, 2]")));
        }
        if self.input_channels == 0 {
            return Err(Error::invalid("input_channels must be >= 1"));
        }
        let step = 1 << self.depth();
        if self.input_size == 0 || self.input_size % step != 0 {
            return Err(Error::invalid(format!(
                "input size {} must be a positive multiple of {step}",
                self.input_size
            )));
        }
        Ok(())
    }

    pub fn channels(&self, base: usize) -> usize {
        ((base as f64 * self.width_multiplier).round() as usize).max(1)
    }

    /// Channel count at the deepest point of the network.
    pub fn bottleneck_channels(&self) -> usize {
        match self.kind {
            ArchKind::Unet => self.channels(UNET_BOTTLENECK),
            ArchKind::Vgg19Unet => self.channels(VGG_BLOCKS[4].1),
        }
    }
}

/// A built network: topology, parameters and the architecture it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T = f32> {
    spec: ArchitectureSpec,
    graph: Graph<T>,
}

struct Builder {
    layers: Vec<Layer>,
    params: Vec<ParamTensor<f64>>,
    rng: ChaCha8Rng,
    channels: usize,
    /// Parameters declared so far.
    count: usize,
    /// When false only the topology and `count` are tracked.
    materialize: bool,
}

impl Builder {
    fn new(input_channels: usize, seed: u64) -> Self {
        Self {
            layers: Vec::new(),
            params: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            channels: input_channels,
            count: 0,
            materialize: true,
        }
    }

    fn counting(input_channels: usize) -> Self {
        Self {
            materialize: false,
            ..Self::new(input_channels, 0)
        }
    }

    /// Index of the activation the next layer will consume.
    fn current(&self) -> usize {
        self.layers.len()
    }

    fn conv(&mut self, name: &str, out: usize, kernel: usize, role: ConvRole) -> Result<()> {
        let cin = self.channels;
        self.count += out * cin * kernel * kernel + out;
        if !self.materialize {
            self.channels = out;
            return Ok(());
        }
        let fan_in = (cin * kernel * kernel) as f64;
        let relu = role != ConvRole::Head;
        let std = (2.0 / fan_in).sqrt() * if relu { 1.0 } else { HEAD_GAIN };
        let weights: Vec<f64> = (0..out * cin * kernel * kernel)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                z * std
            })
            .collect();
        let weight = self.params.len();
        self.params.push(ParamTensor::new(
            format!("{name}.weight"),
            vec![out, cin, kernel, kernel],
            weights,
        )?);
        self.params
            .push(ParamTensor::new(format!("{name}.bias"), vec![out], vec![0.0; out])?);
        self.layers.push(Layer::Conv {
            weight,
            bias: weight + 1,
            relu,
            role,
        });
        self.channels = out;
        Ok(())
    }

    /// Adds a max-pool and returns the index of its (pre-pool) input.
    fn pool(&mut self) -> usize {
        let tap = self.current();
        self.layers.push(Layer::MaxPool);
        tap
    }

    fn up_and_concat(&mut self, skip: usize, skip_channels: usize) {
        self.layers.push(Layer::Upsample);
        self.layers.push(Layer::Concat { skip });
        self.channels += skip_channels;
    }

    fn finish<T: Scalar>(self, spec: ArchitectureSpec) -> Result<Model<T>> {
        let graph = Graph::new(self.layers, self.params)?;
        Ok(Model {
            spec,
            graph: graph.cast(),
        })
    }
}

/// VGG19 convolutional blocks as encoder, five up-sampling decoder stages
/// ending at 32 channels, and a linear 1x1 head.
pub fn build_vgg19_unet(spec: &ArchitectureSpec, seed: u64) -> Result<Model> {
    if spec.kind != ArchKind::Vgg19Unet {
        return Err(Error::invalid(format!("expected a vgg19-unet spec, got {}", spec.kind)));
    }
    spec.validate()?;
    let mut b = Builder::new(spec.input_channels, seed);
    plan_vgg19_unet(spec, &mut b)?;
    b.finish(*spec)
}

fn plan_vgg19_unet(spec: &ArchitectureSpec, b: &mut Builder) -> Result<()> {
    let mut skips = Vec::new();
    for (i, &(convs, base)) in VGG_BLOCKS.iter().enumerate() {
        for j in 0..convs {
            b.conv(&format!("enc{}.conv{}", i + 1, j + 1), spec.channels(base), 3, ConvRole::Encoder)?;
        }
        let ch = b.channels;
        skips.push((b.pool(), ch));
    }
    for (s, &base) in VGG_DECODER.iter().enumerate() {
        let (tap, ch) = skips[skips.len() - 1 - s];
        b.up_and_concat(tap, ch);
        for j in 0..2 {
            b.conv(&format!("dec{}.conv{}", s + 1, j + 1), spec.channels(base), 3, ConvRole::Decoder)?;
        }
    }
    b.conv("head", 1, 1, ConvRole::Head)
}

/// Classic four-level U-Net with a two-conv bottleneck at 512 x width.
pub fn build_unet(spec: &ArchitectureSpec, seed: u64) -> Result<Model> {
    if spec.kind != ArchKind::Unet {
        return Err(Error::invalid(format!("expected a unet spec, got {}", spec.kind)));
    }
    spec.validate()?;
    let mut b = Builder::new(spec.input_channels, seed);
    plan_unet(spec, &mut b)?;
    b.finish(*spec)
}

fn plan_unet(spec: &ArchitectureSpec, b: &mut Builder) -> Result<()> {
    let mut skips = Vec::new();
    for (i, &base) in UNET_ENCODER.iter().enumerate() {
        for j in 0..2 {
            b.conv(&format!("enc{}.conv{}", i + 1, j + 1), spec.channels(base), 3, ConvRole::Encoder)?;
        }
        let ch = b.channels;
        skips.push((b.pool(), ch));
    }
    for j in 0..2 {
        b.conv(&format!("mid.conv{}", j + 1), spec.channels(UNET_BOTTLENECK), 3, ConvRole::Encoder)?;
    }
    for (s, &base) in UNET_DECODER.iter().enumerate() {
        let (tap, ch) = skips[skips.len() - 1 - s];
        b.up_and_concat(tap, ch);
        for j in 0..2 {
            b.conv(&format!("dec{}.conv{}", s + 1, j + 1), spec.channels(base), 3, ConvRole::Decoder)?;
        }
    }
    b.conv("head", 1, 1, ConvRole::Head)
}

pub fn build(spec: &ArchitectureSpec, seed: u64) -> Result<Model> {
    match spec.kind {
        ArchKind::Unet => build_unet(spec, seed),
        ArchKind::Vgg19Unet => build_vgg19_unet(spec, seed),
    }
}

/// Trainable parameters of the network `spec` describes, without
/// allocating or initializing any weights.
pub fn param_count(spec: &ArchitectureSpec) -> Result<usize> {
    spec.validate()?;
    let mut b = Builder::counting(spec.input_channels);
    match spec.kind {
        ArchKind::Unet => plan_unet(spec, &mut b)?,
        ArchKind::Vgg19Unet => plan_vgg19_unet(spec, &mut b)?,
    }
    Ok(b.count)
}

impl<T: Scalar> Model<T> {
    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn graph(&self) -> &Graph<T> {
        &self.graph
    }

    pub fn graph_mut(&mut self) -> &mut Graph<T> {
        &mut self.graph
    }

    pub fn params(&self) -> &[ParamTensor<T>] {
        self.graph.params()
    }

    pub fn params_mut(&mut self) -> &mut [ParamTensor<T>] {
        self.graph.params_mut()
    }

    /// Trainable parameter count, weights plus biases.
    pub fn param_count(&self) -> usize {
        self.graph.param_count()
    }

    /// 3x3 convolutions before the decoder (bottleneck included).
    pub fn encoder_conv_count(&self) -> usize {
        self.graph
            .layers()
            .iter()
            .filter(|l| matches!(l, Layer::Conv { role: ConvRole::Encoder, .. }))
            .count()
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.spec.bottleneck_channels()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            spec: self.spec,
            graph: self.graph.cast(),
        }
    }

    fn check_input(&self, batch: &Tensor4<T>) -> Result<()> {
        let s = &self.spec;
        let [_, c, h, w] = batch.shape();
        if c != s.input_channels || h != s.input_size || w != s.input_size {
            return Err(Error::invalid(format!(
                "model expects [_, {}, {}, {}], got {:?}",
                s.input_channels,
                s.input_size,
                s.input_size,
                batch.shape()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, batch: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.check_input(batch)?;
        self.graph.forward(batch)
    }

    pub fn forward_trace(&self, batch: &Tensor4<T>) -> Result<Trace<T>> {
        self.check_input(batch)?;
        self.graph.forward_trace(batch)
    }

    pub fn backward(&mut self, trace: &Trace<T>, grad_output: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.graph.backward(trace, grad_output)
    }
}
