//! The parameterizable U-Net: architecture description, layer plan, weight
//! binding and forward execution.
//!
//! Topology for `blocks = B`:
//!
//! ```text
//! enc{b}  : conv3x3 -> relu -> conv3x3 -> relu -> (skip) -> maxpool2   b = 0..B
//! mid     : conv3x3 -> relu -> conv3x3 -> relu
//! dec{b}  : up2 -> concat(skip b) -> conv3x3 -> relu -> conv3x3 -> relu  b = B-1..0
//! final   : conv1x1 -> sigmoid
//! ```
//!
//! Channel width at depth `d` is `base_channels * 2^d`. Up-steps halve the
//! channel count and are linear (no activation).

use std::collections::HashSet;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{self, ConvSpec, MacCounter};
use crate::quant::QuantState;
use crate::storage::{StoredTensor, WeightStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum UpsampleMode {
    /// 2x2 stride-2 transposed convolution.
    #[serde(rename = "tconv")]
    TransposedConv,
    /// Nearest-neighbour 2x upsampling followed by a 2x2 same-padded conv.
    #[serde(rename = "nn_upsample_conv")]
    NnUpsampleConv,
}

fn default_in() -> usize {
    3
}
fn default_out() -> usize {
    1
}
fn default_upsample() -> UpsampleMode {
    UpsampleMode::TransposedConv
}
fn default_input_size() -> (usize, usize) {
    (256, 256)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct UNetConfig {
    pub blocks: usize,
    pub base_channels: usize,
    #[serde(default = "default_in")]
    pub in_channels: usize,
    #[serde(default = "default_out")]
    pub out_channels: usize,
    #[serde(default = "default_upsample")]
    pub upsample: UpsampleMode,
    #[serde(default = "default_input_size")]
    pub input_size: (usize, usize),
}

impl Default for UNetConfig {
    /// The lightweight configuration: four blocks, 16 base channels.
    fn default() -> Self {
        UNetConfig {
            blocks: 4,
            base_channels: 16,
            in_channels: 3,
            out_channels: 1,
            upsample: UpsampleMode::TransposedConv,
            input_size: (256, 256),
        }
    }
}

impl UNetConfig {
    pub fn new(blocks: usize, base_channels: usize) -> Self {
        UNetConfig {
            blocks,
            base_channels,
            ..Default::default()
        }
    }

    pub fn with_upsample(mut self, mode: UpsampleMode) -> Self {
        self.upsample = mode;
        self
    }

    pub fn with_input_size(mut self, h: usize, w: usize) -> Self {
        self.input_size = (h, w);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.blocks) {
            return Err(Error::Config(format!(
                "blocks must be in [1, 4], got {}",
                self.blocks
            )));
        }
        if self.base_channels == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        let div = 1 << self.blocks;
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return Err(Error::Config(format!(
                "input size {h}x{w} is not divisible by 2^{} = {div}",
                self.blocks
            )));
        }
        Ok(())
    }

    /// Channel width at encoder depth `d` (`d == blocks` is the middle).
    pub fn width(&self, depth: usize) -> usize {
        self.base_channels << depth
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Encoder(usize),
    Middle,
    Decoder(usize),
    Final,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    /// Same-padded convolution followed by ReLU.
    Conv,
    /// Up-step: transposed conv, or nearest upsample + 2x2 conv.
    Up(UpsampleMode),
    /// 1x1 output projection (no activation).
    Head,
}

/// One weighted layer of the plan.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerDesc {
    pub name: String,
    pub stage: Stage,
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// Spatial size of the layer input.
    pub input_hw: (usize, usize),
    pub output_hw: (usize, usize),
}

impl LayerDesc {
    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    pub fn params(&self) -> u64 {
        (self.in_channels * self.out_channels * self.kernel * self.kernel + self.out_channels) as u64
    }

    /// Multiply-accumulates for one image, counted at output resolution.
    pub fn macs(&self) -> u64 {
        let (h, w) = self.output_hw;
        (self.in_channels * self.out_channels * self.kernel * self.kernel) as u64 * (h * w) as u64
    }

    pub fn relu(&self) -> bool {
        self.kind == LayerKind::Conv
    }

    pub fn conv_spec(&self, bias: Vec<f32>) -> ConvSpec {
        match self.kind {
            LayerKind::Up(UpsampleMode::TransposedConv) => {
                ConvSpec::up2(self.in_channels, self.out_channels, bias)
            }
            _ => ConvSpec::same(self.in_channels, self.out_channels, self.kernel, bias),
        }
    }
}

/// Unrolls the block rule into the ordered list of weighted layers.
pub fn layer_plan(config: &UNetConfig) -> Result<Vec<LayerDesc>> {
    config.validate()?;
    let (mut h, mut w) = config.input_size;
    let mut layers = Vec::with_capacity(5 * config.blocks + 3);
    let conv = |name: String, stage, cin, cout, hw: (usize, usize)| LayerDesc {
        name,
        stage,
        kind: LayerKind::Conv,
        in_channels: cin,
        out_channels: cout,
        kernel: 3,
        input_hw: hw,
        output_hw: hw,
    };
    let mut c = config.in_channels;
    for b in 0..config.blocks {
        let wd = config.width(b);
        layers.push(conv(format!("enc{b}.conv0"), Stage::Encoder(b), c, wd, (h, w)));
        layers.push(conv(format!("enc{b}.conv1"), Stage::Encoder(b), wd, wd, (h, w)));
        c = wd;
        h /= 2;
        w /= 2;
    }
    let wd = config.width(config.blocks);
    layers.push(conv("mid.conv0".into(), Stage::Middle, c, wd, (h, w)));
    layers.push(conv("mid.conv1".into(), Stage::Middle, wd, wd, (h, w)));
    c = wd;
    for b in (0..config.blocks).rev() {
        let wd = config.width(b);
        layers.push(LayerDesc {
            name: format!("dec{b}.up"),
            stage: Stage::Decoder(b),
            kind: LayerKind::Up(config.upsample),
            in_channels: c,
            out_channels: wd,
            kernel: 2,
            input_hw: (h, w),
            output_hw: (2 * h, 2 * w),
        });
        h *= 2;
        w *= 2;
        layers.push(conv(format!("dec{b}.conv0"), Stage::Decoder(b), 2 * wd, wd, (h, w)));
        layers.push(conv(format!("dec{b}.conv1"), Stage::Decoder(b), wd, wd, (h, w)));
        c = wd;
    }
    layers.push(LayerDesc {
        name: "final.conv".into(),
        stage: Stage::Final,
        kind: LayerKind::Head,
        in_channels: c,
        out_channels: config.out_channels,
        kernel: 1,
        input_hw: (h, w),
        output_hw: (h, w),
    });
    Ok(layers)
}

/// Float parameters of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Vec<f32>,
}

/// Operation of the execution schedule, in topological order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    /// Weighted layer by index into the plan.
    Layer(usize),
    /// Retain the current activation as the skip tensor of encoder block `b`.
    SaveSkip(usize),
    Pool,
    /// Concatenate the current activation with skip `b` (skip consumed).
    Concat(usize),
    Sigmoid,
}

/// Execution schedule over a layer plan.
pub fn schedule(config: &UNetConfig) -> Vec<Step> {
    let mut steps = Vec::new();
    let mut idx = 0;
    for b in 0..config.blocks {
        steps.extend([Step::Layer(idx), Step::Layer(idx + 1), Step::SaveSkip(b), Step::Pool]);
        idx += 2;
    }
    steps.extend([Step::Layer(idx), Step::Layer(idx + 1)]);
    idx += 2;
    for b in (0..config.blocks).rev() {
        steps.extend([
            Step::Layer(idx),
            Step::Concat(b),
            Step::Layer(idx + 1),
            Step::Layer(idx + 2),
        ]);
        idx += 3;
    }
    steps.extend([Step::Layer(idx), Step::Sigmoid]);
    steps
}

/// Name of the activation site produced by concatenation in decoder `b`.
pub fn concat_site(b: usize) -> String {
    format!("dec{b}.concat")
}

pub const INPUT_SITE: &str = "input";
pub const OUTPUT_SITE: &str = "output";

/// Backend used by [`run_schedule`]: float, integer or emulated arithmetic.
pub(crate) trait Executor: Sync {
    fn input(&self, x: Tensor) -> Result<Tensor> {
        Ok(x)
    }
    fn layer(&self, index: usize, layer: &LayerDesc, x: &Tensor) -> Result<Tensor>;
    fn concat(&self, block: usize, up: &Tensor, skip: &Tensor) -> Result<Tensor>;
    /// Maps the head output to probabilities.
    fn output(&self, logits: Tensor) -> Result<Tensor>;
}

pub(crate) fn run_schedule<E: Executor>(model: &UNetModel, exec: &E, x: Tensor) -> Result<Tensor> {
    let mut skips: Vec<Option<Tensor>> = vec![None; model.config.blocks];
    let mut h = exec.input(x)?;
    for step in schedule(&model.config) {
        h = match step {
            Step::Layer(i) => exec.layer(i, &model.layers[i], &h)?,
            Step::SaveSkip(b) => {
                skips[b] = Some(h.clone());
                h
            }
            Step::Pool => ops::maxpool2(&h)?,
            Step::Concat(b) => {
                let skip = skips[b].take().expect("skip saved before use");
                exec.concat(b, &h, &skip)?
            }
            Step::Sigmoid => exec.output(h)?,
        };
    }
    Ok(h)
}

/// Float execution of one weighted layer.
pub(crate) fn float_layer(
    layer: &LayerDesc,
    params: &LayerParams,
    x: &Tensor,
    counter: Option<&MacCounter>,
) -> Result<Tensor> {
    let spec = layer.conv_spec(params.bias.clone());
    let y = match layer.kind {
        LayerKind::Up(UpsampleMode::TransposedConv) => ops::tconv2d_counted(x, &params.weight, &spec, counter)?,
        LayerKind::Up(UpsampleMode::NnUpsampleConv) => {
            ops::conv2d_counted(&ops::nn_upsample2(x)?, &params.weight, &spec, counter)?
        }
        LayerKind::Conv | LayerKind::Head => ops::conv2d_counted(x, &params.weight, &spec, counter)?,
    };
    if layer.relu() {
        ops::relu(&y)
    } else {
        Ok(y)
    }
}

pub(crate) struct FloatExec<'a> {
    pub params: &'a [LayerParams],
    pub counters: Option<&'a [MacCounter]>,
}

impl Executor for FloatExec<'_> {
    fn layer(&self, index: usize, layer: &LayerDesc, x: &Tensor) -> Result<Tensor> {
        let counter = self.counters.map(|c| &c[index]);
        float_layer(layer, &self.params[index], x, counter)
    }

    fn concat(&self, _block: usize, up: &Tensor, skip: &Tensor) -> Result<Tensor> {
        ops::concat_channels(up, skip)
    }

    fn output(&self, logits: Tensor) -> Result<Tensor> {
        ops::sigmoid(&logits)
    }
}

#[derive(Debug, Clone)]
pub struct UNetModel {
    config: UNetConfig,
    layers: Vec<LayerDesc>,
    params: Option<Arc<Vec<LayerParams>>>,
    quant: Option<Arc<QuantState>>,
}

/// Builds the (unbound) graph for `config`.
pub fn build(config: UNetConfig) -> Result<UNetModel> {
    let layers = layer_plan(&config)?;
    Ok(UNetModel {
        config,
        layers,
        params: None,
        quant: None,
    })
}

impl UNetModel {
    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn layers(&self) -> &[LayerDesc] {
        &self.layers
    }

    pub fn layer(&self, name: &str) -> Option<(usize, &LayerDesc)> {
        self.layers.iter().enumerate().find(|(_, l)| l.name == name)
    }

    pub fn is_bound(&self) -> bool {
        self.params.is_some()
    }

    pub fn is_quantized(&self) -> bool {
        self.quant.is_some()
    }

    pub fn quant_state(&self) -> Option<&QuantState> {
        self.quant.as_deref()
    }

    pub(crate) fn with_quant(&self, state: QuantState) -> UNetModel {
        UNetModel {
            quant: Some(Arc::new(state)),
            ..self.clone()
        }
    }

    /// Float parameters (for quantized models, the float originals).
    pub fn params(&self) -> Result<&[LayerParams]> {
        self.params
            .as_deref()
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::Usage("model has no weights bound".into()))
    }

    pub fn total_params(&self) -> u64 {
        self.layers.iter().map(LayerDesc::params).sum()
    }

    /// Every weight/bias name the model expects, in plan order.
    pub fn tensor_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight_name(), l.bias_name()])
            .collect()
    }

    /// Binds float weights from `store`. Missing tensors, shape mismatches
    /// and unexpected model tensors are all binding errors.
    pub fn bind_weights(&self, store: &WeightStore) -> Result<UNetModel> {
        let mut params = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let weight = store.require(&layer.weight_name())?;
            let shape = layer.weight_shape();
            if weight.dims != shape {
                return Err(Error::Binding {
                    name: layer.weight_name(),
                    reason: format!("shape {:?}, expected {:?}", weight.dims, shape),
                });
            }
            let weight = weight.to_f32_tensor(&layer.weight_name())?;
            let bias = store.require(&layer.bias_name())?;
            if bias.dims != [layer.out_channels] {
                return Err(Error::Binding {
                    name: layer.bias_name(),
                    reason: format!("shape {:?}, expected [{}]", bias.dims, layer.out_channels),
                });
            }
            let bias = bias.to_f32_tensor(&layer.bias_name())?.into_f32()?;
            params.push(LayerParams { weight, bias });
        }
        let expected: HashSet<String> = self.tensor_names().into_iter().collect();
        if let Some(extra) = store
            .names()
            .find(|n| !expected.contains(*n) && !crate::storage::is_auxiliary_name(n))
        {
            return Err(Error::Binding {
                name: extra.to_string(),
                reason: "tensor is not part of this architecture".into(),
            });
        }
        Ok(UNetModel {
            params: Some(Arc::new(params)),
            quant: None,
            ..self.clone()
        })
    }

    /// Binds parameters directly, in plan order.
    pub fn with_params(&self, params: Vec<LayerParams>) -> Result<UNetModel> {
        let mut store = WeightStore::new();
        for (layer, p) in self.layers.iter().zip(&params) {
            store.insert(layer.weight_name(), StoredTensor::from_tensor(&p.weight))?;
            store.insert(layer.bias_name(), StoredTensor::f32(vec![p.bias.len()], p.bias.clone()))?;
        }
        if params.len() != self.layers.len() {
            return Err(Error::Binding {
                name: self.layers[params.len().min(self.layers.len() - 1)].weight_name(),
                reason: format!("{} layers given, {} expected", params.len(), self.layers.len()),
            });
        }
        self.bind_weights(&store)
    }

    /// He-uniform weights and small uniform biases from a fixed seed.
    pub fn with_random_weights(&self, seed: u64) -> UNetModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = self
            .layers
            .iter()
            .map(|l| {
                let fan_in = (l.in_channels * l.kernel * l.kernel) as f32;
                let limit = (6.0 / fan_in).sqrt();
                let shape = l.weight_shape();
                let n: usize = shape.iter().product();
                let w = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
                let bias = (0..l.out_channels).map(|_| rng.gen_range(-0.05..0.05)).collect();
                LayerParams {
                    weight: Tensor::from_f32(shape.to_vec(), w).expect("plan shape"),
                    bias,
                }
            })
            .collect();
        UNetModel {
            params: Some(Arc::new(params)),
            quant: None,
            ..self.clone()
        }
    }

    pub fn with_zero_weights(&self) -> UNetModel {
        let params = self
            .layers
            .iter()
            .map(|l| LayerParams {
                weight: Tensor::zeros(l.weight_shape().to_vec()),
                bias: vec![0.0; l.out_channels],
            })
            .collect();
        UNetModel {
            params: Some(Arc::new(params)),
            quant: None,
            ..self.clone()
        }
    }

    /// Float weights as a store using the standard tensor names.
    pub fn export_weights(&self) -> Result<WeightStore> {
        let mut store = WeightStore::new();
        for (layer, p) in self.layers.iter().zip(self.params()?) {
            store.insert(layer.weight_name(), StoredTensor::from_tensor(&p.weight))?;
            store.insert(layer.bias_name(), StoredTensor::f32(vec![p.bias.len()], p.bias.clone()))?;
        }
        Ok(store)
    }

    pub(crate) fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.nchw()?;
        if c != self.config.in_channels || (h, w) != self.config.input_size {
            return Err(Error::Shape(format!(
                "model expects (N, {}, {}, {}), got {:?}",
                self.config.in_channels,
                self.config.input_size.0,
                self.config.input_size.1,
                x.shape()
            )));
        }
        x.as_f32()?;
        Ok(())
    }

    /// Per-pixel probabilities `(N, out_channels, H, W)` for a normalized
    /// `(N, in_channels, H, W)` batch. Quantized models run their integer or
    /// emulated path.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let params = self.params()?;
        match &self.quant {
            Some(q) => q.forward(self, x.clone()),
            None => run_schedule(
                self,
                &FloatExec {
                    params,
                    counters: None,
                },
                x.clone(),
            ),
        }
    }

    /// Float forward that also returns the MACs each weighted layer's kernel
    /// visited, in plan order.
    pub fn forward_counted(&self, x: &Tensor) -> Result<(Tensor, Vec<u64>)> {
        self.check_input(x)?;
        let counters: Vec<MacCounter> = self.layers.iter().map(|_| MacCounter::new()).collect();
        let y = run_schedule(
            self,
            &FloatExec {
                params: self.params()?,
                counters: Some(&counters),
            },
            x.clone(),
        )?;
        Ok((y, counters.iter().map(MacCounter::get).collect()))
    }
}
