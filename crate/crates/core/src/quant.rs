//! Post-training quantization: calibration, weight quantization and
//! quantized execution.
//!
//! Weights are quantized symmetric per tensor; activations are affine per
//! tensor with ranges taken from calibration. When every layer has weights of
//! at least 2 bits the model runs on the integer kernels of [`crate::ops`];
//! 1-bit weights (W1A4 and friends) run as fake-quantized float emulation.

use std::collections::BTreeMap;
use std::sync::Mutex;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    self, concat_site, float_layer, run_schedule, Executor, FloatExec, LayerDesc, LayerKind,
    LayerParams, UNetModel, UpsampleMode, INPUT_SITE, OUTPUT_SITE,
};
use crate::ops;
use crate::storage::{ModelManifest, StoredTensor, WeightStore};
use crate::tensor::{self, fake_quantize_slice, QuantParams, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum CalibrationMode {
    /// Observed minimum and maximum.
    Minmax,
    /// Clip to the `p`-quantile of absolute values.
    Percentile { p: f64 },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerOverride {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_bits: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub act_bits: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantScheme {
    pub weight_bits: u8,
    pub act_bits: u8,
    pub skip_first_layer: bool,
    #[serde(default = "default_calibration")]
    pub calibration: CalibrationMode,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub overrides: BTreeMap<String, LayerOverride>,
}

fn default_calibration() -> CalibrationMode {
    CalibrationMode::Minmax
}

impl QuantScheme {
    /// Int8 weights and activations, first convolution kept in float.
    pub fn int8() -> Self {
        QuantScheme {
            weight_bits: 8,
            act_bits: 8,
            skip_first_layer: true,
            calibration: CalibrationMode::Minmax,
            overrides: BTreeMap::new(),
        }
    }

    /// Binary weights with 4-bit activations.
    pub fn w1a4() -> Self {
        QuantScheme {
            weight_bits: 1,
            act_bits: 4,
            ..QuantScheme::int8()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check_w = |b: u8, what: &str| {
            if (1..=8).contains(&b) {
                Ok(())
            } else {
                Err(Error::Config(format!("{what} weight bits {b} outside [1, 8]")))
            }
        };
        let check_a = |b: u8, what: &str| {
            if (2..=8).contains(&b) {
                Ok(())
            } else {
                Err(Error::Config(format!("{what} activation bits {b} outside [2, 8]")))
            }
        };
        check_w(self.weight_bits, "scheme")?;
        check_a(self.act_bits, "scheme")?;
        for (name, o) in &self.overrides {
            if let Some(b) = o.weight_bits {
                check_w(b, name)?;
            }
            if let Some(b) = o.act_bits {
                check_a(b, name)?;
            }
        }
        if let CalibrationMode::Percentile { p } = self.calibration {
            if !(p > 0.5 && p <= 1.0) {
                return Err(Error::Config(format!("percentile {p} outside (0.5, 1]")));
            }
        }
        Ok(())
    }

    pub fn weight_bits_for(&self, layer: &str) -> u8 {
        self.overrides
            .get(layer)
            .and_then(|o| o.weight_bits)
            .unwrap_or(self.weight_bits)
    }

    pub fn act_bits_for(&self, site: &str) -> u8 {
        self.overrides
            .get(site)
            .and_then(|o| o.act_bits)
            .unwrap_or(self.act_bits)
    }
}

/// Observed range of one activation site.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteStats {
    pub min: f32,
    pub max: f32,
    /// Histogram of absolute values over `[0, hist_max]` (percentile mode).
    pub histogram: Option<Vec<u64>>,
    pub hist_max: f32,
}

impl SiteStats {
    fn observe(&mut self, values: &[f32]) {
        for &v in values {
            self.min = self.min.min(v);
            self.max = self.max.max(v);
        }
    }
}

const HISTOGRAM_BINS: usize = 2048;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CalibrationStats {
    sites: IndexMap<String, SiteStats>,
}

impl CalibrationStats {
    pub fn get(&self, site: &str) -> Option<&SiteStats> {
        self.sites.get(site)
    }

    pub fn sites(&self) -> impl Iterator<Item = (&str, &SiteStats)> {
        self.sites.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn insert(&mut self, site: impl Into<String>, min: f32, max: f32) {
        self.sites.insert(
            site.into(),
            SiteStats {
                min,
                max,
                histogram: None,
                hist_max: 0.0,
            },
        );
    }

    /// Elementwise min/max union of two stat sets. Histograms are dropped.
    pub fn merge(&self, other: &CalibrationStats) -> CalibrationStats {
        let mut out = CalibrationStats::default();
        for (name, s) in self.sites.iter().chain(other.sites.iter()) {
            let e = out.sites.entry(name.clone()).or_insert(SiteStats {
                min: s.min,
                max: s.max,
                histogram: None,
                hist_max: 0.0,
            });
            e.min = e.min.min(s.min);
            e.max = e.max.max(s.max);
        }
        out
    }

    fn range(&self, site: &str) -> Result<(f32, f32)> {
        self.sites
            .get(site)
            .map(|s| (s.min, s.max))
            .ok_or_else(|| Error::Calibration(site.to_string()))
    }
}

struct Observer<'a> {
    inner: FloatExec<'a>,
    stats: Mutex<IndexMap<String, SiteStats>>,
    /// Percentile pass: per-site histogram upper bound.
    bins: Option<&'a IndexMap<String, SiteStats>>,
}

impl Observer<'_> {
    fn record(&self, site: &str, t: &Tensor) -> Result<()> {
        let values = t.as_f32()?;
        let mut stats = self.stats.lock().unwrap();
        let e = stats.entry(site.to_string()).or_insert_with(|| SiteStats {
            min: f32::INFINITY,
            max: f32::NEG_INFINITY,
            histogram: None,
            hist_max: 0.0,
        });
        e.observe(values);
        if let Some(first) = self.bins.and_then(|b| b.get(site)) {
            let top = first.min.abs().max(first.max.abs());
            e.hist_max = top;
            let hist = e.histogram.get_or_insert_with(|| vec![0; HISTOGRAM_BINS]);
            for &v in values {
                let bin = if top > 0.0 {
                    ((v.abs() / top) * HISTOGRAM_BINS as f32) as usize
                } else {
                    0
                };
                hist[bin.min(HISTOGRAM_BINS - 1)] += 1;
            }
        }
        Ok(())
    }
}

impl Executor for Observer<'_> {
    fn input(&self, x: Tensor) -> Result<Tensor> {
        self.record(INPUT_SITE, &x)?;
        Ok(x)
    }

    fn layer(&self, index: usize, layer: &LayerDesc, x: &Tensor) -> Result<Tensor> {
        let y = self.inner.layer(index, layer, x)?;
        self.record(&layer.name, &y)?;
        Ok(y)
    }

    fn concat(&self, block: usize, up: &Tensor, skip: &Tensor) -> Result<Tensor> {
        let y = self.inner.concat(block, up, skip)?;
        self.record(&concat_site(block), &y)?;
        Ok(y)
    }

    fn output(&self, logits: Tensor) -> Result<Tensor> {
        let y = self.inner.output(logits)?;
        self.record(OUTPUT_SITE, &y)?;
        Ok(y)
    }
}

fn observe(
    model: &UNetModel,
    batches: &[Tensor],
    bins: Option<&IndexMap<String, SiteStats>>,
) -> Result<IndexMap<String, SiteStats>> {
    let obs = Observer {
        inner: FloatExec {
            params: model.params()?,
            counters: None,
        },
        stats: Mutex::new(IndexMap::new()),
        bins,
    };
    for batch in batches {
        model.check_input(batch)?;
        run_schedule(model, &obs, batch.clone())?;
    }
    Ok(obs.stats.into_inner().unwrap())
}

/// Runs float forwards over `batches` and records the range of every
/// activation site. Percentile mode makes a second pass to build histograms
/// of absolute values and clips each range to the requested quantile.
pub fn calibrate(model: &UNetModel, batches: &[Tensor], scheme: &QuantScheme) -> Result<CalibrationStats> {
    scheme.validate()?;
    if batches.is_empty() {
        return Err(Error::Usage("calibration needs at least one batch".into()));
    }
    if model.is_quantized() {
        return Err(Error::Usage("calibration runs on a float model".into()));
    }
    let first = observe(model, batches, None)?;
    let sites = match scheme.calibration {
        CalibrationMode::Minmax => first,
        CalibrationMode::Percentile { p } => {
            let mut second = observe(model, batches, Some(&first))?;
            for s in second.values_mut() {
                let hist = s.histogram.as_ref().expect("histogram pass");
                let total: u64 = hist.iter().sum();
                let target = (p * total as f64).ceil() as u64;
                let mut acc = 0;
                let mut edge = s.hist_max;
                for (i, &count) in hist.iter().enumerate() {
                    acc += count;
                    if acc >= target {
                        edge = s.hist_max * (i + 1) as f32 / HISTOGRAM_BINS as f32;
                        break;
                    }
                }
                s.min = s.min.max(-edge);
                s.max = s.max.min(edge);
            }
            second
        }
    };
    Ok(CalibrationStats { sites })
}

/// Quantized weights and activation grids of a model.
#[derive(Debug, Clone)]
pub struct QuantState {
    scheme: QuantScheme,
    integer: bool,
    /// Integer weights per layer; `None` for layers kept in float.
    weights: Vec<Option<Tensor>>,
    /// Grid of each layer's output site.
    outputs: Vec<QuantParams>,
    input: Option<QuantParams>,
    /// Concat grids indexed by decoder block.
    concats: Vec<QuantParams>,
    /// Float parameters the emulated path runs with (dequantized weights).
    emulated: Vec<LayerParams>,
    stats: CalibrationStats,
}

impl QuantState {
    pub fn scheme(&self) -> &QuantScheme {
        &self.scheme
    }

    /// True when the model runs on integer kernels rather than emulation.
    pub fn is_integer(&self) -> bool {
        self.integer
    }

    pub fn stats(&self) -> &CalibrationStats {
        &self.stats
    }

    pub fn layer_weight(&self, index: usize) -> Option<&Tensor> {
        self.weights[index].as_ref()
    }

    pub fn output_params(&self, index: usize) -> &QuantParams {
        &self.outputs[index]
    }

    pub(crate) fn forward(&self, model: &UNetModel, x: Tensor) -> Result<Tensor> {
        if self.integer {
            run_schedule(model, &IntegerExec { state: self, model }, x)
        } else {
            run_schedule(model, &EmulatedExec { state: self }, x)
        }
    }
}

fn activation_params(bits: u8, (min, max): (f32, f32)) -> Result<QuantParams> {
    QuantParams::affine_for_range(bits, min, max, true)
}

fn quantize_weight(w: &Tensor, bits: u8) -> Result<Tensor> {
    let max_abs = w.as_f32()?.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    let p = QuantParams::symmetric_for_range(bits, max_abs)?;
    tensor::quantize(w, &p)
}

fn assemble(
    model: &UNetModel,
    scheme: &QuantScheme,
    stats: CalibrationStats,
    weights: Vec<Option<Tensor>>,
) -> Result<UNetModel> {
    let layers = model.layers();
    let outputs = layers
        .iter()
        .map(|l| activation_params(scheme.act_bits_for(&l.name), stats.range(&l.name)?))
        .collect::<Result<Vec<_>>>()?;
    let input = if scheme.skip_first_layer {
        None
    } else {
        Some(activation_params(scheme.act_bits, stats.range(INPUT_SITE)?)?)
    };
    let concats = (0..model.config().blocks)
        .map(|b| {
            let site = concat_site(b);
            activation_params(scheme.act_bits_for(&site), stats.range(&site)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let float = model.params()?;
    let emulated = float
        .iter()
        .zip(&weights)
        .map(|(p, q)| LayerParams {
            weight: q.as_ref().map(Tensor::dequantize).unwrap_or_else(|| p.weight.clone()),
            bias: p.bias.clone(),
        })
        .collect();
    let integer = weights.iter().flatten().all(|w| w.quant().unwrap().bits >= 2);
    Ok(model.with_quant(QuantState {
        scheme: scheme.clone(),
        integer,
        weights,
        outputs,
        input,
        concats,
        emulated,
        stats,
    }))
}

/// Quantizes a float model with calibration `stats` under `scheme`.
pub fn quantize_model(model: &UNetModel, stats: &CalibrationStats, scheme: &QuantScheme) -> Result<UNetModel> {
    scheme.validate()?;
    if model.is_quantized() {
        return Err(Error::Usage("model is already quantized".into()));
    }
    let weights = model
        .layers()
        .iter()
        .zip(model.params()?)
        .enumerate()
        .map(|(i, (l, p))| {
            if i == 0 && scheme.skip_first_layer {
                Ok(None)
            } else {
                quantize_weight(&p.weight, scheme.weight_bits_for(&l.name)).map(Some)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    assemble(model, scheme, stats.clone(), weights)
}

/// Bytes of weight storage: parameters times the element size of the
/// layer's weight dtype (4 for float layers, 1 for quantized layers).
pub fn quantized_size(model: &UNetModel) -> u64 {
    model
        .layers()
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let bytes = match model.quant_state() {
                Some(q) if q.layer_weight(i).is_some() => 1,
                _ => 4,
            };
            l.params() * bytes
        })
        .sum()
}

/// Weight store and manifest for a quantized model: integer weights with
/// `.scale`/`.zero_point`, float biases and `.calib.min`/`.calib.max` for
/// every calibrated site.
pub fn export_quantized(model: &UNetModel) -> Result<(ModelManifest, WeightStore)> {
    let state = model
        .quant_state()
        .ok_or_else(|| Error::Usage("model is not quantized".into()))?;
    let mut store = WeightStore::new();
    for (i, (l, p)) in model.layers().iter().zip(model.params()?).enumerate() {
        match state.layer_weight(i) {
            Some(q) => store.insert_quantized(&l.weight_name(), q)?,
            None => store.insert(l.weight_name(), StoredTensor::from_tensor(&p.weight))?,
        }
        store.insert(l.bias_name(), StoredTensor::f32(vec![p.bias.len()], p.bias.clone()))?;
    }
    for (site, s) in state.stats.sites() {
        store.insert(format!("{site}.calib.min"), StoredTensor::scalar_f32(s.min))?;
        store.insert(format!("{site}.calib.max"), StoredTensor::scalar_f32(s.max))?;
    }
    let manifest = ModelManifest {
        config: *model.config(),
        quant: Some(state.scheme.clone()),
    };
    Ok((manifest, store))
}

/// Rebuilds a quantized model from an exported store. The float parameters
/// of the result are the dequantized weights.
pub fn load_quantized(model: &UNetModel, scheme: &QuantScheme, store: &WeightStore) -> Result<UNetModel> {
    scheme.validate()?;
    let mut float_store = WeightStore::new();
    let mut weights = Vec::with_capacity(model.layers().len());
    for (i, l) in model.layers().iter().enumerate() {
        let name = l.weight_name();
        let raw = store.require(&name)?;
        let w = match raw.data.dtype() {
            crate::tensor::DType::F32 => {
                if !(i == 0 && scheme.skip_first_layer) {
                    return Err(Error::Binding {
                        name,
                        reason: "expected quantized weights".into(),
                    });
                }
                float_store.insert(name.clone(), raw.clone())?;
                None
            }
            _ => {
                let q = store.quantized_tensor(&name, scheme.weight_bits_for(&l.name), true, true)?;
                float_store.insert(name.clone(), StoredTensor::from_tensor(&q.dequantize()))?;
                Some(q)
            }
        };
        weights.push(w);
        float_store.insert(l.bias_name(), store.require(&l.bias_name())?.clone())?;
    }
    let float = model.bind_weights(&float_store)?;
    let mut stats = CalibrationStats::default();
    for (name, t) in store.iter() {
        if let Some(site) = name.strip_suffix(".calib.min") {
            let max = store
                .require(&format!("{site}.calib.max"))?
                .scalar()
                .ok_or_else(|| Error::Calibration(site.to_string()))?;
            let min = t.scalar().ok_or_else(|| Error::Calibration(site.to_string()))?;
            stats.insert(site, min as f32, max as f32);
        }
    }
    assemble(&float, scheme, stats, weights)
}

struct IntegerExec<'a> {
    state: &'a QuantState,
    model: &'a UNetModel,
}

impl Executor for IntegerExec<'_> {
    fn input(&self, x: Tensor) -> Result<Tensor> {
        match &self.state.input {
            Some(p) => tensor::quantize(&x, p),
            None => Ok(x),
        }
    }

    fn layer(&self, index: usize, layer: &LayerDesc, x: &Tensor) -> Result<Tensor> {
        let out = &self.state.outputs[index];
        let params = &self.model.params()?[index];
        let Some(w) = &self.state.weights[index] else {
            let y = float_layer(layer, params, x, None)?;
            return tensor::quantize(&y, out);
        };
        let spec = layer.conv_spec(params.bias.clone());
        let relu = layer.relu();
        match layer.kind {
            LayerKind::Up(UpsampleMode::TransposedConv) => ops::tconv2d_quantized(x, w, &spec, out, relu),
            LayerKind::Up(UpsampleMode::NnUpsampleConv) => {
                ops::conv2d_quantized(&ops::nn_upsample2(x)?, w, &spec, out, relu)
            }
            LayerKind::Conv | LayerKind::Head => ops::conv2d_quantized(x, w, &spec, out, relu),
        }
    }

    fn concat(&self, block: usize, up: &Tensor, skip: &Tensor) -> Result<Tensor> {
        let p = &self.state.concats[block];
        ops::concat_channels(&ops::requantize(up, p)?, &ops::requantize(skip, p)?)
    }

    fn output(&self, logits: Tensor) -> Result<Tensor> {
        ops::sigmoid(&logits.dequantize())
    }
}

struct EmulatedExec<'a> {
    state: &'a QuantState,
}

fn fake_quantized(mut t: Tensor, p: &QuantParams) -> Result<Tensor> {
    let shape = t.shape().to_vec();
    let mut values = std::mem::replace(&mut t, Tensor::zeros(vec![0])).into_f32()?;
    fake_quantize_slice(&mut values, p);
    Tensor::from_f32(shape, values)
}

impl Executor for EmulatedExec<'_> {
    fn input(&self, x: Tensor) -> Result<Tensor> {
        match &self.state.input {
            Some(p) => fake_quantized(x, p),
            None => Ok(x),
        }
    }

    fn layer(&self, index: usize, layer: &LayerDesc, x: &Tensor) -> Result<Tensor> {
        let y = float_layer(layer, &self.state.emulated[index], x, None)?;
        fake_quantized(y, &self.state.outputs[index])
    }

    fn concat(&self, block: usize, up: &Tensor, skip: &Tensor) -> Result<Tensor> {
        fake_quantized(ops::concat_channels(up, skip)?, &self.state.concats[block])
    }

    fn output(&self, logits: Tensor) -> Result<Tensor> {
        ops::sigmoid(&logits)
    }
}

/// Sites a scheme needs statistics for.
pub fn required_sites(model: &UNetModel, scheme: &QuantScheme) -> Vec<String> {
    let mut sites = Vec::new();
    if !scheme.skip_first_layer {
        sites.push(INPUT_SITE.to_string());
    }
    sites.extend(model.layers().iter().map(|l| l.name.clone()));
    sites.extend((0..model.config().blocks).map(model::concat_site));
    sites
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build, UNetConfig};

    fn small() -> UNetModel {
        build(UNetConfig::new(2, 4).with_input_size(16, 16))
            .unwrap()
            .with_random_weights(3)
    }

    fn batch(seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_f32(vec![2, 3, 16, 16], (0..2 * 3 * 256).map(|_| rng.gen()).collect()).unwrap()
    }

    #[test]
    fn scheme_validation() {
        assert!(QuantScheme::int8().validate().is_ok());
        assert!(QuantScheme::w1a4().validate().is_ok());
        let mut s = QuantScheme::int8();
        s.act_bits = 1;
        assert!(s.validate().is_err());
        s = QuantScheme::int8();
        s.calibration = CalibrationMode::Percentile { p: 0.5 };
        assert!(s.validate().is_err());
    }

    #[test]
    fn empty_calibration_set_is_a_usage_error() {
        assert!(matches!(
            calibrate(&small(), &[], &QuantScheme::int8()),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn missing_site_is_named() {
        let m = small();
        let mut stats = calibrate(&m, &[batch(1)], &QuantScheme::int8()).unwrap();
        stats.sites.shift_remove("dec1.concat");
        match quantize_model(&m, &stats, &QuantScheme::int8()) {
            Err(Error::Calibration(site)) => assert_eq!(site, "dec1.concat"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn percentile_clips_inside_minmax() {
        let m = small();
        let mm = calibrate(&m, &[batch(1)], &QuantScheme::int8()).unwrap();
        let mut scheme = QuantScheme::int8();
        scheme.calibration = CalibrationMode::Percentile { p: 0.99 };
        let pc = calibrate(&m, &[batch(1)], &scheme).unwrap();
        for (site, s) in pc.sites() {
            let r = mm.get(site).unwrap();
            assert!(s.min >= r.min && s.max <= r.max, "{site}");
        }
        let top = mm.get("mid.conv1").unwrap().max;
        assert!(pc.get("mid.conv1").unwrap().max < top);
    }

    #[test]
    fn w1a4_runs_emulated_and_int8_runs_integer() {
        let m = small();
        let x = batch(5);
        let stats = calibrate(&m, std::slice::from_ref(&x), &QuantScheme::int8()).unwrap();
        let q8 = quantize_model(&m, &stats, &QuantScheme::int8()).unwrap();
        assert!(q8.quant_state().unwrap().is_integer());
        let w1 = quantize_model(&m, &stats, &QuantScheme::w1a4()).unwrap();
        assert!(!w1.quant_state().unwrap().is_integer());
        for model in [&q8, &w1] {
            let y = model.forward(&x).unwrap();
            assert!(y.as_f32().unwrap().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn export_load_round_trip_is_bitwise() {
        let m = small();
        let x = batch(9);
        let scheme = QuantScheme::int8();
        let stats = calibrate(&m, std::slice::from_ref(&x), &scheme).unwrap();
        let q = quantize_model(&m, &stats, &scheme).unwrap();
        let (manifest, store) = export_quantized(&q).unwrap();
        let store = WeightStore::from_bytes(&store.to_bytes()).unwrap();
        let loaded = load_quantized(&build(manifest.config).unwrap(), &manifest.quant.unwrap(), &store).unwrap();
        assert_eq!(q.forward(&x).unwrap(), loaded.forward(&x).unwrap());
    }
}
