//! Latency, throughput, memory and energy benchmarking.
//!
//! Power is supplied by the caller; energy per image is `1000 * W / FPS`
//! millijoules. The first (cold) inference is timed on its own and kept out
//! of the warm statistics. Memory is a model-based estimate: weights plus the
//! peak of simultaneously live activations (skip tensors included) plus the
//! input batch.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{schedule, LayerKind, Step, UNetModel, UpsampleMode};
use crate::quant::quantized_size;
use crate::tensor::Tensor;

pub const INPUT_SEED: u64 = 0x5eed;

/// Millijoules per image at `power_w` watts and `fps` images per second.
pub fn energy_per_image(power_w: f64, fps: f64) -> Result<f64> {
    if !(fps > 0.0) || !fps.is_finite() {
        return Err(Error::Usage(format!("throughput must be positive, got {fps}")));
    }
    if !(power_w >= 0.0) {
        return Err(Error::Usage(format!("power must be non-negative, got {power_w}")));
    }
    Ok(1000.0 * power_w / fps)
}

/// Millijoules per image from a per-image latency: `W * ms`.
pub fn energy_from_latency(power_w: f64, latency_ms: f64) -> Result<f64> {
    if !(latency_ms > 0.0) {
        return Err(Error::Usage(format!("latency must be positive, got {latency_ms}")));
    }
    energy_per_image(power_w, 1000.0 / latency_ms)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryEstimate {
    pub weight_bytes: u64,
    /// Peak live activation bytes for one image.
    pub peak_activation_bytes: u64,
    /// Input bytes for one image.
    pub input_bytes: u64,
}

impl MemoryEstimate {
    pub fn total(&self, batch: usize) -> u64 {
        self.weight_bytes + batch as u64 * (self.peak_activation_bytes + self.input_bytes)
    }
}

/// Live activation footprint after one schedule step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LiveStep {
    pub step: Step,
    pub live_bytes: u64,
    /// Skip tensors retained while the step runs.
    pub live_skips: usize,
}

fn activation_elem_bytes(model: &UNetModel) -> u64 {
    match model.quant_state() {
        Some(q) if q.is_integer() => 1,
        _ => 4,
    }
}

/// Walks the execution schedule and reports the activation bytes live at each
/// step for one image. The network input is excluded.
pub fn liveness(model: &UNetModel) -> Vec<LiveStep> {
    let eb = activation_elem_bytes(model);
    let layers = model.layers();
    let size = |c: usize, (h, w): (usize, usize)| (c * h * w) as u64 * eb;
    let mut skips: Vec<Option<u64>> = vec![None; model.config().blocks];
    // current activation: bytes, and whether it is also a retained skip
    let mut cur: (u64, bool) = (0, false);
    let mut out = Vec::new();
    for step in schedule(model.config()) {
        let retained: u64 = skips.iter().flatten().sum();
        let live_skips = skips.iter().flatten().count();
        let cur_own = if cur.1 { 0 } else { cur.0 };
        let live = match step {
            Step::Layer(i) => {
                let l = &layers[i];
                let o = size(l.out_channels, l.output_hw);
                let scratch = match l.kind {
                    LayerKind::Up(UpsampleMode::NnUpsampleConv) => size(l.in_channels, l.output_hw),
                    _ => 0,
                };
                cur = (o, false);
                retained + cur_own + scratch + o
            }
            Step::SaveSkip(b) => {
                skips[b] = Some(cur.0);
                cur.1 = true;
                retained + cur.0
            }
            Step::Pool => {
                let o = cur.0 / 4;
                let live = retained + cur_own + o;
                cur = (o, false);
                live
            }
            Step::Concat(b) => {
                let skip = skips[b].take().unwrap_or(0);
                let o = cur.0 + skip;
                let live = retained + cur_own + o;
                cur = (o, false);
                live
            }
            Step::Sigmoid => retained + cur_own,
        };
        out.push(LiveStep {
            step,
            live_bytes: live,
            live_skips,
        });
    }
    out
}

pub fn memory_estimate(model: &UNetModel) -> MemoryEstimate {
    let cfg = model.config();
    let (h, w) = cfg.input_size;
    MemoryEstimate {
        weight_bytes: quantized_size(model),
        peak_activation_bytes: liveness(model).iter().map(|s| s.live_bytes).max().unwrap_or(0),
        input_bytes: (cfg.in_channels * h * w * 4) as u64,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub batch_size: usize,
    pub cold_latency_ms: f64,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
    /// Images per second, `batch / mean latency`.
    pub throughput_fps: f64,
    pub power_w: Option<f64>,
    pub energy_mj_per_image: Option<f64>,
    pub memory: MemoryEstimate,
    pub memory_bytes: u64,
    pub iters: usize,
    pub warmup: usize,
    /// Worker threads available to the kernels during timing.
    pub threads: usize,
}

impl BenchReport {
    /// Builds a report from raw timings (milliseconds per batch).
    pub fn from_samples(
        batch_size: usize,
        cold_ms: f64,
        samples_ms: &[f64],
        warmup: usize,
        power_w: Option<f64>,
        memory: MemoryEstimate,
    ) -> Result<BenchReport> {
        if samples_ms.is_empty() {
            return Err(Error::Usage("at least one timed iteration is required".into()));
        }
        if batch_size == 0 {
            return Err(Error::Usage("batch size must be positive".into()));
        }
        let n = samples_ms.len() as f64;
        let mean = samples_ms.iter().sum::<f64>() / n;
        let var = samples_ms.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
        let mut sorted = samples_ms.to_vec();
        sorted.sort_by(f64::total_cmp);
        // nearest-rank percentile
        let rank = ((0.95 * n).ceil() as usize).clamp(1, sorted.len());
        let p95 = sorted[rank - 1];
        let max = *sorted.last().unwrap();
        // guard against a zero-duration timer reading
        let mean_s = (mean / 1000.0).max(1e-12);
        let fps = batch_size as f64 / mean_s;
        let energy = power_w.map(|p| energy_per_image(p, fps)).transpose()?;
        let report = BenchReport {
            batch_size,
            cold_latency_ms: cold_ms,
            mean_ms: mean_s * 1000.0,
            std_ms: var.sqrt(),
            p95_ms: p95,
            max_ms: max,
            throughput_fps: fps,
            power_w,
            energy_mj_per_image: energy,
            memory,
            memory_bytes: memory.total(batch_size),
            iters: samples_ms.len(),
            warmup,
            threads: rayon::current_num_threads(),
        };
        report.check()?;
        Ok(report)
    }

    /// Arithmetic self-consistency of the report.
    pub fn check(&self) -> Result<()> {
        let rel = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(b.abs());
        let fail = |what: &str| Err(Error::Integrity(format!("bench report: {what}")));
        if !(self.max_ms >= self.p95_ms && self.max_ms >= self.mean_ms && self.mean_ms >= 0.0) {
            return fail("latency ordering violated");
        }
        if !(self.throughput_fps > 0.0) {
            return fail("non-positive throughput");
        }
        if !rel(self.throughput_fps * self.mean_ms / 1000.0, self.batch_size as f64) {
            return fail("fps * mean latency != batch");
        }
        match (self.power_w, self.energy_mj_per_image) {
            (Some(p), Some(e)) if !rel(e, 1000.0 * p / self.throughput_fps) => {
                fail("energy != power / fps")
            }
            (Some(_), None) | (None, Some(_)) => fail("energy without power"),
            _ => Ok(()),
        }
    }
}

fn random_batch(model: &UNetModel, batch: usize, seed: u64) -> Result<Tensor> {
    let cfg = model.config();
    let (h, w) = cfg.input_size;
    let n = batch * cfg.in_channels * h * w;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_f32(
        vec![batch, cfg.in_channels, h, w],
        (0..n).map(|_| rng.gen::<f32>()).collect(),
    )
}

/// Times `iters` forwards of a fixed-seed random batch after `warmup`
/// untimed runs. The cold latency is the very first forward on a fresh
/// model instance.
pub fn run(model: &UNetModel, batch: usize, warmup: usize, iters: usize, power_w: Option<f64>) -> Result<BenchReport> {
    run_seeded(model, batch, warmup, iters, power_w, INPUT_SEED)
}

/// [`run`] with an explicit seed for the random input batch.
pub fn run_seeded(
    model: &UNetModel,
    batch: usize,
    warmup: usize,
    iters: usize,
    power_w: Option<f64>,
    seed: u64,
) -> Result<BenchReport> {
    if iters == 0 {
        return Err(Error::Usage("iters must be at least 1".into()));
    }
    if batch == 0 {
        return Err(Error::Usage("batch size must be positive".into()));
    }
    let x = random_batch(model, batch, seed)?;
    let fresh = model.clone();
    let t0 = Instant::now();
    fresh.forward(&x)?;
    let cold = t0.elapsed().as_secs_f64() * 1000.0;
    for _ in 0..warmup {
        fresh.forward(&x)?;
    }
    let mut samples = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t = Instant::now();
        fresh.forward(&x)?;
        samples.push(t.elapsed().as_secs_f64() * 1000.0);
    }
    BenchReport::from_samples(batch, cold, &samples, warmup, power_w, memory_estimate(model))
}

pub fn batch_sweep(
    model: &UNetModel,
    batches: &[usize],
    warmup: usize,
    iters: usize,
    power_w: Option<f64>,
) -> Result<Vec<BenchReport>> {
    batch_sweep_seeded(model, batches, warmup, iters, power_w, INPUT_SEED)
}

pub fn batch_sweep_seeded(
    model: &UNetModel,
    batches: &[usize],
    warmup: usize,
    iters: usize,
    power_w: Option<f64>,
    seed: u64,
) -> Result<Vec<BenchReport>> {
    batches
        .iter()
        .map(|&b| run_seeded(model, b, warmup, iters, power_w, seed))
        .collect()
}

pub const CSV_HEADER: &str = "batch,cold_ms,mean_ms,std_ms,p95_ms,max_ms,fps,power_w,energy_mj,mem_bytes";

pub fn reports_csv(reports: &[BenchReport]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in reports {
        let opt = |v: Option<f64>, prec: usize| v.map(|v| format!("{v:.prec$}")).unwrap_or_default();
        writeln!(
            out,
            "{},{:.3},{:.3},{:.3},{:.3},{:.3},{:.3},{},{},{}",
            r.batch_size,
            r.cold_latency_ms,
            r.mean_ms,
            r.std_ms,
            r.p95_ms,
            r.max_ms,
            r.throughput_fps,
            opt(r.power_w, 3),
            opt(r.energy_mj_per_image, 3),
            r.memory_bytes
        )
        .unwrap();
    }
    out
}
