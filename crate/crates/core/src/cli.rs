//! Command-line front end. Every subcommand maps onto library calls; errors
//! are reported on stderr and turned into the exit codes of
//! [`Error::exit_code`] (0 ok, 1 usage, 2 data/IO, 3 config/shape).

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::analyzer;
use crate::bench;
use crate::dataflow::{self, FoldingConfig};
use crate::error::{Error, Result};
use crate::metrics::{self, Confusion};
use crate::model::{self, UNetConfig, UpsampleMode};
use crate::quant::{self, CalibrationMode, QuantScheme};
use crate::storage;
use crate::tensor::Tensor;
use crate::tiling;

#[derive(Debug, Parser)]
#[command(name = "unet-edge", version, about = "Lightweight U-Net inference, quantization and deployment analysis")]
pub struct Cli {
    /// Seed for every randomized input (benchmark batches).
    #[arg(long, global = true, default_value_t = bench::INPUT_SEED)]
    pub seed: u64,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parameter and MAC counts, per layer or as a block/width sweep.
    Analyze(AnalyzeArgs),
    /// Tiled segmentation of one PPM image into a PGM mask.
    Infer(InferArgs),
    /// Post-training quantization of a float model directory.
    Quantize(QuantizeArgs),
    /// IoU and accuracy over an `images/` + `gt/` dataset.
    Eval(EvalArgs),
    /// Latency, throughput and energy over a batch sweep.
    Bench(BenchArgs),
    /// Dataflow accelerator cycle estimate.
    Estimate(EstimateArgs),
}

fn parse_upsample(s: &str) -> std::result::Result<UpsampleMode, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown upsample mode `{s}` (tconv | nn_upsample_conv)"))
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long, default_value_t = 4)]
    pub blocks: usize,
    #[arg(long, default_value_t = 16)]
    pub base: usize,
    #[arg(long, default_value = "tconv", value_parser = parse_upsample)]
    pub upsample: UpsampleMode,
    /// Input height and width.
    #[arg(long, default_value_t = 256)]
    pub size: usize,
    /// Cost of blocks 1..=4 crossed with the sweep widths instead.
    #[arg(long)]
    pub sweep: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = tiling::DEFAULT_TILE)]
    pub tile: usize,
    #[arg(long, default_value_t = tiling::DEFAULT_STRIDE)]
    pub stride: usize,
    #[arg(long, default_value_t = tiling::DEFAULT_THRESHOLD)]
    pub threshold: f32,
    /// Run Int8. A float model directory is calibrated on the image's own
    /// tiles first.
    #[arg(long)]
    pub quantized: bool,
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Directory of PPM calibration images.
    #[arg(long)]
    pub calib: PathBuf,
    #[arg(long = "bits-w", default_value_t = 8)]
    pub bits_w: u8,
    #[arg(long = "bits-a", default_value_t = 8)]
    pub bits_a: u8,
    /// Quantize the first convolution too.
    #[arg(long = "no-skip-first")]
    pub no_skip_first: bool,
    /// Percentile calibration at this quantile (e.g. 0.999) instead of min/max.
    #[arg(long)]
    pub percentile: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, default_value_t = tiling::DEFAULT_STRIDE)]
    pub stride: usize,
    #[arg(long, default_value_t = tiling::DEFAULT_THRESHOLD)]
    pub threshold: f32,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,8,16,32")]
    pub batch: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    pub warmup: usize,
    #[arg(long, default_value_t = 50)]
    pub iters: usize,
    /// Board power in watts for the energy column.
    #[arg(long)]
    pub power: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("plan").required(true).args(["folding", "target_ms"]))]
pub struct EstimateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long = "clock-mhz", default_value_t = 100.0)]
    pub clock_mhz: f64,
    /// Folding JSON (`{"clock_hz": ..., "<layer>": {"pe": .., "simd": ..}}`).
    /// The command-line clock wins over the file's.
    #[arg(long)]
    pub folding: Option<PathBuf>,
    /// Derive the cheapest folding meeting this latency.
    #[arg(long = "target-ms")]
    pub target_ms: Option<f64>,
    /// Where to write the derived folding when using `--target-ms`.
    #[arg(long = "save-folding")]
    pub save_folding: Option<PathBuf>,
    #[arg(long)]
    pub power: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Analyze(a) => analyze(a),
        Command::Infer(a) => infer(a),
        Command::Quantize(a) => quantize(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench_cmd(a, cli.seed),
        Command::Estimate(a) => estimate(a),
    }
}

/// `1941105` -> `1,941,105`.
pub fn thousands(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn analyze(a: AnalyzeArgs) -> Result<()> {
    let config = UNetConfig::new(a.blocks, a.base)
        .with_upsample(a.upsample)
        .with_input_size(a.size, a.size);
    if a.sweep {
        let rows = analyzer::sweep(&config)?;
        for r in &rows {
            println!("{:<6} params {:>12} macs {:>16}", r.label(), thousands(r.params), thousands(r.macs));
        }
        if let Some(out) = &a.out {
            write_text(out, &analyzer::sweep_csv(&rows))?;
        }
        return Ok(());
    }
    let report = analyzer::analyze(&config)?;
    println!("params {}", thousands(report.total_params));
    println!("macs {}", thousands(report.total_macs));
    let (p, m) = (&report.param_shares, &report.mac_shares);
    println!(
        "param share: encoder+middle {:.1}% (middle {:.1}%), decoder+final {:.1}%",
        p.encoder_middle() * 100.0,
        p.middle * 100.0,
        p.decoder_final() * 100.0
    );
    println!(
        "mac share:   encoder+middle {:.1}% (middle {:.1}%), decoder+final {:.1}%",
        m.encoder_middle() * 100.0,
        m.middle * 100.0,
        m.decoder_final() * 100.0
    );
    if let Some(out) = &a.out {
        write_text(out, &report.layers_csv())?;
    }
    Ok(())
}

/// Cuts every image into non-overlapping model-sized tiles and groups them
/// into batches of up to eight.
fn calibration_batches(images: &[Tensor], tile: usize) -> Result<Vec<Tensor>> {
    let mut tiles = Vec::new();
    for img in images {
        let (_, _, h, w) = img.nchw()?;
        let grid = tiling::plan(h, w, tile, tile)?;
        tiles.extend(grid.cut(img)?);
    }
    tiles.chunks(8).map(Tensor::stack_batch).collect()
}

fn infer(a: InferArgs) -> Result<()> {
    let mut model = storage::load_model(&a.model)?;
    let image = storage::read_ppm(&a.image)?;
    let (_, _, h, w) = image.nchw()?;
    let grid = tiling::plan(h, w, a.tile, a.stride)?;
    if a.quantized && !model.is_quantized() {
        let scheme = QuantScheme::int8();
        let batches = calibration_batches(std::slice::from_ref(&image), a.tile)?;
        let stats = quant::calibrate(&model, &batches, &scheme)?;
        model = quant::quantize_model(&model, &stats, &scheme)?;
    }
    let mask = tiling::segment_image(&model, &image, &grid, a.threshold)?;
    storage::write_pgm(&a.out, &mask)?;
    let positive = mask.data.iter().filter(|&&v| v == 1).count();
    println!(
        "{} tiles, {}x{} mask, {positive} building pixels -> {}",
        grid.len(),
        h,
        w,
        a.out.display()
    );
    Ok(())
}

fn ppm_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("ppm"))
        .collect();
    files.sort();
    Ok(files)
}

fn quantize(a: QuantizeArgs) -> Result<()> {
    let model = storage::load_model(&a.model)?;
    let scheme = QuantScheme {
        weight_bits: a.bits_w,
        act_bits: a.bits_a,
        skip_first_layer: !a.no_skip_first,
        calibration: match a.percentile {
            Some(p) => CalibrationMode::Percentile { p },
            None => CalibrationMode::Minmax,
        },
        ..QuantScheme::int8()
    };
    scheme.validate()?;
    let files = ppm_files(&a.calib)?;
    if files.is_empty() {
        return Err(Error::Integrity(format!(
            "no .ppm calibration images in {}",
            a.calib.display()
        )));
    }
    let images = files.iter().map(storage::read_ppm).collect::<Result<Vec<_>>>()?;
    let tile = model.config().input_size.0;
    let batches = calibration_batches(&images, tile)?;
    let stats = quant::calibrate(&model, &batches, &scheme)?;
    let q = quant::quantize_model(&model, &stats, &scheme)?;
    storage::save_model(&a.out, &q)?;
    let mode = if q.quant_state().is_some_and(|s| s.is_integer()) {
        "integer"
    } else {
        "emulated"
    };
    println!(
        "W{}A{} ({mode}), {} calibration tiles from {} images, weights {} -> {} bytes -> {}",
        a.bits_w,
        a.bits_a,
        batches.iter().map(|b| b.shape()[0]).sum::<usize>(),
        files.len(),
        thousands(model.total_params() * 4),
        thousands(quant::quantized_size(&q)),
        a.out.display()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let model = storage::load_model(&a.model)?;
    let index = storage::index_dataset(&a.data, a.limit)?;
    if index.is_empty() {
        return Err(Error::Integrity(format!("no image/mask pairs in {}", a.data.display())));
    }
    let tile = model.config().input_size.0;
    let per_image = index
        .pairs
        .par_iter()
        .map(|pair| {
            let image = storage::read_ppm(&pair.image)?;
            let gt = storage::read_pgm(&pair.mask)?;
            let (_, _, h, w) = image.nchw()?;
            let grid = tiling::plan(h, w, tile, a.stride.min(tile))?;
            let pred = tiling::segment_image(&model, &image, &grid, a.threshold)?;
            Confusion::from_masks(&pred, &gt)
        })
        .collect::<Result<Vec<_>>>()?;
    let total: Confusion = per_image.into_iter().sum();
    let csv = metrics::report_csv(index.len(), &total);
    write_text(&a.out, &csv)?;
    print!("{csv}");
    Ok(())
}

fn bench_cmd(a: BenchArgs, seed: u64) -> Result<()> {
    if a.iters == 0 {
        return Err(Error::Usage("--iters must be at least 1".into()));
    }
    if a.batch.is_empty() || a.batch.contains(&0) {
        return Err(Error::Usage("--batch sizes must be positive".into()));
    }
    let model = storage::load_model(&a.model)?;
    let reports = bench::batch_sweep_seeded(&model, &a.batch, a.warmup, a.iters, a.power, seed)?;
    for r in &reports {
        r.check()?;
        println!(
            "batch {:>3}: cold {:.2} ms, mean {:.2} ms, p95 {:.2} ms, max {:.2} ms, {:.2} fps",
            r.batch_size, r.cold_latency_ms, r.mean_ms, r.p95_ms, r.max_ms, r.throughput_fps
        );
    }
    write_text(&a.out, &bench::reports_csv(&reports))
}

fn estimate(a: EstimateArgs) -> Result<()> {
    if !(a.clock_mhz > 0.0) || !a.clock_mhz.is_finite() {
        return Err(Error::Usage(format!("--clock-mhz {} must be positive", a.clock_mhz)));
    }
    let clock_hz = (a.clock_mhz * 1e6).round() as u64;
    let manifest = storage::read_manifest(&a.model)?;
    let graph = model::build(manifest.config)?;
    let folding = match (&a.folding, a.target_ms) {
        (Some(path), None) => FoldingConfig {
            clock_hz,
            ..FoldingConfig::read(path)?
        },
        (None, Some(ms)) => {
            let f = dataflow::target_latency_fold(&graph, clock_hz, ms / 1000.0)?;
            if let Some(path) = &a.save_folding {
                write_text(path, &f.to_json())?;
            }
            f
        }
        _ => return Err(Error::Usage("give exactly one of --folding or --target-ms".into())),
    };
    let report = dataflow::estimate(&graph, &folding)?;
    println!(
        "ii {} cycles, latency {:.3} ms, {:.2} fps, bottleneck {}, total pe*simd {}",
        thousands(report.initiation_interval),
        report.latency_s() * 1000.0,
        report.fps(),
        report.bottleneck,
        folding.total_parallelism()
    );
    if let Some(p) = a.power {
        println!("energy {:.1} mJ/image at {p} W", report.energy_mj(p));
    }
    write_text(&a.out, &report.to_csv())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thousands_separators() {
        assert_eq!(thousands(0), "0");
        assert_eq!(thousands(999), "999");
        assert_eq!(thousands(1000), "1,000");
        assert_eq!(thousands(1_941_105), "1,941,105");
        assert_eq!(thousands(1_234_567_890), "1,234,567,890");
    }

    #[test]
    fn exit_codes_for_bad_invocations() {
        assert_eq!(main_with_args(["unet-edge"]), 1);
        assert_eq!(main_with_args(["unet-edge", "analyze", "--blocks", "x"]), 1);
        assert_eq!(main_with_args(["unet-edge", "analyze", "--blocks", "5"]), 3);
        assert_eq!(main_with_args(["unet-edge", "--help"]), 0);
    }
}
