//! Latency/throughput sweep over batch sizes with an assumed board power.
//!
//!     cargo run --release --example bench_latency [power_w]

use std::path::PathBuf;

use unet_edge::{bench, storage};

fn main() -> unet_edge::Result<()> {
    let fixtures = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let power: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(14.56);
    let model = storage::load_model(fixtures.join("model"))?;

    let mem = bench::memory_estimate(&model);
    println!(
        "weights {} B, peak activations {} B/image, input {} B/image",
        mem.weight_bytes, mem.peak_activation_bytes, mem.input_bytes
    );

    let reports = bench::batch_sweep(&model, &[1, 2, 4], 2, 10, Some(power))?;
    for r in &reports {
        println!(
            "batch {}: cold {:.1} ms, mean {:.1} +- {:.1} ms, p95 {:.1} ms, {:.1} fps, {:.1} mJ/image",
            r.batch_size,
            r.cold_latency_ms,
            r.mean_ms,
            r.std_ms,
            r.p95_ms,
            r.throughput_fps,
            r.energy_mj_per_image.unwrap()
        );
    }
    print!("{}", bench::reports_csv(&reports));
    Ok(())
}
