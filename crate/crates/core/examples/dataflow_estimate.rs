//! Dataflow accelerator estimate: fold every layer for a latency target, then
//! report the initiation interval and the slowest nodes.
//!
//!     cargo run --example dataflow_estimate [target_ms]

use unet_edge::dataflow::{self, DEFAULT_CLOCK_HZ};
use unet_edge::{build, UNetConfig};

fn main() -> unet_edge::Result<()> {
    let target_ms: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(7.87);
    let net = build(UNetConfig::default())?;

    let folding = dataflow::target_latency_fold(&net, DEFAULT_CLOCK_HZ, target_ms / 1e3)?;
    let report = dataflow::estimate(&net, &folding)?;
    println!("{:<12} {:>5} {:>5} {:>10}", "node", "pe", "simd", "cycles");
    for n in &report.nodes {
        let f = folding.layers[&n.name];
        println!("{:<12} {:>5} {:>5} {:>10}", n.name, f.pe, f.simd, n.cycles);
    }
    println!(
        "II {} cycles at {} MHz: {:.3} ms, {:.1} fps, {:.1} mJ/image at 5.46 W",
        report.initiation_interval,
        DEFAULT_CLOCK_HZ / 1_000_000,
        report.latency_s() * 1e3,
        report.fps(),
        report.energy_mj(5.46)
    );

    match dataflow::target_latency_fold(&net, DEFAULT_CLOCK_HZ, 0.1e-3) {
        Err(e) => println!("0.1 ms target: {e}"),
        Ok(_) => println!("0.1 ms target is feasible"),
    }
    Ok(())
}
