//! Energy per image from published throughput/latency and power figures.

use unet_edge::bench::{energy_from_latency, energy_per_image};

fn main() -> unet_edge::Result<()> {
    let by_fps = [
        ("Jetson AGX, TF, batch 1", 13.65, 61.6),
        ("Jetson AGX, TF, batch 8", 14.56, 74.6),
        ("Jetson AGX, TF, batch 16", 14.56, 78.6),
        ("Jetson AGX, TF, batch 32", 14.56, 75.8),
        ("ZCU104, dataflow W1A4", 5.46, 127.0),
        ("ZCU102, DPU Int8", 2.51, 46.9),
    ];
    for (what, w, fps) in by_fps {
        println!("{what:<28} {w:>6.2} W {fps:>7.1} fps  {:>7.1} mJ", energy_per_image(w, fps)?);
    }

    // the encoder and middle hold 31.6% of the MACs; scale a partial timing up
    let full_ms = 5.82 / 0.316;
    let by_latency = [
        ("Jetson AGX, cuDNN (scaled)", 5.61, full_ms),
        ("Ultra96, ARM CPU", 1.05, 540.7),
        ("ZCU104, ARM CPU", 1.11, 489.2),
    ];
    for (what, w, ms) in by_latency {
        println!("{what:<28} {w:>6.2} W {ms:>7.1} ms   {:>7.1} mJ", energy_from_latency(w, ms)?);
    }
    Ok(())
}
