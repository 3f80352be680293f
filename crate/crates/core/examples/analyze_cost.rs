//! Parameter and MAC budget of the lightweight U-Net next to the original
//! 64-channel network, with the per-path split.
//!
//!     cargo run --example analyze_cost

use unet_edge::analyzer;
use unet_edge::UNetConfig;

fn main() -> unet_edge::Result<()> {
    let light = analyzer::analyze(&UNetConfig::default())?;
    let full = analyzer::analyze(&UNetConfig::new(4, 64))?;

    println!("{:<14} {:>12} {:>16}", "layer", "params", "macs");
    for l in &light.layers {
        println!("{:<14} {:>12} {:>16}", l.name, l.params, l.macs);
    }
    println!();
    println!("base 16: {:.2} M params, {:.2} G MACs", light.total_params as f64 / 1e6, light.total_macs as f64 / 1e9);
    println!("base 64: {:.2} M params, {:.2} G MACs", full.total_params as f64 / 1e6, full.total_macs as f64 / 1e9);
    println!(
        "reduction: {:.1}x params, {:.1}x MACs",
        full.total_params as f64 / light.total_params as f64,
        full.total_macs as f64 / light.total_macs as f64
    );

    let (p, m) = (light.param_shares, light.mac_shares);
    println!();
    println!("            params   macs");
    println!("encoder     {:>5.1}%  {:>5.1}%", 100.0 * p.encoder, 100.0 * m.encoder);
    println!("middle      {:>5.1}%  {:>5.1}%", 100.0 * p.middle, 100.0 * m.middle);
    println!("decoder     {:>5.1}%  {:>5.1}%", 100.0 * p.decoder, 100.0 * m.decoder);
    println!("final       {:>5.1}%  {:>5.1}%", 100.0 * p.final_layer, 100.0 * m.final_layer);
    Ok(())
}
