//! Post-training Int8 quantization: calibrate on the crop, quantize with the
//! first layer kept in float, compare against the float model.

use std::path::PathBuf;

use unet_edge::metrics::Confusion;
use unet_edge::{quant, storage, tiling, QuantScheme, Tensor};

fn main() -> unet_edge::Result<()> {
    let fixtures = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let model = storage::load_model(fixtures.join("model"))?;
    let crop = storage::read_ppm(fixtures.join("crop512.ppm"))?;
    let gt = storage::read_pgm(fixtures.join("crop512_gt.pgm"))?;

    let calib = tiling::plan(512, 512, 256, 256)?.cut(&crop)?;
    let scheme = QuantScheme::int8();
    let stats = quant::calibrate(&model, &[Tensor::stack_batch(&calib)?], &scheme)?;
    for (site, s) in stats.sites().take(6) {
        println!("{site:<14} [{:+.4}, {:+.4}]", s.min, s.max);
    }
    let q = quant::quantize_model(&model, &stats, &scheme)?;
    println!(
        "weights: {} bytes float -> {} bytes quantized",
        quant::quantized_size(&model),
        quant::quantized_size(&q)
    );

    let grid = tiling::plan(512, 512, 256, 224)?;
    for (label, m) in [("float", &model), ("int8", &q)] {
        let mask = tiling::segment_image(m, &crop, &grid, 0.5)?;
        println!("{label:<5} IoU {:.4}", Confusion::from_masks(&mask, &gt)?.iou()?);
    }

    let out = std::env::temp_dir().join("unet_edge_int8");
    storage::save_model(&out, &q)?;
    println!("saved to {}", out.display());
    Ok(())
}
