//! Binary weights with 4-bit activations. There is no integer kernel for
//! 1-bit weights, so the model runs in emulated (fake-quantized) mode.
//!
//! The bundled model is hand-built: one large head weight carries the signal
//! and everything else is small noise. Binarizing after the fact gives every
//! weight of a layer the same magnitude, which drowns that signal, so W1A4
//! only works for networks trained with quantization in the loop. W4A4 is
//! shown alongside for contrast.

use std::path::PathBuf;

use unet_edge::metrics::Confusion;
use unet_edge::{quant, storage, tiling, QuantScheme, Tensor};

fn main() -> unet_edge::Result<()> {
    let fixtures = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let model = storage::load_model(fixtures.join("model"))?;
    let crop = storage::read_ppm(fixtures.join("crop512.ppm"))?;
    let gt = storage::read_pgm(fixtures.join("crop512_gt.pgm"))?;
    let calib = tiling::plan(512, 512, 256, 256)?.cut(&crop)?;

    let scheme = QuantScheme::w1a4();
    let stats = quant::calibrate(&model, &[Tensor::stack_batch(&calib)?], &scheme)?;
    let q = quant::quantize_model(&model, &stats, &scheme)?;
    let state = q.quant_state().expect("quantized");
    println!("integer path: {}", state.is_integer());

    for (i, l) in q.layers().iter().enumerate() {
        if let Some(w) = state.layer_weight(i) {
            let mut levels: Vec<i32> = w.as_i8()?.iter().map(|&v| v as i32).collect();
            levels.sort_unstable();
            levels.dedup();
            println!("{:<12} levels {:?} scale {:.5}", l.name, levels, w.quant().unwrap().scale);
        }
    }

    let w4a4 = QuantScheme { weight_bits: 4, ..scheme.clone() };
    let q4 = quant::quantize_model(&model, &quant::calibrate(&model, &[Tensor::stack_batch(&calib)?], &w4a4)?, &w4a4)?;

    let grid = tiling::plan(512, 512, 256, 224)?;
    for (label, m) in [("float", &model), ("w1a4", &q), ("w4a4", &q4)] {
        let mask = tiling::segment_image(m, &crop, &grid, 0.5)?;
        println!("{label:<5} IoU {:.4}", Confusion::from_masks(&mask, &gt)?.iou()?);
    }
    Ok(())
}
