//! Tiled segmentation of a 512x512 crop with the bundled test model.
//!
//!     cargo run --example segment_tiles [image.ppm] [out.pgm]

use std::path::PathBuf;

use unet_edge::metrics::Confusion;
use unet_edge::{storage, tiling};

fn main() -> unet_edge::Result<()> {
    let fixtures = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let mut args = std::env::args().skip(1);
    let image_path = args.next().map(PathBuf::from).unwrap_or(fixtures.join("crop512.ppm"));
    let out = args.next().map(PathBuf::from).unwrap_or(std::env::temp_dir().join("crop512_mask.pgm"));

    let model = storage::load_model(fixtures.join("model"))?;
    let image = storage::read_ppm(&image_path)?;
    let (_, _, h, w) = image.nchw()?;
    let grid = tiling::plan(h, w, tiling::DEFAULT_TILE, tiling::DEFAULT_STRIDE)?;
    println!(
        "{h}x{w} image, {} tiles (rows at {:?}, cols at {:?})",
        grid.len(),
        grid.row_origins(),
        grid.col_origins()
    );

    let raster = tiling::predict_raster(&model, &image, &grid)?;
    let mask = raster.threshold(tiling::DEFAULT_THRESHOLD);
    storage::write_pgm(&out, &mask)?;
    println!("mask written to {}", out.display());

    if image_path == fixtures.join("crop512.ppm") {
        let gt = storage::read_pgm(fixtures.join("crop512_gt.pgm"))?;
        let c = Confusion::from_masks(&mask, &gt)?;
        println!("IoU {:.4}, accuracy {:.4}", c.iou()?, c.accuracy()?);
    }
    Ok(())
}
