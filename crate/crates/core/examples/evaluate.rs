//! IoU and pixel accuracy over an `images/` + `gt/` dataset directory.
//!
//!     cargo run --example evaluate [dataset_dir]

use std::path::PathBuf;

use unet_edge::metrics::{self, Confusion};
use unet_edge::{storage, tiling};

fn main() -> unet_edge::Result<()> {
    let fixtures = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let data = std::env::args().nth(1).map(PathBuf::from).unwrap_or(fixtures.join("eval"));
    let model = storage::load_model(fixtures.join("model"))?;
    let index = storage::index_dataset(&data, None)?;

    let mut total = Confusion::default();
    for pair in &index.pairs {
        let image = storage::read_ppm(&pair.image)?;
        let gt = storage::read_pgm(&pair.mask)?;
        let (_, _, h, w) = image.nchw()?;
        let grid = tiling::plan(h, w, 256, 224)?;
        let probs = tiling::predict_raster(&model, &image, &grid)?;
        let pred = probs.threshold(0.5);
        let c = Confusion::from_masks(&pred, &gt)?;
        println!(
            "{:<10} iou {:.4}  acc {:.4}  bce {:.4}",
            pair.stem,
            c.iou()?,
            c.accuracy()?,
            metrics::bce(&probs.data, &gt.data)?
        );
        total += c;
    }
    print!("{}", metrics::report_csv(index.len(), &total));
    Ok(())
}
