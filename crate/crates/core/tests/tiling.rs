//! Tile planning, cut/stitch identities and the averaging rule checked
//! against a brute-force coverage scan.

mod support;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use unet_edge::model::{build, UNetConfig};
use unet_edge::tiling::{self, Raster, StitchAccumulator};
use unet_edge::Tensor;

fn covered(grid: &tiling::TileGrid) -> Vec<u32> {
    let mut count = vec![0u32; grid.height * grid.width];
    for (y, x) in grid.origins() {
        for r in y..y + grid.tile {
            for c in x..x + grid.tile {
                count[r * grid.width + c] += 1;
            }
        }
    }
    count
}

#[test]
fn scene_of_5000_pixels_needs_529_tiles() {
    let g = tiling::plan(5000, 5000, 256, 224).unwrap();
    assert_eq!(g.len(), 529);
    assert!(g.origins().all(|(y, x)| y + 256 <= 5000 && x + 256 <= 5000));
}

#[test]
fn every_pixel_of_a_500_crop_is_covered() {
    let g = tiling::plan(500, 500, 256, 224).unwrap();
    assert_eq!(g.row_origins(), &[0, 224, 244]);
    assert!(covered(&g).iter().all(|&n| n >= 1));
}

#[test]
fn zero_weight_model_marks_everything() {
    // sigmoid(0) = 0.5 sits exactly on the inclusive threshold
    let net = build(UNetConfig::new(1, 2).with_input_size(16, 16))
        .unwrap()
        .with_zero_weights();
    let image = Tensor::full(vec![1, 3, 40, 28], 0.3);
    let g = tiling::plan(40, 28, 16, 12).unwrap();
    let raster = tiling::predict_raster(&net, &image, &g).unwrap();
    assert!(raster.data.iter().all(|&p| p == 0.5));
    assert!(tiling::segment_image(&net, &image, &g, 0.5).unwrap().data.iter().all(|&m| m == 1));
    assert!(tiling::segment_image(&net, &image, &g, 1.1).unwrap().data.iter().all(|&m| m == 0));
}

#[test]
fn tile_size_must_match_the_model() {
    let net = build(UNetConfig::new(1, 2).with_input_size(16, 16))
        .unwrap()
        .with_zero_weights();
    let g = tiling::plan(32, 32, 32, 32).unwrap();
    assert!(tiling::predict_raster(&net, &Tensor::zeros(vec![1, 3, 32, 32]), &g).is_err());
}

fn grid_strategy() -> impl Strategy<Value = (usize, usize, usize, usize)> {
    (1usize..=12).prop_flat_map(|tile| {
        (tile..=40, tile..=40, Just(tile), 1..=tile)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cut_then_stitch_is_the_identity((h, w, tile, stride) in grid_strategy(), seed in any::<u64>()) {
        let g = tiling::plan(h, w, tile, stride).unwrap();
        prop_assert!(covered(&g).iter().all(|&n| n >= 1));
        let mut rng = support::rng(seed);
        let raster = Raster { height: h, width: w, data: support::uniform(&mut rng, h * w, -2.0, 2.0) };
        let maps = g.cut_raster(&raster).unwrap();
        prop_assert_eq!(tiling::stitch(&g, maps).unwrap(), raster);
    }

    #[test]
    fn stitching_matches_coverage_average_in_any_order(
        (h, w, tile, stride) in grid_strategy(),
        seed in any::<u64>(),
    ) {
        let g = tiling::plan(h, w, tile, stride).unwrap();
        let mut rng = support::rng(seed);
        let maps: Vec<Vec<f32>> = (0..g.len()).map(|_| support::uniform(&mut rng, tile * tile, 0.0, 1.0)).collect();
        let origins: Vec<_> = g.origins().collect();
        let want = support::stitch_by_coverage(h, w, tile, &origins, &maps);

        let in_order = tiling::stitch(&g, maps.clone()).unwrap();
        prop_assert!(support::max_abs_diff(&in_order.data, &want) <= 1e-6);

        let mut order: Vec<usize> = (0..g.len()).collect();
        order.shuffle(&mut rng);
        let mut acc = StitchAccumulator::new(&g);
        for i in order {
            acc.add(i, maps[i].clone()).unwrap();
        }
        prop_assert_eq!(acc.finish().unwrap(), in_order);
    }
}
