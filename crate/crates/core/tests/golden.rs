//! Golden fixtures: a hand-designed 2-block model, a synthetic aerial crop
//! with ground truth, and outputs checked against the brute-force oracle.
//!
//! The fixture files are committed. `regenerate_fixtures` rebuilds them
//! (run with `cargo test --test golden -- --ignored`); every other test only
//! reads them.

mod support;

use std::fs;

use rand::Rng;
use support::{fixtures_dir, Nchw};
use unet_edge::dataflow::{self, Fold, FoldingConfig, DEFAULT_CLOCK_HZ};
use unet_edge::metrics::Confusion;
use unet_edge::model::{self, layer_plan, UNetConfig};
use unet_edge::storage::{self, Mask, ModelManifest, StoredTensor, WeightStore};
use unet_edge::{tiling, Tensor};

const BRIGHTNESS_GAIN: f32 = 12.0;

fn fixture_config() -> UNetConfig {
    UNetConfig::new(2, 8)
}

/// Channel 0 carries a 3x3 box mean of the RGB brightness from `enc0.conv0`
/// through the skip of block 0 and both `dec0` convolutions to the head, which
/// thresholds it at 0.5. Every other weight is small noise, so the rest of the
/// network still contributes a little to the output.
fn designed_store() -> WeightStore {
    let cfg = fixture_config();
    let mut rng = support::rng(11);
    let mut store = WeightStore::new();
    for l in layer_plan(&cfg).unwrap() {
        let [o, i, kh, kw] = l.weight_shape();
        let per_out = i * kh * kw;
        let mut w = support::uniform(&mut rng, o * per_out, -0.05, 0.05);
        let mut b = support::uniform(&mut rng, o, -0.01, 0.01);
        let centre = |ic: usize| ic * kh * kw + (kh / 2) * kw + kw / 2;
        let designed = match l.name.as_str() {
            "enc0.conv0" => Some(vec![1.0 / 27.0; per_out]),
            "enc0.conv1" | "dec0.conv1" => {
                let mut row = vec![0.0; per_out];
                row[centre(0)] = 1.0;
                Some(row)
            }
            "dec0.conv0" => {
                // input channels are [up (8), skip (8)]; skip channel 0 is index 8
                let mut row = vec![0.0; per_out];
                row[centre(8)] = 1.0;
                Some(row)
            }
            "final.conv" => {
                let mut row: Vec<f32> = (0..per_out).map(|_| rng.gen_range(-0.1..0.1)).collect();
                row[0] = BRIGHTNESS_GAIN;
                b[0] = -BRIGHTNESS_GAIN / 2.0;
                Some(row)
            }
            _ => None,
        };
        if let Some(row) = designed {
            w[..per_out].copy_from_slice(&row);
            if l.name != "final.conv" {
                b[0] = 0.0;
            }
        }
        store
            .insert(l.weight_name(), StoredTensor::f32(l.weight_shape().to_vec(), w))
            .unwrap();
        store.insert(l.bias_name(), StoredTensor::f32(vec![o], b)).unwrap();
    }
    store
}

/// Bright, slightly tinted rectangles ("roofs") on a noisy dark background,
/// quantized to 8 bits exactly as a PPM would be. Returns the image and its
/// ground-truth mask.
fn synthetic_scene(h: usize, w: usize, buildings: usize, seed: u64) -> (Tensor, Mask) {
    let mut rng = support::rng(seed);
    let mut gt = vec![0u8; h * w];
    for _ in 0..buildings {
        let bh = rng.gen_range(18..70);
        let bw = rng.gen_range(18..70);
        let y0 = rng.gen_range(0..h - bh);
        let x0 = rng.gen_range(0..w - bw);
        for y in y0..y0 + bh {
            for x in x0..x0 + bw {
                gt[y * w + x] = 1;
            }
        }
    }
    let mut data = vec![0.0f32; 3 * h * w];
    let tint = [1.0f32, 0.95, 0.9];
    for (i, &g) in gt.iter().enumerate() {
        let base = if g == 1 { 0.72 } else { 0.22 };
        let shade: f32 = rng.gen_range(-0.12..0.12);
        for c in 0..3 {
            let v = (base + shade) * tint[c] + rng.gen_range(-0.05..0.05);
            data[c * h * w + i] = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }
    (
        Tensor::from_f32(vec![1, 3, h, w], data).unwrap(),
        Mask::new(h, w, gt).unwrap(),
    )
}

fn oracle_probs(store: &WeightStore, image: &Tensor) -> Vec<f32> {
    let y = support::unet_forward(&fixture_config(), store, &Nchw::from_tensor(image));
    y.data.iter().map(|&v| v as f32).collect()
}

/// Library segmentation of `image`, cross-checked pixel by pixel against the
/// oracle forward plus coverage-averaged stitching. The two may only disagree
/// where the oracle probability is within float noise of the threshold.
fn checked_mask(store: &WeightStore, image: &Tensor) -> Mask {
    let (_, _, h, w) = image.nchw().unwrap();
    let grid = tiling::plan(h, w, 256, 224).unwrap();
    let origins: Vec<_> = grid.origins().collect();
    let maps: Vec<Vec<f32>> = grid
        .cut(image)
        .unwrap()
        .iter()
        .map(|t| oracle_probs(store, t))
        .collect();
    let probs = support::stitch_by_coverage(h, w, 256, &origins, &maps);
    let net = model::build(fixture_config()).unwrap().bind_weights(store).unwrap();
    let mask = tiling::segment_image(&net, image, &grid, 0.5).unwrap();
    for (i, (&p, &m)) in probs.iter().zip(&mask.data).enumerate() {
        if u8::from(p >= 0.5) != m {
            assert!((p - 0.5).abs() < 1e-5, "pixel {i}: oracle {p}, library {m}");
        }
    }
    mask
}

/// Folding of the default network whose slowest node is `dec0.conv0` at
/// `pe = 16, simd = 24`: 301,989,888 MACs / 384 = 786,432 cycles.
fn reference_folding() -> FoldingConfig {
    let net = model::build(UNetConfig::default()).unwrap();
    let mut f = dataflow::target_latency_fold(&net, DEFAULT_CLOCK_HZ, 786_432.0 / DEFAULT_CLOCK_HZ as f64).unwrap();
    f.layers.insert("dec0.conv0".into(), Fold { pe: 16, simd: 24 });
    f
}

#[test]
#[ignore = "rewrites the committed fixtures"]
fn regenerate_fixtures() {
    let dir = fixtures_dir();
    fs::create_dir_all(&dir).unwrap();
    let store = designed_store();
    let manifest = ModelManifest {
        config: fixture_config(),
        quant: None,
    };
    storage::write_model_dir(dir.join("model"), &manifest, &store).unwrap();

    let (crop, gt) = synthetic_scene(512, 512, 22, 2024);
    storage::write_ppm(dir.join("crop512.ppm"), &crop).unwrap();
    storage::write_pgm(dir.join("crop512_gt.pgm"), &gt).unwrap();
    storage::write_pgm(dir.join("crop512_mask.pgm"), &checked_mask(&store, &crop)).unwrap();

    let tile = &tiling::plan(512, 512, 256, 256).unwrap().cut(&crop).unwrap()[0];
    let mut probs = WeightStore::new();
    probs
        .insert("probs", StoredTensor::f32(vec![1, 1, 256, 256], oracle_probs(&store, tile)))
        .unwrap();
    storage::write_store(dir.join("tile256_probs.unw"), &probs).unwrap();

    let eval = dir.join("eval");
    fs::create_dir_all(eval.join("images")).unwrap();
    fs::create_dir_all(eval.join("gt")).unwrap();
    let mut expected = Vec::new();
    for (stem, seed) in [("scene_a", 7u64), ("scene_b", 8)] {
        let (img, gt) = synthetic_scene(256, 256, 6, seed);
        storage::write_ppm(eval.join("images").join(format!("{stem}.ppm")), &img).unwrap();
        storage::write_pgm(eval.join("gt").join(format!("{stem}.pgm")), &gt).unwrap();
        let pred = checked_mask(&store, &img);
        let (tp, fp, fn_, tn) = support::confusion(&pred.data, &gt.data);
        expected.push(serde_json::json!({"stem": stem, "tp": tp, "fp": fp, "fn": fn_, "tn": tn}));
    }
    fs::write(
        dir.join("eval_expected.json"),
        serde_json::to_string_pretty(&expected).unwrap() + "\n",
    )
    .unwrap();

    fs::write(dir.join("folding_b4c16.json"), reference_folding().to_json()).unwrap();
}

fn load_fixture_model() -> unet_edge::UNetModel {
    storage::load_model(fixtures_dir().join("model")).unwrap()
}

#[test]
fn fixture_model_matches_its_design() {
    let (manifest, store) = storage::read_model_dir(fixtures_dir().join("model")).unwrap();
    assert_eq!(manifest.config, fixture_config());
    assert!(manifest.quant.is_none());
    assert_eq!(store, designed_store());
}

#[test]
fn forward_matches_frozen_oracle_output() {
    let net = load_fixture_model();
    let crop = storage::read_ppm(fixtures_dir().join("crop512.ppm")).unwrap();
    let tile = &tiling::plan(512, 512, 256, 256).unwrap().cut(&crop).unwrap()[0];
    let got = net.forward(tile).unwrap();
    let want = storage::read_store(fixtures_dir().join("tile256_probs.unw")).unwrap();
    let want = want.get("probs").unwrap().to_f32_tensor("probs").unwrap();
    assert_eq!(got.shape(), want.shape());
    let diff = got
        .as_f32()
        .unwrap()
        .iter()
        .zip(want.as_f32().unwrap())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    assert!(diff <= 1e-5, "max abs diff {diff}");
}

#[test]
fn tiled_segmentation_reproduces_frozen_mask() {
    let net = load_fixture_model();
    let crop = storage::read_ppm(fixtures_dir().join("crop512.ppm")).unwrap();
    let grid = tiling::plan(512, 512, 256, 224).unwrap();
    assert_eq!(grid.len(), 9);
    let mask = tiling::segment_image(&net, &crop, &grid, 0.5).unwrap();
    let want = storage::read_pgm(fixtures_dir().join("crop512_mask.pgm")).unwrap();
    assert_eq!(mask, want);
}

#[test]
fn designed_model_segments_the_crop_well() {
    let want = storage::read_pgm(fixtures_dir().join("crop512_mask.pgm")).unwrap();
    let gt = storage::read_pgm(fixtures_dir().join("crop512_gt.pgm")).unwrap();
    let iou = Confusion::from_masks(&want, &gt).unwrap().iou().unwrap();
    assert!(iou > 0.85, "fixture IoU {iou}");
}

#[test]
fn reference_folding_fixture_is_current() {
    let text = fs::read_to_string(fixtures_dir().join("folding_b4c16.json")).unwrap();
    assert_eq!(FoldingConfig::from_json(&text).unwrap(), reference_folding());
}
