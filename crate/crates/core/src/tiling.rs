//! Overlapping tile decomposition of large rasters and stitch-back.
//!
//! Along each axis tile origins are `0, S, 2S, ...` with the last origin
//! clamped to `dim - T`, so tiles never leave the image and the union of
//! tiles is the whole image. Overlapping predictions are averaged.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::UNetModel;
use crate::storage::Mask;
use crate::tensor::Tensor;

pub const DEFAULT_TILE: usize = 256;
/// 32 pixels of overlap between neighbouring tiles.
pub const DEFAULT_STRIDE: usize = 224;
pub const DEFAULT_THRESHOLD: f32 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileGrid {
    pub height: usize,
    pub width: usize,
    pub tile: usize,
    pub stride: usize,
    rows: Vec<usize>,
    cols: Vec<usize>,
}

fn axis_origins(dim: usize, tile: usize, stride: usize) -> Vec<usize> {
    let count = (dim - tile).div_ceil(stride) + 1;
    (0..count).map(|k| (k * stride).min(dim - tile)).collect()
}

/// Plans a grid of `tile x tile` windows with step `stride`.
pub fn plan(height: usize, width: usize, tile: usize, stride: usize) -> Result<TileGrid> {
    if tile == 0 || tile > height.min(width) {
        return Err(Error::Usage(format!(
            "tile size {tile} does not fit a {height}x{width} image"
        )));
    }
    if stride == 0 || stride > tile {
        return Err(Error::Usage(format!(
            "stride {stride} must be in [1, {tile}]"
        )));
    }
    Ok(TileGrid {
        height,
        width,
        tile,
        stride,
        rows: axis_origins(height, tile, stride),
        cols: axis_origins(width, tile, stride),
    })
}

impl TileGrid {
    pub fn len(&self) -> usize {
        self.rows.len() * self.cols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row_origins(&self) -> &[usize] {
        &self.rows
    }

    pub fn col_origins(&self) -> &[usize] {
        &self.cols
    }

    /// `(y, x)` origins in row-major order.
    pub fn origins(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.rows
            .iter()
            .flat_map(move |&y| self.cols.iter().map(move |&x| (y, x)))
    }

    pub fn origin(&self, index: usize) -> (usize, usize) {
        (self.rows[index / self.cols.len()], self.cols[index % self.cols.len()])
    }

    /// Cuts a `(1, C, H, W)` image into `(1, C, T, T)` tiles in grid order.
    pub fn cut(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        let (n, c, h, w) = image.nchw()?;
        if n != 1 || (h, w) != (self.height, self.width) {
            return Err(Error::Shape(format!(
                "grid is for (1, C, {}, {}), image is {:?}",
                self.height,
                self.width,
                image.shape()
            )));
        }
        let src = image.as_f32()?;
        let t = self.tile;
        self.origins()
            .map(|(y, x)| {
                let mut data = Vec::with_capacity(c * t * t);
                for ch in 0..c {
                    for row in y..y + t {
                        let start = ch * h * w + row * w + x;
                        data.extend_from_slice(&src[start..start + t]);
                    }
                }
                Tensor::from_f32(vec![1, c, t, t], data)
            })
            .collect()
    }

    /// Cuts a single-channel raster into `T x T` maps in grid order.
    pub fn cut_raster(&self, raster: &Raster) -> Result<Vec<Vec<f32>>> {
        let image = Tensor::from_f32(vec![1, 1, raster.height, raster.width], raster.data.clone())?;
        self.cut(&image)?
            .into_iter()
            .map(Tensor::into_f32)
            .collect()
    }
}

/// Single-channel f32 raster.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Raster {
    pub fn threshold(&self, threshold: f32) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&p| u8::from(p >= threshold)).collect(),
        }
    }
}

/// Collects per-tile maps in any completion order; [`finish`] sums every
/// pixel over its covering tiles in grid order, so the result does not
/// depend on scheduling.
///
/// [`finish`]: StitchAccumulator::finish
#[derive(Debug, Clone)]
pub struct StitchAccumulator {
    grid: TileGrid,
    slots: Vec<Option<Vec<f32>>>,
}

impl StitchAccumulator {
    pub fn new(grid: &TileGrid) -> Self {
        StitchAccumulator {
            slots: vec![None; grid.len()],
            grid: grid.clone(),
        }
    }

    pub fn add(&mut self, index: usize, map: Vec<f32>) -> Result<()> {
        let t = self.grid.tile;
        if index >= self.slots.len() {
            return Err(Error::Integrity(format!(
                "tile index {index} outside grid of {}",
                self.slots.len()
            )));
        }
        if map.len() != t * t {
            return Err(Error::Shape(format!(
                "tile {index} has {} values, expected {}",
                map.len(),
                t * t
            )));
        }
        if self.slots[index].replace(map).is_some() {
            return Err(Error::Integrity(format!("tile {index} added twice")));
        }
        Ok(())
    }

    pub fn finish(self) -> Result<Raster> {
        let (h, w, t) = (self.grid.height, self.grid.width, self.grid.tile);
        let mut sum = vec![0.0f64; h * w];
        let mut count = vec![0u32; h * w];
        for (i, slot) in self.slots.iter().enumerate() {
            let map = slot
                .as_ref()
                .ok_or_else(|| Error::Integrity(format!("tile {i} is missing")))?;
            let (y, x) = self.grid.origin(i);
            for r in 0..t {
                let base = (y + r) * w + x;
                for (c, &v) in map[r * t..(r + 1) * t].iter().enumerate() {
                    sum[base + c] += v as f64;
                    count[base + c] += 1;
                }
            }
        }
        let data = sum
            .iter()
            .zip(&count)
            .map(|(&s, &n)| (s / n as f64) as f32)
            .collect();
        Ok(Raster {
            height: h,
            width: w,
            data,
        })
    }
}

/// Averages overlapping tile maps (given in grid order) into one raster.
pub fn stitch(grid: &TileGrid, maps: Vec<Vec<f32>>) -> Result<Raster> {
    if maps.len() != grid.len() {
        return Err(Error::Integrity(format!(
            "{} tile maps for a grid of {}",
            maps.len(),
            grid.len()
        )));
    }
    let mut acc = StitchAccumulator::new(grid);
    for (i, m) in maps.into_iter().enumerate() {
        acc.add(i, m)?;
    }
    acc.finish()
}

/// Tiles processed per forward call.
const TILE_BATCH: usize = 4;

/// Probability raster for a `(1, C, H, W)` image via tiled inference.
pub fn predict_raster(model: &UNetModel, image: &Tensor, grid: &TileGrid) -> Result<Raster> {
    let cfg = model.config();
    if cfg.input_size != (grid.tile, grid.tile) {
        return Err(Error::Config(format!(
            "tile size {} does not match model input {:?}",
            grid.tile, cfg.input_size
        )));
    }
    if cfg.out_channels != 1 {
        return Err(Error::Config("tiled segmentation needs a single output channel".into()));
    }
    let tiles = grid.cut(image)?;
    let chunks: Vec<&[Tensor]> = tiles.chunks(TILE_BATCH).collect();
    let outputs = chunks
        .par_iter()
        .enumerate()
        .map(|(ci, chunk)| {
            let probs = model.forward(&Tensor::stack_batch(chunk)?)?;
            let maps = probs
                .split_batch()?
                .into_iter()
                .map(Tensor::into_f32)
                .collect::<Result<Vec<_>>>()?;
            Ok((ci * TILE_BATCH, maps))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut acc = StitchAccumulator::new(grid);
    for (start, maps) in outputs {
        for (k, m) in maps.into_iter().enumerate() {
            acc.add(start + k, m)?;
        }
    }
    acc.finish()
}

/// Binary building mask: tiled inference, stitching, then `p >= threshold`.
pub fn segment_image(model: &UNetModel, image: &Tensor, grid: &TileGrid, threshold: f32) -> Result<Mask> {
    Ok(predict_raster(model, image, grid)?.threshold(threshold))
}
