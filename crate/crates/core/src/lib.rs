//! Lightweight U-Net for building-footprint segmentation of aerial imagery:
//! float and quantized inference, tiled prediction over large scenes, cost
//! analysis, latency benchmarking and dataflow accelerator estimates.
//!
//! ```no_run
//! use unet_edge::{model, storage, tiling};
//!
//! let net = storage::load_model("models/b4c16")?;
//! let image = storage::read_ppm("scene.ppm")?;
//! let (_, _, h, w) = image.nchw()?;
//! let grid = tiling::plan(h, w, 256, 224)?;
//! let mask = tiling::segment_image(&net, &image, &grid, 0.5)?;
//! storage::write_pgm("scene_mask.pgm", &mask)?;
//! # let _ = model::INPUT_SITE;
//! # Ok::<(), unet_edge::Error>(())
//! ```

// `!(x > 0.0)` deliberately rejects NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analyzer;
pub mod bench;
pub mod cli;
pub mod dataflow;
pub mod error;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod quant;
pub mod storage;
pub mod tensor;
pub mod tiling;

pub use error::{Error, Result};
pub use model::{build, UNetConfig, UNetModel, UpsampleMode};
pub use quant::QuantScheme;
pub use tensor::{QuantParams, Tensor};
