//! Static cost model: parameter and MAC counts, path shares and the
//! architecture sweep.
//!
//! One MAC is one multiply-accumulate pair; bias additions are not counted.
//! Convolutions cost `I * O * Kh * Kw * Hout * Wout`. Transposed convolutions
//! are counted at output resolution the same way, which includes kernel taps
//! that land on implicit zeros. Pooling, upsampling and activations are free.

use std::fmt::Write as _;

use crate::error::Result;
use crate::model::{layer_plan, Stage, UNetConfig};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerCost {
    pub name: String,
    pub stage: Stage,
    pub params: u64,
    pub macs: u64,
    /// `(C, H, W)` of the layer output for one image.
    pub output_shape: (usize, usize, usize),
}

/// Fractions of a total attributed to each path of the network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathShares {
    pub encoder: f64,
    pub middle: f64,
    pub decoder: f64,
    pub final_layer: f64,
}

impl PathShares {
    /// Share of the down-sampling path plus the middle block.
    pub fn encoder_middle(&self) -> f64 {
        self.encoder + self.middle
    }

    /// Share of the up-sampling path including the output projection.
    pub fn decoder_final(&self) -> f64 {
        self.decoder + self.final_layer
    }

    pub fn sum(&self) -> f64 {
        self.encoder + self.middle + self.decoder + self.final_layer
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub config: UNetConfig,
    pub layers: Vec<LayerCost>,
    pub total_params: u64,
    pub total_macs: u64,
    pub param_shares: PathShares,
    pub mac_shares: PathShares,
}

fn shares(layers: &[LayerCost], value: impl Fn(&LayerCost) -> u64) -> PathShares {
    let total: u64 = layers.iter().map(&value).sum();
    let part = |pred: &dyn Fn(&Stage) -> bool| {
        let s: u64 = layers.iter().filter(|l| pred(&l.stage)).map(&value).sum();
        if total == 0 {
            0.0
        } else {
            s as f64 / total as f64
        }
    };
    PathShares {
        encoder: part(&|s| matches!(s, Stage::Encoder(_))),
        middle: part(&|s| matches!(s, Stage::Middle)),
        decoder: part(&|s| matches!(s, Stage::Decoder(_))),
        final_layer: part(&|s| matches!(s, Stage::Final)),
    }
}

/// Full cost report for one input of `config.input_size`.
pub fn analyze(config: &UNetConfig) -> Result<CostReport> {
    let layers: Vec<LayerCost> = layer_plan(config)?
        .into_iter()
        .map(|l| LayerCost {
            params: l.params(),
            macs: l.macs(),
            output_shape: (l.out_channels, l.output_hw.0, l.output_hw.1),
            name: l.name,
            stage: l.stage,
        })
        .collect();
    Ok(CostReport {
        config: *config,
        total_params: layers.iter().map(|l| l.params).sum(),
        total_macs: layers.iter().map(|l| l.macs).sum(),
        param_shares: shares(&layers, |l| l.params),
        mac_shares: shares(&layers, |l| l.macs),
        layers,
    })
}

pub fn count_params(config: &UNetConfig) -> Result<u64> {
    Ok(analyze(config)?.total_params)
}

pub fn count_macs(config: &UNetConfig) -> Result<u64> {
    Ok(analyze(config)?.total_macs)
}

/// `(param_shares, mac_shares)`.
pub fn path_breakdown(config: &UNetConfig) -> Result<(PathShares, PathShares)> {
    let r = analyze(config)?;
    Ok((r.param_shares, r.mac_shares))
}

impl CostReport {
    /// Per-layer CSV: `layer,stage,params,macs,out_c,out_h,out_w`.
    pub fn layers_csv(&self) -> String {
        let mut out = String::from("layer,stage,params,macs,out_c,out_h,out_w\n");
        for l in &self.layers {
            let stage = match l.stage {
                Stage::Encoder(_) => "encoder",
                Stage::Middle => "middle",
                Stage::Decoder(_) => "decoder",
                Stage::Final => "final",
            };
            let (c, h, w) = l.output_shape;
            writeln!(out, "{},{stage},{},{},{c},{h},{w}", l.name, l.params, l.macs).unwrap();
        }
        out
    }
}

/// Base channel counts of the sweep: 1/32 to 1/2 of the original 64.
pub const SWEEP_BASES: [usize; 5] = [2, 4, 8, 16, 32];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SweepRow {
    pub config: UNetConfig,
    pub params: u64,
    pub macs: u64,
}

impl SweepRow {
    pub fn label(&self) -> String {
        format!("b{}c{}", self.config.blocks, self.config.base_channels)
    }
}

/// Cost of every block count 1..=4 crossed with every sweep width.
pub fn sweep(template: &UNetConfig) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(20);
    for blocks in 1..=4 {
        for base in SWEEP_BASES {
            let config = UNetConfig {
                blocks,
                base_channels: base,
                ..*template
            };
            let r = analyze(&config)?;
            rows.push(SweepRow {
                config,
                params: r.total_params,
                macs: r.total_macs,
            });
        }
    }
    Ok(rows)
}

/// CSV with header `config,blocks,base_channels,params,macs`.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("config,blocks,base_channels,params,macs\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.label(),
            r.config.blocks,
            r.config.base_channels,
            r.params,
            r.macs
        )
        .unwrap();
    }
    out
}
