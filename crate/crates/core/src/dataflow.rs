//! Dataflow accelerator estimate: per-node folding, initiation interval and
//! the resulting latency and throughput.
//!
//! Every weighted layer becomes one pipeline node. A node with `pe` output
//! channel lanes and `simd` input lanes needs `ceil(MACs / (pe * simd))`
//! cycles per image. In steady state the pipeline accepts one image per
//! initiation interval (the slowest node), so `fps = clock / II`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerDesc, UNetModel};

pub const DEFAULT_CLOCK_HZ: u64 = 100_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub pe: u64,
    pub simd: u64,
}

impl Fold {
    pub const ONE: Fold = Fold { pe: 1, simd: 1 };
}

/// Folding of every weighted layer plus the accelerator clock. Serialized as
/// a flat JSON object: `{"clock_hz": 100000000, "enc0.conv0": {"pe": 1, "simd": 1}, ...}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldingConfig {
    pub clock_hz: u64,
    #[serde(flatten)]
    pub layers: BTreeMap<String, Fold>,
}

impl FoldingConfig {
    /// `pe = simd = 1` for every layer.
    pub fn unfolded(model: &UNetModel, clock_hz: u64) -> Self {
        FoldingConfig {
            clock_hz,
            layers: model.layers().iter().map(|l| (l.name.clone(), Fold::ONE)).collect(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Json {
            context: "folding config".into(),
            source: e,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("folding serializes") + "\n"
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Sum of `pe * simd` over all layers.
    pub fn total_parallelism(&self) -> u64 {
        self.layers.values().map(|f| f.pe * f.simd).sum()
    }
}

/// Input-side work per output channel: `I * Kh * Kw`.
fn simd_extent(layer: &LayerDesc) -> u64 {
    (layer.in_channels * layer.kernel * layer.kernel) as u64
}

/// Cycles for one image through `layer` at the given folding.
pub fn node_cycles(layer: &LayerDesc, fold: Fold) -> Result<u64> {
    let out = layer.out_channels as u64;
    let inner = simd_extent(layer);
    if fold.pe == 0 || !out.is_multiple_of(fold.pe) {
        return Err(Error::Config(format!(
            "`{}`: pe {} does not divide {out} output channels",
            layer.name, fold.pe
        )));
    }
    if fold.simd == 0 || !inner.is_multiple_of(fold.simd) {
        return Err(Error::Config(format!(
            "`{}`: simd {} does not divide {inner} (in_channels * kernel^2)",
            layer.name, fold.simd
        )));
    }
    Ok(layer.macs().div_ceil(fold.pe * fold.simd))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeCycles {
    pub name: String,
    pub cycles: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataflowReport {
    pub nodes: Vec<NodeCycles>,
    pub initiation_interval: u64,
    pub clock_hz: u64,
    /// Node with the largest cycle count (first one on ties).
    pub bottleneck: String,
}

impl DataflowReport {
    pub fn from_nodes(nodes: Vec<NodeCycles>, clock_hz: u64) -> Result<Self> {
        if clock_hz == 0 {
            return Err(Error::Config("clock must be positive".into()));
        }
        let worst = nodes
            .iter()
            .fold(None::<&NodeCycles>, |best, n| match best {
                Some(b) if b.cycles >= n.cycles => Some(b),
                _ => Some(n),
            })
            .ok_or_else(|| Error::Config("dataflow graph has no nodes".into()))?;
        if worst.cycles == 0 {
            return Err(Error::Config("initiation interval of zero cycles".into()));
        }
        Ok(DataflowReport {
            initiation_interval: worst.cycles,
            bottleneck: worst.name.clone(),
            clock_hz,
            nodes,
        })
    }

    pub fn latency_s(&self) -> f64 {
        self.initiation_interval as f64 / self.clock_hz as f64
    }

    pub fn fps(&self) -> f64 {
        self.clock_hz as f64 / self.initiation_interval as f64
    }

    /// Millijoules per image at `power_w` watts.
    pub fn energy_mj(&self, power_w: f64) -> f64 {
        power_w * self.latency_s() * 1000.0
    }

    /// CSV `node,cycles` followed by a `#` summary line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("node,cycles\n");
        for n in &self.nodes {
            writeln!(out, "{},{}", n.name, n.cycles).unwrap();
        }
        writeln!(
            out,
            "# ii={} clock_hz={} latency_ms={:.6} fps={:.3} bottleneck={}",
            self.initiation_interval,
            self.clock_hz,
            self.latency_s() * 1000.0,
            self.fps(),
            self.bottleneck
        )
        .unwrap();
        out
    }
}

/// Estimates the pipeline for `model` under `folding`. Every weighted layer
/// must be folded, and no unknown layer may appear.
pub fn estimate(model: &UNetModel, folding: &FoldingConfig) -> Result<DataflowReport> {
    for name in folding.layers.keys() {
        if model.layer(name).is_none() {
            return Err(Error::Config(format!("folding names unknown layer `{name}`")));
        }
    }
    let nodes = model
        .layers()
        .iter()
        .map(|l| {
            let fold = folding
                .layers
                .get(&l.name)
                .ok_or_else(|| Error::Config(format!("folding does not cover layer `{}`", l.name)))?;
            Ok(NodeCycles {
                name: l.name.clone(),
                cycles: node_cycles(l, *fold)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    DataflowReport::from_nodes(nodes, folding.clock_hz)
}

fn divisors(n: u64) -> Vec<u64> {
    let mut small = Vec::new();
    let mut large = Vec::new();
    let mut d = 1;
    while d * d <= n {
        if n.is_multiple_of(d) {
            small.push(d);
            if d * d != n {
                large.push(n / d);
            }
        }
        d += 1;
    }
    small.extend(large.into_iter().rev());
    small
}

/// Cheapest legal folding of one layer within `budget` cycles: minimal
/// `pe * simd`, ties broken by the smaller `pe`.
fn fold_layer(layer: &LayerDesc, budget: u64) -> Option<Fold> {
    let macs = layer.macs();
    let mut best: Option<Fold> = None;
    for pe in divisors(layer.out_channels as u64) {
        for simd in divisors(simd_extent(layer)) {
            if macs.div_ceil(pe * simd) > budget {
                continue;
            }
            let better = match best {
                None => true,
                Some(b) => pe * simd < b.pe * b.simd || (pe * simd == b.pe * b.simd && pe < b.pe),
            };
            if better {
                best = Some(Fold { pe, simd });
            }
            // larger simd for this pe only costs more
            break;
        }
    }
    best
}

/// Minimal-parallelism folding whose initiation interval fits
/// `target_latency_s` at `clock_hz`.
pub fn target_latency_fold(model: &UNetModel, clock_hz: u64, target_latency_s: f64) -> Result<FoldingConfig> {
    if clock_hz == 0 {
        return Err(Error::Config("clock must be positive".into()));
    }
    if !(target_latency_s > 0.0) || !target_latency_s.is_finite() {
        return Err(Error::Usage(format!("latency target {target_latency_s} s must be positive")));
    }
    // the relative nudge absorbs binary rounding of e.g. 7.87e-3 * 1e8
    let budget = (target_latency_s * clock_hz as f64 * (1.0 + 1e-12)).floor() as u64;
    let mut layers = BTreeMap::new();
    let mut worst: Option<(&LayerDesc, u64)> = None;
    for l in model.layers() {
        match fold_layer(l, budget) {
            Some(f) => {
                layers.insert(l.name.clone(), f);
            }
            None => {
                let needed = l.macs().div_ceil(l.out_channels as u64 * simd_extent(l));
                if worst.is_none_or(|(_, n)| needed > n) {
                    worst = Some((l, needed));
                }
            }
        }
    }
    if let Some((l, needed)) = worst {
        return Err(Error::Infeasible {
            layer: l.name.clone(),
            needed,
            budget,
        });
    }
    Ok(FoldingConfig { clock_hz, layers })
}
