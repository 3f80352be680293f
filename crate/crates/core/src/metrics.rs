//! Building-class IoU, pixel accuracy and binary cross-entropy.

use std::fmt::Write as _;
use std::ops::{Add, AddAssign};

use crate::error::{Error, Result};
use crate::storage::Mask;

/// Pixel confusion counts for the building (1) class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Accumulates one prediction/ground-truth pair.
    pub fn update(&mut self, pred: &Mask, gt: &Mask) -> Result<()> {
        *self += Confusion::from_masks(pred, gt)?;
        Ok(())
    }

    pub fn from_masks(pred: &Mask, gt: &Mask) -> Result<Confusion> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(Error::Shape(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height, pred.width, gt.height, gt.width
            )));
        }
        Confusion::from_slices(&pred.data, &gt.data)
    }

    pub fn from_slices(pred: &[u8], gt: &[u8]) -> Result<Confusion> {
        if pred.len() != gt.len() {
            return Err(Error::Shape(format!(
                "{} predicted pixels vs {} ground-truth pixels",
                pred.len(),
                gt.len()
            )));
        }
        // counts[2 * gt + pred]
        let mut counts = [0u64; 4];
        for (&p, &g) in pred.iter().zip(gt) {
            if p > 1 || g > 1 {
                return Err(Error::UnsupportedFormat(format!(
                    "mask values must be 0 or 1, got pred={p} gt={g}"
                )));
            }
            counts[(2 * g + p) as usize] += 1;
        }
        Ok(Confusion {
            tn: counts[0],
            fp: counts[1],
            fn_: counts[2],
            tp: counts[3],
        })
    }

    /// `tp / (tp + fp + fn)`.
    pub fn iou(&self) -> Result<f64> {
        let denom = self.tp + self.fp + self.fn_;
        if denom == 0 {
            return Err(Error::UndefinedMetric("IoU with no positive pixels"));
        }
        Ok(self.tp as f64 / denom as f64)
    }

    /// `(tp + tn) / total`.
    pub fn accuracy(&self) -> Result<f64> {
        if self.total() == 0 {
            return Err(Error::UndefinedMetric("accuracy over zero pixels"));
        }
        Ok((self.tp + self.tn) as f64 / self.total() as f64)
    }
}

impl Add for Confusion {
    type Output = Confusion;

    fn add(self, o: Confusion) -> Confusion {
        Confusion {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl AddAssign for Confusion {
    fn add_assign(&mut self, o: Confusion) {
        *self = *self + o;
    }
}

impl std::iter::Sum for Confusion {
    fn sum<I: Iterator<Item = Confusion>>(iter: I) -> Confusion {
        iter.fold(Confusion::default(), Add::add)
    }
}

const BCE_EPS: f64 = 1e-7;

/// Mean binary cross-entropy with probabilities clamped to
/// `[1e-7, 1 - 1e-7]`.
pub fn bce(prob: &[f32], gt: &[u8]) -> Result<f64> {
    if prob.len() != gt.len() {
        return Err(Error::Shape(format!(
            "{} probabilities vs {} labels",
            prob.len(),
            gt.len()
        )));
    }
    if prob.is_empty() {
        return Err(Error::UndefinedMetric("BCE over zero pixels"));
    }
    let sum: f64 = prob
        .iter()
        .zip(gt)
        .map(|(&p, &y)| {
            let p = (p as f64).clamp(BCE_EPS, 1.0 - BCE_EPS);
            let y = y as f64;
            y * p.ln() + (1.0 - y) * (1.0 - p).ln()
        })
        .sum();
    Ok(-sum / prob.len() as f64)
}

/// Evaluation CSV: `images,tp,fp,fn,tn,iou,accuracy`. Undefined metrics are
/// left empty.
pub fn report_csv(images: usize, c: &Confusion) -> String {
    let fmt = |r: Result<f64>| r.map(|v| format!("{v:.6}")).unwrap_or_default();
    let mut out = String::from("images,tp,fp,fn,tn,iou,accuracy\n");
    writeln!(
        out,
        "{images},{},{},{},{},{},{}",
        c.tp,
        c.fp,
        c.fn_,
        c.tn,
        fmt(c.iou()),
        fmt(c.accuracy())
    )
    .unwrap();
    out
}
