//! Confusion counts and the four mask quality measures: Jaccard index,
//! precision, recall and overall accuracy. Positive means cloud.
//!
//! A ratio whose denominator is zero is reported as `None` rather than being
//! coerced to 0 or 1.

use std::ops::Add;

use crate::error::{Error, Result};
use crate::raster::MaskGrid;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// Counts with prediction and reference exchanged.
    pub fn swapped(&self) -> Self {
        Self { tp: self.tp, tn: self.tn, fp: self.fn_, fn_: self.fp }
    }
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self { tp: self.tp + o.tp, tn: self.tn + o.tn, fp: self.fp + o.fp, fn_: self.fn_ + o.fn_ }
    }
}

pub fn confusion(pred: &MaskGrid, truth: &MaskGrid) -> Result<ConfusionCounts> {
    pred.check_dims(truth, "prediction vs reference")?;
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.bits().iter().zip(truth.bits()) {
        match (p, t) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub jaccard: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub overall_accuracy: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn compute_metrics(c: &ConfusionCounts) -> MetricReport {
    MetricReport {
        jaccard: ratio(c.tp, c.tp + c.fn_ + c.fp),
        precision: ratio(c.tp, c.tp + c.fp),
        recall: ratio(c.tp, c.tp + c.fn_),
        overall_accuracy: ratio(c.tp + c.tn, c.total()),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AggregateMode {
    /// Sum the counts over scenes, then compute each ratio once.
    Pooled,
    /// Average each per-scene ratio over the scenes where it is defined.
    Mean,
}

pub fn aggregate(counts: &[ConfusionCounts], mode: AggregateMode) -> Result<MetricReport> {
    if counts.is_empty() {
        return Err(Error::Input("cannot aggregate zero scenes".into()));
    }
    Ok(match mode {
        AggregateMode::Pooled => {
            compute_metrics(&counts.iter().copied().fold(ConfusionCounts::default(), Add::add))
        }
        AggregateMode::Mean => {
            let reports: Vec<MetricReport> = counts.iter().map(compute_metrics).collect();
            let mean = |f: fn(&MetricReport) -> Option<f64>| {
                let vals: Vec<f64> = reports.iter().filter_map(f).collect();
                (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
            };
            MetricReport {
                jaccard: mean(|r| r.jaccard),
                precision: mean(|r| r.precision),
                recall: mean(|r| r.recall),
                overall_accuracy: mean(|r| r.overall_accuracy),
            }
        }
    })
}
