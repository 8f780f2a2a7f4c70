//! Per-image confusion counts and the five evaluation metrics, averaged over
//! images (not pooled over pixels). Any `0/0` ratio is scored as 1.0.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mask::BinaryMask;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

pub fn confusion_counts(pred: &BinaryMask, gt: &BinaryMask) -> Result<ConfusionCounts> {
    if pred.dims() != gt.dims() {
        return Err(Error::Dataset(format!(
            "prediction {:?} and ground truth {:?} differ in size",
            pred.dims(),
            gt.dims()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerImageMetrics {
    pub id: String,
    pub se: f64,
    pub sp: f64,
    pub ac: f64,
    pub ja: f64,
    pub di: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

pub fn compute_metrics(id: impl Into<String>, c: &ConfusionCounts) -> PerImageMetrics {
    PerImageMetrics {
        id: id.into(),
        se: ratio(c.tp, c.tp + c.fn_),
        sp: ratio(c.tn, c.tn + c.fp),
        ac: ratio(c.tp + c.tn, c.total()),
        ja: ratio(c.tp, c.tp + c.fp + c.fn_),
        di: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregateReport {
    pub images: Vec<PerImageMetrics>,
    pub mean: PerImageMetrics,
}

impl AggregateReport {
    /// Methods are ranked by mean Jaccard index.
    pub fn ranking_key(&self) -> f64 {
        self.mean.ja
    }
}

pub fn aggregate(images: Vec<PerImageMetrics>) -> Result<AggregateReport> {
    if images.is_empty() {
        return Err(Error::Dataset("cannot aggregate an empty metric list".into()));
    }
    let n = images.len() as f64;
    let mean_of = |f: fn(&PerImageMetrics) -> f64| images.iter().map(f).sum::<f64>() / n;
    let mean = PerImageMetrics {
        id: "MEAN".into(),
        se: mean_of(|m| m.se),
        sp: mean_of(|m| m.sp),
        ac: mean_of(|m| m.ac),
        ja: mean_of(|m| m.ja),
        di: mean_of(|m| m.di),
    };
    Ok(AggregateReport { images, mean })
}

fn csv_row(out: &mut String, m: &PerImageMetrics) {
    let _ = writeln!(out, "{},{:.6},{:.6},{:.6},{:.6},{:.6}", m.id, m.se, m.sp, m.ac, m.ja, m.di);
}

pub fn report_csv(report: &AggregateReport) -> String {
    let mut out = String::from("id,se,sp,ac,ja,di\n");
    for m in &report.images {
        csv_row(&mut out, m);
    }
    csv_row(&mut out, &report.mean);
    out
}

pub fn write_report(report: &AggregateReport, path: &Path) -> Result<()> {
    fs::write(path, report_csv(report)).map_err(|e| Error::io(path, e))
}
