//! Pixel-wise segmentation metrics, pooled ROC AUC, and the threshold × CC
//! experiment grid.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::consistency::{consistency_check, CCConfig, CCResult};
use crate::error::{Error, Result};
use crate::projector::MaskStack;
use crate::segsim::{binarize, SoftMaskStack};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn of(pred: &[u8], gt: &[u8]) -> Self {
        let mut c = Confusion::default();
        for (&p, &g) in pred.iter().zip(gt) {
            match (p != 0, g != 0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    fn add(self, o: Confusion) -> Confusion {
        Confusion {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }

    /// Both prediction and ground truth are empty.
    pub fn is_empty_pair(&self) -> bool {
        self.tp + self.fp + self.fn_ == 0
    }

    /// IoU, Dice, precision and recall. An empty pair scores 1 on all four;
    /// any other undefined ratio scores 0.
    pub fn metrics(&self) -> MetricRow {
        if self.is_empty_pair() {
            return MetricRow::PERFECT;
        }
        let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        MetricRow {
            iou: ratio(self.tp, self.tp + self.fp + self.fn_),
            dice: ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_),
            precision: ratio(self.tp, self.tp + self.fp),
            recall: ratio(self.tp, self.tp + self.fn_),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StackConfusion {
    pub per_view: Vec<Confusion>,
    pub total: Confusion,
}

pub fn confusion(pred: &MaskStack, gt: &MaskStack) -> Result<StackConfusion> {
    pred.check_same_shape(gt, "prediction vs ground truth")?;
    let per_view: Vec<Confusion> = pred.views().zip(gt.views()).map(|(p, g)| Confusion::of(p, g)).collect();
    let total = per_view.iter().fold(Confusion::default(), |a, &b| a.add(b));
    Ok(StackConfusion { per_view, total })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub iou: f64,
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
}

impl MetricRow {
    pub const PERFECT: MetricRow = MetricRow {
        iou: 1.0,
        dice: 1.0,
        precision: 1.0,
        recall: 1.0,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: impl IntoIterator<Item = f64>) -> Self {
        let xs: Vec<f64> = xs.into_iter().collect();
        if xs.is_empty() {
            return MeanStd { mean: 1.0, std: 0.0 };
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        MeanStd { mean, std: var.sqrt() }
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.3}±{:.3}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub iou: MeanStd,
    pub dice: MeanStd,
    pub precision: MeanStd,
    pub recall: MeanStd,
}

/// How views with empty prediction and empty ground truth enter the
/// per-view average.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyViewPolicy {
    /// Scored as perfect.
    #[default]
    Perfect,
    /// Left out.
    Skip,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub view: usize,
    #[serde(flatten)]
    pub metrics: MetricRow,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_view: Vec<ViewMetrics>,
    /// Mean and population std over `per_view`; 1 ± 0 when no view counts.
    pub aggregate: Aggregate,
    /// Metrics of the confusion summed over the whole stack.
    pub pooled: MetricRow,
    pub auc: Option<f64>,
}

pub fn mask_metrics(pred: &MaskStack, gt: &MaskStack) -> Result<MetricsReport> {
    mask_metrics_with(pred, gt, EmptyViewPolicy::Perfect)
}

pub fn mask_metrics_with(pred: &MaskStack, gt: &MaskStack, policy: EmptyViewPolicy) -> Result<MetricsReport> {
    let conf = confusion(pred, gt)?;
    let per_view: Vec<ViewMetrics> = conf
        .per_view
        .iter()
        .enumerate()
        .filter(|(_, c)| !(policy == EmptyViewPolicy::Skip && c.is_empty_pair()))
        .map(|(view, c)| ViewMetrics {
            view,
            metrics: c.metrics(),
        })
        .collect();
    let col = |f: fn(&MetricRow) -> f64| MeanStd::of(per_view.iter().map(|v| f(&v.metrics)));
    Ok(MetricsReport {
        aggregate: Aggregate {
            iou: col(|m| m.iou),
            dice: col(|m| m.dice),
            precision: col(|m| m.precision),
            recall: col(|m| m.recall),
        },
        pooled: conf.total.metrics(),
        per_view,
        auc: None,
    })
}

/// Area under the pooled pixel ROC curve, integrated with the trapezoid
/// rule over every distinct confidence. Tied positive/negative pairs count
/// one half.
pub fn roc_auc(soft: &SoftMaskStack, gt: &MaskStack) -> Result<f64> {
    soft.check_same_shape(gt, "soft vs ground truth")?;
    auc_from_scores(&soft.data, &gt.data)
}

pub(crate) fn auc_from_scores(scores: &[f32], labels: &[u8]) -> Result<f64> {
    let mut pairs: Vec<(f32, bool)> = scores.iter().zip(labels).map(|(&s, &l)| (s, l != 0)).collect();
    let pos = pairs.iter().filter(|p| p.1).count() as u128;
    let neg = pairs.len() as u128 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid("roc auc", "ground truth must contain both classes"));
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    // twice the area, in units of one (positive, negative) cell
    let mut area2 = 0u128;
    let mut tp = 0u128;
    let mut i = 0;
    while i < pairs.len() {
        let (mut dtp, mut dfp) = (0u128, 0u128);
        let s = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == s {
            if pairs[i].1 {
                dtp += 1;
            } else {
                dfp += 1;
            }
            i += 1;
        }
        area2 += dfp * (2 * tp + dtp);
        tp += dtp;
    }
    Ok(area2 as f64 / (2 * pos * neg) as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridRow {
    /// Binarization threshold, percent.
    pub threshold: f64,
    pub cc: bool,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentTable {
    pub rows: Vec<GridRow>,
    /// Pooled-pixel AUC of the soft masks, when the ground truth has both
    /// classes.
    pub auc: Option<f64>,
    pub auc_granularity: String,
}

impl ExperimentTable {
    pub fn row(&self, threshold: f64, cc: bool) -> Option<&GridRow> {
        self.rows.iter().find(|r| r.threshold == threshold && r.cc == cc)
    }

    /// Aligned text table: Thres., CC, Avg. IoU, Avg. Dice, Avg. Precision,
    /// Avg. Recall.
    pub fn to_text(&self) -> String {
        let head = ["Thres.", "CC", "Avg. IoU", "Avg. Dice", "Avg. Precision", "Avg. Recall"];
        let widths = [7, 4, 13, 13, 15, 13];
        let mut out = String::new();
        for (h, w) in head.iter().zip(widths) {
            let _ = write!(out, "{h:<w$}");
        }
        out = out.trim_end().to_string();
        out.push('\n');
        for r in &self.rows {
            let a = &r.report.aggregate;
            let cells = [
                format!("{}", r.threshold),
                if r.cc { "yes" } else { "no" }.to_string(),
                a.iou.to_string(),
                a.dice.to_string(),
                a.precision.to_string(),
                a.recall.to_string(),
            ];
            let mut line = String::new();
            for (c, w) in cells.iter().zip(widths) {
                let _ = write!(line, "{c:<w$}");
            }
            out.push_str(line.trim_end());
            out.push('\n');
        }
        if let Some(auc) = self.auc {
            let _ = writeln!(out, "AUC ({}): {auc:.4}", self.auc_granularity);
        }
        out
    }
}

/// One binarization threshold pushed through the check.
#[derive(Debug, Clone)]
pub struct GridRun {
    pub threshold: f64,
    pub pre: MaskStack,
    pub cc: CCResult,
}

pub fn run_grid(soft: &SoftMaskStack, thresholds: &[f64], ccfg: &CCConfig) -> Result<Vec<GridRun>> {
    thresholds
        .iter()
        .map(|&t| {
            let pre = binarize(soft, t)?;
            let cc = consistency_check(&pre, ccfg)?;
            Ok(GridRun { threshold: t, pre, cc })
        })
        .collect()
}

pub const AUC_GRANULARITY: &str = "pixels pooled over the stack";

/// Evaluates `(threshold, pre-check, post-check)` mask pairs against ground
/// truth into the two-rows-per-threshold table.
pub fn evaluate_grid<'a>(
    soft: Option<&SoftMaskStack>,
    gt: &MaskStack,
    runs: impl IntoIterator<Item = (f64, &'a MaskStack, &'a MaskStack)>,
) -> Result<ExperimentTable> {
    let mut rows = Vec::new();
    for (threshold, pre, post) in runs {
        for (cc, m) in [(false, pre), (true, post)] {
            rows.push(GridRow {
                threshold,
                cc,
                report: mask_metrics(m, gt)?,
            });
        }
    }
    let auc = match soft {
        Some(s) => roc_auc(s, gt).ok(),
        None => None,
    };
    Ok(ExperimentTable {
        rows,
        auc,
        auc_granularity: AUC_GRANULARITY.to_string(),
    })
}

/// Binarizes at every threshold, evaluates with and without the check.
pub fn experiment_grid(
    soft: &SoftMaskStack,
    gt: &MaskStack,
    thresholds: &[f64],
    ccfg: &CCConfig,
) -> Result<ExperimentTable> {
    let runs = run_grid(soft, thresholds, ccfg)?;
    evaluate_grid(
        Some(soft),
        gt,
        runs.iter().map(|r| (r.threshold, &r.pre, &r.cc.consistent_masks)),
    )
}
