//! Threshold tuning and F1 metrics.
//!
//! Micro-averaged F1 pools true positives, false positives and false
//! negatives over every class and sample before computing precision and
//! recall. Per-class decision thresholds are tuned on validation scores to
//! maximize that class's own F1 and then applied unchanged to test scores.
//! A class is predicted present when its score is `>=` the threshold.

use std::fmt::Write as _;

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::real::Real;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn add(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => {}
        }
    }
}

impl std::ops::AddAssign for ConfusionCounts {
    fn add_assign(&mut self, rhs: Self) {
        self.tp += rhs.tp;
        self.fp += rhs.fp;
        self.fn_ += rhs.fn_;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision, recall and F1 from pooled counts; each is 0 when its
/// denominator is 0.
pub fn micro_f1(counts: ConfusionCounts) -> Prf {
    let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(counts.tp, counts.tp + counts.fp);
    let recall = ratio(counts.tp, counts.tp + counts.fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Prf {
        precision,
        recall,
        f1,
    }
}

fn class_counts(scores: ArrayView1<'_, f64>, labels: ArrayView1<'_, i8>, threshold: f64) -> ConfusionCounts {
    let mut counts = ConfusionCounts::default();
    for (&s, &l) in scores.iter().zip(labels.iter()) {
        counts.add(s >= threshold, l > 0);
    }
    counts
}

fn check_shapes(scores: ArrayView2<'_, f64>, labels: ArrayView2<'_, i8>) -> Result<()> {
    if scores.dim() != labels.dim() {
        return Err(Error::shape(format!(
            "scores {:?} vs labels {:?}",
            scores.dim(),
            labels.dim()
        )));
    }
    if scores.nrows() == 0 {
        return Err(Error::invalid("no samples to tune on"));
    }
    Ok(())
}

/// Candidate thresholds for one class: a sentinel below the minimum, the
/// midpoints between consecutive distinct scores and a sentinel above the
/// maximum, in increasing order.
pub fn candidate_thresholds(scores: ArrayView1<'_, f64>) -> Vec<f64> {
    let mut sorted: Vec<f64> = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut out = Vec::with_capacity(sorted.len() + 1);
    if let (Some(&lo), Some(&hi)) = (sorted.first(), sorted.last()) {
        out.push(lo - 1.0);
        out.extend(sorted.windows(2).map(|w| 0.5 * (w[0] + w[1])));
        out.push(hi + 1.0);
    }
    out
}

/// Per-class thresholds maximizing each class's F1 on `scores`. Ties go to
/// the larger threshold.
pub fn tune_thresholds(scores: ArrayView2<'_, f64>, labels: ArrayView2<'_, i8>) -> Result<Vec<f64>> {
    check_shapes(scores, labels)?;
    Ok((0..scores.ncols())
        .map(|c| {
            let (s, l) = (scores.column(c), labels.column(c));
            let mut best = (f64::NEG_INFINITY, f64::NEG_INFINITY);
            for t in candidate_thresholds(s) {
                let f1 = micro_f1(class_counts(s, l, t)).f1;
                // candidates ascend, so >= keeps the larger threshold on ties
                if f1 >= best.0 {
                    best = (f1, t);
                }
            }
            best.1
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub name: String,
    pub threshold: f64,
    pub counts: ConfusionCounts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    pub counts: ConfusionCounts,
    pub precision: f64,
    pub recall: f64,
    pub micro_f1: f64,
    pub per_class: Vec<ClassReport>,
}

impl EvalReport {
    pub fn class_f1(&self) -> Vec<f64> {
        self.per_class.iter().map(|c| c.f1).collect()
    }

    /// Aligned text table: one overall row, then one row per class.
    pub fn to_table(&self) -> String {
        let width = self
            .per_class
            .iter()
            .map(|c| c.name.len())
            .max()
            .unwrap_or(0)
            .max("micro-average".len());
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<width$}  {:>9}  {:>6}  {:>6}  {:>6}  {:>6}  {:>6}  {:>6}",
            "class", "threshold", "F1", "P", "R", "TP", "FP", "FN"
        );
        let _ = writeln!(
            out,
            "{:<width$}  {:>9}  {:>6.1}  {:>6.1}  {:>6.1}  {:>6}  {:>6}  {:>6}",
            "micro-average",
            "-",
            100.0 * self.micro_f1,
            100.0 * self.precision,
            100.0 * self.recall,
            self.counts.tp,
            self.counts.fp,
            self.counts.fn_
        );
        for c in &self.per_class {
            let _ = writeln!(
                out,
                "{:<width$}  {:>9.4}  {:>6.1}  {:>6.1}  {:>6.1}  {:>6}  {:>6}  {:>6}",
                c.name,
                c.threshold,
                100.0 * c.f1,
                100.0 * c.precision,
                100.0 * c.recall,
                c.counts.tp,
                c.counts.fp,
                c.counts.fn_
            );
        }
        out
    }
}

/// Applies `thresholds` to a score matrix and gathers global and per-class
/// counts.
pub fn evaluate_scores(
    scores: ArrayView2<'_, f64>,
    labels: ArrayView2<'_, i8>,
    thresholds: &[f64],
    class_names: &[String],
) -> Result<EvalReport> {
    check_shapes(scores, labels)?;
    let c = scores.ncols();
    if thresholds.len() != c || class_names.len() != c {
        return Err(Error::shape(format!(
            "{} thresholds and {} names for {c} classes",
            thresholds.len(),
            class_names.len()
        )));
    }
    let mut total = ConfusionCounts::default();
    let per_class = (0..c)
        .map(|k| {
            let counts = class_counts(scores.column(k), labels.column(k), thresholds[k]);
            total += counts;
            let prf = micro_f1(counts);
            ClassReport {
                name: class_names[k].clone(),
                threshold: thresholds[k],
                counts,
                precision: prf.precision,
                recall: prf.recall,
                f1: prf.f1,
            }
        })
        .collect();
    let prf = micro_f1(total);
    Ok(EvalReport {
        thresholds: thresholds.to_vec(),
        counts: total,
        precision: prf.precision,
        recall: prf.recall,
        micro_f1: prf.f1,
        per_class,
    })
}

/// Evaluation-mode `φ` for every bag, in dataset order.
pub fn score_dataset<T: Real>(model: &Model<T>, dataset: &Dataset) -> Result<Array2<f64>> {
    if model.num_classes() != dataset.num_classes() {
        return Err(Error::shape(format!(
            "model has {} classes, dataset has {}",
            model.num_classes(),
            dataset.num_classes()
        )));
    }
    let c = dataset.num_classes();
    let mut out = Array2::zeros((dataset.len(), c));
    for (i, bag) in dataset.bags().iter().enumerate() {
        let phi = model.scores(bag)?;
        for (dst, src) in out.row_mut(i).iter_mut().zip(phi.iter()) {
            *dst = src.to_f64_lossy();
        }
    }
    Ok(out)
}

pub fn label_matrix_i8(dataset: &Dataset) -> Array2<i8> {
    Array2::from_shape_fn((dataset.len(), dataset.num_classes()), |(i, c)| {
        dataset.bags()[i].labels.values()[c]
    })
}

pub fn evaluate<T: Real>(model: &Model<T>, dataset: &Dataset, thresholds: &[f64]) -> Result<EvalReport> {
    let scores = score_dataset(model, dataset)?;
    evaluate_scores(
        scores.view(),
        label_matrix_i8(dataset).view(),
        thresholds,
        dataset.class_names(),
    )
}

/// Tunes thresholds on `val` and reports on `test`.
pub fn tune_and_evaluate<T: Real>(model: &Model<T>, val: &Dataset, test: &Dataset) -> Result<EvalReport> {
    let val_scores = score_dataset(model, val)?;
    let thresholds = tune_thresholds(val_scores.view(), label_matrix_i8(val).view())?;
    evaluate(model, test, &thresholds)
}
