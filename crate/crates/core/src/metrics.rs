//! Binary confusion matrices, the rates derived from them, and recovery of
//! full matrices from published summary percentages.
//!
//! Fire is the positive class throughout.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::zoo::ModelId;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        ConfusionMatrix { tp, fp, fn_, tn }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn positives(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> u64 {
        self.fp + self.tn
    }

    pub fn record(&mut self, predicted_fire: bool, is_fire: bool) {
        match (predicted_fire, is_fire) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }

    pub fn scaled(&self, k: u64) -> Self {
        ConfusionMatrix::new(self.tp * k, self.fp * k, self.fn_ * k, self.tn * k)
    }
}

impl fmt::Display for ConfusionMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "tp={} fp={} fn={} tn={}",
            self.tp, self.fp, self.fn_, self.tn
        )
    }
}

/// Counts predictions; a logit strictly above `threshold` predicts fire.
pub fn confusion<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[u8],
    threshold: T,
) -> Result<ConfusionMatrix> {
    if logits.len() != labels.len() {
        return Err(Error::dim(format!(
            "confusion: {} logits for {} labels",
            logits.len(),
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Validation(format!("labels must be 0 or 1, got {bad}")));
    }
    let mut cm = ConfusionMatrix::default();
    for (&z, &l) in logits.data().iter().zip(labels) {
        cm.record(z > threshold, l == 1);
    }
    Ok(cm)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Metric {
    Accuracy,
    Precision,
    Recall,
    F1,
    Fpr,
    Fnr,
}

impl Metric {
    pub const ALL: [Metric; 6] = [
        Metric::Accuracy,
        Metric::Precision,
        Metric::Recall,
        Metric::F1,
        Metric::Fpr,
        Metric::Fnr,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::Precision => "precision",
            Metric::Recall => "recall",
            Metric::F1 => "f1",
            Metric::Fpr => "fpr",
            Metric::Fnr => "fnr",
        }
    }
}

/// Rates in `[0, 1]`; `None` marks a metric whose denominator is zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricSet {
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub fpr: Option<f64>,
    pub fnr: Option<f64>,
}

impl MetricSet {
    pub fn get(&self, metric: Metric) -> Option<f64> {
        match metric {
            Metric::Accuracy => self.accuracy,
            Metric::Precision => self.precision,
            Metric::Recall => self.recall,
            Metric::F1 => self.f1,
            Metric::Fpr => self.fpr,
            Metric::Fnr => self.fnr,
        }
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn derive(cm: &ConfusionMatrix) -> MetricSet {
    MetricSet {
        accuracy: ratio(cm.tp + cm.tn, cm.total()),
        precision: ratio(cm.tp, cm.tp + cm.fp),
        recall: ratio(cm.tp, cm.tp + cm.fn_),
        f1: ratio(2 * cm.tp, 2 * cm.tp + cm.fp + cm.fn_),
        fpr: ratio(cm.fp, cm.fp + cm.tn),
        fnr: ratio(cm.fn_, cm.tp + cm.fn_),
    }
}

/// Published percentages (two decimals) to reconcile against.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReportedPercentages {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Absolute tolerance in percentage points when matching printed values,
/// wide enough to absorb both rounding and truncation to two decimals.
pub const PERCENT_TOLERANCE: f64 = 0.01;

/// True when `rate` (a fraction) prints as `reported` percent within tolerance.
pub fn matches_percent(rate: f64, reported: f64) -> bool {
    (rate * 100.0 - reported).abs() <= PERCENT_TOLERANCE + 1e-9
}

/// Finds the unique confusion matrix with the given true positives and class
/// totals whose accuracy, precision and recall match the reported values.
pub fn reconcile(
    tp: u64,
    totals: (u64, u64),
    reported: ReportedPercentages,
) -> Result<ConfusionMatrix> {
    let (pos, neg) = totals;
    if tp > pos {
        return Err(Error::Validation(format!(
            "true positives {tp} exceed positives {pos}"
        )));
    }
    let fn_ = pos - tp;
    let recall_ok = ratio(tp, pos).is_some_and(|r| matches_percent(r, reported.recall));
    if !recall_ok {
        return Err(Error::Inconsistency {
            metric: "recall".into(),
        });
    }
    let candidates: Vec<ConfusionMatrix> = (0..=neg)
        .map(|fp| ConfusionMatrix::new(tp, fp, fn_, neg - fp))
        .collect();
    let acc_ok = |cm: &ConfusionMatrix| {
        derive(cm)
            .accuracy
            .is_some_and(|a| matches_percent(a, reported.accuracy))
    };
    let prec_ok = |cm: &ConfusionMatrix| {
        derive(cm)
            .precision
            .is_some_and(|p| matches_percent(p, reported.precision))
    };
    let by_accuracy: Vec<_> = candidates.iter().filter(|cm| acc_ok(cm)).collect();
    if by_accuracy.is_empty() {
        return Err(Error::Inconsistency {
            metric: "accuracy".into(),
        });
    }
    let both: Vec<_> = by_accuracy.into_iter().filter(|cm| prec_ok(cm)).collect();
    match both.as_slice() {
        [] => Err(Error::Inconsistency {
            metric: "precision".into(),
        }),
        [cm] => Ok(**cm),
        many => Err(Error::Ambiguous { count: many.len() }),
    }
}

/// One published result column: test-phase rates plus the true-positive count.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PublishedColumn {
    pub model: ModelId,
    pub train_accuracy: f64,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub recall: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub true_positives: u64,
}

/// Test images: 325 fire, 225 non-fire.
pub const PUBLISHED_TEST_TOTALS: (u64, u64) = (325, 225);

/// Published evaluation figures for the six architectures, percentages as
/// printed (losses unitless).
pub const PUBLISHED: [PublishedColumn; 6] = [
    PublishedColumn {
        model: ModelId::Vgg7,
        train_accuracy: 99.33,
        train_loss: 0.014,
        val_accuracy: 99.32,
        recall: 97.84,
        accuracy: 96.54,
        precision: 96.36,
        true_positives: 318,
    },
    PublishedColumn {
        model: ModelId::Vgg10,
        train_accuracy: 98.78,
        train_loss: 0.029,
        val_accuracy: 99.3,
        recall: 97.54,
        accuracy: 96.72,
        precision: 96.94,
        true_positives: 317,
    },
    PublishedColumn {
        model: ModelId::CnnSvm,
        train_accuracy: 99.1,
        train_loss: 0.022,
        val_accuracy: 98.4,
        recall: 98.46,
        accuracy: 96.91,
        precision: 96.38,
        true_positives: 320,
    },
    PublishedColumn {
        model: ModelId::Vgg16Tl,
        train_accuracy: 100.0,
        train_loss: 0.0,
        val_accuracy: 99.99,
        recall: 99.69,
        accuracy: 99.45,
        precision: 99.38,
        true_positives: 324,
    },
    PublishedColumn {
        model: ModelId::Vgg19Tl,
        train_accuracy: 100.0,
        train_loss: 0.0,
        val_accuracy: 98.98,
        recall: 99.38,
        accuracy: 99.09,
        precision: 99.08,
        true_positives: 323,
    },
    PublishedColumn {
        model: ModelId::Resnet101Tl,
        train_accuracy: 100.0,
        train_loss: 0.0,
        val_accuracy: 89.98,
        recall: 92.61,
        accuracy: 92.73,
        precision: 94.95,
        true_positives: 301,
    },
];

impl PublishedColumn {
    pub fn reported(&self) -> ReportedPercentages {
        ReportedPercentages {
            accuracy: self.accuracy,
            precision: self.precision,
            recall: self.recall,
        }
    }

    pub fn reconcile(&self) -> Result<ConfusionMatrix> {
        reconcile(self.true_positives, PUBLISHED_TEST_TOTALS, self.reported())
    }
}

pub const CSV_HEADER: &str = "model,split,tp,fp,fn,tn,accuracy,precision,recall,f1,fpr,fnr";

fn fmt_rate(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6}")).unwrap_or_else(|| "NA".into())
}

/// One row of the metric report CSV.
pub fn csv_row(model: &str, split: &str, cm: &ConfusionMatrix) -> String {
    let m = derive(cm);
    let rates: Vec<String> = Metric::ALL.iter().map(|&k| fmt_rate(m.get(k))).collect();
    format!(
        "{model},{split},{},{},{},{},{}",
        cm.tp,
        cm.fp,
        cm.fn_,
        cm.tn,
        rates.join(",")
    )
}

/// Parsed metric CSV row.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub model: String,
    pub split: String,
    pub confusion: ConfusionMatrix,
}

pub fn parse_csv_row(line: &str) -> Result<MetricRow> {
    let fields: Vec<&str> = line.trim_end().split(',').collect();
    if fields.len() != 12 {
        return Err(Error::Validation(format!(
            "metric row needs 12 fields, got {}: {line:?}",
            fields.len()
        )));
    }
    let count = |i: usize| {
        fields[i]
            .parse::<u64>()
            .map_err(|e| Error::Validation(format!("bad count {:?}: {e}", fields[i])))
    };
    Ok(MetricRow {
        model: fields[0].to_string(),
        split: fields[1].to_string(),
        confusion: ConfusionMatrix::new(count(2)?, count(3)?, count(4)?, count(5)?),
    })
}
