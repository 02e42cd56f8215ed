//! Confusion-matrix metrics, ROC/AUC and two-group comparison statistics.
//!
//! Undefined ratios (zero denominators) are `None`, never 0 or NaN.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
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

    pub fn positives(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> u64 {
        self.tn + self.fp
    }
}

pub fn confusion(labels: &[bool], predictions: &[bool]) -> Result<ConfusionCounts> {
    if labels.len() != predictions.len() {
        return Err(Error::Argument(format!(
            "{} labels vs {} predictions",
            labels.len(),
            predictions.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Argument("no labels".into()));
    }
    let mut c = ConfusionCounts::default();
    for (&y, &p) in labels.iter().zip(predictions) {
        match (y, p) {
            (true, true) => c.tp += 1,
            (true, false) => c.fn_ += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fp += 1,
        }
    }
    Ok(c)
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensSpecAcc {
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub accuracy: Option<f64>,
}

pub fn sens_spec_acc(c: &ConfusionCounts) -> SensSpecAcc {
    SensSpecAcc {
        sensitivity: ratio(c.tp, c.tp + c.fn_),
        specificity: ratio(c.tn, c.tn + c.fp),
        accuracy: ratio(c.tp + c.tn, c.total()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Rows with score >= threshold are called positive; the origin uses +inf.
    #[serde(skip)]
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// Threshold sweep over distinct scores (descending) with trapezoidal area.
/// Tied scores form a single step, so the area equals the pairwise
/// concordance with ties counted one half.
pub fn roc_auc(labels: &[bool], scores: &[f64]) -> Result<RocCurve> {
    if labels.len() != scores.len() {
        return Err(Error::Argument(format!(
            "{} labels vs {} scores",
            labels.len(),
            scores.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Argument(format!("non-finite score {s}")));
    }
    let p = labels.iter().filter(|l| **l).count();
    let n = labels.len() - p;
    if p == 0 || n == 0 {
        return Err(Error::UndefinedAuc("both classes must be present".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut area2 = 0.0; // twice the area in units of (p * n)
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area2 += ((fp - fp0) * (tp + tp0)) as f64;
        points.push(RocPoint {
            fpr: fp as f64 / n as f64,
            tpr: tp as f64 / p as f64,
            threshold: s,
        });
    }
    Ok(RocCurve {
        points,
        auc: area2 / (2.0 * p as f64 * n as f64),
    })
}

/// Predictions at `threshold` (score >= threshold is positive).
pub fn threshold_predictions(scores: &[f64], threshold: f64) -> Vec<bool> {
    scores.iter().map(|s| *s >= threshold).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation.
    pub sd: f64,
}

impl GroupSummary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Self {
            n,
            mean,
            sd: var.sqrt(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupComparison {
    pub a: GroupSummary,
    pub b: GroupSummary,
    pub p_value: f64,
}

/// Welch two-sample t-test.
pub fn group_compare(values_a: &[f64], values_b: &[f64]) -> Result<GroupComparison> {
    if values_a.len() < 2 || values_b.len() < 2 {
        return Err(Error::Argument(format!(
            "each group needs >= 2 values (got {} and {})",
            values_a.len(),
            values_b.len()
        )));
    }
    if values_a.iter().chain(values_b).any(|v| !v.is_finite()) {
        return Err(Error::Argument("non-finite value in group".into()));
    }
    let a = GroupSummary::of(values_a);
    let b = GroupSummary::of(values_b);
    let va = a.sd.powi(2) / a.n as f64;
    let vb = b.sd.powi(2) / b.n as f64;
    let se2 = va + vb;
    let diff = a.mean - b.mean;
    let p_value = if se2 == 0.0 {
        if diff == 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        let t = diff / se2.sqrt();
        let df = se2.powi(2)
            / (va.powi(2) / (a.n - 1) as f64 + vb.powi(2) / (b.n - 1) as f64);
        let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Argument(e.to_string()))?;
        (2.0 * dist.sf(t.abs())).min(1.0)
    };
    Ok(GroupComparison { a, b, p_value })
}

/// Pearson chi-square test of independence on an r x c count table.
pub fn chi_square_independence(table: &[Vec<u64>]) -> Result<f64> {
    let r = table.len();
    let c = table.first().map_or(0, Vec::len);
    if r < 2 || c < 2 || table.iter().any(|row| row.len() != c) {
        return Err(Error::Argument("need a rectangular table of at least 2x2".into()));
    }
    let row_tot: Vec<f64> = table.iter().map(|row| row.iter().sum::<u64>() as f64).collect();
    let col_tot: Vec<f64> = (0..c).map(|j| table.iter().map(|row| row[j]).sum::<u64>() as f64).collect();
    let total: f64 = row_tot.iter().sum();
    if row_tot.iter().chain(&col_tot).any(|t| *t == 0.0) {
        return Err(Error::Argument("empty row or column in contingency table".into()));
    }
    let mut stat = 0.0;
    for i in 0..r {
        for j in 0..c {
            let e = row_tot[i] * col_tot[j] / total;
            stat += (table[i][j] as f64 - e).powi(2) / e;
        }
    }
    let df = ((r - 1) * (c - 1)) as f64;
    let dist = ChiSquared::new(df).map_err(|e| Error::Argument(e.to_string()))?;
    Ok(dist.sf(stat))
}
