//! Feature matrix assembly, imputation, standardization and SMOTE.
//!
//! Absent values are carried as NaN between [`assemble`] and imputation;
//! every learner requires a complete matrix ([`FeatureMatrix::ensure_complete`]).

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ladder::{DrugTier, TierDoseProfile};
use crate::record::{Cohort, Sex, Smoking};
use crate::seed;
use crate::text_extract::{Horizon, PainWindowScores};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Continuous,
    Onehot,
    Ordinal,
    Binary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnMeta {
    pub name: String,
    pub kind: ColumnKind,
    /// Module the column was derived from.
    pub source: String,
    /// Rows whose value was filled by imputation.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub imputed_rows: Vec<usize>,
}

impl ColumnMeta {
    pub fn new(name: impl Into<String>, kind: ColumnKind, source: &str) -> Self {
        Self {
            name: name.into(),
            kind,
            source: source.to_string(),
            imputed_rows: Vec::new(),
        }
    }
}

/// Row-major numeric matrix with one binary label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    columns: Vec<ColumnMeta>,
    values: Vec<f64>,
    labels: Vec<bool>,
    row_ids: Vec<String>,
    synthetic: Vec<bool>,
}

impl FeatureMatrix {
    pub fn new(
        columns: Vec<ColumnMeta>,
        rows: Vec<Vec<f64>>,
        labels: Vec<bool>,
        row_ids: Vec<String>,
    ) -> Result<Self> {
        if rows.len() != labels.len() || rows.len() != row_ids.len() {
            return Err(Error::Argument(format!(
                "{} rows, {} labels, {} row ids",
                rows.len(),
                labels.len(),
                row_ids.len()
            )));
        }
        let mut names = BTreeSet::new();
        for c in &columns {
            if !names.insert(c.name.as_str()) {
                return Err(Error::Argument(format!("duplicate column `{}`", c.name)));
            }
        }
        let width = columns.len();
        let mut values = Vec::with_capacity(rows.len() * width);
        for (i, r) in rows.into_iter().enumerate() {
            if r.len() != width {
                return Err(Error::Argument(format!(
                    "row {i} has {} values, expected {width}",
                    r.len()
                )));
            }
            values.extend(r);
        }
        let n = labels.len();
        Ok(Self {
            columns,
            values,
            labels,
            row_ids,
            synthetic: vec![false; n],
        })
    }

    /// Unnamed continuous columns `x0, x1, ...`; convenient for tests and toy data.
    pub fn from_rows(rows: Vec<Vec<f64>>, labels: Vec<bool>) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        let columns = (0..width)
            .map(|j| ColumnMeta::new(format!("x{j}"), ColumnKind::Continuous, "input"))
            .collect();
        let ids = (0..rows.len()).map(|i| format!("r{i}")).collect();
        Self::new(columns, rows, labels, ids)
    }

    pub fn n_rows(&self) -> usize {
        self.labels.len()
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.n_cols();
        &self.values[i * w..(i + 1) * w]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.n_rows()).map(move |i| self.row(i))
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n_cols() + j]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n_rows()).map(|i| self.get(i, j)).collect()
    }

    pub fn columns(&self) -> &[ColumnMeta] {
        &self.columns
    }

    pub fn column_names(&self) -> Vec<String> {
        self.columns.iter().map(|c| c.name.clone()).collect()
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn row_ids(&self) -> &[String] {
        &self.row_ids
    }

    pub fn synthetic(&self) -> &[bool] {
        &self.synthetic
    }

    pub fn n_positive(&self) -> usize {
        self.labels.iter().filter(|l| **l).count()
    }

    /// Minority count divided by majority count (0 when a class is empty).
    pub fn class_ratio(&self) -> f64 {
        let p = self.n_positive();
        let n = self.n_rows() - p;
        let (lo, hi) = (p.min(n), p.max(n));
        if hi == 0 {
            0.0
        } else {
            lo as f64 / hi as f64
        }
    }

    pub fn is_complete(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn ensure_complete(&self) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(p) => Err(Error::Argument(format!(
                "non-finite value at row {}, column `{}`; impute first",
                p / self.n_cols().max(1),
                self.columns[p % self.n_cols()].name
            ))),
        }
    }

    pub fn select_rows(&self, idx: &[usize]) -> FeatureMatrix {
        let w = self.n_cols();
        let mut values = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            values.extend_from_slice(self.row(i));
        }
        let pos: BTreeMap<usize, usize> = idx.iter().enumerate().map(|(new, &old)| (old, new)).collect();
        let columns = self
            .columns
            .iter()
            .map(|c| ColumnMeta {
                imputed_rows: c.imputed_rows.iter().filter_map(|r| pos.get(r).copied()).collect(),
                ..c.clone()
            })
            .collect();
        FeatureMatrix {
            columns,
            values,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            row_ids: idx.iter().map(|&i| self.row_ids[i].clone()).collect(),
            synthetic: idx.iter().map(|&i| self.synthetic[i]).collect(),
        }
    }

    /// Reorders columns to `names`; columns absent here become all-NaN so a
    /// fitted imputer can fill them, extra columns are dropped.
    pub fn align_to(&self, names: &[String]) -> FeatureMatrix {
        let index: BTreeMap<&str, usize> = self
            .columns
            .iter()
            .enumerate()
            .map(|(j, c)| (c.name.as_str(), j))
            .collect();
        let columns = names
            .iter()
            .map(|n| match index.get(n.as_str()) {
                Some(&j) => self.columns[j].clone(),
                None => ColumnMeta::new(n.clone(), ColumnKind::Continuous, "absent"),
            })
            .collect();
        let mut values = Vec::with_capacity(self.n_rows() * names.len());
        for i in 0..self.n_rows() {
            for n in names {
                values.push(index.get(n.as_str()).map_or(f64::NAN, |&j| self.get(i, j)));
            }
        }
        FeatureMatrix {
            columns,
            values,
            ..self.clone()
        }
    }

    fn map_values(&self, f: impl Fn(usize, f64) -> f64) -> FeatureMatrix {
        let w = self.n_cols();
        let values = self
            .values
            .iter()
            .enumerate()
            .map(|(p, v)| f(p % w, *v))
            .collect();
        FeatureMatrix {
            values,
            ..self.clone()
        }
    }

    fn push_row(&mut self, row: &[f64], label: bool, id: String, synthetic: bool) {
        self.values.extend_from_slice(row);
        self.labels.push(label);
        self.row_ids.push(id);
        self.synthetic.push(synthetic);
    }

    /// Delimited table: `row_id,label,synthetic,<columns...>`; absent as `NA`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["row_id".to_string(), "label".into(), "synthetic".into()];
        header.extend(self.column_names());
        w.write_record(&header)?;
        for i in 0..self.n_rows() {
            let mut rec = vec![
                self.row_ids[i].clone(),
                u8::from(self.labels[i]).to_string(),
                u8::from(self.synthetic[i]).to_string(),
            ];
            rec.extend(self.row(i).iter().map(|v| {
                if v.is_nan() {
                    "NA".to_string()
                } else {
                    v.to_string()
                }
            }));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct AssemblyReport {
    /// Patients dropped because the score at the horizon was absent.
    pub dropped_unlabeled: Vec<String>,
}

/// Builds the feature matrix for one horizon. Labels come from the horizon
/// score binarized at `threshold`; rows without that score are dropped.
pub fn assemble(
    cohort: &Cohort,
    scores: &BTreeMap<String, PainWindowScores>,
    profiles: &BTreeMap<String, TierDoseProfile>,
    horizon: Horizon,
    threshold: u8,
) -> Result<(FeatureMatrix, AssemblyReport)> {
    for r in cohort.records() {
        for (what, present) in [
            ("scores", scores.contains_key(&r.patient_id)),
            ("dose profile", profiles.contains_key(&r.patient_id)),
        ] {
            if !present {
                return Err(Error::Argument(format!(
                    "no {what} for patient `{}`",
                    r.patient_id
                )));
            }
        }
    }
    let lab_codes: BTreeSet<&str> = cohort
        .records()
        .iter()
        .flat_map(|r| r.labs.keys().map(String::as_str))
        .collect();
    let windows: Vec<(usize, f64)> = cohort
        .records()
        .first()
        .map(|r| profiles[&r.patient_id].windows_h.clone())
        .unwrap_or_default()
        .into_iter()
        .enumerate()
        .filter(|(_, w)| *w < horizon.hours())
        .collect();

    use ColumnKind::*;
    let mut columns = vec![
        ColumnMeta::new("age", Continuous, "record"),
        ColumnMeta::new("sex_male", Onehot, "record"),
        ColumnMeta::new("sex_female", Onehot, "record"),
        ColumnMeta::new("smoking_yes", Onehot, "record"),
        ColumnMeta::new("smoking_no", Onehot, "record"),
        ColumnMeta::new("smoking_unknown", Onehot, "record"),
        ColumnMeta::new("pathology", Ordinal, "record"),
        ColumnMeta::new("tnm_stage", Ordinal, "record"),
        ColumnMeta::new("n_class", Ordinal, "record"),
    ];
    columns.extend(
        lab_codes
            .iter()
            .map(|c| ColumnMeta::new(format!("lab_{c}"), Continuous, "record")),
    );
    columns.push(ColumnMeta::new("pain24_bin", Binary, "text_extract"));
    if horizon == Horizon::H72 {
        columns.push(ColumnMeta::new("pain48_bin", Binary, "text_extract"));
    }
    for &(_, w) in &windows {
        for tier in DrugTier::ALL {
            let stem = format!("tier{}_{}h", tier.number(), w);
            columns.push(ColumnMeta::new(format!("{stem}_used"), Binary, "ladder"));
            columns.push(ColumnMeta::new(format!("{stem}_logdose"), Continuous, "ladder"));
        }
    }

    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut ids = Vec::new();
    let mut report = AssemblyReport::default();
    let onehot = |b: bool| if b { 1.0 } else { 0.0 };
    for rec in cohort.records() {
        let s = &scores[&rec.patient_id];
        let Some(score) = s.get(horizon) else {
            report.dropped_unlabeled.push(rec.patient_id.clone());
            continue;
        };
        let profile = &profiles[&rec.patient_id];
        let mut row = vec![
            rec.age.map_or(f64::NAN, f64::from),
            onehot(rec.sex == Some(Sex::Male)),
            onehot(rec.sex == Some(Sex::Female)),
            onehot(rec.smoking == Some(Smoking::Yes)),
            onehot(rec.smoking == Some(Smoking::No)),
            onehot(rec.smoking == Some(Smoking::Unknown)),
            rec.pathology.map_or(f64::NAN, |p| p.ordinal()),
            rec.tnm_stage.and_then(|s| s.value()).map_or(f64::NAN, f64::from),
            rec.n_class.and_then(|s| s.value()).map_or(f64::NAN, f64::from),
        ];
        row.extend(
            lab_codes
                .iter()
                .map(|c| rec.labs.get(*c).copied().unwrap_or(f64::NAN)),
        );
        row.push(onehot(s.nrs_24.is_some_and(|v| v >= threshold)));
        if horizon == Horizon::H72 {
            row.push(onehot(s.nrs_48.is_some_and(|v| v >= threshold)));
        }
        for &(wi, _) in &windows {
            for tier in DrugTier::ALL {
                let cell = profile.cell(tier, wi);
                row.push(onehot(cell.used));
                row.push(cell.log_dose);
            }
        }
        rows.push(row);
        labels.push(score >= threshold);
        ids.push(rec.patient_id.clone());
    }
    if rows.is_empty() {
        return Err(Error::EmptyCohort);
    }
    Ok((FeatureMatrix::new(columns, rows, labels, ids)?, report))
}

/// Per-column medians fitted on one matrix (typically a training fold) and
/// applied to others. Columns with no observed value are dropped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Imputer {
    /// Median per retained column name.
    fill: Vec<(String, f64)>,
    dropped: Vec<String>,
}

impl Imputer {
    pub fn fit(matrix: &FeatureMatrix) -> Result<Self> {
        if matrix.n_rows() == 0 {
            return Err(Error::Argument("cannot impute an empty matrix".into()));
        }
        let mut fill = Vec::new();
        let mut dropped = Vec::new();
        for (j, c) in matrix.columns().iter().enumerate() {
            let mut seen: Vec<f64> = matrix.column(j).into_iter().filter(|v| !v.is_nan()).collect();
            if seen.is_empty() {
                log::warn!("column `{}` has no observed values; dropped", c.name);
                dropped.push(c.name.clone());
            } else {
                fill.push((c.name.clone(), median(&mut seen)));
            }
        }
        Ok(Self { fill, dropped })
    }

    pub fn dropped(&self) -> &[String] {
        &self.dropped
    }

    pub fn apply(&self, matrix: &FeatureMatrix) -> Result<FeatureMatrix> {
        let index: BTreeMap<&str, usize> = matrix
            .columns()
            .iter()
            .enumerate()
            .map(|(j, c)| (c.name.as_str(), j))
            .collect();
        let mut columns = Vec::with_capacity(self.fill.len());
        let mut src = Vec::with_capacity(self.fill.len());
        for (name, _) in &self.fill {
            let j = *index
                .get(name.as_str())
                .ok_or_else(|| Error::Schema(format!("column `{name}` missing")))?;
            let mut meta = matrix.columns()[j].clone();
            meta.imputed_rows = (0..matrix.n_rows())
                .filter(|&i| matrix.get(i, j).is_nan())
                .chain(meta.imputed_rows.iter().copied())
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            columns.push(meta);
            src.push(j);
        }
        let mut values = Vec::with_capacity(matrix.n_rows() * src.len());
        for i in 0..matrix.n_rows() {
            for (k, &j) in src.iter().enumerate() {
                let v = matrix.get(i, j);
                values.push(if v.is_nan() { self.fill[k].1 } else { v });
            }
        }
        Ok(FeatureMatrix {
            columns,
            values,
            ..matrix.clone()
        })
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Median imputation fitted and applied on the same matrix.
pub fn impute_continuous(matrix: &FeatureMatrix) -> Result<FeatureMatrix> {
    Imputer::fit(matrix)?.apply(matrix)
}

/// Zero-mean, unit-variance scaling of continuous columns. Other columns and
/// zero-variance columns pass through unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(matrix: &FeatureMatrix) -> Self {
        Self::fit_where(matrix, |c| c.kind == ColumnKind::Continuous)
    }

    /// Scales every column.
    pub fn fit_all(matrix: &FeatureMatrix) -> Self {
        Self::fit_where(matrix, |_| true)
    }

    fn fit_where(matrix: &FeatureMatrix, pick: impl Fn(&ColumnMeta) -> bool) -> Self {
        let n = matrix.n_rows().max(1) as f64;
        let mut mean = vec![0.0; matrix.n_cols()];
        let mut scale = vec![1.0; matrix.n_cols()];
        for (j, c) in matrix.columns().iter().enumerate() {
            if !pick(c) {
                continue;
            }
            let col = matrix.column(j);
            let m = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
            mean[j] = m;
            scale[j] = if var > 1e-24 { var.sqrt() } else { 1.0 };
        }
        Self { mean, scale }
    }

    pub fn transform_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .enumerate()
            .map(|(j, v)| (v - self.mean[j]) / self.scale[j])
            .collect()
    }

    pub fn transform(&self, matrix: &FeatureMatrix) -> FeatureMatrix {
        matrix.map_values(|j, v| (v - self.mean[j]) / self.scale[j])
    }

    pub fn inverse(&self, matrix: &FeatureMatrix) -> FeatureMatrix {
        matrix.map_values(|j, v| v * self.scale[j] + self.mean[j])
    }

    pub fn scale(&self) -> &[f64] {
        &self.scale
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoteConfig {
    pub trigger_ratio: f64,
    pub k_neighbors: usize,
    pub target_ratio: f64,
    pub seed: u64,
}

impl Default for SmoteConfig {
    fn default() -> Self {
        Self {
            trigger_ratio: 0.3,
            k_neighbors: 5,
            target_ratio: 1.0,
            seed: 0,
        }
    }
}

impl SmoteConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.trigger_ratio
            && self.trigger_ratio <= self.target_ratio
            && self.target_ratio <= 1.0)
        {
            return Err(Error::Argument(format!(
                "need 0 < trigger_ratio ({}) <= target_ratio ({}) <= 1",
                self.trigger_ratio, self.target_ratio
            )));
        }
        if self.k_neighbors == 0 {
            return Err(Error::Argument("k_neighbors must be >= 1".into()));
        }
        Ok(())
    }

    pub fn triggers(&self, matrix: &FeatureMatrix) -> bool {
        matrix.class_ratio() < self.trigger_ratio
    }
}

/// SMOTE with uniformly drawn interpolation weights.
pub fn smote_resample(matrix: &FeatureMatrix, cfg: &SmoteConfig) -> Result<FeatureMatrix> {
    smote_resample_with(matrix, cfg, |rng| rng.random::<f64>())
}

/// SMOTE with a caller-supplied interpolation weight source; `lambda` must
/// return values in [0, 1].
pub fn smote_resample_with(
    matrix: &FeatureMatrix,
    cfg: &SmoteConfig,
    mut lambda: impl FnMut(&mut rand_chacha::ChaCha8Rng) -> f64,
) -> Result<FeatureMatrix> {
    cfg.validate()?;
    matrix.ensure_complete()?;
    let pos = matrix.n_positive();
    let neg = matrix.n_rows() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::CannotResample("only one class present".into()));
    }
    let minority_label = pos < neg;
    let (m, big) = (pos.min(neg), pos.max(neg));
    if m < 2 {
        return Err(Error::CannotResample(format!(
            "minority class has {m} row; at least 2 are needed for a neighbor"
        )));
    }
    if (m as f64) / (big as f64) >= cfg.trigger_ratio {
        return Ok(matrix.clone());
    }
    let needed = ((cfg.target_ratio * big as f64).ceil() as usize).saturating_sub(m);
    let minority: Vec<usize> = (0..matrix.n_rows())
        .filter(|&i| matrix.labels()[i] == minority_label)
        .collect();
    let neighbors: Vec<Vec<usize>> = minority
        .iter()
        .map(|&i| nearest_minority(matrix, &minority, i, cfg.k_neighbors))
        .collect();

    let mut rng = seed::rng(seed::derive(cfg.seed, "smote"));
    let mut order: Vec<usize> = (0..m).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    let mut out = matrix.clone();
    let width = matrix.n_cols();
    let mut synth = vec![0.0; width];
    for s in 0..needed {
        let a = order[s % m];
        let nn = &neighbors[a];
        let b = nn[rng.random_range(0..nn.len())];
        let lam = lambda(&mut rng).clamp(0.0, 1.0);
        let (xa, xb) = (matrix.row(minority[a]), matrix.row(b));
        for j in 0..width {
            synth[j] = xa[j] + lam * (xb[j] - xa[j]);
        }
        out.push_row(&synth, minority_label, format!("synthetic-{s}"), true);
    }
    Ok(out)
}

/// SMOTE in standardized space: the scaler is fitted on `matrix`, synthetic
/// rows are mapped back to raw units and original rows are kept bit-for-bit.
pub fn smote_standardized(matrix: &FeatureMatrix, cfg: &SmoteConfig) -> Result<FeatureMatrix> {
    let scaler = Standardizer::fit(matrix);
    let resampled = smote_resample(&scaler.transform(matrix), cfg)?;
    let back = scaler.inverse(&resampled);
    let mut out = matrix.clone();
    for i in matrix.n_rows()..back.n_rows() {
        out.push_row(back.row(i), back.labels[i], back.row_ids[i].clone(), true);
    }
    Ok(out)
}

/// Up to `k` nearest other minority rows (Euclidean, ties by row index).
pub fn nearest_minority(matrix: &FeatureMatrix, minority: &[usize], i: usize, k: usize) -> Vec<usize> {
    let xi = matrix.row(i);
    let mut d: Vec<(f64, usize)> = minority
        .iter()
        .filter(|&&j| j != i)
        .map(|&j| {
            let dist = xi
                .iter()
                .zip(matrix.row(j))
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>();
            (dist, j)
        })
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    d.into_iter().take(k).map(|(_, j)| j).collect()
}
