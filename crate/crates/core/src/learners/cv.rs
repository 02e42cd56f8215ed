//! Stratified k-fold splitting and the per-fold train/score loop.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{fit, ModelKind, ModelSpec};
use crate::error::{Error, Result};
use crate::features::{smote_standardized, FeatureMatrix, Imputer, SmoteConfig};
use crate::metrics::{roc_auc, sens_spec_acc, threshold_predictions, confusion, GroupSummary};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

/// Each class is shuffled separately, positives are laid out before
/// negatives, and position `p` goes to fold `p mod k`. Every fold then holds
/// the floor or ceiling of its proportional share of each class.
pub fn stratified_kfold(labels: &[bool], k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::Stratification(format!("k must be at least 2, got {k}")));
    }
    let mut pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let mut neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    for (name, class) in [("positive", &pos), ("negative", &neg)] {
        if class.len() < k {
            return Err(Error::Stratification(format!(
                "{name} class has {} members, fewer than k = {k}",
                class.len()
            )));
        }
    }
    let mut rng = seed::rng(seed::derive(seed, "kfold"));
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let mut val = vec![Vec::new(); k];
    for (p, i) in pos.into_iter().chain(neg).enumerate() {
        val[p % k].push(i);
    }
    Ok(val
        .into_iter()
        .map(|mut v| {
            v.sort_unstable();
            let train = (0..labels.len()).filter(|i| v.binary_search(i).is_err()).collect();
            Fold { train, validation: v }
        })
        .collect())
}

/// Out-of-fold scores: `score(train, validation)` returns one value per
/// validation index, and each row receives the score from the fold in which
/// it was held out.
pub fn out_of_fold<F>(labels: &[bool], k: usize, seed: u64, mut score: F) -> Result<Vec<f64>>
where
    F: FnMut(&[usize], &[usize]) -> Result<Vec<f64>>,
{
    let mut out = vec![f64::NAN; labels.len()];
    for fold in stratified_kfold(labels, k, seed)? {
        let s = score(&fold.train, &fold.validation)?;
        if s.len() != fold.validation.len() {
            return Err(Error::Argument(format!(
                "scorer returned {} values for {} rows",
                s.len(),
                fold.validation.len()
            )));
        }
        for (&i, v) in fold.validation.iter().zip(s) {
            out[i] = v;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRecord {
    pub fold: usize,
    pub train_rows: Vec<usize>,
    pub validation_rows: Vec<usize>,
    /// Row ids actually passed to `predict_proba`.
    pub scored_ids: Vec<String>,
    pub resampled: bool,
    pub n_synthetic: usize,
    pub auc: f64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub kind: ModelKind,
    pub k: usize,
    pub seed: u64,
    pub folds: Vec<FoldRecord>,
    pub mean_auc: f64,
    pub sd_auc: f64,
    pub row_ids: Vec<String>,
    pub labels: Vec<bool>,
    /// Probability for each row from the fold that held it out.
    pub oof_probabilities: Vec<f64>,
    /// Mean over folds; `None` for kinds without importances.
    pub importance: Option<BTreeMap<String, f64>>,
}

pub fn cross_validate(
    spec: &ModelSpec,
    matrix: &FeatureMatrix,
    k: usize,
    smote: Option<&SmoteConfig>,
    seed: u64,
) -> Result<CvReport> {
    spec.validate()?;
    if let Some(cfg) = smote {
        cfg.validate()?;
    }
    let folds = stratified_kfold(matrix.labels(), k, seed)?;
    let mut records = Vec::with_capacity(k);
    let mut oof = vec![f64::NAN; matrix.n_rows()];
    let mut imp_sum: Option<BTreeMap<String, f64>> = Some(BTreeMap::new());
    for (f, fold) in folds.into_iter().enumerate() {
        let train_raw = matrix.select_rows(&fold.train);
        let val_raw = matrix.select_rows(&fold.validation);
        let imputer = Imputer::fit(&train_raw)?;
        let mut train = imputer.apply(&train_raw)?;
        let val = imputer.apply(&val_raw)?;

        let mut resampled = false;
        if let Some(cfg) = smote {
            if cfg.triggers(&train) {
                let cfg = SmoteConfig {
                    seed: seed::derive_index(seed::derive(seed, "smote"), f as u64),
                    ..*cfg
                };
                train = smote_standardized(&train, &cfg)?;
                resampled = true;
            }
        }
        let n_synthetic = train.synthetic().iter().filter(|&&s| s).count();
        let fold_spec = spec
            .clone()
            .with_seed(seed::derive_index(seed::derive(seed, "model"), f as u64));
        let mut model = fit(&fold_spec, &train)?;
        model.meta.fold = Some(f);
        let p = model.predict_proba(&val)?;
        for (&i, &v) in fold.validation.iter().zip(&p) {
            oof[i] = v;
        }
        let roc = roc_auc(val.labels(), &p)?;
        let c = confusion(val.labels(), &threshold_predictions(&p, 0.5))?;
        let ssa = sens_spec_acc(&c);
        match (&mut imp_sum, model.feature_importance()) {
            (Some(acc), Ok(imp)) => {
                for (name, v) in imp {
                    *acc.entry(name).or_insert(0.0) += v / k as f64;
                }
            }
            (_, Err(Error::Capability(_))) => imp_sum = None,
            (_, Err(e)) => return Err(e),
            (None, Ok(_)) => {}
        }
        records.push(FoldRecord {
            fold: f,
            train_rows: fold.train,
            validation_rows: fold.validation,
            scored_ids: val.row_ids().to_vec(),
            resampled,
            n_synthetic,
            auc: roc.auc,
            sensitivity: ssa.sensitivity,
            specificity: ssa.specificity,
            accuracy: ssa.accuracy,
        });
    }
    let aucs: Vec<f64> = records.iter().map(|r| r.auc).collect();
    let summary = GroupSummary::of(&aucs);
    Ok(CvReport {
        kind: spec.kind,
        k,
        seed,
        folds: records,
        mean_auc: summary.mean,
        sd_auc: summary.sd,
        row_ids: matrix.row_ids().to_vec(),
        labels: matrix.labels().to_vec(),
        oof_probabilities: oof,
        importance: imp_sum,
    })
}

/// Kinds ordered by mean AUC, best first; ties by kind order.
pub fn rank_models(reports: &[CvReport]) -> Vec<(ModelKind, f64, f64)> {
    let mut v: Vec<(ModelKind, f64, f64)> = reports.iter().map(|r| (r.kind, r.mean_auc, r.sd_auc)).collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    v
}

impl CvReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// One row per fold plus a `mean` row.
    pub fn write_metrics_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["model", "fold", "auc", "sensitivity", "specificity", "accuracy", "resampled", "n_synthetic"])?;
        let opt = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{x:.6}"));
        for r in &self.folds {
            w.write_record([
                self.kind.as_str().to_string(),
                r.fold.to_string(),
                format!("{:.6}", r.auc),
                opt(r.sensitivity),
                opt(r.specificity),
                opt(r.accuracy),
                r.resampled.to_string(),
                r.n_synthetic.to_string(),
            ])?;
        }
        w.write_record([
            self.kind.as_str().to_string(),
            "mean".into(),
            format!("{:.6}", self.mean_auc),
            "".into(),
            "".into(),
            "".into(),
            "".into(),
            format!("sd={:.6}", self.sd_auc),
        ])?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}
