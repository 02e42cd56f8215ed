//! Stacked generalization: base learners scored out-of-fold feed a logistic
//! meta-learner; the bases are then refit on all training rows.

use serde::{Deserialize, Serialize};

use super::cv::out_of_fold;
use super::logistic::{self, LogisticOptions, LogisticParams};
use super::{fit_rows, ModelKind, ModelParams, ModelSpec};
use crate::error::{Error, Result};
use crate::seed;

pub const BASE_KINDS: [ModelKind; 4] = [
    ModelKind::RandomForest,
    ModelKind::Logistic,
    ModelKind::GradientBoosting,
    ModelKind::ExtraTrees,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stacked {
    pub bases: Vec<(ModelKind, ModelParams)>,
    pub meta: LogisticParams,
}

fn base_specs(spec: &ModelSpec) -> Vec<ModelSpec> {
    BASE_KINDS
        .iter()
        .enumerate()
        .map(|(i, &kind)| {
            let mut s = ModelSpec::new(kind).with_seed(seed::derive_index(spec.seed, i as u64));
            if kind != ModelKind::Logistic {
                if let Some(&n) = spec.hyperparams.get("n_trees") {
                    s = s.with("n_trees", n);
                }
            }
            if kind == ModelKind::GradientBoosting {
                if let Some(&lr) = spec.hyperparams.get("learning_rate") {
                    s = s.with("learning_rate", lr);
                }
            }
            s
        })
        .collect()
}

pub fn fit(spec: &ModelSpec, rows: &[&[f64]], y: &[f64], labels: &[bool]) -> Result<Stacked> {
    let pos = labels.iter().filter(|&&b| b).count();
    let minority = pos.min(labels.len() - pos);
    let k = spec
        .hyperparams
        .get("inner_folds")
        .map_or(5, |v| *v as usize)
        .min(minority);
    if k < 2 {
        return Err(Error::Fit(format!(
            "stacking needs at least 2 rows per class for inner folds, minority has {minority}"
        )));
    }
    let specs = base_specs(spec);
    let inner_seed = seed::derive(spec.seed, "stacking-folds");
    let mut meta_x = vec![vec![0.0; specs.len()]; rows.len()];
    for (b, s) in specs.iter().enumerate() {
        let oof = out_of_fold(labels, k, inner_seed, |train, val| {
            let tr: Vec<&[f64]> = train.iter().map(|&i| rows[i]).collect();
            let ty: Vec<f64> = train.iter().map(|&i| y[i]).collect();
            let tl: Vec<bool> = train.iter().map(|&i| labels[i]).collect();
            let m = fit_rows(s, &tr, &ty, &tl)?;
            Ok(val.iter().map(|&i| m.predict_row(rows[i])).collect())
        })?;
        for (row, p) in meta_x.iter_mut().zip(oof) {
            row[b] = p;
        }
    }
    let meta_rows: Vec<&[f64]> = meta_x.iter().map(Vec::as_slice).collect();
    let meta = logistic::fit(&meta_rows, y, &LogisticOptions::default())?;
    let bases = specs
        .iter()
        .map(|s| Ok((s.kind, fit_rows(s, rows, y, labels)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Stacked { bases, meta })
}

impl Stacked {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let z: Vec<f64> = self.bases.iter().map(|(_, m)| m.predict_row(row)).collect();
        self.meta.predict_row(&z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn base_specs_inherit_tree_count() {
        let spec = ModelSpec::new(ModelKind::Stacking).with("n_trees", 7.0).with_seed(2);
        let specs = base_specs(&spec);
        assert_eq!(specs.len(), 4);
        assert_eq!(specs[0].hyperparams.get("n_trees"), Some(&7.0));
        assert!(specs[1].hyperparams.is_empty());
        let seeds: std::collections::BTreeSet<u64> = specs.iter().map(|s| s.seed).collect();
        assert_eq!(seeds.len(), 4);
    }

    #[test]
    fn too_few_minority_rows_fail() {
        let x = [vec![0.0], vec![1.0], vec![2.0]];
        let rows: Vec<&[f64]> = x.iter().map(Vec::as_slice).collect();
        let labels = [true, false, false];
        let y = [1.0, 0.0, 0.0];
        let spec = ModelSpec::new(ModelKind::Stacking);
        assert!(matches!(fit(&spec, &rows, &y, &labels), Err(Error::Fit(_))));
    }
}
