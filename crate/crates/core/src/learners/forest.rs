//! Bagged tree ensembles: random forest (bootstrap + best splits) and extra
//! trees (full sample + random thresholds). Trees grow in parallel with one
//! derived seed each, so results do not depend on thread scheduling.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tree::{Criterion, Splitter, Tree, TreeParams};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForestOptions {
    pub n_trees: usize,
    pub bootstrap: bool,
    pub splitter: Splitter,
    pub max_depth: Option<usize>,
    pub min_samples_leaf: usize,
    /// Fraction of features per node; `None` uses sqrt(d).
    pub max_features: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub trees: Vec<Tree>,
}

pub fn max_features_for(d: usize, fraction: Option<f64>) -> usize {
    let m = match fraction {
        Some(f) => (f * d as f64).round() as usize,
        None => (d as f64).sqrt().round() as usize,
    };
    m.clamp(1, d.max(1))
}

pub fn fit(rows: &[&[f64]], y: &[f64], opts: &ForestOptions, seed: u64) -> Forest {
    let n = rows.len();
    let d = rows.first().map_or(0, |r| r.len());
    let params = TreeParams {
        criterion: Criterion::Gini,
        splitter: opts.splitter,
        max_depth: opts.max_depth,
        min_samples_split: 2,
        min_samples_leaf: opts.min_samples_leaf,
        max_features: Some(max_features_for(d, opts.max_features)),
    };
    let trees = (0..opts.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = seed::rng(seed::derive_index(seed, t as u64));
            let idx: Vec<usize> = if opts.bootstrap {
                (0..n).map(|_| rng.random_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            Tree::fit(rows, y, &idx, &params, &mut rng)
        })
        .collect();
    Forest { trees }
}

impl Forest {
    /// Mean of leaf class frequencies.
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict_row(row)).sum::<f64>() / self.trees.len() as f64
    }

    /// Mean over trees of each tree's normalized impurity decrease.
    pub fn importance(&self) -> Vec<f64> {
        let d = self.trees.first().map_or(0, Tree::n_features);
        let mut acc = vec![0.0; d];
        for t in &self.trees {
            let raw = t.raw_importance();
            let total: f64 = raw.iter().sum();
            if total > 0.0 {
                for (a, r) in acc.iter_mut().zip(raw) {
                    *a += r / total;
                }
            }
        }
        normalize(acc)
    }
}

pub(crate) fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let total: f64 = v.iter().sum();
    if total > 0.0 {
        for x in &mut v {
            *x /= total;
        }
    }
    v
}
