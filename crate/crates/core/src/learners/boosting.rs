//! Gradient boosting on log-loss with regression trees and Newton leaf
//! values.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::forest::normalize;
use super::logistic::sigmoid;
use super::tree::{Criterion, Node, Splitter, Tree, TreeParams};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoostingOptions {
    pub n_trees: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    pub subsample: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Boosting {
    pub init: f64,
    pub learning_rate: f64,
    pub trees: Vec<Tree>,
}

pub fn fit(rows: &[&[f64]], y: &[f64], opts: &BoostingOptions, seed: u64) -> Boosting {
    let n = rows.len();
    let prev = (y.iter().sum::<f64>() / n as f64).clamp(1e-6, 1.0 - 1e-6);
    let init = (prev / (1.0 - prev)).ln();
    let mut f = vec![init; n];
    let params = TreeParams {
        criterion: Criterion::SquaredError,
        splitter: Splitter::Best,
        max_depth: Some(opts.max_depth),
        min_samples_split: 2,
        min_samples_leaf: opts.min_samples_leaf,
        max_features: None,
    };
    let mut rng = seed::rng(seed::derive(seed, "boosting"));
    let mut trees = Vec::with_capacity(opts.n_trees);
    for _ in 0..opts.n_trees {
        let p: Vec<f64> = f.iter().map(|&z| sigmoid(z)).collect();
        let resid: Vec<f64> = y.iter().zip(&p).map(|(a, b)| a - b).collect();
        let idx: Vec<usize> = if opts.subsample < 1.0 {
            let m = ((opts.subsample * n as f64).round() as usize).clamp(1, n);
            let mut v = sample(&mut rng, n, m).into_vec();
            v.sort_unstable();
            v
        } else {
            (0..n).collect()
        };
        let mut tree = Tree::fit(rows, &resid, &idx, &params, &mut rng);
        // Newton step per leaf: sum(r) / sum(p (1 - p))
        let mut num = vec![0.0; tree.nodes().len()];
        let mut den = vec![0.0; tree.nodes().len()];
        for &i in &idx {
            let leaf = tree.leaf_index(rows[i]);
            num[leaf] += resid[i];
            den[leaf] += p[i] * (1.0 - p[i]);
        }
        let leaves: Vec<usize> = tree
            .nodes()
            .iter()
            .enumerate()
            .filter(|(_, nd)| matches!(nd, Node::Leaf { .. }))
            .map(|(i, _)| i)
            .collect();
        for leaf in leaves {
            let v = if den[leaf] < 1e-12 { 0.0 } else { num[leaf] / den[leaf] };
            tree.set_leaf_value(leaf, v);
        }
        for (fi, r) in f.iter_mut().zip(rows) {
            *fi += opts.learning_rate * tree.predict_row(r);
        }
        trees.push(tree);
    }
    Boosting {
        init,
        learning_rate: opts.learning_rate,
        trees,
    }
}

impl Boosting {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let z = self.init
            + self.learning_rate * self.trees.iter().map(|t| t.predict_row(row)).sum::<f64>();
        sigmoid(z)
    }

    pub fn importance(&self) -> Vec<f64> {
        let d = self.trees.first().map_or(0, Tree::n_features);
        let mut acc = vec![0.0; d];
        for t in &self.trees {
            for (a, r) in acc.iter_mut().zip(t.raw_importance()) {
                *a += r;
            }
        }
        normalize(acc)
    }
}
