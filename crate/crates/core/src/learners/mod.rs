//! Classifier zoo behind one [`ModelSpec`] / [`TrainedModel`] pair, plus
//! stratified cross-validation in [`cv`].

pub mod boosting;
pub mod cv;
pub mod forest;
pub mod logistic;
pub mod stacking;
pub mod tree;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Logistic,
    LogisticL1,
    DecisionTree,
    RandomForest,
    ExtraTrees,
    GradientBoosting,
    Stacking,
}

impl ModelKind {
    pub const ALL: [ModelKind; 7] = [
        ModelKind::Logistic,
        ModelKind::LogisticL1,
        ModelKind::DecisionTree,
        ModelKind::RandomForest,
        ModelKind::ExtraTrees,
        ModelKind::GradientBoosting,
        ModelKind::Stacking,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Logistic => "logistic",
            ModelKind::LogisticL1 => "logistic_l1",
            ModelKind::DecisionTree => "decision_tree",
            ModelKind::RandomForest => "random_forest",
            ModelKind::ExtraTrees => "extra_trees",
            ModelKind::GradientBoosting => "gradient_boosting",
            ModelKind::Stacking => "stacking",
        }
    }

    /// Accepted hyperparameter names.
    pub fn hyperparameters(self) -> &'static [&'static str] {
        match self {
            ModelKind::Logistic => &["l2", "max_iter", "tol"],
            ModelKind::LogisticL1 => &["l1", "l2", "max_iter", "tol"],
            ModelKind::DecisionTree => &["max_depth", "min_samples_leaf", "min_samples_split"],
            ModelKind::RandomForest => {
                &["n_trees", "max_depth", "min_samples_leaf", "max_features", "bootstrap"]
            }
            ModelKind::ExtraTrees => &["n_trees", "max_depth", "min_samples_leaf", "max_features"],
            ModelKind::GradientBoosting => {
                &["n_trees", "learning_rate", "max_depth", "min_samples_leaf", "subsample"]
            }
            ModelKind::Stacking => &["n_trees", "learning_rate", "inner_folds"],
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        let alias = match norm.as_str() {
            "lr" | "logistic_regression" => "logistic",
            "lasso" => "logistic_l1",
            "tree" => "decision_tree",
            "rf" => "random_forest",
            "et" => "extra_trees",
            "gb" | "gbm" => "gradient_boosting",
            other => other,
        };
        ModelKind::ALL
            .into_iter()
            .find(|k| k.as_str() == alias)
            .ok_or_else(|| Error::Argument(format!("unknown model kind `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    #[serde(default)]
    pub hyperparams: BTreeMap<String, f64>,
    #[serde(default)]
    pub seed: u64,
}

impl ModelSpec {
    pub fn new(kind: ModelKind) -> Self {
        Self {
            kind,
            hyperparams: BTreeMap::new(),
            seed: 0,
        }
    }

    pub fn with(mut self, key: &str, value: f64) -> Self {
        self.hyperparams.insert(key.to_string(), value);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let allowed = self.kind.hyperparameters();
        for (k, &v) in &self.hyperparams {
            if !allowed.contains(&k.as_str()) {
                return Err(Error::Argument(format!(
                    "`{k}` is not a hyperparameter of {}; expected one of {allowed:?}",
                    self.kind
                )));
            }
            let ok = match k.as_str() {
                "l2" => v >= 0.0,
                "l1" | "tol" | "learning_rate" => v > 0.0,
                "max_features" | "subsample" => v > 0.0 && v <= 1.0,
                "max_depth" => v >= 0.0 && v.fract() == 0.0,
                "bootstrap" => v == 0.0 || v == 1.0,
                "min_samples_split" | "inner_folds" => v >= 2.0 && v.fract() == 0.0,
                _ => v >= 1.0 && v.fract() == 0.0,
            };
            if !ok || !v.is_finite() {
                return Err(Error::Argument(format!("invalid value {v} for `{k}`")));
            }
        }
        Ok(())
    }

    fn get(&self, key: &str, default: f64) -> f64 {
        self.hyperparams.get(key).copied().unwrap_or(default)
    }

    fn count(&self, key: &str, default: usize) -> usize {
        self.hyperparams.get(key).map_or(default, |v| *v as usize)
    }

    /// `max_depth` of 0 or absent means unlimited unless a default is given.
    fn depth(&self, default: Option<usize>) -> Option<usize> {
        match self.hyperparams.get("max_depth") {
            Some(v) if *v == 0.0 => None,
            Some(v) => Some(*v as usize),
            None => default,
        }
    }

    pub(crate) fn logistic_options(&self) -> logistic::LogisticOptions {
        let l1 = if self.kind == ModelKind::LogisticL1 {
            self.get("l1", DEFAULT_L1)
        } else {
            0.0
        };
        let l2_default = if self.kind == ModelKind::LogisticL1 { 0.0 } else { 1e-4 };
        logistic::LogisticOptions {
            l2: self.get("l2", l2_default),
            l1,
            max_iter: self.count("max_iter", 200),
            tol: self.get("tol", 1e-8),
        }
    }

    pub(crate) fn forest_options(&self) -> forest::ForestOptions {
        let extra = self.kind == ModelKind::ExtraTrees;
        forest::ForestOptions {
            n_trees: self.count("n_trees", 200),
            bootstrap: !extra && self.get("bootstrap", 1.0) == 1.0,
            splitter: if extra { tree::Splitter::Random } else { tree::Splitter::Best },
            max_depth: self.depth(None),
            min_samples_leaf: self.count("min_samples_leaf", 1),
            max_features: self.hyperparams.get("max_features").copied(),
        }
    }

    pub(crate) fn boosting_options(&self) -> boosting::BoostingOptions {
        boosting::BoostingOptions {
            n_trees: self.count("n_trees", 200),
            learning_rate: self.get("learning_rate", 0.1),
            max_depth: self.depth(Some(3)).unwrap_or(usize::MAX),
            min_samples_leaf: self.count("min_samples_leaf", 1),
            subsample: self.get("subsample", 1.0),
        }
    }
}

/// Default L1 strength for [`ModelKind::LogisticL1`].
pub const DEFAULT_L1: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    /// Fold index when trained inside cross-validation.
    pub fold: Option<usize>,
    pub seed: u64,
    pub smote_applied: bool,
    pub n_train: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelParams {
    Logistic(logistic::LogisticParams),
    Tree(tree::Tree),
    Forest(forest::Forest),
    Boosting(boosting::Boosting),
    Stacking(stacking::Stacked),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub format_version: u32,
    pub spec: ModelSpec,
    pub feature_names: Vec<String>,
    pub meta: TrainingMeta,
    pub params: ModelParams,
}

/// Fits `spec` on a complete matrix. Both classes must be present.
pub fn fit(spec: &ModelSpec, matrix: &FeatureMatrix) -> Result<TrainedModel> {
    spec.validate()?;
    matrix.ensure_complete()?;
    let n = matrix.n_rows();
    if n == 0 {
        return Err(Error::EmptyCohort);
    }
    let pos = matrix.n_positive();
    if pos == 0 || pos == n {
        return Err(Error::Fit(format!(
            "training data for {} holds a single class",
            spec.kind
        )));
    }
    let rows: Vec<&[f64]> = matrix.rows().collect();
    let y: Vec<f64> = matrix.labels().iter().map(|&b| f64::from(b)).collect();
    let params = fit_rows(spec, &rows, &y, matrix.labels())?;
    Ok(TrainedModel {
        format_version: FORMAT_VERSION,
        spec: spec.clone(),
        feature_names: matrix.column_names(),
        meta: TrainingMeta {
            fold: None,
            seed: spec.seed,
            smote_applied: matrix.synthetic().iter().any(|&s| s),
            n_train: n,
        },
        params,
    })
}

pub(crate) fn fit_rows(
    spec: &ModelSpec,
    rows: &[&[f64]],
    y: &[f64],
    labels: &[bool],
) -> Result<ModelParams> {
    Ok(match spec.kind {
        ModelKind::Logistic | ModelKind::LogisticL1 => {
            ModelParams::Logistic(logistic::fit(rows, y, &spec.logistic_options())?)
        }
        ModelKind::DecisionTree => {
            let params = tree::TreeParams {
                max_depth: spec.depth(None),
                min_samples_leaf: spec.count("min_samples_leaf", 1),
                min_samples_split: spec.count("min_samples_split", 2),
                ..Default::default()
            };
            let idx: Vec<usize> = (0..rows.len()).collect();
            let mut rng = crate::seed::rng(crate::seed::derive(spec.seed, "tree"));
            ModelParams::Tree(tree::Tree::fit(rows, y, &idx, &params, &mut rng))
        }
        ModelKind::RandomForest | ModelKind::ExtraTrees => {
            ModelParams::Forest(forest::fit(rows, y, &spec.forest_options(), spec.seed))
        }
        ModelKind::GradientBoosting => {
            ModelParams::Boosting(boosting::fit(rows, y, &spec.boosting_options(), spec.seed))
        }
        ModelKind::Stacking => ModelParams::Stacking(stacking::fit(spec, rows, y, labels)?),
    })
}

impl ModelParams {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        match self {
            ModelParams::Logistic(p) => p.predict_row(row),
            ModelParams::Tree(t) => t.predict_row(row),
            ModelParams::Forest(f) => f.predict_row(row),
            ModelParams::Boosting(b) => b.predict_row(row),
            ModelParams::Stacking(s) => s.predict_row(row),
        }
    }
}

impl TrainedModel {
    pub fn kind(&self) -> ModelKind {
        self.spec.kind
    }

    /// Positive-class probabilities. Column names must match training
    /// exactly, in order.
    pub fn predict_proba(&self, matrix: &FeatureMatrix) -> Result<Vec<f64>> {
        let names = matrix.column_names();
        if names != self.feature_names {
            let missing: Vec<&String> = self.feature_names.iter().filter(|n| !names.contains(n)).collect();
            return Err(Error::Schema(format!(
                "feature columns differ from training ({} vs {}); missing {missing:?}",
                names.len(),
                self.feature_names.len()
            )));
        }
        matrix.ensure_complete()?;
        Ok(matrix.rows().map(|r| self.params.predict_row(r)).collect())
    }

    /// Normalized importance per feature name. Stacking has no single
    /// importance vector and reports a capability error.
    pub fn feature_importance(&self) -> Result<BTreeMap<String, f64>> {
        let v = match &self.params {
            ModelParams::Logistic(p) => p.importance(),
            ModelParams::Tree(t) => forest::normalize(t.raw_importance()),
            ModelParams::Forest(f) => f.importance(),
            ModelParams::Boosting(b) => b.importance(),
            ModelParams::Stacking(_) => {
                return Err(Error::Capability(
                    "stacking ensembles do not expose feature importance".into(),
                ))
            }
        };
        Ok(self.feature_names.iter().cloned().zip(v).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: TrainedModel = serde_json::from_str(&text)?;
        if m.format_version != FORMAT_VERSION {
            return Err(Error::Schema(format!(
                "model format {} is not supported (expected {FORMAT_VERSION})",
                m.format_version
            )));
        }
        Ok(m)
    }
}
