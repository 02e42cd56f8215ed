//! File-composed commands driven by one [`RunConfig`].
//!
//! Every command reads its predecessors' outputs from the run directory
//! `<output_dir>/<run_name>` and records what it wrote in `manifest.json`
//! (sha256 per artifact). Wall-clock times go to `timestamps.json` and LLM
//! latencies to `fusion/<h>_latency.csv`; neither is listed in the manifest,
//! so all other files are byte-identical across runs of the same config.
//!
//! Seeds per stage, all derived from `seed`:
//! - synth: `derive(seed, "synth")`
//! - cross-validation at horizon h: `derive(seed, "cv/<h>")`
//! - final fits at horizon h: `derive(seed, "fit/<h>")`, SMOTE under
//!   `derive(seed, "fit-smote/<h>")`

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::{assemble, smote_standardized, ColumnKind, FeatureMatrix, Imputer, SmoteConfig};
use crate::fusion::{fuse, write_audit_csv, FusionConfig, FusionDecision};
use crate::ladder::{backfill_doses, build_profile, DrugLexicon, TierDoseProfile, DEFAULT_WINDOWS_H};
use crate::learners::cv::{cross_validate, rank_models, CvReport};
use crate::learners::{self, ModelKind, ModelSpec, TrainedModel};
use crate::llm::{
    build_prompt, complete_many, parse_probability, patient_summary, write_audit_log, AuditEntry, ChatEndpoint,
    HttpChatEndpoint, LlmProbability, NoteCueEndpoint, PromptInput, PromptTemplate, Provenance, RetryPolicy,
    TierMapping, DEFAULT_BUDGET_CHARS,
};
use crate::metrics::{confusion, group_compare, roc_auc, sens_spec_acc, threshold_predictions, GroupSummary};
use crate::record::{apply_exclusions, ingest_cohort, write_ingest_report, Cohort, ExclusionPolicy, SCHEMA_VERSION};
use crate::retrieval::{ingest_kb, HashedNgramEmbedder, KnowledgeBase, RetrievedDoc, CHUNK_CHARS, CHUNK_OVERLAP};
use crate::seed;
use crate::synth::{self, SynthConfig};
use crate::text_extract::{extract_scores, Horizon, PainWindowScores, RuleSet, DEFAULT_THRESHOLD};

/// Environment variable that overrides `llm.api_key`.
pub const API_KEY_ENV: &str = "PAINCAST_API_KEY";

const MANIFEST: &str = "manifest.json";
const TIMESTAMPS: &str = "timestamps.json";
const COHORT: &str = "cohort.jsonl";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Record file read by `ingest`.
    pub cohort: Option<PathBuf>,
    /// Directory of .txt/.md reference documents for `rag-index`.
    pub kb_dir: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub lexicon: Option<PathBuf>,
    pub rules: Option<PathBuf>,
    /// Template file; when absent `llm.template` names a built-in.
    pub prompt_template: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmoteSettings {
    pub enabled: bool,
    pub trigger_ratio: f64,
    pub k_neighbors: usize,
    pub target_ratio: f64,
}

impl Default for SmoteSettings {
    fn default() -> Self {
        let d = SmoteConfig::default();
        Self {
            enabled: true,
            trigger_ratio: d.trigger_ratio,
            k_neighbors: d.k_neighbors,
            target_ratio: d.target_ratio,
        }
    }
}

impl SmoteSettings {
    fn config(&self, seed: u64) -> Option<SmoteConfig> {
        self.enabled.then_some(SmoteConfig {
            trigger_ratio: self.trigger_ratio,
            k_neighbors: self.k_neighbors,
            target_ratio: self.target_ratio,
            seed,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEntry {
    pub kind: ModelKind,
    #[serde(default)]
    pub hyperparams: BTreeMap<String, f64>,
}

impl ModelEntry {
    pub fn new(kind: ModelKind) -> Self {
        Self { kind, hyperparams: BTreeMap::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmConfig {
    /// Answer from the synthetic note cues instead of calling an endpoint.
    pub mock: bool,
    pub base_url: String,
    pub model: String,
    /// Never written back to disk.
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    /// Built-in template name: v1, v2 or v3.
    pub template: String,
    pub budget_chars: usize,
    pub top_k: usize,
    pub max_parallel: usize,
    /// Also score out-of-band patients, for the LLM-only baseline.
    pub score_all: bool,
    pub retry: RetryPolicy,
    pub tiers: TierMapping,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            mock: true,
            base_url: "http://localhost:8000/v1".into(),
            model: "default".into(),
            api_key: None,
            template: "v3".into(),
            budget_chars: DEFAULT_BUDGET_CHARS,
            top_k: 4,
            max_parallel: 4,
            score_all: true,
            retry: RetryPolicy::default(),
            tiers: TierMapping::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExclusionSettings {
    pub max_missing: f64,
    pub min_pain_observations: usize,
}

impl Default for ExclusionSettings {
    fn default() -> Self {
        let d = ExclusionPolicy::default();
        Self {
            max_missing: d.max_missing,
            min_pain_observations: d.min_pain_observations,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Required; every random stage derives from it.
    pub seed: Option<u64>,
    /// Run directory name under `paths.output_dir`; default `run-<seed>`.
    pub run_name: Option<String>,
    pub horizons: Vec<Horizon>,
    pub k_folds: usize,
    /// NRS at or above this is a pain episode.
    pub nrs_threshold: u8,
    pub paths: PathsConfig,
    pub exclusion: ExclusionSettings,
    pub smote: SmoteSettings,
    pub models: Vec<ModelEntry>,
    pub fusion: FusionConfig,
    pub llm: LlmConfig,
    /// `synth.seed` is ignored; the cohort seed comes from `seed`.
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            run_name: None,
            horizons: Horizon::ALL.to_vec(),
            k_folds: 5,
            nrs_threshold: DEFAULT_THRESHOLD,
            paths: PathsConfig {
                output_dir: PathBuf::from("runs"),
                ..Default::default()
            },
            exclusion: ExclusionSettings::default(),
            smote: SmoteSettings::default(),
            models: [
                ModelKind::Logistic,
                ModelKind::LogisticL1,
                ModelKind::DecisionTree,
                ModelKind::RandomForest,
                ModelKind::ExtraTrees,
                ModelKind::GradientBoosting,
                ModelKind::Stacking,
            ]
            .into_iter()
            .map(ModelEntry::new)
            .collect(),
            fusion: FusionConfig::default(),
            llm: LlmConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub run_name: Option<String>,
    pub output_dir: Option<PathBuf>,
    pub cohort: Option<PathBuf>,
    pub kb_dir: Option<PathBuf>,
    pub lexicon: Option<PathBuf>,
    pub rules: Option<PathBuf>,
    pub prompt_template: Option<PathBuf>,
    pub horizons: Option<Vec<Horizon>>,
    pub k_folds: Option<usize>,
    pub models: Option<Vec<ModelKind>>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub decision_threshold: Option<f64>,
    pub mock: Option<bool>,
    pub base_url: Option<String>,
    pub model_name: Option<String>,
    pub n_patients: Option<usize>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn apply(&mut self, o: &Overrides) {
        macro_rules! set {
            ($src:expr => $dst:expr) => {
                if let Some(v) = $src.clone() {
                    $dst = v;
                }
            };
        }
        if o.seed.is_some() {
            self.seed = o.seed;
        }
        if o.run_name.is_some() {
            self.run_name = o.run_name.clone();
        }
        set!(o.output_dir => self.paths.output_dir);
        for (src, dst) in [
            (&o.cohort, &mut self.paths.cohort),
            (&o.kb_dir, &mut self.paths.kb_dir),
            (&o.lexicon, &mut self.paths.lexicon),
            (&o.rules, &mut self.paths.rules),
            (&o.prompt_template, &mut self.paths.prompt_template),
        ] {
            if src.is_some() {
                *dst = src.clone();
            }
        }
        set!(o.horizons => self.horizons);
        set!(o.k_folds => self.k_folds);
        if let Some(kinds) = &o.models {
            self.models = kinds.iter().map(|&k| ModelEntry::new(k)).collect();
        }
        set!(o.alpha => self.fusion.alpha);
        set!(o.beta => self.fusion.beta);
        set!(o.decision_threshold => self.fusion.decision_threshold);
        set!(o.mock => self.llm.mock);
        set!(o.base_url => self.llm.base_url);
        set!(o.model_name => self.llm.model);
        set!(o.n_patients => self.synth.n_patients);
    }

    /// Takes the endpoint credential from the environment when set.
    pub fn apply_env(&mut self) {
        if let Ok(key) = std::env::var(API_KEY_ENV) {
            if !key.is_empty() {
                self.llm.api_key = Some(key);
            }
        }
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| Error::Config("`seed` is required (config file or --seed)".into()))
    }

    pub fn validate(&self) -> Result<()> {
        self.seed()?;
        if self.horizons.is_empty() {
            return Err(Error::Config("`horizons` is empty".into()));
        }
        let uniq: BTreeSet<_> = self.horizons.iter().collect();
        if uniq.len() != self.horizons.len() {
            return Err(Error::Config("`horizons` has duplicates".into()));
        }
        if self.k_folds < 2 {
            return Err(Error::Config(format!("k_folds {} < 2", self.k_folds)));
        }
        if !(1..=10).contains(&self.nrs_threshold) {
            return Err(Error::Config(format!("nrs_threshold {} outside 1..=10", self.nrs_threshold)));
        }
        if self.models.is_empty() {
            return Err(Error::Config("`models` is empty".into()));
        }
        for m in &self.models {
            self.spec(m, 0).validate()?;
        }
        if let Some(cfg) = self.smote.config(0) {
            cfg.validate()?;
        }
        self.fusion.validate()?;
        self.llm.tiers.validate()?;
        if self.llm.top_k == 0 || self.llm.max_parallel == 0 {
            return Err(Error::Config("llm.top_k and llm.max_parallel must be >= 1".into()));
        }
        if let Some(name) = &self.run_name {
            if name.is_empty() || name.contains(['/', '\\']) || name == "." || name == ".." {
                return Err(Error::Config(format!("run_name `{name}` is not a plain directory name")));
            }
        }
        Ok(())
    }

    fn spec(&self, m: &ModelEntry, seed: u64) -> ModelSpec {
        let mut spec = ModelSpec::new(m.kind).with_seed(seed);
        for (k, v) in &m.hyperparams {
            spec = spec.with(k, *v);
        }
        spec
    }

    pub fn run_dir(&self) -> Result<PathBuf> {
        let name = match &self.run_name {
            Some(n) => n.clone(),
            None => format!("run-{}", self.seed()?),
        };
        Ok(self.paths.output_dir.join(name))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub run: String,
    pub config_sha256: String,
    /// Files written by each command, relative to the run directory.
    pub commands: BTreeMap<String, Vec<String>>,
    pub artifacts: BTreeMap<String, String>,
}

/// An opened run: validated config plus its directory.
#[derive(Debug, Clone)]
pub struct Run {
    pub cfg: RunConfig,
    pub dir: PathBuf,
}

fn missing(path: PathBuf, hint: &str) -> Error {
    Error::MissingArtifact { path, hint: hint.to_string() }
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_file(path, &s)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.4}"))
}

impl Run {
    pub fn open(mut cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        cfg.synth.seed = seed::derive(cfg.seed()?, "synth");
        let dir = cfg.run_dir()?;
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self { cfg, dir })
    }

    fn seed(&self) -> u64 {
        self.cfg.seed.expect("validated")
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn ensure_dir(&self, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }

    fn require(&self, rel: &str, hint: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if p.exists() {
            Ok(p)
        } else {
            Err(missing(p, hint))
        }
    }

    fn require_input(key: &str, path: &Option<PathBuf>) -> Result<PathBuf> {
        let p = path
            .clone()
            .ok_or_else(|| Error::Config(format!("`paths.{key}` is not set")))?;
        if !p.exists() {
            return Err(missing(p, &format!("check `paths.{key}`")));
        }
        Ok(p)
    }

    pub fn manifest(&self) -> Result<Manifest> {
        let p = self.path(MANIFEST);
        if p.exists() {
            read_json(&p)
        } else {
            Ok(Manifest::default())
        }
    }

    /// Hashes `outputs` into the manifest and stamps the command time.
    fn record(&self, command: &str, outputs: &[PathBuf]) -> Result<()> {
        let mut m = self.manifest()?;
        m.run = self.dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        m.config_sha256 = hex::encode(Sha256::digest(self.cfg.to_toml()?.as_bytes()));
        let mut rels = Vec::new();
        for p in outputs {
            let rel = p
                .strip_prefix(&self.dir)
                .unwrap_or(p)
                .to_string_lossy()
                .replace('\\', "/");
            m.artifacts.insert(rel.clone(), sha256_file(p)?);
            rels.push(rel);
        }
        rels.sort();
        m.commands.insert(command.to_string(), rels);
        write_json(&self.path(MANIFEST), &m)?;
        write_file(&self.path("config.toml"), &self.cfg.to_toml()?)?;

        let tp = self.path(TIMESTAMPS);
        let mut stamps: BTreeMap<String, u64> = if tp.exists() { read_json(&tp)? } else { BTreeMap::new() };
        let now = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        stamps.insert(command.to_string(), now);
        write_json(&tp, &stamps)
    }

    fn lexicon(&self) -> Result<DrugLexicon> {
        match &self.cfg.paths.lexicon {
            Some(_) => DrugLexicon::load(&Self::require_input("lexicon", &self.cfg.paths.lexicon)?),
            None => Ok(DrugLexicon::default_lexicon()),
        }
    }

    fn rules(&self) -> Result<RuleSet> {
        match &self.cfg.paths.rules {
            Some(_) => RuleSet::load(&Self::require_input("rules", &self.cfg.paths.rules)?),
            None => Ok(RuleSet::default_rules()),
        }
    }

    fn template(&self) -> Result<PromptTemplate> {
        match &self.cfg.paths.prompt_template {
            Some(_) => PromptTemplate::load(&Self::require_input("prompt_template", &self.cfg.paths.prompt_template)?),
            None => PromptTemplate::builtin(&self.cfg.llm.template),
        }
    }

    pub fn load_cohort(&self) -> Result<Cohort> {
        let p = self.require(COHORT, "run `ingest` or `synth` first")?;
        Ok(ingest_cohort(&p, SCHEMA_VERSION)?.0)
    }
}

/// Per-patient window scores and dose profiles.
pub struct Derived {
    pub scores: BTreeMap<String, PainWindowScores>,
    pub profiles: BTreeMap<String, TierDoseProfile>,
}

pub fn derive_inputs(cohort: &Cohort, rules: &RuleSet, lexicon: &DrugLexicon) -> Result<Derived> {
    let mut scores = BTreeMap::new();
    let mut profiles = BTreeMap::new();
    for r in cohort.records() {
        scores.insert(r.patient_id.clone(), extract_scores(&r.pain_observations, rules));
        let mut log = r.medication_log.clone();
        log.sort_by(|a, b| a.time_h.total_cmp(&b.time_h));
        let log = backfill_doses(&log)?;
        profiles.insert(r.patient_id.clone(), build_profile(&log, lexicon, &DEFAULT_WINDOWS_H)?);
    }
    Ok(Derived { scores, profiles })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IngestSummary {
    pub read: usize,
    pub rejected: usize,
    pub excluded: usize,
    pub kept: usize,
}

pub fn cmd_ingest(run: &Run) -> Result<IngestSummary> {
    let src = Run::require_input("cohort", &run.cfg.paths.cohort)?;
    let (cohort, report) = ingest_cohort(&src, SCHEMA_VERSION)?;
    let policy = ExclusionPolicy {
        max_missing: run.cfg.exclusion.max_missing,
        min_pain_observations: run.cfg.exclusion.min_pain_observations,
        ..Default::default()
    };
    let (kept, excl) = apply_exclusions(&cohort, &policy)?;
    if kept.is_empty() {
        return Err(Error::EmptyCohort);
    }
    let out = [run.path(COHORT), run.path("ingest_rejected.csv"), run.path("exclusions.csv")];
    kept.write_jsonl(&out[0])?;
    write_ingest_report(&out[1], &report)?;
    excl.write_csv(&out[2])?;
    run.record("ingest", &out)?;
    Ok(IngestSummary {
        read: cohort.len() + report.rejected.len(),
        rejected: report.rejected.len(),
        excluded: excl.excluded.len(),
        kept: kept.len(),
    })
}

pub fn cmd_synth(run: &Run) -> Result<usize> {
    let s = synth::generate(&run.cfg.synth)?;
    let out = [run.path(COHORT), run.path("latent.csv")];
    s.cohort(&out[0])?.write_jsonl(&out[0])?;
    s.write_latent_csv(&out[1])?;
    run.record("synth", &out)?;
    Ok(s.records.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub kind: ModelKind,
    pub mean_auc: f64,
    pub sd_auc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub horizon: Horizon,
    pub n_rows: usize,
    pub n_positive: usize,
    pub reports: Vec<CvReport>,
    pub selected: Selection,
}

fn horizon_matrix(run: &Run, cohort: &Cohort, horizon: Horizon) -> Result<FeatureMatrix> {
    let d = derive_inputs(cohort, &run.rules()?, &run.lexicon()?)?;
    let (m, rep) = assemble(cohort, &d.scores, &d.profiles, horizon, run.cfg.nrs_threshold)?;
    if !rep.dropped_unlabeled.is_empty() {
        log::warn!("{horizon}: {} patients lack a score in the horizon window", rep.dropped_unlabeled.len());
    }
    Ok(m)
}

pub fn cmd_train(run: &Run) -> Result<Vec<TrainSummary>> {
    let cohort = run.load_cohort()?;
    let mut outputs = Vec::new();
    let mut summaries = Vec::new();
    for &h in &run.cfg.horizons {
        let matrix = horizon_matrix(run, &cohort, h)?;
        if matrix.n_rows() == 0 {
            return Err(Error::EmptyCohort);
        }
        let fdir = run.ensure_dir("features")?;
        let fpath = fdir.join(format!("{h}.csv"));
        matrix.write_csv(&fpath)?;
        outputs.push(fpath);

        let cv_dir = run.ensure_dir(&format!("cv/{h}"))?;
        let model_dir = run.ensure_dir(&format!("models/{h}"))?;
        let cv_seed = seed::derive(run.seed(), &format!("cv/{h}"));
        let smote_cv = run.cfg.smote.config(0);
        let mut reports = Vec::new();
        for m in &run.cfg.models {
            let spec = run.cfg.spec(m, 0);
            log::info!("{h}: cross-validating {}", m.kind);
            let rep = cross_validate(&spec, &matrix, run.cfg.k_folds, smote_cv.as_ref(), cv_seed)?;
            let jp = cv_dir.join(format!("{}.json", m.kind));
            let cp = cv_dir.join(format!("{}_folds.csv", m.kind));
            rep.write_json(&jp)?;
            rep.write_metrics_csv(&cp)?;
            outputs.extend([jp, cp]);
            reports.push(rep);
        }
        let ranking = rank_models(&reports);
        let rp = cv_dir.join("ranking.csv");
        let mut w = csv::Writer::from_path(&rp)?;
        w.write_record(["rank", "model", "mean_auc", "sd_auc"])?;
        for (i, (k, mean, sd)) in ranking.iter().enumerate() {
            w.write_record([(i + 1).to_string(), k.to_string(), format!("{mean:.6}"), format!("{sd:.6}")])?;
        }
        w.flush().map_err(|e| Error::io(&rp, e))?;
        outputs.push(rp);

        // final models on every labeled row
        let imputer = Imputer::fit(&matrix)?;
        let mut full = imputer.apply(&matrix)?;
        if let Some(cfg) = run.cfg.smote.config(seed::derive(run.seed(), &format!("fit-smote/{h}"))) {
            if cfg.triggers(&full) {
                full = smote_standardized(&full, &cfg)?;
            }
        }
        let fit_seed = seed::derive(run.seed(), &format!("fit/{h}"));
        let ip = model_dir.join("imputer.json");
        let colp = model_dir.join("columns.json");
        write_json(&ip, &imputer)?;
        write_json(&colp, &matrix.column_names())?;
        outputs.extend([ip, colp]);
        for m in &run.cfg.models {
            let mut model = learners::fit(&run.cfg.spec(m, fit_seed), &full)?;
            model.meta.smote_applied = full.synthetic().iter().any(|&s| s);
            let mp = model_dir.join(format!("{}.json", m.kind));
            model.save(&mp)?;
            outputs.push(mp);
        }
        let (kind, mean_auc, sd_auc) = ranking[0];
        let selected = Selection { kind, mean_auc, sd_auc };
        let sp = model_dir.join("selected.json");
        write_json(&sp, &selected)?;
        outputs.push(sp);
        summaries.push(TrainSummary {
            horizon: h,
            n_rows: matrix.n_rows(),
            n_positive: matrix.n_positive(),
            reports,
            selected,
        });
    }
    run.record("train", &outputs)?;
    Ok(summaries)
}

fn load_selected(run: &Run, h: Horizon) -> Result<(Selection, CvReport)> {
    let sel: Selection = read_json(&run.require(&format!("models/{h}/selected.json"), "run `train` first")?)?;
    let rep: CvReport = read_json(&run.require(&format!("cv/{h}/{}.json", sel.kind), "run `train` first")?)?;
    Ok((sel, rep))
}

pub fn cmd_evaluate(run: &Run) -> Result<()> {
    let cohort = run.load_cohort()?;
    let dir = run.ensure_dir("evaluation")?;
    let mut outputs = Vec::new();
    for &h in &run.cfg.horizons {
        let (sel, rep) = load_selected(run, h)?;
        let matrix = horizon_matrix(run, &cohort, h)?;

        let gp = dir.join(format!("{h}_groups.csv"));
        let mut w = csv::Writer::from_path(&gp)?;
        w.write_record(["feature", "n_neg", "mean_neg", "sd_neg", "n_pos", "mean_pos", "sd_pos", "p_value"])?;
        for (j, c) in matrix.columns().iter().enumerate() {
            if c.kind != ColumnKind::Continuous {
                continue;
            }
            let (mut neg, mut pos) = (Vec::new(), Vec::new());
            for (i, &y) in matrix.labels().iter().enumerate() {
                let v = matrix.get(i, j);
                if !v.is_nan() {
                    if y { pos.push(v) } else { neg.push(v) }
                }
            }
            let (a, b) = (GroupSummary::of(&neg), GroupSummary::of(&pos));
            let p = group_compare(&neg, &pos).ok().map(|g| g.p_value);
            w.write_record([
                c.name.clone(),
                a.n.to_string(),
                format!("{:.4}", a.mean),
                format!("{:.4}", a.sd),
                b.n.to_string(),
                format!("{:.4}", b.mean),
                format!("{:.4}", b.sd),
                p.map_or("NA".into(), |p| format!("{p:.6}")),
            ])?;
        }
        w.flush().map_err(|e| Error::io(&gp, e))?;
        outputs.push(gp);

        let model = TrainedModel::load(&run.require(&format!("models/{h}/{}.json", sel.kind), "run `train` first")?)?;
        let ip = dir.join(format!("{h}_importance.csv"));
        let mut w = csv::Writer::from_path(&ip)?;
        w.write_record(["model", "feature", "importance"])?;
        let (kind, imp) = match model.feature_importance() {
            Ok(imp) => (sel.kind, Some(imp)),
            Err(Error::Capability(_)) => {
                let rf = run.path(&format!("models/{h}/{}.json", ModelKind::RandomForest));
                match rf.exists().then(|| TrainedModel::load(&rf)).transpose()? {
                    Some(m) => (ModelKind::RandomForest, Some(m.feature_importance()?)),
                    None => (sel.kind, None),
                }
            }
            Err(e) => return Err(e),
        };
        if let Some(imp) = imp {
            let mut v: Vec<_> = imp.into_iter().collect();
            v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            for (f, x) in v {
                w.write_record([kind.to_string(), f, format!("{x:.6}")])?;
            }
        }
        w.flush().map_err(|e| Error::io(&ip, e))?;
        outputs.push(ip);
        log::info!("{h}: selected {} (CV AUC {:.3} ± {:.3}); OOF rows {}", sel.kind, sel.mean_auc, sel.sd_auc, rep.row_ids.len());
    }
    run.record("evaluate", &outputs)?;
    Ok(())
}

pub fn cmd_rag_index(run: &Run) -> Result<usize> {
    let src = Run::require_input("kb_dir", &run.cfg.paths.kb_dir)?;
    let (kb, report) = ingest_kb(&src, &HashedNgramEmbedder::default(), CHUNK_CHARS, CHUNK_OVERLAP)?;
    for (p, why) in &report.skipped {
        log::warn!("skipped {}: {why}", p.display());
    }
    let dir = run.ensure_dir("kb")?;
    kb.save(&dir)?;
    run.record("rag-index", &[dir.join("manifest.json"), dir.join("vectors.bin")])?;
    Ok(kb.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub patient_id: String,
    pub label: bool,
    pub p_ml: f64,
    pub model: ModelKind,
}

/// Out-of-fold probabilities of the selected model, one row per patient.
pub fn cmd_predict(run: &Run) -> Result<BTreeMap<Horizon, Vec<PredictionRow>>> {
    let dir = run.ensure_dir("predictions")?;
    let mut outputs = Vec::new();
    let mut all = BTreeMap::new();
    for &h in &run.cfg.horizons {
        let (sel, rep) = load_selected(run, h)?;
        let rows: Vec<PredictionRow> = rep
            .row_ids
            .iter()
            .zip(&rep.labels)
            .zip(&rep.oof_probabilities)
            .map(|((id, &label), &p)| PredictionRow { patient_id: id.clone(), label, p_ml: p, model: sel.kind })
            .collect();
        let p = dir.join(format!("{h}.csv"));
        write_predictions(&p, &rows)?;
        outputs.push(p);
        all.insert(h, rows);
    }
    run.record("predict", &outputs)?;
    Ok(all)
}

fn write_predictions(path: &Path, rows: &[PredictionRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["patient_id", "label", "p_ml", "model"])?;
    for r in rows {
        w.write_record([
            r.patient_id.clone(),
            u8::from(r.label).to_string(),
            format!("{:.6}", r.p_ml),
            r.model.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>> {
    let mut rd = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let bad = || Error::Parse(format!("{}: malformed prediction row", path.display()));
        rows.push(PredictionRow {
            patient_id: rec.get(0).ok_or_else(bad)?.to_string(),
            label: rec.get(1).ok_or_else(bad)? == "1",
            p_ml: rec.get(2).and_then(|s| s.parse().ok()).ok_or_else(bad)?,
            model: rec.get(3).and_then(|s| s.parse().ok()).ok_or_else(bad)?,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuseSummary {
    pub horizon: Horizon,
    pub patients: usize,
    pub in_band: usize,
    /// Endpoint requests issued for in-band patients.
    pub fusion_calls: usize,
    /// Additional requests for the LLM-only baseline.
    pub baseline_calls: usize,
    pub failures: usize,
}

/// Endpoint from the config: the note-cue mock or an HTTP chat endpoint.
pub fn endpoint_from_config(cfg: &LlmConfig) -> Arc<dyn ChatEndpoint> {
    if cfg.mock {
        Arc::new(NoteCueEndpoint::synthetic())
    } else {
        Arc::new(HttpChatEndpoint::new(
            &cfg.base_url,
            &cfg.model,
            cfg.api_key.clone(),
            Duration::from_millis(cfg.retry.timeout_ms),
        ))
    }
}

pub fn cmd_fuse(run: &Run) -> Result<Vec<FuseSummary>> {
    cmd_fuse_with(run, endpoint_from_config(&run.cfg.llm))
}

struct Scored {
    est: Option<LlmProbability>,
    entry: AuditEntry,
}

fn score_prompts(
    run: &Run,
    endpoint: &Arc<dyn ChatEndpoint>,
    h: Horizon,
    ids: &[String],
    prompts: &[String],
    template: &str,
) -> Vec<Scored> {
    let cfg = &run.cfg.llm;
    let responses = complete_many(endpoint, prompts, &cfg.retry, cfg.max_parallel);
    ids.iter()
        .zip(prompts)
        .zip(responses)
        .map(|((id, prompt), resp)| {
            let (est, raw, retries, latency, error) = match resp {
                Ok(r) => {
                    let est = parse_probability(&r.raw, &cfg.tiers);
                    (Some(est), Some(r.raw), Some(r.retries), Some(r.latency_ms), None)
                }
                Err(e) => (None, None, None, None, Some(e.to_string())),
            };
            let shown = est.unwrap_or_else(|| cfg.tiers.failure());
            Scored {
                entry: AuditEntry {
                    patient_id: id.clone(),
                    horizon: h,
                    endpoint: endpoint.id(),
                    template: template.to_string(),
                    prompt: prompt.clone(),
                    raw,
                    retries,
                    latency_ms: latency,
                    error,
                    p_llm: shown.p_llm,
                    provenance: shown.provenance,
                },
                est,
            }
        })
        .collect()
}

/// Indicator-gated fusion over the `predict` output. Only in-band patients
/// are sent to `endpoint` for the fused table; with `llm.score_all` the
/// rest are scored afterwards for the LLM-only baseline.
pub fn cmd_fuse_with(run: &Run, endpoint: Arc<dyn ChatEndpoint>) -> Result<Vec<FuseSummary>> {
    let cohort = run.load_cohort()?;
    let derived = derive_inputs(&cohort, &run.rules()?, &run.lexicon()?)?;
    let template = run.template()?;
    let kb = match &run.cfg.paths.kb_dir {
        Some(_) => {
            run.require("kb/manifest.json", "run `rag-index` first")?;
            Some(KnowledgeBase::load(&run.path("kb"))?)
        }
        None => {
            log::info!("no knowledge base configured; prompts carry no retrieved context");
            None
        }
    };
    let embedder = HashedNgramEmbedder::default();
    let dir = run.ensure_dir("fusion")?;
    let fcfg = run.cfg.fusion;
    let mut outputs = Vec::new();
    let mut summaries = Vec::new();

    for &h in &run.cfg.horizons {
        let preds = read_predictions(&run.require(&format!("predictions/{h}.csv"), "run `predict` first")?)?;
        let mut prompts = Vec::with_capacity(preds.len());
        for p in &preds {
            let rec = cohort
                .get(&p.patient_id)
                .ok_or_else(|| Error::Schema(format!("prediction for unknown patient `{}`", p.patient_id)))?;
            let input = PromptInput {
                record: rec,
                profile: &derived.profiles[&p.patient_id],
                scores: &derived.scores[&p.patient_id],
                horizon: h,
            };
            let docs: Vec<RetrievedDoc> = match &kb {
                Some(kb) if !kb.is_empty() => {
                    let hits = kb.top_k(&embedder, &patient_summary(&input), run.cfg.llm.top_k)?;
                    kb.resolve(&hits)
                }
                _ => Vec::new(),
            };
            prompts.push(build_prompt(&input, &docs, &template, run.cfg.llm.budget_chars)?.text);
        }

        let band: Vec<usize> = (0..preds.len()).filter(|&i| fcfg.in_band(preds[i].p_ml)).collect();
        let pick = |idx: &[usize]| -> (Vec<String>, Vec<String>) {
            (
                idx.iter().map(|&i| preds[i].patient_id.clone()).collect(),
                idx.iter().map(|&i| prompts[i].clone()).collect(),
            )
        };
        let (band_ids, band_prompts) = pick(&band);
        let band_scored = score_prompts(run, &endpoint, h, &band_ids, &band_prompts, &template.name);

        let mut by_row: BTreeMap<usize, Scored> = band.iter().copied().zip(band_scored).collect();
        let mut decisions: Vec<FusionDecision> = Vec::with_capacity(preds.len());
        for (i, p) in preds.iter().enumerate() {
            let d = fuse(
                p.p_ml,
                || {
                    let s = &by_row[&i];
                    s.est.ok_or_else(|| Error::Transport {
                        attempts: run.cfg.llm.retry.max_retries + 1,
                        message: s.entry.error.clone().unwrap_or_default(),
                    })
                },
                &fcfg,
            )?;
            decisions.push(d);
        }

        let rest: Vec<usize> = if run.cfg.llm.score_all {
            (0..preds.len()).filter(|i| !by_row.contains_key(i)).collect()
        } else {
            Vec::new()
        };
        let (rest_ids, rest_prompts) = pick(&rest);
        let rest_scored = score_prompts(run, &endpoint, h, &rest_ids, &rest_prompts, &template.name);
        by_row.extend(rest.iter().copied().zip(rest_scored));

        let ids: Vec<String> = preds.iter().map(|p| p.patient_id.clone()).collect();
        let ap = dir.join(format!("{h}.csv"));
        write_audit_csv(&ap, &ids, &decisions)?;
        outputs.push(ap);

        let mut entries: Vec<AuditEntry> = by_row.values().map(|s| s.entry.clone()).collect();
        let latency: Vec<(String, Option<u64>, Option<u32>)> =
            entries.iter().map(|e| (e.patient_id.clone(), e.latency_ms, e.retries)).collect();
        for e in &mut entries {
            e.latency_ms = None;
        }
        let lp = dir.join(format!("{h}_llm.jsonl"));
        write_audit_log(&lp, &entries)?;
        outputs.push(lp);

        let lat = dir.join(format!("{h}_latency.csv"));
        let mut w = csv::Writer::from_path(&lat)?;
        w.write_record(["patient_id", "latency_ms", "retries"])?;
        for (id, ms, r) in latency {
            w.write_record([id, ms.map_or(String::new(), |v| v.to_string()), r.map_or(String::new(), |v| v.to_string())])?;
        }
        w.flush().map_err(|e| Error::io(&lat, e))?;

        let failures = by_row.values().filter(|s| s.entry.provenance == Provenance::ParseFailureDefault).count();
        if run.cfg.llm.score_all {
            let op = dir.join(format!("{h}_llm_only.csv"));
            let mut w = csv::Writer::from_path(&op)?;
            w.write_record(["patient_id", "label", "p_llm", "provenance"])?;
            for (i, p) in preds.iter().enumerate() {
                let e = &by_row[&i].entry;
                w.write_record([
                    p.patient_id.clone(),
                    u8::from(p.label).to_string(),
                    format!("{:.6}", e.p_llm),
                    e.provenance.as_str().to_string(),
                ])?;
            }
            w.flush().map_err(|e| Error::io(&op, e))?;
            outputs.push(op);
        }

        let summary = FuseSummary {
            horizon: h,
            patients: preds.len(),
            in_band: band.len(),
            fusion_calls: band.len(),
            baseline_calls: rest.len(),
            failures,
        };
        let sp = dir.join(format!("{h}_summary.json"));
        write_json(&sp, &summary)?;
        outputs.push(sp);
        summaries.push(summary);
    }
    run.record("fuse", &outputs)?;
    Ok(summaries)
}

pub const SYSTEMS: [&str; 3] = ["ML Only", "LLM Only", "ML+LLM"];
pub const METRICS: [&str; 3] = ["accuracy", "sensitivity", "specificity"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportCell {
    pub horizon: Horizon,
    pub metric: &'static str,
    pub system: &'static str,
    pub value: Option<f64>,
}

fn read_column(path: &Path, id_col: &str, col: &str) -> Result<BTreeMap<String, f64>> {
    let mut rd = csv::Reader::from_path(path)?;
    let head = rd.headers()?.clone();
    let find = |name: &str| {
        head.iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Parse(format!("{}: no `{name}` column", path.display())))
    };
    let (i, j) = (find(id_col)?, find(col)?);
    let mut out = BTreeMap::new();
    for rec in rd.records() {
        let rec = rec?;
        let v: f64 = rec[j]
            .parse()
            .map_err(|_| Error::Parse(format!("{}: bad value `{}`", path.display(), &rec[j])))?;
        out.insert(rec[i].to_string(), v);
    }
    Ok(out)
}

/// Metric table (horizons × metrics × systems) plus ROC point files.
/// Systems whose inputs are absent are reported as NA.
pub fn cmd_report(run: &Run) -> Result<Vec<ReportCell>> {
    let dir = run.ensure_dir("report")?;
    let t = run.cfg.fusion.decision_threshold;
    let mut cells = Vec::new();
    let mut outputs = Vec::new();
    let mut auc_rows = Vec::new();
    for &h in &run.cfg.horizons {
        let pp = run.path(&format!("predictions/{h}.csv"));
        let preds = if pp.exists() {
            read_predictions(&pp)?
        } else {
            let (sel, rep) = load_selected(run, h)?;
            log::info!("{h}: {} absent; using cross-validated probabilities", pp.display());
            rep.row_ids
                .iter()
                .zip(&rep.labels)
                .zip(&rep.oof_probabilities)
                .map(|((id, &label), &p)| PredictionRow { patient_id: id.clone(), label, p_ml: p, model: sel.kind })
                .collect()
        };
        let ids: Vec<&String> = preds.iter().map(|p| &p.patient_id).collect();
        let labels: Vec<bool> = preds.iter().map(|p| p.label).collect();
        let lookup = |m: &BTreeMap<String, f64>| -> Option<Vec<f64>> { ids.iter().map(|id| m.get(*id).copied()).collect() };

        let llm_path = run.path(&format!("fusion/{h}_llm_only.csv"));
        let fused_path = run.path(&format!("fusion/{h}.csv"));
        let llm = if llm_path.exists() { lookup(&read_column(&llm_path, "patient_id", "p_llm")?) } else { None };
        let fused = if fused_path.exists() { lookup(&read_column(&fused_path, "id", "p_final")?) } else { None };
        if llm.is_none() || fused.is_none() {
            log::warn!("{h}: fusion outputs missing or incomplete; run `fuse` for the LLM columns");
        }
        let systems = [Some(preds.iter().map(|p| p.p_ml).collect::<Vec<_>>()), llm, fused];

        for (s, scores) in SYSTEMS.iter().zip(&systems) {
            let ssa = match scores {
                Some(sc) => Some(sens_spec_acc(&confusion(&labels, &threshold_predictions(sc, t))?)),
                None => None,
            };
            for m in METRICS {
                let value = ssa.and_then(|x| match m {
                    "accuracy" => x.accuracy,
                    "sensitivity" => x.sensitivity,
                    _ => x.specificity,
                });
                cells.push(ReportCell { horizon: h, metric: m, system: s, value });
            }
            if let Some(sc) = scores {
                let slug = s.to_lowercase().replace([' ', '+'], "_");
                match roc_auc(&labels, sc) {
                    Ok(roc) => {
                        let rp = dir.join(format!("roc_{h}_{slug}.csv"));
                        let mut w = csv::Writer::from_path(&rp)?;
                        w.write_record(["threshold", "fpr", "tpr"])?;
                        for p in &roc.points {
                            let th = if p.threshold.is_finite() { format!("{:.6}", p.threshold) } else { "inf".into() };
                            w.write_record([th, format!("{:.6}", p.fpr), format!("{:.6}", p.tpr)])?;
                        }
                        w.flush().map_err(|e| Error::io(&rp, e))?;
                        outputs.push(rp);
                        auc_rows.push((h, *s, Some(roc.auc)));
                    }
                    Err(Error::UndefinedAuc(why)) => {
                        log::warn!("{h} {s}: AUC undefined ({why})");
                        auc_rows.push((h, *s, None));
                    }
                    Err(e) => return Err(e),
                }
            }
        }
    }

    let tp = dir.join("table.csv");
    let mut w = csv::Writer::from_path(&tp)?;
    w.write_record(["horizon", "metric", "ml_only", "llm_only", "ml_llm"])?;
    let mut md = String::from("| Horizon | Metric | ML Only | LLM Only | ML+LLM |\n|---|---|---|---|---|\n");
    for chunk in cells.chunks(SYSTEMS.len() * METRICS.len()) {
        for m in METRICS {
            let vals: Vec<String> = SYSTEMS
                .iter()
                .map(|s| fmt_opt(chunk.iter().find(|c| c.metric == m && c.system == *s).and_then(|c| c.value)))
                .collect();
            let h = chunk[0].horizon.to_string();
            w.write_record([h.clone(), m.to_string(), vals[0].clone(), vals[1].clone(), vals[2].clone()])?;
            md.push_str(&format!("| {h} | {m} | {} | {} | {} |\n", vals[0], vals[1], vals[2]));
        }
    }
    w.flush().map_err(|e| Error::io(&tp, e))?;
    let mdp = dir.join("table.md");
    write_file(&mdp, &md)?;
    let ap = dir.join("auc.csv");
    let mut w = csv::Writer::from_path(&ap)?;
    w.write_record(["horizon", "system", "auc"])?;
    for (h, s, a) in &auc_rows {
        w.write_record([h.to_string(), s.to_string(), fmt_opt(*a)])?;
    }
    w.flush().map_err(|e| Error::io(&ap, e))?;
    outputs.extend([tp, mdp, ap]);
    run.record("report", &outputs)?;
    Ok(cells)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(dir: &Path) -> RunConfig {
        let mut cfg = RunConfig {
            seed: Some(11),
            models: vec![ModelEntry::new(ModelKind::Logistic), ModelEntry::new(ModelKind::DecisionTree)],
            ..Default::default()
        };
        cfg.paths.output_dir = dir.to_path_buf();
        cfg.synth.n_patients = 60;
        cfg
    }

    #[test]
    fn config_round_trips_and_rejects_unknown_keys() {
        let cfg = RunConfig { seed: Some(3), ..Default::default() };
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert!(RunConfig::from_toml("seed = 1\nbogus = 2\n").is_err());
        assert!(RunConfig::from_toml("[fusion]\nalpah = 0.1\n").is_err());
    }

    #[test]
    fn seed_is_mandatory() {
        assert!(matches!(RunConfig::default().validate(), Err(Error::Config(_))));
    }

    #[test]
    fn overrides_win_over_file_values() {
        let mut cfg = RunConfig::from_toml("seed = 1\n[fusion]\nalpha = 0.1\n").unwrap();
        cfg.apply(&Overrides { seed: Some(9), alpha: Some(0.3), ..Default::default() });
        assert_eq!((cfg.seed, cfg.fusion.alpha), (Some(9), 0.3));
    }

    #[test]
    fn api_key_is_never_serialized() {
        let mut cfg = RunConfig { seed: Some(1), ..Default::default() };
        cfg.llm.api_key = Some("sk-secret".into());
        assert!(!cfg.to_toml().unwrap().contains("sk-secret"));
    }

    #[test]
    fn missing_upstream_names_the_file() {
        let tmp = tempfile::tempdir().unwrap();
        let run = Run::open(quick(tmp.path())).unwrap();
        match cmd_train(&run) {
            Err(Error::MissingArtifact { path, .. }) => assert!(path.ends_with(COHORT)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn synth_train_report_without_fusion() {
        let tmp = tempfile::tempdir().unwrap();
        let run = Run::open(quick(tmp.path())).unwrap();
        cmd_synth(&run).unwrap();
        cmd_train(&run).unwrap();
        let cells = cmd_report(&run).unwrap();
        assert_eq!(cells.len(), 2 * 3 * 3);
        assert!(cells.iter().filter(|c| c.system == "ML Only").all(|c| c.value.is_some()));
        assert!(cells.iter().filter(|c| c.system != "ML Only").all(|c| c.value.is_none()));
        let m = run.manifest().unwrap();
        assert!(m.artifacts.contains_key("report/table.csv"));
        assert!(!m.artifacts.contains_key(TIMESTAMPS));
    }
}
