//! Seeded synthetic cohorts with controllable label dependence.
//!
//! Labels are drawn first. Liver labs and GGT then follow the 48h label and
//! hematology the 72h label. The first-window pain score follows the 48h
//! label, and strong-opioid use follows that score. Pain observations are
//! rendered from templates the default extraction rules read back exactly.
//! Clinical notes carry one cue phrase per horizon that matches the label
//! with probability `note_signal_accuracy`.

use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::record::{
    ClinicalNote, Cohort, MedicationEntry, Pathology, PainObservation, PatientRecord, Sex, Smoking, Staging,
};
use crate::seed;
use crate::text_extract::RuleSet;

pub const POSITIVE_CUE: &str = "breakthrough pain episodes are escalating despite analgesia";
pub const NEGATIVE_CUE: &str = "pain well controlled on the current regimen";

/// Group moments per lab: (code, mean below 4, sd, mean at or above 4, sd).
pub const LAB_MOMENTS: [(&str, f64, f64, f64, f64); 7] = [
    ("AST", 23.07, 7.69, 33.76, 32.87),
    ("ALT", 20.79, 12.52, 32.77, 36.2),
    ("GGT", 53.78, 54.10, 87.65, 175.71),
    ("HCT", 39.5, 5.4, 37.18, 9.37),
    ("MCV", 93.08, 6.76, 91.08, 5.66),
    ("RBC", 4.53, 5.52, 19.38, 79.14),
    ("MCH", 32.27, 10.74, 29.98, 2.35),
];

/// Labs driven by the 48h label; the rest follow the 72h label.
const LABS_48: [&str; 3] = ["AST", "ALT", "GGT"];

pub const DEFAULT_PAIN_TEMPLATES: [&str; 3] = ["NRS {n}", "pain score {n}/10", "Patient rates pain {n}/10"];

/// Severity words the default rules map to fixed scores.
const LEXICON_WORDS: [(u8, &str); 4] = [
    (2, "mild pain reported at rest"),
    (5, "moderate pain on movement"),
    (7, "severe pain overnight"),
    (9, "excruciating pain, unable to sleep"),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub positive_rate_48: f64,
    pub positive_rate_72: f64,
    /// 0 gives identical lab distributions; 1 the reference group gap.
    pub effect_labs: f64,
    /// Dependence of strong-opioid use on the first-window pain score.
    pub effect_tiers: f64,
    /// Dependence of the first-window pain score on the 48h label, in [0, 1].
    pub effect_pain24: f64,
    /// Multiplier on lab standard deviations.
    pub noise: f64,
    pub note_signal_accuracy: f64,
    /// Pain-text templates with an `{n}` slot.
    pub pain_templates: Vec<String>,
    /// Also render scores 2/5/7/9 as severity words.
    pub lexicon_words: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_patients: 400,
            positive_rate_48: 0.55,
            positive_rate_72: 0.45,
            effect_labs: 1.0,
            effect_tiers: 1.0,
            effect_pain24: 0.6,
            noise: 1.0,
            note_signal_accuracy: 0.9,
            pain_templates: DEFAULT_PAIN_TEMPLATES.iter().map(|s| s.to_string()).collect(),
            lexicon_words: true,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn null_signal(mut self) -> Self {
        self.effect_labs = 0.0;
        self.effect_tiers = 0.0;
        self.effect_pain24 = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_patients < 10 {
            return Err(Error::Config(format!("n_patients {} < 10", self.n_patients)));
        }
        for (name, r) in [("positive_rate_48", self.positive_rate_48), ("positive_rate_72", self.positive_rate_72)] {
            if !(r > 0.0 && r < 1.0) {
                return Err(Error::Config(format!("{name} {r} outside (0, 1)")));
            }
        }
        for (name, e) in [("effect_labs", self.effect_labs), ("effect_tiers", self.effect_tiers)] {
            if !(e >= 0.0 && e.is_finite()) {
                return Err(Error::Config(format!("{name} {e} must be >= 0")));
            }
        }
        if !(0.0..=1.0).contains(&self.effect_pain24) || !(0.0..=1.0).contains(&self.note_signal_accuracy) {
            return Err(Error::Config("effect_pain24 and note_signal_accuracy must lie in [0, 1]".into()));
        }
        if !(self.noise > 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise {} must be > 0", self.noise)));
        }
        if self.pain_templates.is_empty() {
            return Err(Error::Config("at least one pain template is needed".into()));
        }
        let rules = RuleSet::default_rules();
        for t in &self.pain_templates {
            for n in 0..=10u8 {
                let text = t.replace("{n}", &n.to_string());
                if !t.contains("{n}") || rules.score_text(&text) != Some(n) {
                    return Err(Error::Config(format!(
                        "pain template `{t}` does not read back as {n} under the default rules"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Ground truth behind one generated record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentRow {
    pub patient_id: String,
    pub label_48: bool,
    pub label_72: bool,
    pub nrs_24: u8,
    pub nrs_48: u8,
    pub nrs_72: u8,
    pub strong_opioid_24h: bool,
    pub cue_48_truthful: bool,
    pub cue_72_truthful: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCohort {
    pub records: Vec<PatientRecord>,
    pub latent: Vec<LatentRow>,
    /// Score each pain observation was rendered from, in record order.
    pub intended: Vec<Vec<u8>>,
}

impl SynthCohort {
    pub fn cohort(&self, source: &Path) -> Result<Cohort> {
        Cohort::new(self.records.clone(), source)
    }

    pub fn write_latent_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.latent {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthCohort> {
    cfg.validate()?;
    let base = seed::derive(cfg.seed, "synth");
    let mut records = Vec::with_capacity(cfg.n_patients);
    let mut latent = Vec::with_capacity(cfg.n_patients);
    let mut intended = Vec::with_capacity(cfg.n_patients);
    for i in 0..cfg.n_patients {
        let mut rng = seed::rng(seed::derive_index(base, i as u64));
        let (r, l, scores) = patient(cfg, &format!("P{:05}", i + 1), &mut rng)?;
        records.push(r);
        latent.push(l);
        intended.push(scores);
    }
    Ok(SynthCohort { records, latent, intended })
}

fn normal(rng: &mut ChaCha8Rng, mean: f64, sd: f64) -> f64 {
    Normal::new(mean, sd.max(1e-9)).map_or(mean, |d| d.sample(rng))
}

fn score(rng: &mut ChaCha8Rng, high: bool) -> u8 {
    if high {
        rng.random_range(4..=9)
    } else {
        rng.random_range(0..=3)
    }
}

fn render_pain(cfg: &SynthConfig, rng: &mut ChaCha8Rng, t: f64, n: u8) -> PainObservation {
    let word = LEXICON_WORDS.iter().find(|w| w.0 == n).map(|w| w.1);
    match rng.random_range(0..4) {
        0 => PainObservation::nrs(t, n),
        1 if cfg.lexicon_words && word.is_some() => PainObservation::text(t, word.expect("checked")),
        _ => {
            let tpl = cfg.pain_templates.choose(rng).expect("validated nonempty");
            PainObservation::text(t, tpl.replace("{n}", &n.to_string()))
        }
    }
}

/// (generic or brand text, tier, median mg)
const DRUGS: [(&str, u8, f64); 10] = [
    ("Morphine", 3, 10.0),
    ("MS Contin", 3, 30.0),
    ("oxycodone", 3, 10.0),
    ("Fentanyl patch", 3, 0.025),
    ("Tramadol", 2, 50.0),
    ("codeine phosphate", 2, 30.0),
    ("Ibuprofen", 1, 400.0),
    ("paracetamol", 1, 1000.0),
    ("Tylenol", 1, 650.0),
    ("Advil", 1, 200.0),
];

fn add_drug(rng: &mut ChaCha8Rng, log: &mut Vec<MedicationEntry>, tier: u8, lo: f64, hi: f64) {
    let options: Vec<&(&str, u8, f64)> = DRUGS.iter().filter(|d| d.1 == tier).collect();
    let &&(name, _, median) = options.choose(rng).expect("every tier has drugs");
    let doses = rng.random_range(1..=3);
    for _ in 0..doses {
        let t = (rng.random_range(lo..hi) * 2.0).round() / 2.0;
        let mg = LogNormal::new(median.ln(), 0.35).map_or(median, |d| d.sample(rng));
        let mg = (mg * 100.0).round() / 100.0;
        let dose = if rng.random_bool(0.08) { None } else { Some(mg.max(0.01)) };
        let mut e = MedicationEntry::new(t, name, dose);
        e.route = Some(if name.contains("patch") { "transdermal" } else { "oral" }.into());
        log.push(e);
    }
}

fn patient(cfg: &SynthConfig, id: &str, rng: &mut ChaCha8Rng) -> Result<(PatientRecord, LatentRow, Vec<u8>)> {
    let label_48 = rng.random_bool(cfg.positive_rate_48);
    let label_72 = rng.random_bool(cfg.positive_rate_72);
    let mut r = PatientRecord::new(id);

    r.age = Some(normal(rng, 58.0, 10.0).clamp(25.0, 90.0).round() as u32);
    r.sex = Some(if rng.random_bool(0.6) { Sex::Female } else { Sex::Male });
    r.smoking = Some(match rng.random_range(0..20) {
        0 => Smoking::Unknown,
        1..=6 => Smoking::Yes,
        _ => Smoking::No,
    });
    r.pathology = Some(
        *[
            Pathology::Adenocarcinoma,
            Pathology::Adenocarcinoma,
            Pathology::Adenocarcinoma,
            Pathology::Squamous,
            Pathology::Squamous,
            Pathology::Neuroendocrine,
            Pathology::SoftTissueSarcoma,
            Pathology::Other,
        ]
        .choose(rng)
        .expect("nonempty"),
    );
    r.tnm_stage = Some(if rng.random_bool(0.05) { Staging::Unknown } else { Staging::Known(rng.random_range(1..=4)) });
    r.n_class = Some(if rng.random_bool(0.05) { Staging::Unknown } else { Staging::Known(rng.random_range(0..=3)) });

    for (code, m0, s0, m1, s1) in LAB_MOMENTS {
        if rng.random_bool(0.02) {
            continue;
        }
        let y = if LABS_48.contains(&code) { label_48 } else { label_72 };
        let e = cfg.effect_labs;
        let (mean, sd) = if y {
            (m0 + e * (m1 - m0), s0 + e.min(1.0) * (s1 - s0))
        } else {
            (m0, s0)
        };
        let v = normal(rng, mean, sd * cfg.noise).max(0.1);
        r.labs.insert(code.to_string(), (v * 100.0).round() / 100.0);
    }

    // first-window pain follows the 48h label; later windows define the labels
    let p_high24 = 0.5 + 0.45 * cfg.effect_pain24 * if label_48 { 1.0 } else { -1.0 };
    let high24 = rng.random_bool(p_high24);
    let nrs_24 = score(rng, high24);
    let nrs_48 = score(rng, label_48);
    let nrs_72 = score(rng, label_72);
    let mut obs = Vec::new();
    for (lo, hi, n) in [(0.0f64, 24.0f64, nrs_24), (24.5, 48.0, nrs_48), (48.5, 72.0, nrs_72)] {
        let t = (rng.random_range(lo..hi) * 2.0).round() / 2.0;
        obs.push((render_pain(cfg, rng, t.clamp(lo, hi), n), n));
        if n > 0 && rng.random_bool(0.3) {
            let t2 = (rng.random_range(lo..hi) * 2.0).round() / 2.0;
            let lower = rng.random_range(0..n);
            obs.push((render_pain(cfg, rng, t2.clamp(lo, hi), lower), lower));
        }
    }
    obs.sort_by(|a, b| a.0.time_h.total_cmp(&b.0.time_h));
    let (observations, scores): (Vec<_>, Vec<_>) = obs.into_iter().unzip();
    r.pain_observations = observations;

    let et = cfg.effect_tiers.min(1.0);
    let p_strong = (0.25 + et * if nrs_24 >= 4 { 0.5 } else { -0.2 }).clamp(0.02, 0.98);
    let strong_opioid_24h = rng.random_bool(p_strong);
    let p_strong_48 = (0.25 + et * if nrs_48 >= 4 { 0.5 } else { -0.2 }).clamp(0.02, 0.98);
    if strong_opioid_24h {
        add_drug(rng, &mut r.medication_log, 3, 0.0, 24.0);
    }
    if rng.random_bool(0.3) {
        add_drug(rng, &mut r.medication_log, 2, 0.0, 24.0);
    }
    if rng.random_bool(0.6) {
        add_drug(rng, &mut r.medication_log, 1, 0.0, 24.0);
    }
    if rng.random_bool(p_strong_48) {
        add_drug(rng, &mut r.medication_log, 3, 24.5, 48.0);
    }
    if rng.random_bool(0.4) {
        add_drug(rng, &mut r.medication_log, 1, 24.5, 48.0);
    }
    r.medication_log.sort_by(|a, b| a.time_h.total_cmp(&b.time_h));

    r.chief_complaint = Some(
        (*[
            "chest wall pain",
            "persistent cough and dyspnea",
            "low back pain radiating to the hip",
            "fatigue and poor appetite",
            "bone pain in the ribs",
            "abdominal discomfort",
        ]
        .choose(rng)
        .expect("nonempty"))
        .to_string(),
    );

    let cue_48_truthful = rng.random_bool(cfg.note_signal_accuracy);
    let cue_72_truthful = rng.random_bool(cfg.note_signal_accuracy);
    let cue = |label: bool, truthful: bool| if label == truthful { POSITIVE_CUE } else { NEGATIVE_CUE };
    let fillers = [
        "Vitals stable, afebrile.",
        "Ambulating with assistance; appetite fair.",
        "Family at bedside, questions answered.",
        "Tolerating diet; bowel function normal.",
    ];
    r.clinical_notes.push(ClinicalNote {
        time_h: rng.random_range(1..=6) as f64,
        text: format!("Admission note. {}", fillers.choose(rng).expect("nonempty")),
    });
    r.clinical_notes.push(ClinicalNote {
        time_h: rng.random_range(8..=20) as f64,
        text: format!("Nursing review: {}.", cue(label_48, cue_48_truthful)),
    });
    r.clinical_notes.push(ClinicalNote {
        time_h: rng.random_range(30..=44) as f64,
        text: format!("Day 2 review: {}. {}", cue(label_72, cue_72_truthful), fillers.choose(rng).expect("nonempty")),
    });

    let latent = LatentRow {
        patient_id: id.to_string(),
        label_48,
        label_72,
        nrs_24,
        nrs_48,
        nrs_72,
        strong_opioid_24h,
        cue_48_truthful,
        cue_72_truthful,
    };
    Ok((r, latent, scores))
}
